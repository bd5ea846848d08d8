#pragma once

#include <Eigen/Core>

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace desae {

/// Backbone atom slots, in storage order.
enum class Atom : int { N = 0, CA = 1, C = 2, O = 3 };

inline constexpr int kAtomsPerResidue = 4;
inline constexpr std::array<const char*, kAtomsPerResidue> kAtomNames = {
    "N", "CA", "C", "O"};

/// (4L) x 3 row-major coordinate block; row 4*i + a holds atom a of residue i.
using CoordMatrix = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using AtomMask = std::vector<std::array<bool, kAtomsPerResidue>>;

struct BackboneStructure {
  std::string id;
  std::string sequence;  // one-letter codes, 'X' for unknown
  CoordMatrix coords;
  AtomMask atom_mask;
  std::optional<std::vector<double>> plddt;
  char chain_id = 'A';

  int length() const { return static_cast<int>(sequence.size()); }

  auto atom(int residue, Atom a) { return coords.row(4 * residue + static_cast<int>(a)); }
  auto atom(int residue, Atom a) const {
    return coords.row(4 * residue + static_cast<int>(a));
  }
  bool has(int residue, Atom a) const {
    return atom_mask[residue][static_cast<int>(a)];
  }
  bool complete(int residue) const {
    const auto& m = atom_mask[residue];
    return m[0] && m[1] && m[2] && m[3];
  }

  /// Allocates an L-residue structure with every atom observed at the origin.
  static BackboneStructure with_length(int length, std::string id = {});
};

/// Throws Error(ShapeMismatch / NonFiniteValue) if the structure's invariants fail.
void validate(const BackboneStructure& s);

char one_letter_code(std::string_view residue_name) noexcept;
std::string three_letter_code(char code);

/// Coordinates of residue i's Cα for every residue, L x 3.
Eigen::MatrixX3d ca_coords(const BackboneStructure& s);

}  // namespace desae
