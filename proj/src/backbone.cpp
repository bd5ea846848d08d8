#include "desae/backbone.hpp"

#include "desae/error.hpp"

#include <algorithm>
#include <cmath>
#include <string_view>
#include <utility>

namespace desae {

namespace {

constexpr std::array<std::pair<std::string_view, char>, 20> kResidueCodes = {{
    {"ALA", 'A'}, {"ARG", 'R'}, {"ASN", 'N'}, {"ASP", 'D'}, {"CYS", 'C'},
    {"GLN", 'Q'}, {"GLU", 'E'}, {"GLY", 'G'}, {"HIS", 'H'}, {"ILE", 'I'},
    {"LEU", 'L'}, {"LYS", 'K'}, {"MET", 'M'}, {"PHE", 'F'}, {"PRO", 'P'},
    {"SER", 'S'}, {"THR", 'T'}, {"TRP", 'W'}, {"TYR", 'Y'}, {"VAL", 'V'},
}};

}  // namespace

BackboneStructure BackboneStructure::with_length(int length, std::string id) {
  BackboneStructure s;
  s.id = std::move(id);
  s.sequence.assign(static_cast<size_t>(length), 'X');
  s.coords = CoordMatrix::Zero(4 * length, 3);
  s.atom_mask.assign(static_cast<size_t>(length), {true, true, true, true});
  return s;
}

void validate(const BackboneStructure& s) {
  const int L = s.length();
  if (s.coords.rows() != 4 * L || static_cast<int>(s.atom_mask.size()) != L) {
    throw Error(ErrorCode::ShapeMismatch,
                "structure '" + s.id + "': sequence length does not match coordinates");
  }
  if (s.plddt && static_cast<int>(s.plddt->size()) != L) {
    throw Error(ErrorCode::ShapeMismatch, "structure '" + s.id + "': plddt length mismatch");
  }
  for (int i = 0; i < L; ++i) {
    for (int a = 0; a < kAtomsPerResidue; ++a) {
      if (s.atom_mask[i][a] && !s.coords.row(4 * i + a).allFinite()) {
        throw Error(ErrorCode::NonFiniteValue,
                    "structure '" + s.id + "': non-finite coordinate at residue " +
                        std::to_string(i));
      }
    }
  }
}

char one_letter_code(std::string_view residue_name) noexcept {
  for (const auto& [three, one] : kResidueCodes) {
    if (three == residue_name) return one;
  }
  return 'X';
}

std::string three_letter_code(char code) {
  for (const auto& [three, one] : kResidueCodes) {
    if (one == code) return std::string(three);
  }
  return "UNK";
}

Eigen::MatrixX3d ca_coords(const BackboneStructure& s) {
  Eigen::MatrixX3d out(s.length(), 3);
  for (int i = 0; i < s.length(); ++i) out.row(i) = s.atom(i, Atom::CA);
  return out;
}

}  // namespace desae
