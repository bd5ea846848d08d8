#pragma once

#include "desae/backbone.hpp"
#include "desae/error.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace desae::io {

struct ParseOptions {
  /// Chain to read; the first chain encountered when unset.
  std::optional<char> chain;
  /// Predicted models carry per-residue pLDDT in the B-factor column.
  bool predicted = false;
};

/// Reads the backbone (N, CA, C, O) of one chain from a fixed-column PDB file.
///
/// Only the first model is read and the first alternate location of each atom
/// wins. Residues without a CA atom are dropped; other missing atoms are
/// recorded in the atom mask. Throws Error(MalformedRecord) naming the line of
/// an ATOM record that violates the column grammar, Error(EmptyChain) when no
/// backbone atom is found, Error(IoFailure) when the file cannot be read.
BackboneStructure parse_structure(const std::filesystem::path& path,
                                  const ParseOptions& options = {});

/// Same grammar as parse_structure, reading from an in-memory PDB text.
BackboneStructure parse_structure_text(const std::string& text, std::string id,
                                       const ParseOptions& options = {});

/// Writes observed atoms as ATOM records (occupancy 1.00, B-factor = pLDDT or 0.00).
void write_structure(const BackboneStructure& s, const std::filesystem::path& path);
std::string format_structure(const BackboneStructure& s);

enum class Split { Train, Val, Test };
std::string_view split_name(Split split) noexcept;

struct PairRow {
  std::string pair_id;
  std::filesystem::path predicted_path;
  std::filesystem::path experimental_path;
  Split split = Split::Train;
};

struct PairManifest {
  std::vector<PairRow> rows;

  std::vector<PairRow> rows_in(Split split) const;
};

/// Comma-delimited manifest with header `pair_id,predicted_path,experimental_path,split`.
/// Relative paths are resolved against the manifest's directory. Structures
/// are not opened here; see load_pair.
PairManifest load_pair_manifest(const std::filesystem::path& path);

struct StructurePair {
  BackboneStructure predicted;
  BackboneStructure experimental;
};

/// Parses both members of a manifest row; Error(LengthMismatch) when the
/// residue counts differ.
StructurePair load_pair(const PairRow& row);

struct FilterDecision {
  bool accepted = false;
  std::string reason;  // empty when accepted; "LowPlddt" or "LengthMismatch"
};

inline constexpr double kDefaultMinPlddt = 70.0;

/// Curation filter: accept iff mean pLDDT of the prediction is strictly above
/// min_plddt and both structures have the same length.
FilterDecision filter_pair(const BackboneStructure& predicted,
                           const BackboneStructure& experimental,
                           double min_plddt = kDefaultMinPlddt);

/// Every *.pdb / *.ent file in a directory, sorted by file name.
std::vector<std::filesystem::path> list_structure_files(const std::filesystem::path& dir);

}  // namespace desae::io
