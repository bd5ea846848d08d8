#include "desae/backbone_io.hpp"

#include "desae/error.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace desae::io {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

// 1-based inclusive PDB column range.
std::string_view columns(std::string_view line, size_t first, size_t last) {
  if (line.size() < first) return {};
  return line.substr(first - 1, std::min(last, line.size()) - first + 1);
}

[[noreturn]] void malformed(const std::string& id, int line_no, const std::string& why) {
  throw Error(ErrorCode::MalformedRecord,
              id + ":" + std::to_string(line_no) + ": malformed ATOM record (" + why + ")");
}

double parse_real(std::string_view field, const std::string& id, int line_no,
                  const char* name) {
  field = trim(field);
  double value = 0.0;
  const auto* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (field.empty() || ec != std::errc() || ptr != end || !std::isfinite(value)) {
    malformed(id, line_no, std::string("non-numeric ") + name + " '" + std::string(field) + "'");
  }
  return value;
}

int atom_slot(std::string_view name) {
  for (int a = 0; a < kAtomsPerResidue; ++a) {
    if (name == kAtomNames[a]) return a;
  }
  return -1;
}

struct PendingResidue {
  std::string key;
  char code = 'X';
  std::array<bool, 4> seen{};
  std::array<Eigen::RowVector3d, 4> xyz;
  double bfactor = 0.0;
  bool has_bfactor = false;
};

}  // namespace

BackboneStructure parse_structure_text(const std::string& text, std::string id,
                                       const ParseOptions& options) {
  std::istringstream in(text);
  std::vector<PendingResidue> residues;
  std::optional<char> chain = options.chain;
  bool in_first_model = true;
  bool saw_model = false;
  std::string line;
  int line_no = 0;

  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string_view record = columns(line, 1, 6);
    if (record.rfind("MODEL", 0) == 0) {
      if (saw_model) in_first_model = false;
      saw_model = true;
      continue;
    }
    if (record.rfind("ENDMDL", 0) == 0) {
      in_first_model = false;
      continue;
    }
    if (!in_first_model || record != "ATOM  ") continue;
    if (line.size() < 54) malformed(id, line_no, "line shorter than coordinate columns");

    const double x = parse_real(columns(line, 31, 38), id, line_no, "x");
    const double y = parse_real(columns(line, 39, 46), id, line_no, "y");
    const double z = parse_real(columns(line, 47, 54), id, line_no, "z");

    const char chain_id = line[21];
    if (!chain) chain = chain_id;
    if (chain_id != *chain) continue;

    const int slot = atom_slot(trim(columns(line, 13, 16)));
    if (slot < 0) continue;

    const std::string key(columns(line, 23, 27));
    if (trim(columns(line, 23, 26)).empty()) malformed(id, line_no, "missing residue number");
    if (residues.empty() || residues.back().key != key) {
      PendingResidue r;
      r.key = key;
      r.code = one_letter_code(trim(columns(line, 18, 20)));
      residues.push_back(r);
    }
    PendingResidue& r = residues.back();
    if (r.seen[slot]) continue;  // later altLoc of an atom already read
    r.seen[slot] = true;
    r.xyz[slot] = Eigen::RowVector3d(x, y, z);
    if (options.predicted && slot == static_cast<int>(Atom::CA)) {
      if (line.size() < 66) malformed(id, line_no, "missing B-factor column");
      r.bfactor = parse_real(columns(line, 61, 66), id, line_no, "B-factor");
      r.has_bfactor = true;
    }
  }

  std::erase_if(residues, [](const PendingResidue& r) { return !r.seen[1]; });
  if (residues.empty()) {
    throw Error(ErrorCode::EmptyChain, id + ": no backbone atoms found");
  }

  BackboneStructure s = BackboneStructure::with_length(static_cast<int>(residues.size()), id);
  s.chain_id = chain.value_or('A');
  if (options.predicted) s.plddt.emplace(residues.size(), 0.0);
  for (size_t i = 0; i < residues.size(); ++i) {
    const PendingResidue& r = residues[i];
    s.sequence[i] = r.code;
    for (int a = 0; a < kAtomsPerResidue; ++a) {
      s.atom_mask[i][a] = r.seen[a];
      if (r.seen[a]) s.coords.row(4 * static_cast<int>(i) + a) = r.xyz[a];
    }
    if (options.predicted) (*s.plddt)[i] = r.bfactor;
  }
  return s;
}

BackboneStructure parse_structure(const std::filesystem::path& path,
                                  const ParseOptions& options) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_structure_text(buffer.str(), path.stem().string(), options);
}

std::string format_structure(const BackboneStructure& s) {
  std::string out;
  char buf[96];
  int serial = 1;
  for (int i = 0; i < s.length(); ++i) {
    const std::string res = three_letter_code(s.sequence[i]);
    const double bfactor = s.plddt ? (*s.plddt)[i] : 0.0;
    for (int a = 0; a < kAtomsPerResidue; ++a) {
      if (!s.atom_mask[i][a]) continue;
      const auto xyz = s.coords.row(4 * i + a);
      const char element = kAtomNames[a][0];
      std::snprintf(buf, sizeof(buf),
                    "ATOM  %5d  %-3s %3s %c%4d    %8.3f%8.3f%8.3f%6.2f%6.2f           %c  \n",
                    serial++ % 100000, kAtomNames[a], res.c_str(), s.chain_id, (i + 1) % 10000,
                    xyz(0), xyz(1), xyz(2), 1.0, bfactor, element);
      out += buf;
    }
  }
  out += "TER\nEND\n";
  return out;
}

void write_structure(const BackboneStructure& s, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out << format_structure(s);
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::string_view split_name(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

std::vector<PairRow> PairManifest::rows_in(Split split) const {
  std::vector<PairRow> out;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(out),
               [split](const PairRow& r) { return r.split == split; });
  return out;
}

PairManifest load_pair_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open manifest " + path.string());
  const auto base = path.parent_path();

  auto split_fields = [](const std::string& line) {
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.emplace_back(trim(field));
    return fields;
  };

  PairManifest manifest;
  std::set<std::string> seen;
  std::string line;
  int line_no = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto fields = split_fields(line);
    if (header) {
      header = false;
      if (fields != std::vector<std::string>{"pair_id", "predicted_path", "experimental_path",
                                             "split"}) {
        throw Error(ErrorCode::MalformedRecord,
                    path.string() + ": expected header pair_id,predicted_path,experimental_path,split");
      }
      continue;
    }
    if (fields.size() != 4) {
      throw Error(ErrorCode::MalformedRecord,
                  path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    PairRow row;
    row.pair_id = fields[0];
    if (!seen.insert(row.pair_id).second) {
      throw Error(ErrorCode::DuplicatePairId, "duplicate pair_id '" + row.pair_id + "'");
    }
    auto resolve = [&](const std::string& p) {
      std::filesystem::path fp(p);
      return fp.is_absolute() ? fp : base / fp;
    };
    row.predicted_path = resolve(fields[1]);
    row.experimental_path = resolve(fields[2]);
    std::string split = fields[3];
    std::transform(split.begin(), split.end(), split.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (split == "train") row.split = Split::Train;
    else if (split == "val") row.split = Split::Val;
    else if (split == "test") row.split = Split::Test;
    else throw Error(ErrorCode::UnknownSplit, "unknown split '" + fields[3] + "'");
    manifest.rows.push_back(std::move(row));
  }
  return manifest;
}

StructurePair load_pair(const PairRow& row) {
  StructurePair pair{parse_structure(row.predicted_path, {.chain = std::nullopt, .predicted = true}),
                     parse_structure(row.experimental_path)};
  pair.predicted.id = row.pair_id;
  pair.experimental.id = row.pair_id;
  if (pair.predicted.length() != pair.experimental.length()) {
    throw Error(ErrorCode::LengthMismatch,
                "pair '" + row.pair_id + "': lengths " + std::to_string(pair.predicted.length()) +
                    " vs " + std::to_string(pair.experimental.length()));
  }
  return pair;
}

FilterDecision filter_pair(const BackboneStructure& predicted,
                           const BackboneStructure& experimental, double min_plddt) {
  if (!predicted.plddt || predicted.plddt->empty()) {
    throw Error(ErrorCode::MissingPlddt, "structure '" + predicted.id + "' has no pLDDT values");
  }
  const auto& p = *predicted.plddt;
  const double mean = std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
  if (!(mean > min_plddt)) return {false, "LowPlddt"};
  if (predicted.length() != experimental.length()) return {false, "LengthMismatch"};
  return {true, {}};
}

std::vector<std::filesystem::path> list_structure_files(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw Error(ErrorCode::IoFailure, "not a directory: " + dir.string());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension();
    if (ext == ".pdb" || ext == ".ent") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace desae::io
