#pragma once

// Evaluation helpers: paired RMSD between predicted and experimental
// structures, sequence recovery, perplexity, and the corpus bias report.

#include "desae/backbone_io.hpp"
#include "desae/model.hpp"
#include "desae/stats.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace desae::eval {

/// Residue alphabet of the log-probability columns, in column order.
inline constexpr std::string_view kAlphabet = "ACDEFGHIKLMNPQRSTVWY";

struct RmsdOptions {
  bool full_backbone = false;  // all observed backbone atoms instead of CA only
  int threads = 1;
};

/// Kabsch RMSD between two equal-length structures over CA atoms (or every
/// atom observed in both). Error(LengthMismatch), Error(TooFewPoints).
double structure_rmsd(const BackboneStructure& a, const BackboneStructure& b, bool full_backbone = false);

struct RmsdRow {
  std::string pair_id;
  int residues = 0;
  double rmsd = 0.0;
};

struct RmsdReport {
  std::vector<RmsdRow> rows;  // sorted by pair_id
  stats::Histogram histogram; // over [0, 10] Angstrom, 100 bins
  stats::SummaryStats summary;
};

inline const stats::BinSpec kRmsdBins{0.0, 10.0, 100};

/// RMSD of each predicted structure (optionally passed through `debias`
/// first) against its experimental partner.
RmsdReport paired_rmsd(const std::vector<io::StructurePair>& pairs, const std::vector<std::string>& ids,
                       const nn::ModelParams* debias = nullptr, const RmsdOptions& options = {});
RmsdReport paired_rmsd(const io::PairManifest& manifest, const nn::ModelParams* debias = nullptr,
                       const RmsdOptions& options = {});

void write_rmsd_csv(const RmsdReport& report, const std::filesystem::path& path);

/// Fraction of positions where pred matches truth; positions where truth is
/// 'X' are skipped. Error(LengthMismatch), Error(EmptySampleSet) when nothing
/// is left to score.
double recovery_rate(std::string_view pred, std::string_view truth);

/// exp(-mean log p(truth_i)) over an L x 20 matrix of natural-log
/// probabilities (columns in kAlphabet order). Rows whose log-sum-exp is not
/// within 1e-6 of 0 raise Error(InvalidDistribution); 'X' positions are
/// skipped; Error(LengthMismatch) when L differs from the sequence length.
double perplexity(const Eigen::Ref<const Eigen::MatrixXd>& log_probs, std::string_view truth);

/// Writes the comparison of corpus a against corpus b into out_dir (created
/// when missing):
///   divergence.csv    one row per feature: KL, Wasserstein, Euclidean, cosine,
///                     mean/variance/n of each corpus
///   divergence.json   {records: [{feature, metric, value}], warnings}
///   histograms.csv    feature,bin_lower,bin_upper,density_a,density_b
///   rama_a.csv, rama_b.csv   360 x 360 (phi row, psi column) counts
///   rama_overlay.csv  density_a - density_b on the same grid
///   paired_rmsd.csv   pair_id,residues,rmsd (only when `pairs` is given)
/// Returns the list of files written.
std::vector<std::filesystem::path> bias_report(const std::vector<BackboneStructure>& corpus_a,
                                               const std::vector<BackboneStructure>& corpus_b,
                                               const std::filesystem::path& out_dir,
                                               const RmsdReport* pairs = nullptr);

}  // namespace desae::eval
