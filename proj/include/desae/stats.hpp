#pragma once

#include "desae/geometry.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace desae::stats {

/// Uniform bins over [lower, upper]; the upper edge belongs to the last bin.
struct BinSpec {
  double lower = 0.0;
  double upper = 1.0;
  int bins = 1;

  std::vector<double> edges() const;
  friend bool operator==(const BinSpec&, const BinSpec&) = default;
};

/// Torsion and bond-angle binning: 360 bins over (-pi, pi].
BinSpec angle_bins();
/// Bond-length binning: 250 bins over [1.1, 1.6] Angstrom.
BinSpec bond_length_bins();
BinSpec default_bins(geom::Feature feature);

struct Histogram {
  std::vector<double> bin_edges;  // strictly increasing, bins + 1 entries
  Eigen::ArrayXd counts;
  Eigen::ArrayXd density;         // counts / count, sums to 1
  long count = 0;                 // in-range samples
  long out_of_range = 0;

  int bins() const { return static_cast<int>(counts.size()); }
};

/// Bins finite in-range samples; others are tallied in out_of_range.
/// Throws Error(EmptySampleSet) if nothing lands in range.
Histogram build_histogram(std::span<const double> samples, const BinSpec& spec);
Histogram build_histogram(std::span<const double> samples, std::vector<double> edges);

struct SummaryStats {
  double mean = 0.0;
  double variance = 0.0;  // population (divide by n)
  long n = 0;
};

SummaryStats summarize(std::span<const double> samples);

inline constexpr double kKlSmoothing = 1e-10;

/// KL(p || q) in nats over densities, after adding kKlSmoothing to every bin
/// of both and renormalizing.
double kl_divergence(const Histogram& p, const Histogram& q);
/// 1-D earth mover's distance via the CDF difference on bin centres.
double wasserstein_1d(const Histogram& p, const Histogram& q);
/// Distances on raw bin counts.
double euclidean_distance(const Histogram& p, const Histogram& q);
double cosine_similarity(const Histogram& p, const Histogram& q);

/// Joint (phi, psi) counts; row = phi bin, column = psi bin, both over (-pi, pi].
struct RamachandranGrid {
  static constexpr int kBins = 360;
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> counts =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Zero(kBins, kBins);

  void add(double phi, double psi);
  double total() const { return counts.sum(); }
};

RamachandranGrid ramachandran(std::span<const geom::FeatureTable> corpus);

struct FeatureComparison {
  geom::Feature feature = geom::Feature::Phi;
  Histogram hist_a, hist_b;
  SummaryStats stats_a, stats_b;
  double kl = 0.0;
  double wasserstein = 0.0;
  double euclidean = 0.0;
  double cosine = 1.0;
};

struct CorpusReport {
  std::vector<FeatureComparison> features;
  std::vector<std::string> warnings;  // e.g. features skipped for lack of samples
  RamachandranGrid rama_a, rama_b;
};

/// Compares every backbone feature between two corpora of feature tables.
/// Features with no valid samples in either corpus are skipped with a warning.
CorpusReport corpus_compare(std::span<const geom::FeatureTable> a,
                            std::span<const geom::FeatureTable> b);

/// feature,metric,value rows plus per-corpus mean/variance/n.
void write_report_csv(const CorpusReport& report, const std::filesystem::path& path);
/// JSON array, one record per (feature, metric) pair.
void write_report_json(const CorpusReport& report, const std::filesystem::path& path);
/// Per-bin densities for both corpora: feature,bin_lower,bin_upper,density_a,density_b.
void write_histograms_csv(const CorpusReport& report, const std::filesystem::path& path);
/// One row per residue: index,residue, then every feature (empty when masked).
void write_feature_table(const BackboneStructure& s, const geom::FeatureTable& table,
                         const std::filesystem::path& path);
/// 360 whitespace-separated rows of 360 values, row-major (row = phi bin).
void write_grid(const Eigen::Ref<const Eigen::MatrixXd>& grid, const std::filesystem::path& path);

}  // namespace desae::stats
