#include "desae/stats.hpp"

#include "desae/error.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace desae::stats {

std::vector<double> BinSpec::edges() const {
  std::vector<double> out(static_cast<size_t>(bins) + 1);
  const double width = (upper - lower) / bins;
  for (int b = 0; b <= bins; ++b) out[b] = lower + width * b;
  out.back() = upper;
  return out;
}

BinSpec angle_bins() { return {-std::numbers::pi, std::numbers::pi, 360}; }
BinSpec bond_length_bins() { return {1.1, 1.6, 250}; }
BinSpec default_bins(geom::Feature feature) {
  return geom::is_angle_feature(feature) ? angle_bins() : bond_length_bins();
}

namespace {

Histogram finish(Histogram h) {
  if (h.count == 0) {
    throw Error(ErrorCode::EmptySampleSet, "histogram has no in-range samples");
  }
  h.density = h.counts / static_cast<double>(h.count);
  return h;
}

void require_same_bins(const Histogram& p, const Histogram& q) {
  if (p.bin_edges != q.bin_edges) {
    throw Error(ErrorCode::BinMismatch, "histograms have different bin edges");
  }
}

}  // namespace

Histogram build_histogram(std::span<const double> samples, const BinSpec& spec) {
  if (spec.bins < 1 || !(spec.upper > spec.lower)) {
    throw Error(ErrorCode::InvalidConfig, "bin specification must be non-empty and increasing");
  }
  Histogram h;
  h.bin_edges = spec.edges();
  h.counts = Eigen::ArrayXd::Zero(spec.bins);
  const double width = (spec.upper - spec.lower) / spec.bins;
  for (double x : samples) {
    if (!std::isfinite(x) || x < spec.lower || x > spec.upper) {
      ++h.out_of_range;
      continue;
    }
    const int b = std::min(static_cast<int>((x - spec.lower) / width), spec.bins - 1);
    h.counts[b] += 1.0;
    ++h.count;
  }
  return finish(std::move(h));
}

Histogram build_histogram(std::span<const double> samples, std::vector<double> edges) {
  if (edges.size() < 2 || !std::is_sorted(edges.begin(), edges.end(), std::less_equal<>())) {
    throw Error(ErrorCode::InvalidConfig, "bin edges must be strictly increasing");
  }
  Histogram h;
  h.counts = Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(edges.size()) - 1);
  for (double x : samples) {
    if (!std::isfinite(x) || x < edges.front() || x > edges.back()) {
      ++h.out_of_range;
      continue;
    }
    auto it = std::upper_bound(edges.begin(), edges.end(), x);
    const auto b = std::min<Eigen::Index>(std::distance(edges.begin(), it) - 1, h.counts.size() - 1);
    h.counts[b] += 1.0;
    ++h.count;
  }
  h.bin_edges = std::move(edges);
  return finish(std::move(h));
}

SummaryStats summarize(std::span<const double> samples) {
  if (samples.empty()) throw Error(ErrorCode::EmptySampleSet, "summarize: no samples");
  SummaryStats s;
  s.n = static_cast<long>(samples.size());
  for (double x : samples) s.mean += x;
  s.mean /= static_cast<double>(s.n);
  for (double x : samples) s.variance += (x - s.mean) * (x - s.mean);
  s.variance /= static_cast<double>(s.n);
  return s;
}

double kl_divergence(const Histogram& p, const Histogram& q) {
  require_same_bins(p, q);
  Eigen::ArrayXd ps = p.density + kKlSmoothing;
  Eigen::ArrayXd qs = q.density + kKlSmoothing;
  ps /= ps.sum();
  qs /= qs.sum();
  double kl = 0.0;
  for (Eigen::Index b = 0; b < ps.size(); ++b) kl += ps[b] * std::log(ps[b] / qs[b]);
  return std::max(kl, 0.0);
}

double wasserstein_1d(const Histogram& p, const Histogram& q) {
  require_same_bins(p, q);
  double cdf_p = 0.0, cdf_q = 0.0, distance = 0.0;
  const auto& e = p.bin_edges;
  for (int b = 0; b + 1 < p.bins(); ++b) {
    cdf_p += p.density[b];
    cdf_q += q.density[b];
    const double spacing = 0.5 * (e[b + 2] - e[b]);  // centre(b+1) - centre(b)
    distance += std::abs(cdf_p - cdf_q) * spacing;
  }
  return distance;
}

double euclidean_distance(const Histogram& p, const Histogram& q) {
  require_same_bins(p, q);
  return (p.counts - q.counts).matrix().norm();
}

double cosine_similarity(const Histogram& p, const Histogram& q) {
  require_same_bins(p, q);
  const double np = p.counts.matrix().norm();
  const double nq = q.counts.matrix().norm();
  if (np == 0.0 || nq == 0.0) {
    throw Error(ErrorCode::ZeroVector, "cosine similarity of an all-zero count vector");
  }
  return std::clamp(p.counts.matrix().dot(q.counts.matrix()) / (np * nq), -1.0, 1.0);
}

void RamachandranGrid::add(double phi, double psi) {
  auto bin = [](double angle) {
    const double u = (angle + std::numbers::pi) / (2.0 * std::numbers::pi);
    return std::clamp(static_cast<int>(u * kBins), 0, kBins - 1);
  };
  counts(bin(phi), bin(psi)) += 1.0;
}

RamachandranGrid ramachandran(std::span<const geom::FeatureTable> corpus) {
  RamachandranGrid grid;
  for (const auto& t : corpus) {
    for (int i = 0; i < t.length(); ++i) {
      if (t.phi.valid[i] && t.psi.valid[i]) grid.add(t.phi.values[i], t.psi.values[i]);
    }
  }
  return grid;
}

namespace {

std::vector<double> pooled(std::span<const geom::FeatureTable> corpus, geom::Feature f) {
  std::vector<double> out;
  for (const auto& t : corpus) {
    const auto& series = geom::feature_series(t, f);
    for (size_t i = 0; i < series.values.size(); ++i) {
      if (series.valid[i]) out.push_back(series.values[i]);
    }
  }
  return out;
}

}  // namespace

CorpusReport corpus_compare(std::span<const geom::FeatureTable> a,
                            std::span<const geom::FeatureTable> b) {
  if (a.empty() || b.empty()) {
    throw Error(ErrorCode::EmptySampleSet, "corpus_compare needs two non-empty corpora");
  }
  CorpusReport report;
  for (int fi = 0; fi < geom::kFeatureCount; ++fi) {
    const auto feature = static_cast<geom::Feature>(fi);
    const auto name = std::string(geom::feature_name(feature));
    const auto xa = pooled(a, feature);
    const auto xb = pooled(b, feature);
    if (xa.empty() || xb.empty()) {
      report.warnings.push_back("feature " + name + " skipped: no valid samples");
      continue;
    }
    FeatureComparison c;
    c.feature = feature;
    try {
      c.hist_a = build_histogram(xa, default_bins(feature));
      c.hist_b = build_histogram(xb, default_bins(feature));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::EmptySampleSet) throw;
      report.warnings.push_back("feature " + name + " skipped: all samples outside bin range");
      continue;
    }
    if (c.hist_a.out_of_range + c.hist_b.out_of_range > 0) {
      report.warnings.push_back("feature " + name + ": " +
                                std::to_string(c.hist_a.out_of_range + c.hist_b.out_of_range) +
                                " samples outside bin range");
    }
    c.stats_a = summarize(xa);
    c.stats_b = summarize(xb);
    c.kl = kl_divergence(c.hist_a, c.hist_b);
    c.wasserstein = wasserstein_1d(c.hist_a, c.hist_b);
    c.euclidean = euclidean_distance(c.hist_a, c.hist_b);
    c.cosine = cosine_similarity(c.hist_a, c.hist_b);
    report.features.push_back(std::move(c));
  }
  report.rama_a = ramachandran(a);
  report.rama_b = ramachandran(b);
  return report;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out.precision(17);
  return out;
}

}  // namespace

void write_report_csv(const CorpusReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "feature,kl,wasserstein,euclidean,cosine,mean_a,variance_a,n_a,mean_b,variance_b,n_b\n";
  for (const auto& c : report.features) {
    out << geom::feature_name(c.feature) << ',' << c.kl << ',' << c.wasserstein << ','
        << c.euclidean << ',' << c.cosine << ',' << c.stats_a.mean << ',' << c.stats_a.variance
        << ',' << c.stats_a.n << ',' << c.stats_b.mean << ',' << c.stats_b.variance << ','
        << c.stats_b.n << '\n';
  }
}

void write_report_json(const CorpusReport& report, const std::filesystem::path& path) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& c : report.features) {
    const std::string f(geom::feature_name(c.feature));
    for (const auto& [metric, value] :
         {std::pair{"kl", c.kl}, {"wasserstein", c.wasserstein}, {"euclidean", c.euclidean},
          {"cosine", c.cosine}, {"mean_a", c.stats_a.mean}, {"variance_a", c.stats_a.variance},
          {"mean_b", c.stats_b.mean}, {"variance_b", c.stats_b.variance}}) {
      records.push_back({{"feature", f}, {"metric", metric}, {"value", value}});
    }
  }
  nlohmann::json doc = {{"records", records}, {"warnings", report.warnings}};
  auto out = open_out(path);
  out << doc.dump(2) << '\n';
}

void write_feature_table(const BackboneStructure& s, const geom::FeatureTable& table,
                         const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "index,residue";
  for (int f = 0; f < geom::kFeatureCount; ++f) out << ',' << geom::feature_name(static_cast<geom::Feature>(f));
  out << '\n';
  char buf[32];
  for (int i = 0; i < s.length(); ++i) {
    out << i << ',' << s.sequence[i];
    for (int f = 0; f < geom::kFeatureCount; ++f) {
      const geom::MaskedSeries& series = geom::feature_series(table, static_cast<geom::Feature>(f));
      out << ',';
      if (series.valid[i]) {
        std::snprintf(buf, sizeof(buf), "%.6f", series.values[i]);
        out << buf;
      }
    }
    out << '\n';
  }
}

void write_histograms_csv(const CorpusReport& report, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "feature,bin_lower,bin_upper,density_a,density_b\n";
  for (const auto& c : report.features) {
    for (int b = 0; b < c.hist_a.bins(); ++b) {
      out << geom::feature_name(c.feature) << ',' << c.hist_a.bin_edges[b] << ','
          << c.hist_a.bin_edges[b + 1] << ',' << c.hist_a.density[b] << ','
          << c.hist_b.density[b] << '\n';
    }
  }
}

void write_grid(const Eigen::Ref<const Eigen::MatrixXd>& grid, const std::filesystem::path& path) {
  auto out = open_out(path);
  for (Eigen::Index r = 0; r < grid.rows(); ++r) {
    for (Eigen::Index c = 0; c < grid.cols(); ++c) {
      if (c) out << ' ';
      out << grid(r, c);
    }
    out << '\n';
  }
}

}  // namespace desae::stats
