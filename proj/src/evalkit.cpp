#include "desae/evalkit.hpp"

#include "desae/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>
#include <thread>

namespace desae::eval {

double structure_rmsd(const BackboneStructure& a, const BackboneStructure& b, bool full_backbone) {
  if (a.length() != b.length()) {
    throw Error(ErrorCode::LengthMismatch, "rmsd: " + a.id + " has " + std::to_string(a.length()) +
                                               " residues, " + b.id + " has " + std::to_string(b.length()));
  }
  const int n = a.length();
  std::vector<char> use(4 * static_cast<size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    for (int atom = 0; atom < kAtomsPerResidue; ++atom) {
      const bool wanted = full_backbone || atom == static_cast<int>(Atom::CA);
      use[4 * i + atom] = wanted && a.atom_mask[i][atom] && b.atom_mask[i][atom];
    }
  }
  std::unique_ptr<bool[]> mask(new bool[use.size() + 1]);
  for (size_t i = 0; i < use.size(); ++i) mask[i] = use[i] != 0;
  return geom::kabsch_align(a.coords, b.coords, std::span<const bool>(mask.get(), use.size())).rmsd;
}

namespace {

RmsdReport finish(std::vector<RmsdRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const RmsdRow& x, const RmsdRow& y) { return x.pair_id < y.pair_id; });
  RmsdReport report;
  report.rows = std::move(rows);
  std::vector<double> values;
  for (const auto& r : report.rows) values.push_back(r.rmsd);
  if (!values.empty()) {
    report.histogram = stats::build_histogram(values, kRmsdBins);
    report.summary = stats::summarize(values);
  }
  return report;
}

}  // namespace

RmsdReport paired_rmsd(const std::vector<io::StructurePair>& pairs, const std::vector<std::string>& ids,
                       const nn::ModelParams* debias, const RmsdOptions& options) {
  if (ids.size() != pairs.size()) throw Error(ErrorCode::ShapeMismatch, "paired_rmsd: one id per pair");
  std::vector<RmsdRow> rows(pairs.size());
  auto work = [&](size_t begin, size_t stride) {
    ad::NoGradGuard no_grad;
    for (size_t i = begin; i < pairs.size(); i += stride) {
      const auto& p = pairs[i];
      const BackboneStructure pred = debias ? nn::forward(p.predicted, *debias).final : p.predicted;
      rows[i] = {ids[i], p.experimental.length(), structure_rmsd(pred, p.experimental, options.full_backbone)};
    }
  };
  const size_t threads = static_cast<size_t>(std::max(1, options.threads));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        try {
          work(t, threads);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return finish(std::move(rows));
}

RmsdReport paired_rmsd(const io::PairManifest& manifest, const nn::ModelParams* debias,
                       const RmsdOptions& options) {
  std::vector<io::StructurePair> pairs;
  std::vector<std::string> ids;
  for (const auto& row : manifest.rows) {
    pairs.push_back(io::load_pair(row));
    ids.push_back(row.pair_id);
  }
  return paired_rmsd(pairs, ids, debias, options);
}

void write_rmsd_csv(const RmsdReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out << "pair_id,residues,rmsd\n";
  char buf[64];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.6f", r.rmsd);
    out << r.pair_id << ',' << r.residues << ',' << buf << '\n';
  }
}

double recovery_rate(std::string_view pred, std::string_view truth) {
  if (pred.size() != truth.size()) {
    throw Error(ErrorCode::LengthMismatch, "recovery_rate: sequences differ in length");
  }
  long scored = 0, matched = 0;
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 'X') continue;
    ++scored;
    matched += pred[i] == truth[i];
  }
  if (scored == 0) throw Error(ErrorCode::EmptySampleSet, "recovery_rate: no scorable residues");
  return static_cast<double>(matched) / static_cast<double>(scored);
}

double perplexity(const Eigen::Ref<const Eigen::MatrixXd>& log_probs, std::string_view truth) {
  const auto alphabet = static_cast<Eigen::Index>(kAlphabet.size());
  if (log_probs.cols() != alphabet) {
    throw Error(ErrorCode::InvalidDistribution, "perplexity: expected 20 columns of log-probabilities");
  }
  if (log_probs.rows() != static_cast<Eigen::Index>(truth.size())) {
    throw Error(ErrorCode::LengthMismatch, "perplexity: one row per residue required");
  }
  double nll = 0.0;
  long scored = 0;
  for (Eigen::Index i = 0; i < log_probs.rows(); ++i) {
    const auto row = log_probs.row(i);
    const double top = row.maxCoeff();
    const double lse = top + std::log((row.array() - top).exp().sum());
    if (!std::isfinite(top) || std::abs(lse) > 1e-6) {
      throw Error(ErrorCode::InvalidDistribution,
                  "perplexity: row " + std::to_string(i) + " is not a normalized log-distribution");
    }
    if (truth[i] == 'X') continue;
    const auto col = kAlphabet.find(truth[i]);
    if (col == std::string_view::npos) {
      throw Error(ErrorCode::InvalidDistribution, std::string("perplexity: residue '") + truth[i] +
                                                      "' is outside the 20-letter alphabet");
    }
    nll -= row(static_cast<Eigen::Index>(col));
    ++scored;
  }
  if (scored == 0) throw Error(ErrorCode::EmptySampleSet, "perplexity: no scorable residues");
  return std::exp(nll / static_cast<double>(scored));
}

std::vector<std::filesystem::path> bias_report(const std::vector<BackboneStructure>& corpus_a,
                                               const std::vector<BackboneStructure>& corpus_b,
                                               const std::filesystem::path& out_dir, const RmsdReport* pairs) {
  std::vector<geom::FeatureTable> a, b;
  for (const auto& s : corpus_a) a.push_back(geom::extract_features(s));
  for (const auto& s : corpus_b) b.push_back(geom::extract_features(s));
  const stats::CorpusReport report = stats::corpus_compare(a, b);

  std::filesystem::create_directories(out_dir);
  std::vector<std::filesystem::path> written;
  auto out = [&](const char* name) { return written.emplace_back(out_dir / name); };
  stats::write_report_csv(report, out("divergence.csv"));
  stats::write_report_json(report, out("divergence.json"));
  stats::write_histograms_csv(report, out("histograms.csv"));
  stats::write_grid(report.rama_a.counts, out("rama_a.csv"));
  stats::write_grid(report.rama_b.counts, out("rama_b.csv"));
  const auto density = [](const stats::RamachandranGrid& g) -> Eigen::MatrixXd {
    const double total = g.total();
    return total > 0.0 ? Eigen::MatrixXd(g.counts / total) : Eigen::MatrixXd(g.counts);
  };
  stats::write_grid(density(report.rama_a) - density(report.rama_b), out("rama_overlay.csv"));
  if (pairs) write_rmsd_csv(*pairs, out("paired_rmsd.csv"));
  return written;
}

}  // namespace desae::eval
