// desae: command-line front end for feature extraction, corpus comparison,
// corruption, training, debiasing, alignment and evaluation.

#include "desae/backbone_io.hpp"
#include "desae/evalkit.hpp"
#include "desae/geometry.hpp"
#include "desae/stats.hpp"
#include "desae/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace desae;

namespace {

struct Common {
  int threads = 1;
  std::uint64_t seed = 0;
};

void print_resolved(const std::string& command, const std::vector<std::pair<std::string, std::string>>& kv,
                    const Common& common) {
  std::cout << "# desae " << command << "\n";
  for (const auto& [k, v] : kv) std::cout << k << " = " << v << "\n";
  std::cout << "threads = " << common.threads << "\nseed = " << common.seed << "\n";
}

std::vector<BackboneStructure> load_corpus(const fs::path& path, bool predicted) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) files = io::list_structure_files(path);
  else files.push_back(path);
  std::vector<BackboneStructure> out;
  for (const auto& f : files) out.push_back(io::parse_structure(f, {.chain = std::nullopt, .predicted = predicted}));
  return out;
}

// --- features ---------------------------------------------------------------

struct FeaturesArgs {
  fs::path in, out;
  std::string chain;
};

void run_features(const FeaturesArgs& a, const Common& c) {
  print_resolved("features", {{"in", a.in.string()}, {"out", a.out.string()}, {"chain", a.chain}}, c);
  io::ParseOptions opts;
  if (!a.chain.empty()) opts.chain = a.chain[0];
  const BackboneStructure s = io::parse_structure(a.in, opts);
  stats::write_feature_table(s, geom::extract_features(s), a.out);
  std::cout << "wrote " << s.length() << " residues to " << a.out.string() << "\n";
}

// --- compare ----------------------------------------------------------------

struct CompareArgs {
  fs::path a, b, out, manifest;
};

void run_compare(const CompareArgs& a, const Common& c) {
  print_resolved("compare",
                 {{"a", a.a.string()}, {"b", a.b.string()}, {"out", a.out.string()}, {"manifest", a.manifest.string()}},
                 c);
  const auto corpus_a = load_corpus(a.a, false);
  const auto corpus_b = load_corpus(a.b, false);
  std::optional<eval::RmsdReport> rmsd;
  if (!a.manifest.empty()) {
    rmsd = eval::paired_rmsd(io::load_pair_manifest(a.manifest), nullptr, {.full_backbone = false, .threads = c.threads});
  }
  const auto files = eval::bias_report(corpus_a, corpus_b, a.out, rmsd ? &*rmsd : nullptr);
  for (const auto& f : files) std::cout << "wrote " << f.string() << "\n";
}

// --- corrupt ----------------------------------------------------------------

struct CorruptArgs {
  fs::path in, out, sites;
  double fraction = 0.10;
};

void run_corrupt(const CorruptArgs& a, const Common& c) {
  std::ostringstream fraction;
  fraction.precision(17);
  fraction << a.fraction;
  print_resolved("corrupt", {{"in", a.in.string()}, {"out", a.out.string()}, {"fraction", fraction.str()}}, c);
  const BackboneStructure s = io::parse_structure(a.in);
  const geom::Corruption corrupted = geom::corrupt_structure(s, a.fraction, c.seed);
  io::write_structure(corrupted.structure, a.out);
  if (!a.sites.empty()) {
    std::ofstream out(a.sites);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + a.sites.string());
    out << "residue,atom\n";
    for (const auto& site : corrupted.sites) out << site.residue << ',' << kAtomNames[static_cast<int>(site.atom)] << '\n';
  }
  std::cout << "corrupted " << corrupted.sites.size() << " of " << s.length() << " residues\n";
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  fs::path manifest, config, out, resume;
  bool seed_given = false;
};

void run_train(const TrainArgs& a, Common c) {
  const io::PairManifest manifest = io::load_pair_manifest(a.manifest);
  train::RunConfig cfg = a.config.empty() ? train::RunConfig{} : train::load_config(a.config);
  if (a.seed_given) cfg.train.seed = c.seed;
  c.seed = cfg.train.seed;
  if (!a.out.empty()) cfg.train.output_dir = a.out;
  std::cout << "# desae train\nmanifest = " << a.manifest.string() << "\n" << train::format_config(cfg)
            << "threads = " << c.threads << "\n";
  if (manifest.rows_in(io::Split::Train).empty()) {
    throw Error(ErrorCode::EmptySplit, "manifest has no train rows");
  }
  train::TrainOptions options;
  if (!a.resume.empty()) options.resume = a.resume;
  options.on_epoch = [](const train::EpochLog& e) {
    std::cerr << "epoch " << e.epoch << " step " << e.step << " lr " << e.lr << " loss " << e.train.total;
    if (e.heldout) std::cerr << " heldout " << *e.heldout;
    std::cerr << " (" << e.wall_seconds << " s)\n";
  };
  const train::TrainResult result = train::train(manifest, cfg, options);
  std::cout << "finished " << result.state.epochs_done << " epochs, " << result.state.step << " steps; checkpoints in "
            << cfg.train.output_dir.string() << "\n";
}

// --- debias -----------------------------------------------------------------

struct DebiasArgs {
  fs::path checkpoint, in, out;
};

void run_debias(const DebiasArgs& a, const Common& c) {
  print_resolved("debias", {{"checkpoint", a.checkpoint.string()}, {"in", a.in.string()}, {"out", a.out.string()}},
                 c);
  const auto structures = load_corpus(a.in, true);
  train::debias(a.checkpoint, structures, a.out, &std::cerr);
  std::cout << "wrote " << structures.size() << " structures to " << a.out.string() << "\n";
}

// --- align ------------------------------------------------------------------

struct AlignArgs {
  fs::path mobile, target, out;
  bool full_backbone = false;
};

void run_align(const AlignArgs& a, const Common& c) {
  print_resolved("align",
                 {{"mobile", a.mobile.string()},
                  {"target", a.target.string()},
                  {"out", a.out.string()},
                  {"full_backbone", a.full_backbone ? "true" : "false"}},
                 c);
  const BackboneStructure mobile = io::parse_structure(a.mobile);
  const BackboneStructure target = io::parse_structure(a.target);
  const double rmsd = eval::structure_rmsd(mobile, target, a.full_backbone);
  if (!a.out.empty()) {
    const CoordMatrix ca_m = ca_coords(mobile), ca_t = ca_coords(target);
    const auto fit = geom::kabsch_align(ca_m, ca_t);
    io::write_structure(geom::transform(mobile, fit.rotation, fit.translation), a.out);
  }
  std::printf("rmsd %.6f\n", rmsd);
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  fs::path manifest, checkpoint, out, log_probs;
  std::string pred, truth;
  bool full_backbone = false;
};

Eigen::MatrixXd read_matrix(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream fields(line);
    std::vector<double> row;
    double v;
    while (fields >> v) row.push_back(v);
    if (!fields.eof()) throw Error(ErrorCode::MalformedRecord, path.string() + ": non-numeric value");
    if (!row.empty()) rows.push_back(std::move(row));
  }
  const Eigen::Index cols = rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), cols);
  for (size_t r = 0; r < rows.size(); ++r) {
    if (static_cast<Eigen::Index>(rows[r].size()) != cols) {
      throw Error(ErrorCode::MalformedRecord, path.string() + ": ragged rows");
    }
    for (Eigen::Index j = 0; j < cols; ++j) m(static_cast<Eigen::Index>(r), j) = rows[r][j];
  }
  return m;
}

void run_eval(const EvalArgs& a, const Common& c) {
  print_resolved("eval",
                 {{"manifest", a.manifest.string()},
                  {"checkpoint", a.checkpoint.string()},
                  {"out", a.out.string()},
                  {"log_probs", a.log_probs.string()},
                  {"full_backbone", a.full_backbone ? "true" : "false"}},
                 c);
  if (!a.manifest.empty()) {
    std::optional<nn::ModelParams> model;
    if (!a.checkpoint.empty()) model = nn::load_model(a.checkpoint);
    const auto report = eval::paired_rmsd(io::load_pair_manifest(a.manifest), model ? &*model : nullptr,
                                          {.full_backbone = a.full_backbone, .threads = c.threads});
    if (!a.out.empty()) eval::write_rmsd_csv(report, a.out);
    std::printf("pairs %zu mean_rmsd %.6f\n", report.rows.size(), report.summary.mean);
  }
  if (!a.pred.empty()) std::printf("recovery %.6f\n", eval::recovery_rate(a.pred, a.truth));
  if (!a.log_probs.empty()) std::printf("perplexity %.6f\n", eval::perplexity(read_matrix(a.log_probs), a.truth));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeSAE backbone toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Common common;
  app.add_option("--threads", common.threads, "Worker threads")->check(CLI::PositiveNumber);
  auto* seed_opt = app.add_option("--seed", common.seed, "Random seed");

  FeaturesArgs features;
  auto* cmd_features = app.add_subcommand("features", "Per-residue backbone features of one structure");
  cmd_features->add_option("--in", features.in, "PDB file")->required()->check(CLI::ExistingFile);
  cmd_features->add_option("--out", features.out, "Output CSV")->required();
  cmd_features->add_option("--chain", features.chain, "Chain identifier");

  CompareArgs compare;
  auto* cmd_compare = app.add_subcommand("compare", "Compare backbone statistics of two corpora");
  cmd_compare->add_option("--a", compare.a, "Corpus A (directory or file)")->required()->check(CLI::ExistingPath);
  cmd_compare->add_option("--b", compare.b, "Corpus B (directory or file)")->required()->check(CLI::ExistingPath);
  cmd_compare->add_option("--out", compare.out, "Report directory")->required();
  cmd_compare->add_option("--manifest", compare.manifest, "Pair manifest for paired RMSD")->check(CLI::ExistingFile);

  CorruptArgs corrupt;
  auto* cmd_corrupt = app.add_subcommand("corrupt", "Replace atoms of random residues by the centroid of the others");
  cmd_corrupt->add_option("--in", corrupt.in, "PDB file")->required()->check(CLI::ExistingFile);
  cmd_corrupt->add_option("--out", corrupt.out, "Output PDB")->required();
  cmd_corrupt->add_option("--fraction", corrupt.fraction, "Fraction of eligible residues")
      ->check(CLI::Range(0.0, 1.0));
  cmd_corrupt->add_option("--sites", corrupt.sites, "CSV of corrupted sites");

  TrainArgs train_args;
  auto* cmd_train = app.add_subcommand("train", "Pretrain the autoencoder on experimental structures");
  cmd_train->add_option("--manifest", train_args.manifest, "Pair manifest")->required()->check(CLI::ExistingFile);
  cmd_train->add_option("--config", train_args.config, "key = value config file")->check(CLI::ExistingFile);
  cmd_train->add_option("--out", train_args.out, "Output directory (overrides output_dir)");
  cmd_train->add_option("--resume", train_args.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);

  DebiasArgs debias;
  auto* cmd_debias = app.add_subcommand("debias", "Pass predicted structures through a trained model");
  cmd_debias->add_option("--checkpoint", debias.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
  cmd_debias->add_option("--in", debias.in, "Directory or PDB file")->required()->check(CLI::ExistingPath);
  cmd_debias->add_option("--out", debias.out, "Output directory")->required();

  AlignArgs align;
  auto* cmd_align = app.add_subcommand("align", "Superimpose one structure onto another");
  cmd_align->add_option("--mobile", align.mobile, "Structure to move")->required()->check(CLI::ExistingFile);
  cmd_align->add_option("--target", align.target, "Reference structure")->required()->check(CLI::ExistingFile);
  cmd_align->add_option("--out", align.out, "Write the superimposed mobile structure");
  cmd_align->add_flag("--full-backbone", align.full_backbone, "RMSD over N, CA, C, O");

  EvalArgs eval_args;
  auto* cmd_eval = app.add_subcommand("eval", "Paired RMSD, sequence recovery and perplexity");
  auto* eval_manifest =
      cmd_eval->add_option("--manifest", eval_args.manifest, "Pair manifest")->check(CLI::ExistingFile);
  cmd_eval->add_option("--checkpoint", eval_args.checkpoint, "Debias predictions first")
      ->check(CLI::ExistingFile)
      ->needs(eval_manifest);
  cmd_eval->add_option("--out", eval_args.out, "Per-pair RMSD CSV")->needs(eval_manifest);
  cmd_eval->add_flag("--full-backbone", eval_args.full_backbone, "RMSD over N, CA, C, O");
  auto* truth = cmd_eval->add_option("--truth", eval_args.truth, "Native sequence");
  cmd_eval->add_option("--pred", eval_args.pred, "Designed sequence")->needs(truth);
  cmd_eval->add_option("--log-probs", eval_args.log_probs, "L x 20 natural-log probabilities")
      ->check(CLI::ExistingFile)
      ->needs(truth);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (cmd_eval->parsed() && eval_args.manifest.empty() && eval_args.pred.empty() && eval_args.log_probs.empty()) {
    std::cerr << "eval: give --manifest, --pred/--truth or --log-probs/--truth\n";
    return 2;
  }

  try {
    if (cmd_features->parsed()) run_features(features, common);
    else if (cmd_compare->parsed()) run_compare(compare, common);
    else if (cmd_corrupt->parsed()) run_corrupt(corrupt, common);
    else if (cmd_train->parsed()) {
      train_args.seed_given = seed_opt->count() > 0;
      run_train(train_args, common);
    } else if (cmd_debias->parsed()) run_debias(debias, common);
    else if (cmd_align->parsed()) run_align(align, common);
    else if (cmd_eval->parsed()) run_eval(eval_args, common);
  } catch (const Error& e) {
    std::cerr << "error " << error_code_name(e.code()) << ": " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error " << error_code_name(ErrorCode::IoFailure) << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
