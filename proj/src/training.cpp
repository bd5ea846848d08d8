#include "desae/training.hpp"

#include "desae/geometry.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

namespace desae::train {

using ad::Array;
using ad::Tensor;

void TrainConfig::validate() const {
  if (epochs < 1 || batch_size < 1 || checkpoint_every < 1) {
    throw Error(ErrorCode::InvalidConfig, "epochs, batch_size and checkpoint_every must be positive");
  }
  if (!(lr_init > 0.0) || !(lr_min > 0.0) || lr_min > lr_init) {
    throw Error(ErrorCode::InvalidConfig, "learning rates must satisfy 0 < lr_min <= lr_init");
  }
  if (!(corruption_fraction > 0.0) || corruption_fraction > 1.0) {
    throw Error(ErrorCode::InvalidConfig, "corruption_fraction must lie in (0, 1]");
  }
  if (loss.fragment_size < 1 || loss.pair_neighbors < 1 || loss.neighbors < 1) {
    throw Error(ErrorCode::InvalidConfig, "loss neighbourhood sizes must be positive");
  }
}

// ---------------------------------------------------------------------------
// Config file

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error(ErrorCode::InvalidConfig, "bad value for " + key + ": '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw Error(ErrorCode::InvalidConfig, "bad value for " + key + ": '" + text + "'");
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig c;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::InvalidConfig, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    TrainConfig& t = c.train;
    nn::DesaeConfig& m = c.model;
    if (key == "epochs") t.epochs = parse_number<int>(key, value);
    else if (key == "lr_init") t.lr_init = parse_number<double>(key, value);
    else if (key == "lr_min") t.lr_min = parse_number<double>(key, value);
    else if (key == "batch_size") t.batch_size = parse_number<int>(key, value);
    else if (key == "corruption_fraction") t.corruption_fraction = parse_number<double>(key, value);
    else if (key == "seed") t.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "checkpoint_every") t.checkpoint_every = parse_number<int>(key, value);
    else if (key == "grad_clip") t.grad_clip = parse_number<double>(key, value);
    else if (key == "fragment_size") t.loss.fragment_size = parse_number<int>(key, value);
    else if (key == "pair_neighbors") t.loss.pair_neighbors = parse_number<int>(key, value);
    else if (key == "loss_neighbors") t.loss.neighbors = parse_number<int>(key, value);
    else if (key == "output_dir") t.output_dir = value;
    else if (key == "encoder_layers") m.encoder_layers = parse_number<int>(key, value);
    else if (key == "decoder_layers") m.decoder_layers = parse_number<int>(key, value);
    else if (key == "hidden_dim") m.hidden_dim = parse_number<int>(key, value);
    else if (key == "virtual_points") m.virtual_points = parse_number<int>(key, value);
    else if (key == "neighbors") m.neighbors = parse_number<int>(key, value);
    else if (key == "offset_bound") m.offset_bound = parse_number<double>(key, value);
    else if (key == "atom_offsets_head") m.atom_offsets_head = parse_bool(key, value);
    else throw Error(ErrorCode::InvalidConfig, "unknown config key '" + key + "'");
  }
  c.train.validate();
  c.model.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_config_text(text.str());
}

std::string format_config(const RunConfig& c) {
  const TrainConfig& t = c.train;
  const nn::DesaeConfig& m = c.model;
  std::ostringstream out;
  out.precision(17);
  out << "epochs = " << t.epochs << "\n"
      << "lr_init = " << t.lr_init << "\n"
      << "lr_min = " << t.lr_min << "\n"
      << "batch_size = " << t.batch_size << "\n"
      << "corruption_fraction = " << t.corruption_fraction << "\n"
      << "seed = " << t.seed << "\n"
      << "checkpoint_every = " << t.checkpoint_every << "\n"
      << "grad_clip = " << t.grad_clip << "\n"
      << "fragment_size = " << t.loss.fragment_size << "\n"
      << "pair_neighbors = " << t.loss.pair_neighbors << "\n"
      << "loss_neighbors = " << t.loss.neighbors << "\n"
      << "output_dir = " << t.output_dir.string() << "\n"
      << "encoder_layers = " << m.encoder_layers << "\n"
      << "decoder_layers = " << m.decoder_layers << "\n"
      << "hidden_dim = " << m.hidden_dim << "\n"
      << "virtual_points = " << m.virtual_points << "\n"
      << "neighbors = " << m.neighbors << "\n"
      << "offset_bound = " << m.offset_bound << "\n"
      << "atom_offsets_head = " << (m.atom_offsets_head ? "true" : "false") << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// Schedule, seeds, optimizer

double lr_schedule(long step, long total_steps, double lr_init, double lr_min) {
  if (total_steps <= 0) return lr_init;
  const double progress = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps), 0.0, 1.0);
  return lr_min + 0.5 * (lr_init - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t corruption_seed(std::uint64_t base_seed, int epoch, std::string_view pair_id) {
  std::uint64_t h = splitmix64(base_seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(epoch)));
  return splitmix64(h ^ fnv1a(pair_id));
}

Adam::Adam(std::vector<Tensor> params) : params_(std::move(params)) {
  for (const auto& p : params_) {
    m_.push_back(Array::Zero(p.size()));
    v_.push_back(Array::Zero(p.size()));
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const Array g = params_[i].grad();
    m_[i] = beta1 * m_[i] + (1.0 - beta1) * g;
    v_[i] = beta2 * v_[i] + (1.0 - beta2) * g.square();
    params_[i].mutable_value() -= lr * (m_[i] / c1) / ((v_[i] / c2).sqrt() + eps);
  }
}

void Adam::write(std::ostream& out) const {
  nn::write_u64(out, static_cast<std::uint64_t>(t_));
  nn::write_f64(out, beta1);
  nn::write_f64(out, beta2);
  nn::write_f64(out, eps);
  std::uint64_t total = 0;
  for (const auto& m : m_) total += static_cast<std::uint64_t>(m.size());
  nn::write_u64(out, total);
  for (const auto* moments : {&m_, &v_})
    for (const auto& a : *moments)
      for (double v : a) nn::write_f64(out, v);
}

void Adam::read(std::istream& in) {
  t_ = static_cast<long>(nn::read_u64(in));
  beta1 = nn::read_f64(in);
  beta2 = nn::read_f64(in);
  eps = nn::read_f64(in);
  std::uint64_t total = 0;
  for (const auto& m : m_) total += static_cast<std::uint64_t>(m.size());
  if (nn::read_u64(in) != total) {
    throw Error(ErrorCode::ConfigMismatch, "optimizer state does not match the model size");
  }
  for (auto* moments : {&m_, &v_})
    for (auto& a : *moments)
      for (double& v : a) v = nn::read_f64(in);
}

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad()) sq += p.node()->grad.square().sum();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / (norm + 1e-12);
    for (const auto& p : params)
      if (p.has_grad()) p.node()->grad *= scale;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Examples and checkpoints

Example::Example(std::string id_, BackboneStructure target_, const loss::LossOptions& options)
    : id(std::move(id_)), target(std::move(target_)), context(target, options) {}

loss::LossBreakdown evaluate_example(const nn::ModelParams& params, const Example& example,
                                     double corruption_fraction, std::uint64_t seed, bool accumulate,
                                     double weight) {
  const geom::Corruption corrupted = geom::corrupt_structure(example.target, corruption_fraction, seed);
  std::optional<ad::NoGradGuard> no_grad;
  if (!accumulate) no_grad.emplace();
  const nn::ForwardResult result = nn::forward(corrupted.structure, params);
  const loss::LossTerms terms = loss::composite_loss(result.layer_coords, example.context);
  const Tensor total = terms.total();
  const loss::LossBreakdown b = terms.breakdown();
  if (!std::isfinite(total.item())) {
    throw Error(ErrorCode::NonFiniteLoss, "non-finite loss on " + example.id);
  }
  if (accumulate) ad::backward(total * weight);
  return b;
}

TrainState::TrainState(nn::ModelParams p) : params(std::move(p)), optimizer(params.parameters()) {}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + tmp.string());
    nn::write_params(out, state.params);
    out.put(1);
    nn::write_u64(out, static_cast<std::uint64_t>(state.epochs_done));
    nn::write_u64(out, static_cast<std::uint64_t>(state.step));
    state.optimizer.write(out);
    if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path, const nn::DesaeConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  TrainState state(nn::read_params(in, expected));
  const int flag = in.get();
  if (flag == 1) {
    state.epochs_done = static_cast<int>(nn::read_u64(in));
    state.step = static_cast<long>(nn::read_u64(in));
    state.optimizer.read(in);
  } else if (flag != 0) {
    throw Error(ErrorCode::IoFailure, "checkpoint truncated: " + path.string());
  }
  return state;
}

// ---------------------------------------------------------------------------
// Loop

namespace {

constexpr const char* kLogHeader = "epoch,step,lr,global,fragment,pair,neighbor,distance,total,heldout_total,wall_seconds";

std::string log_row(const EpochLog& e) {
  char buf[512];
  const auto& b = e.train;
  std::snprintf(buf, sizeof(buf), "%d,%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,", e.epoch, e.step, e.lr,
                b.global, b.fragment, b.pair, b.neighbor, b.distance, b.total);
  std::string row = buf;
  if (e.heldout) {
    std::snprintf(buf, sizeof(buf), "%.10g", *e.heldout);
    row += buf;
  }
  std::snprintf(buf, sizeof(buf), ",%.3f", e.wall_seconds);
  return row + buf;
}

// Lowest held-out loss among the first `epochs` rows of an existing log.
double best_logged_heldout(const std::filesystem::path& path, int epochs) {
  double best = std::numeric_limits<double>::infinity();
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(cell);
    if (cells.size() < 10 || cells[9].empty() || std::stoi(cells[0]) >= epochs) continue;
    best = std::min(best, std::stod(cells[9]));
  }
  return best;
}

bool all_gradients_finite(const std::vector<Tensor>& params) {
  for (const auto& p : params)
    if (p.has_grad() && !p.node()->grad.allFinite()) return false;
  return true;
}

void add_scaled(loss::LossBreakdown& acc, const loss::LossBreakdown& b, double w) {
  acc.global += w * b.global;
  acc.fragment += w * b.fragment;
  acc.pair += w * b.pair;
  acc.neighbor += w * b.neighbor;
  acc.distance += w * b.distance;
  acc.total += w * b.total;
}

}  // namespace

TrainResult train_examples(const std::vector<Example>& train, const std::vector<Example>& heldout,
                           const RunConfig& config, const TrainOptions& options) {
  const TrainConfig& cfg = config.train;
  cfg.validate();
  config.model.validate();
  if (train.empty()) throw Error(ErrorCode::EmptySplit, "training split is empty");

  TrainResult result{options.resume ? load_checkpoint(*options.resume, &config.model)
                                    : TrainState(nn::ModelParams::init(config.model, cfg.seed)),
                     {}};
  TrainState& state = result.state;
  const std::vector<Tensor> params = state.params.parameters();
  const int n = static_cast<int>(train.size());
  const long batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = static_cast<long>(cfg.epochs) * batches;

  const std::filesystem::path& dir = cfg.output_dir;
  const std::filesystem::path log_path = dir / "train_log.csv";
  std::ofstream log_file;
  if (options.write_files) {
    std::filesystem::create_directories(dir);
    const bool append = options.resume && std::filesystem::exists(log_path);
    log_file.open(log_path, append ? std::ios::app : std::ios::trunc);
    if (!log_file) throw Error(ErrorCode::IoFailure, "cannot write " + log_path.string());
    if (!append) log_file << kLogHeader << "\n" << std::flush;
  }
  double best_heldout = options.resume && options.write_files
                            ? best_logged_heldout(log_path, state.epochs_done)
                            : std::numeric_limits<double>::infinity();

  for (int epoch = state.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    EpochLog entry;
    entry.epoch = epoch;
    for (int b0 = 0; b0 < n; b0 += cfg.batch_size) {
      const int b1 = std::min(n, b0 + cfg.batch_size);
      const double weight = 1.0 / (b1 - b0);
      for (Tensor p : params) p.zero_grad();
      for (int i = b0; i < b1; ++i) {
        const auto& ex = train[i];
        const auto b = evaluate_example(state.params, ex, cfg.corruption_fraction,
                                        corruption_seed(cfg.seed, epoch, ex.id), true, weight);
        add_scaled(entry.train, b, 1.0 / n);
      }
      if (!all_gradients_finite(params)) {
        throw Error(ErrorCode::NonFiniteLoss, "non-finite gradient in epoch " + std::to_string(epoch));
      }
      clip_grad_norm(params, cfg.grad_clip);
      entry.lr = lr_schedule(state.step, total_steps, cfg.lr_init, cfg.lr_min);
      state.optimizer.step(entry.lr);
      ++state.step;
    }
    for (Tensor p : params) p.zero_grad();
    state.epochs_done = epoch + 1;
    entry.step = state.step;

    if (!heldout.empty()) {
      double sum = 0.0;
      for (const auto& ex : heldout) {
        sum += evaluate_example(state.params, ex, cfg.corruption_fraction, corruption_seed(cfg.seed, -1, ex.id))
                   .total;
      }
      entry.heldout = sum / static_cast<double>(heldout.size());
    }
    entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    if (options.write_files) {
      log_file << log_row(entry) << "\n" << std::flush;
      save_checkpoint(state, dir / "last.ckpt");
      if ((epoch + 1) % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%04d.ckpt", epoch + 1);
        save_checkpoint(state, dir / name);
      }
      if (entry.heldout && *entry.heldout < best_heldout) {
        best_heldout = *entry.heldout;
        save_checkpoint(state, dir / "best.ckpt");
      }
    }
    if (options.on_epoch) options.on_epoch(entry);
    result.log.push_back(entry);
  }
  return result;
}

TrainResult train(const io::PairManifest& manifest, const RunConfig& config, const TrainOptions& options) {
  const auto train_rows = manifest.rows_in(io::Split::Train);
  if (train_rows.empty()) throw Error(ErrorCode::EmptySplit, "manifest has no train rows");
  config.train.validate();
  config.model.validate();
  auto load = [&](const std::vector<io::PairRow>& rows) {
    std::vector<Example> out;
    out.reserve(rows.size());
    for (const auto& row : rows) {
      BackboneStructure s = io::parse_structure(row.experimental_path);
      s.id = row.pair_id;
      out.emplace_back(row.pair_id, std::move(s), config.train.loss);
    }
    return out;
  };
  return train_examples(load(train_rows), load(manifest.rows_in(io::Split::Val)), config, options);
}

void write_log_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  out << kLogHeader << "\n";
  for (const auto& e : log) out << log_row(e) << "\n";
}

// ---------------------------------------------------------------------------
// Debiasing

std::vector<BackboneStructure> debias(const nn::ModelParams& params,
                                      const std::vector<BackboneStructure>& structures) {
  ad::NoGradGuard no_grad;
  std::vector<BackboneStructure> out;
  out.reserve(structures.size());
  for (const auto& s : structures) out.push_back(nn::forward(s, params).final);
  return out;
}

std::vector<BackboneStructure> debias(const std::filesystem::path& checkpoint,
                                      const std::vector<BackboneStructure>& structures,
                                      const std::filesystem::path& output_dir, std::ostream* log) {
  const nn::ModelParams params = nn::load_model(checkpoint);
  std::filesystem::create_directories(output_dir);
  const auto start = std::chrono::steady_clock::now();
  std::vector<BackboneStructure> out = debias(params, structures);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (const auto& s : out) io::write_structure(s, output_dir / (s.id + ".pdb"));
  if (log) {
    *log << "debiased " << out.size() << " structures in " << seconds << " s";
    if (seconds > 0.0) *log << " (" << static_cast<double>(out.size()) / seconds << " structures/s)";
    *log << "\n";
  }
  return out;
}

}  // namespace desae::train
