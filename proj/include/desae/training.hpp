#pragma once

// Pretraining loop: corrupt -> reconstruct -> composite loss -> Adam step,
// plus the configuration file, checkpoints with optimizer state, and the
// debiasing pass over predicted structures.

#include "desae/backbone_io.hpp"
#include "desae/loss.hpp"
#include "desae/model.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace desae::train {

inline constexpr double kLrMin = 1e-6;

struct TrainConfig {
  int epochs = 60;
  double lr_init = 1e-3;
  double lr_min = kLrMin;
  int batch_size = 16;
  double corruption_fraction = 0.10;
  std::uint64_t seed = 0;
  int checkpoint_every = 1;  // epochs
  double grad_clip = 1.0;    // max global gradient norm; <= 0 disables
  loss::LossOptions loss;
  std::filesystem::path output_dir = "run";

  /// Throws Error(InvalidConfig).
  void validate() const;
};

struct RunConfig {
  TrainConfig train;
  nn::DesaeConfig model;
};

/// `key = value` lines, `#` comments. Keys: epochs, lr_init, lr_min,
/// batch_size, corruption_fraction, seed, checkpoint_every, grad_clip,
/// fragment_size, pair_neighbors, loss_neighbors, output_dir,
/// encoder_layers, decoder_layers, hidden_dim, virtual_points, neighbors,
/// offset_bound. Unknown keys and bad values throw Error(InvalidConfig).
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string format_config(const RunConfig& config);

/// Cosine annealing from lr_init at step 0 to lr_min at total_steps.
double lr_schedule(long step, long total_steps, double lr_init, double lr_min = kLrMin);

/// Seed of the corruption applied to `pair_id` in `epoch`.
std::uint64_t corruption_seed(std::uint64_t base_seed, int epoch, std::string_view pair_id);

class Adam {
 public:
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  explicit Adam(std::vector<ad::Tensor> params);

  /// One update from the gradients currently held by the parameters.
  void step(double lr);
  long steps() const { return t_; }

  void write(std::ostream& out) const;
  /// Restores moments; Error(ConfigMismatch) when sizes differ.
  void read(std::istream& in);

 private:
  std::vector<ad::Tensor> params_;
  std::vector<ad::Array> m_, v_;
  long t_ = 0;
};

/// Scales gradients so their global L2 norm is at most max_norm; returns the
/// norm before scaling.
double clip_grad_norm(std::span<const ad::Tensor> params, double max_norm);

/// One training example: the clean structure and its loss bookkeeping.
struct Example {
  std::string id;
  BackboneStructure target;
  loss::LossContext context;

  Example(std::string id, BackboneStructure target, const loss::LossOptions& options);
};

struct EpochLog {
  int epoch = 0;
  long step = 0;  // optimizer steps completed after this epoch
  double lr = 0.0;  // learning rate of the epoch's last step
  loss::LossBreakdown train;
  std::optional<double> heldout;  // mean total loss on the held-out set
  double wall_seconds = 0.0;
};

/// Forward + composite loss for one example corrupted with `seed`.
/// Gradients accumulate scaled by `weight` when `accumulate` is set.
loss::LossBreakdown evaluate_example(const nn::ModelParams& params, const Example& example,
                                     double corruption_fraction, std::uint64_t seed,
                                     bool accumulate = false, double weight = 1.0);

struct TrainState {
  nn::ModelParams params;
  Adam optimizer;
  int epochs_done = 0;
  long step = 0;

  TrainState(nn::ModelParams p);
};

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
/// Restores parameters and, when present, optimizer state and progress.
TrainState load_checkpoint(const std::filesystem::path& path, const nn::DesaeConfig* expected = nullptr);

struct TrainOptions {
  std::function<void(const EpochLog&)> on_epoch;
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  bool write_files = true;                     // log and checkpoints in output_dir
};

struct TrainResult {
  TrainState state;
  std::vector<EpochLog> log;
};

/// Trains on `train` (experimental structures) and reports the held-out loss
/// with a fixed corruption per epoch. Error(EmptySplit) when `train` is empty,
/// Error(NonFiniteLoss) when a loss or gradient stops being finite; the
/// last completed checkpoint on disk is left untouched.
TrainResult train_examples(const std::vector<Example>& train, const std::vector<Example>& heldout,
                           const RunConfig& config, const TrainOptions& options = {});

/// Loads the experimental structures of the manifest's train and val rows and
/// trains on them.
TrainResult train(const io::PairManifest& manifest, const RunConfig& config,
                  const TrainOptions& options = {});

void write_log_csv(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// Runs each structure through the model without corruption and writes the
/// final-layer backbone to output_dir/<id>.pdb. Throughput goes to `log`.
std::vector<BackboneStructure> debias(const std::filesystem::path& checkpoint,
                                      const std::vector<BackboneStructure>& structures,
                                      const std::filesystem::path& output_dir,
                                      std::ostream* log = nullptr);

std::vector<BackboneStructure> debias(const nn::ModelParams& params,
                                      const std::vector<BackboneStructure>& structures);

}  // namespace desae::train
