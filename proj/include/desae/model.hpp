#pragma once

// Denoising structure autoencoder: an encoder of frame-aggregation layers
// (node/edge embeddings that only see relative frame geometry, hence
// invariant to global rigid motion) followed by a decoder that interleaves
// aggregation with frame updating and emits backbone coordinates after each
// decoder layer.

#include "desae/autodiff.hpp"
#include "desae/backbone.hpp"
#include "desae/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace desae::nn {

using ad::Tensor;

struct DesaeConfig {
  int encoder_layers = 8;
  int decoder_layers = 6;
  int hidden_dim = 128;
  int virtual_points = 8;
  int neighbors = 30;
  bool atom_offsets_head = true;
  double offset_bound = 3.0;  // Angstrom, max norm of a local atom offset

  /// Throws Error(InvalidConfig).
  void validate() const;
  friend bool operator==(const DesaeConfig&, const DesaeConfig&) = default;
};

/// Per-residue invariant inputs: sin/cos of six angles plus four bond lengths.
inline constexpr int kNodeInputWidth = 16;
/// Translations and distances enter the network in units of 10 Angstrom.
inline constexpr double kLengthScale = 0.1;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const;  // x: [N, in]
  int in() const { return weight.dim(0); }
  int out() const { return weight.dim(1); }
};

/// Linear layers with ReLU between them.
struct Mlp {
  std::vector<Linear> layers;
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gain, bias;
  Tensor operator()(const Tensor& x) const;
};

struct AggregationLayer {
  Mlp latent;      // projection to m virtual points
  Mlp edge;        // [h_ij, p_ij, q_ij, vec(R_ij), |t_i - t_j|] -> D
  Mlp score;       // [h_i, h_ij] -> attention logit
  Mlp node;        // D -> D
  LayerNorm edge_norm, node_norm;
};

struct UpdateLayer {
  Mlp rotation_score;
  Mlp translation_score;
  Linear rotation_proj;  // 9 -> 4 quaternion (W_r plus bias)
  Mlp translation_head;  // h_ij -> local 3-vector correction
};

struct ModelParams {
  DesaeConfig config;
  Linear node_embed;
  Linear edge_embed;
  std::vector<AggregationLayer> encoder;
  std::vector<AggregationLayer> decoder_aggregation;
  std::vector<UpdateLayer> decoder_update;
  Linear offset_head;  // D -> 4 atoms x 3

  /// Randomly initialized parameters; deterministic in `seed`.
  static ModelParams init(const DesaeConfig& config, std::uint64_t seed);

  /// All learnable tensors in declaration order, with dotted names.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  std::vector<Tensor> parameters() const;
  long parameter_count() const;
};

struct NodeState {
  Tensor h;             // [L, D]
  Tensor e;             // [L*k, D]
  Tensor rotations;     // [L, 3, 3], columns are the local axes
  Tensor translations;  // [L, 3], Angstrom
  std::vector<int> src, dst;  // edge r connects src[r] -> neighbor dst[r]
  int degree = 0;             // neighbors per residue

  int length() const { return h.dim(0); }
  int edges() const { return static_cast<int>(src.size()); }
};

/// Invariant node inputs (sin/cos of phi, psi, omega, alpha, beta, gamma and
/// the four bond lengths, zeroed where masked).
Eigen::MatrixXd node_input_features(const BackboneStructure& s);

NodeState init_node_state(const BackboneStructure& s, const ModelParams& params);

/// Updates h and e from relative frame geometry; frames are untouched.
NodeState frame_aggregation(const NodeState& state, const AggregationLayer& layer, int virtual_points);

/// Attention-weighted rotation (through a quaternion head, applied relative to
/// the current rotation) and translation (neighbours vote in global
/// coordinates) update.
NodeState frame_updating(const NodeState& state, const UpdateLayer& layer);

/// Batched quaternion [N,4] -> rotation [N,3,3] with normalization; near-zero
/// quaternions give the identity and no gradient.
Tensor quat_to_rot(const Tensor& quaternions);

/// [L,4,3] global coordinates: R_i * offset_a(h_i) + t_i.
Tensor decode_coordinates(const NodeState& state, const ModelParams& params);

struct ForwardResult {
  std::vector<Tensor> layer_coords;  // one [L,4,3] per decoder layer
  BackboneStructure final;           // last layer's coordinates, input sequence/masks
};

ForwardResult forward(const BackboneStructure& corrupted, const ModelParams& params);

/// Runs the encoder only; returns its final state.
NodeState encode(const BackboneStructure& s, const ModelParams& params);

// Checkpoint layout (all integers and reals little-endian):
//   char[8]  magic "DESAECKP"
//   u32      version (1)
//   i32 x 5  encoder_layers, decoder_layers, hidden_dim, virtual_points, neighbors
//   u8       atom_offsets_head
//   f64      offset_bound
//   u64      parameter count P
//   f64 x P  parameters, declaration order, each tensor row-major
//   u8       has_training_state; when 1 the training section follows
inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_params(std::ostream& out, const ModelParams& params);
/// Reads header and parameters; with `expected` set, Error(ConfigMismatch)
/// unless the stored config equals it.
ModelParams read_params(std::istream& in, const DesaeConfig* expected = nullptr);

void save_model(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_model(const std::filesystem::path& path, const DesaeConfig* expected = nullptr);

void write_f64(std::ostream& out, double v);
double read_f64(std::istream& in);
void write_u64(std::ostream& out, std::uint64_t v);
std::uint64_t read_u64(std::istream& in);

}  // namespace desae::nn
