#include "desae/model.hpp"

#include "desae/quaternion.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>

namespace desae::nn {

using ad::Array;
using ad::Shape;

void DesaeConfig::validate() const {
  if (encoder_layers < 0 || decoder_layers < 1 || hidden_dim < 1 || virtual_points < 1 ||
      neighbors < 1 || !(offset_bound > 0.0)) {
    throw Error(ErrorCode::InvalidConfig, "model config values must be positive");
  }
  if (hidden_dim % 4 != 0) {
    throw Error(ErrorCode::InvalidConfig, "hidden_dim must be divisible by 4");
  }
  if (!atom_offsets_head) {
    throw Error(ErrorCode::InvalidConfig, "atom_offsets_head is required");
  }
}

Tensor Linear::operator()(const Tensor& x) const { return ad::matmul(x, weight) + bias; }

Tensor Mlp::operator()(const Tensor& x) const {
  Tensor y = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    y = layers[i](y);
    if (i + 1 < layers.size()) y = ad::relu(y);
  }
  return y;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ad::layer_norm(x) * gain + bias; }

// ---------------------------------------------------------------------------
// Initialization

namespace {

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  Linear linear(int in, int out, double scale = 1.0) {
    const double bound = scale / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Array w(static_cast<Eigen::Index>(in) * out);
    for (auto& v : w) v = dist(rng_);
    return {Tensor::from({in, out}, std::move(w), true), Tensor::zeros({out}, true)};
  }

  Mlp mlp(std::initializer_list<int> widths, double last_scale = 1.0) {
    Mlp m;
    const std::vector<int> w(widths);
    for (size_t i = 0; i + 1 < w.size(); ++i) {
      m.layers.push_back(linear(w[i], w[i + 1], i + 2 == w.size() ? last_scale : 1.0));
    }
    return m;
  }

  static LayerNorm layer_norm(int width) {
    return {Tensor::from({width}, Array::Ones(width), true), Tensor::zeros({width}, true)};
  }

 private:
  std::mt19937_64 rng_;
};

int edge_geometry_width(int m) { return 6 * m + m * m + 10; }

AggregationLayer make_aggregation(Initializer& init, int d, int m) {
  AggregationLayer layer;
  layer.latent = init.mlp({d, d, 3 * m});
  layer.edge = init.mlp({d + edge_geometry_width(m), 4 * d, d});
  layer.score = init.mlp({2 * d, d, 1});
  layer.node = init.mlp({d, 4 * d, d});
  layer.edge_norm = Initializer::layer_norm(d);
  layer.node_norm = Initializer::layer_norm(d);
  return layer;
}

UpdateLayer make_update(Initializer& init, int d) {
  UpdateLayer layer;
  layer.rotation_score = init.mlp({2 * d, d, 1});
  layer.translation_score = init.mlp({2 * d, d, 1});
  layer.rotation_proj = init.linear(9, 4, 0.01);
  layer.rotation_proj.bias.mutable_value() << 1.0, 0.0, 0.0, 0.0;
  layer.translation_head = init.mlp({d, d, 3}, 0.01);
  return layer;
}

// Idealized local positions of N, CA, C, O in the residue frame
// (x along C-CA, N in the xy half-plane with positive y).
Eigen::Matrix<double, 4, 3, Eigen::RowMajor> ideal_local_backbone() {
  constexpr double kCaN = 1.458, kCaC = 1.525, kCO = 1.231;
  const double n_ca_c = 111.0 * std::numbers::pi / 180.0;
  const double ca_c_o = 120.5 * std::numbers::pi / 180.0;
  const Eigen::Vector3d ca = Eigen::Vector3d::Zero();
  const Eigen::Vector3d c(kCaC, 0.0, 0.0);
  const Eigen::Vector3d n(kCaN * std::cos(n_ca_c), kCaN * std::sin(n_ca_c), 0.0);
  const Eigen::Vector3d o = geom::place_atom<double>(n, ca, c, kCO, ca_c_o, std::numbers::pi);
  Eigen::Matrix<double, 4, 3, Eigen::RowMajor> out;
  out.row(0) = n;
  out.row(1) = ca;
  out.row(2) = c;
  out.row(3) = o;
  return out;
}

}  // namespace

ModelParams ModelParams::init(const DesaeConfig& config, std::uint64_t seed) {
  config.validate();
  Initializer init(seed);
  const int d = config.hidden_dim, m = config.virtual_points;
  ModelParams p;
  p.config = config;
  p.node_embed = init.linear(kNodeInputWidth, d);
  p.edge_embed = init.linear(edge_geometry_width(m), d);
  for (int l = 0; l < config.encoder_layers; ++l) p.encoder.push_back(make_aggregation(init, d, m));
  for (int l = 0; l < config.decoder_layers; ++l) {
    p.decoder_aggregation.push_back(make_aggregation(init, d, m));
    p.decoder_update.push_back(make_update(init, d));
  }
  p.offset_head = init.linear(d, 3 * kAtomsPerResidue, 0.01);
  const auto ideal = ideal_local_backbone();
  Array& bias = p.offset_head.bias.mutable_value();
  for (int a = 0; a < kAtomsPerResidue; ++a) {
    const double r = ideal.row(a).norm();
    const double stretch = r > 0.0 ? std::atanh(r / config.offset_bound) / r : 0.0;
    for (int c = 0; c < 3; ++c) bias[3 * a + c] = ideal(a, c) * stretch;
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto linear = [&](const std::string& name, const Linear& l) {
    out.emplace_back(name + ".weight", l.weight);
    out.emplace_back(name + ".bias", l.bias);
  };
  auto mlp = [&](const std::string& name, const Mlp& m) {
    for (size_t i = 0; i < m.layers.size(); ++i) linear(name + "." + std::to_string(i), m.layers[i]);
  };
  auto norm = [&](const std::string& name, const LayerNorm& n) {
    out.emplace_back(name + ".gain", n.gain);
    out.emplace_back(name + ".bias", n.bias);
  };
  auto aggregation = [&](const std::string& name, const AggregationLayer& a) {
    mlp(name + ".latent", a.latent);
    mlp(name + ".edge", a.edge);
    mlp(name + ".score", a.score);
    mlp(name + ".node", a.node);
    norm(name + ".edge_norm", a.edge_norm);
    norm(name + ".node_norm", a.node_norm);
  };
  linear("node_embed", node_embed);
  linear("edge_embed", edge_embed);
  for (size_t l = 0; l < encoder.size(); ++l) aggregation("encoder." + std::to_string(l), encoder[l]);
  for (size_t l = 0; l < decoder_aggregation.size(); ++l) {
    const std::string name = "decoder." + std::to_string(l);
    aggregation(name + ".aggregation", decoder_aggregation[l]);
    const UpdateLayer& u = decoder_update[l];
    mlp(name + ".update.rotation_score", u.rotation_score);
    mlp(name + ".update.translation_score", u.translation_score);
    linear(name + ".update.rotation_proj", u.rotation_proj);
    mlp(name + ".update.translation_head", u.translation_head);
  }
  linear("offset_head", offset_head);
  return out;
}

std::vector<Tensor> ModelParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

long ModelParams::parameter_count() const {
  long n = 0;
  for (auto& [name, t] : named_parameters()) n += static_cast<long>(t.size());
  return n;
}

// ---------------------------------------------------------------------------
// Layers

Eigen::MatrixXd node_input_features(const BackboneStructure& s) {
  const geom::FeatureTable f = geom::extract_features(s);
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(s.length(), kNodeInputWidth);
  const geom::MaskedSeries* angles[] = {&f.phi, &f.psi, &f.omega, &f.alpha, &f.beta, &f.gamma};
  const geom::MaskedSeries* lengths[] = {&f.ca_n, &f.c_ca, &f.o_c, &f.n_c};
  for (int i = 0; i < s.length(); ++i) {
    for (int a = 0; a < 6; ++a) {
      if (!angles[a]->valid[i]) continue;
      x(i, 2 * a) = std::sin(angles[a]->values[i]);
      x(i, 2 * a + 1) = std::cos(angles[a]->values[i]);
    }
    for (int b = 0; b < 4; ++b) {
      if (lengths[b]->valid[i]) x(i, 12 + b) = lengths[b]->values[i];
    }
  }
  return x;
}

namespace {

Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  Array a(m.size());
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      a.data(), m.rows(), m.cols()) = m;
  return Tensor::from({static_cast<int>(m.rows()), static_cast<int>(m.cols())}, std::move(a));
}

}  // namespace

NodeState init_node_state(const BackboneStructure& s, const ModelParams& params) {
  validate(s);
  const DesaeConfig& cfg = params.config;
  const int L = s.length();
  const int m = cfg.virtual_points;

  NodeState state;
  state.h = params.node_embed(matrix_tensor(node_input_features(s)));

  const auto frames = geom::build_frames(s);
  Array rot(9 * L), trans(3 * L);
  for (int i = 0; i < L; ++i) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) rot[9 * i + 3 * r + c] = frames[i].rotation(r, c);
      trans[3 * i + r] = frames[i].translation(r);
    }
  }
  state.rotations = Tensor::from({L, 3, 3}, std::move(rot));
  state.translations = Tensor::from({L, 3}, std::move(trans));

  const geom::GraphTopology graph = geom::knn_graph(s, cfg.neighbors);
  state.degree = graph.degree();
  for (int i = 0; i < L; ++i) {
    for (int j : graph.neighbors[i]) {
      state.src.push_back(i);
      state.dst.push_back(j);
    }
  }

  // Edge geometry with all virtual points at zero: only vec(R_ij) and distance survive.
  const int E = state.edges();
  const int width = edge_geometry_width(m);
  Eigen::MatrixXd edge_in = Eigen::MatrixXd::Zero(E, width);
  for (int r = 0; r < E; ++r) {
    const auto& fi = frames[state.src[r]];
    const auto& fj = frames[state.dst[r]];
    const Eigen::Matrix3d rij = fi.rotation.transpose() * fj.rotation;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) edge_in(r, width - 10 + 3 * a + b) = rij(a, b);
    edge_in(r, width - 1) = (fj.translation - fi.translation).norm() * kLengthScale;
  }
  state.e = E > 0 ? params.edge_embed(matrix_tensor(edge_in))
                  : Tensor::zeros({0, cfg.hidden_dim});
  return state;
}

NodeState frame_aggregation(const NodeState& st, const AggregationLayer& layer, int m) {
  using namespace ad;
  NodeState out = st;
  const int L = st.length(), E = st.edges(), k = st.degree, D = st.h.dim(1);
  if (E == 0) {
    out.h = layer.node_norm(st.h + layer.node(st.h));
    return out;
  }
  const Tensor Ri = gather(st.rotations, st.src);
  const Tensor Rj = gather(st.rotations, st.dst);
  const Tensor Rij = matmul(transpose(Ri), Rj);  // R_i^T R_j
  const Tensor delta = (gather(st.translations, st.dst) - gather(st.translations, st.src)) * kLengthScale;
  const Tensor tij = matmul(reshape(delta, {E, 1, 3}), Ri);  // (R_i^T delta)^T

  // Edge virtual points, moved by the relative pose and kept alongside.
  const Tensor z_edge = reshape(layer.latent(st.e), {E, m, 3});
  const Tensor moved = matmul(z_edge, transpose(Rij)) + tij;
  const Tensor p = concat({reshape(moved, {E, 3 * m}), reshape(z_edge, {E, 3 * m})}, 1);

  // Node virtual points of j expressed in frame i, dotted with those of i.
  const Tensor z_node = reshape(layer.latent(st.h), {L, m, 3});
  const Tensor zj_in_i = matmul(gather(z_node, st.dst), transpose(Rij));
  const Tensor q = reshape(matmul(gather(z_node, st.src), transpose(zj_in_i)), {E, m * m});

  const Tensor dist = reshape(norm(delta, 1), {E, 1});
  const Tensor edge_in = concat({st.e, p, q, reshape(Rij, {E, 9}), dist}, 1);
  out.e = layer.edge_norm(st.e + layer.edge(edge_in));

  const Tensor logits = layer.score(concat({gather(st.h, st.src), out.e}, 1));
  const Tensor weights = reshape(softmax(reshape(logits, {L, k}), 1), {E, 1});
  const Tensor aggregated = sum(reshape(weights * out.e, {L, k, D}), 1);
  out.h = layer.node_norm(st.h + layer.node(st.h + aggregated));
  return out;
}

Tensor quat_to_rot(const Tensor& quaternions) {
  if (quaternions.rank() != 2 || quaternions.dim(1) != 4) {
    throw Error(ErrorCode::ShapeMismatch, "quat_to_rot expects [N,4]");
  }
  const int n = quaternions.dim(0);
  Array out(9 * n);
  const Array& q = quaternions.value();
  for (int i = 0; i < n; ++i) {
    const Quat<double> qi(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]);
    const Eigen::Matrix3d r = nn::quat_to_rot<double>(qi);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) out[9 * i + 3 * a + b] = r(a, b);
  }
  return ad::make_op("quat_to_rot", {n, 3, 3}, std::move(out), {quaternions},
                     [quaternions, n](const Array& g, std::span<Array* const> grads) {
                       const Array& q = quaternions.value();
                       for (int i = 0; i < n; ++i) {
                         const Quat<double> qi(q[4 * i], q[4 * i + 1], q[4 * i + 2], q[4 * i + 3]);
                         const double len = qi.norm();
                         if (!(len >= kMinQuaternionNorm)) continue;
                         const Quat<double> u = qi / len;
                         const Eigen::Matrix<double, 9, 1> gr = g.segment(9 * i, 9).matrix();
                         const Quat<double> gu = unit_quat_to_rot_jacobian<double>(u).transpose() * gr;
                         // Through u = q / |q|.
                         const Quat<double> gq = (gu - u * u.dot(gu)) / len;
                         grads[0]->segment(4 * i, 4) += gq.array();
                       }
                     });
}

NodeState frame_updating(const NodeState& st, const UpdateLayer& layer) {
  using namespace ad;
  NodeState out = st;
  const int L = st.length(), E = st.edges(), k = st.degree;
  if (E == 0) return out;

  const Tensor context = concat({gather(st.h, st.src), st.e}, 1);
  auto attention = [&](const Mlp& score) {
    return reshape(softmax(reshape(score(context), {L, k}), 1), {E, 1});
  };

  const Tensor Ri = gather(st.rotations, st.src);
  const Tensor Rj = gather(st.rotations, st.dst);
  const Tensor Rij = matmul(transpose(Ri), Rj);
  const Tensor pooled = sum(reshape(attention(layer.rotation_score) * reshape(Rij, {E, 9}), {L, k, 9}), 1);
  const Tensor delta_rot = nn::quat_to_rot(layer.rotation_proj(pooled));
  out.rotations = matmul(st.rotations, delta_rot);

  const Tensor ti = gather(st.translations, st.src);
  const Tensor tj = gather(st.translations, st.dst);
  // Position of i seen from frame j, plus a learned correction.
  const Tensor local = reshape(matmul(reshape(ti - tj, {E, 1, 3}), Rj), {E, 3}) +
                       layer.translation_head(st.e);
  const Tensor proposal = reshape(matmul(reshape(local, {E, 1, 3}), transpose(Rj)), {E, 3}) + tj;
  out.translations = sum(reshape(attention(layer.translation_score) * proposal, {L, k, 3}), 1);
  return out;
}

Tensor decode_coordinates(const NodeState& state, const ModelParams& params) {
  using namespace ad;
  const int L = state.length();
  // Radial squashing keeps |offset| below the bound while leaving directions free.
  const Tensor raw = reshape(params.offset_head(state.h), {L, kAtomsPerResidue, 3});
  const Tensor radius = sqrt(sum(square(raw), 2) + 1e-12);
  const Tensor scale = tanh(radius) * params.config.offset_bound / radius;
  const Tensor offsets = raw * reshape(scale, {L, kAtomsPerResidue, 1});
  return matmul(offsets, transpose(state.rotations)) + reshape(state.translations, {L, 1, 3});
}

NodeState encode(const BackboneStructure& s, const ModelParams& params) {
  NodeState state = init_node_state(s, params);
  for (const auto& layer : params.encoder) {
    state = frame_aggregation(state, layer, params.config.virtual_points);
  }
  return state;
}

ForwardResult forward(const BackboneStructure& corrupted, const ModelParams& params) {
  NodeState state = encode(corrupted, params);
  ForwardResult result;
  for (size_t l = 0; l < params.decoder_aggregation.size(); ++l) {
    state = frame_aggregation(state, params.decoder_aggregation[l], params.config.virtual_points);
    state = frame_updating(state, params.decoder_update[l]);
    result.layer_coords.push_back(decode_coordinates(state, params));
  }
  result.final = corrupted;
  const Array& last = result.layer_coords.back().value();
  result.final.coords = Eigen::Map<const CoordMatrix>(last.data(), 4 * corrupted.length(), 3);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'E', 'S', 'A', 'E', 'C', 'K', 'P'};

void write_bytes_le(std::ostream& out, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(buf, bytes);
}

std::uint64_t read_bytes_le(std::istream& in, int bytes) {
  unsigned char buf[8] = {};
  in.read(reinterpret_cast<char*>(buf), bytes);
  if (!in) throw Error(ErrorCode::IoFailure, "checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_f64(std::ostream& out, double v) { write_bytes_le(out, std::bit_cast<std::uint64_t>(v), 8); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_bytes_le(in, 8)); }
void write_u64(std::ostream& out, std::uint64_t v) { write_bytes_le(out, v, 8); }
std::uint64_t read_u64(std::istream& in) { return read_bytes_le(in, 8); }

void write_params(std::ostream& out, const ModelParams& params) {
  const DesaeConfig& c = params.config;
  out.write(kMagic, sizeof(kMagic));
  write_bytes_le(out, kCheckpointVersion, 4);
  for (int v : {c.encoder_layers, c.decoder_layers, c.hidden_dim, c.virtual_points, c.neighbors}) {
    write_bytes_le(out, static_cast<std::uint32_t>(v), 4);
  }
  write_bytes_le(out, c.atom_offsets_head ? 1 : 0, 1);
  write_f64(out, c.offset_bound);
  write_u64(out, static_cast<std::uint64_t>(params.parameter_count()));
  for (const auto& [name, t] : params.named_parameters()) {
    for (double v : t.value()) write_f64(out, v);
  }
}

ModelParams read_params(std::istream& in, const DesaeConfig* expected) {
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::IoFailure, "not a DeSAE checkpoint (bad magic)");
  }
  const auto version = read_bytes_le(in, 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::IoFailure, "unsupported checkpoint version " + std::to_string(version));
  }
  DesaeConfig c;
  for (int* field : {&c.encoder_layers, &c.decoder_layers, &c.hidden_dim, &c.virtual_points, &c.neighbors}) {
    *field = static_cast<int>(static_cast<std::int32_t>(read_bytes_le(in, 4)));
  }
  c.atom_offsets_head = read_bytes_le(in, 1) != 0;
  c.offset_bound = read_f64(in);
  if (expected && !(*expected == c)) {
    throw Error(ErrorCode::ConfigMismatch, "checkpoint model config differs from the requested one");
  }
  ModelParams params = ModelParams::init(c, 0);
  const auto count = read_u64(in);
  if (count != static_cast<std::uint64_t>(params.parameter_count())) {
    throw Error(ErrorCode::ConfigMismatch, "checkpoint parameter count does not match its config");
  }
  for (auto& [name, t] : params.named_parameters()) {
    Tensor tensor = t;
    for (auto& v : tensor.mutable_value()) v = read_f64(in);
  }
  return params;
}

void save_model(const ModelParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
  write_params(out, params);
  write_bytes_le(out, 0, 1);
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

ModelParams load_model(const std::filesystem::path& path, const DesaeConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return read_params(in, expected);
}

}  // namespace desae::nn
