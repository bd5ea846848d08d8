// Acceptance gate: one PASS/FAIL line per criterion. Criterion numbers given
// on the command line restrict the run to those criteria.

#include "desae/backbone_io.hpp"
#include "desae/geometry.hpp"
#include "desae/loss.hpp"
#include "desae/model.hpp"
#include "desae/quaternion.hpp"
#include "desae/stats.hpp"
#include "desae/training.hpp"

#include "synthetic.hpp"
#include "temp_dir.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace desae;
using ad::Array;
using ad::Shape;
using ad::Tensor;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

Eigen::Matrix3d mat3(const Array& a, int i) {
  Eigen::Matrix3d r;
  for (int x = 0; x < 3; ++x)
    for (int y = 0; y < 3; ++y) r(x, y) = a[9 * i + 3 * x + y];
  return r;
}

Array random_array(Eigen::Index n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  Array a(n);
  for (auto& v : a) v = g(rng);
  return a;
}

// ---------------------------------------------------------------- 1

Outcome equivariance() {
  Outcome o;
  const auto params = nn::ModelParams::init({}, 1);
  ad::NoGradGuard ng;
  double worst_h = 0.0, worst_x = 0.0;
  for (int t = 0; t < 25; ++t) {
    std::mt19937_64 rng(1000 + t);
    const auto s = desae::testing::make_backbone(20, 500 + t);
    const Eigen::Matrix3d g = desae::testing::random_rotation(rng);
    const Eigen::Vector3d b = desae::testing::random_translation(rng);
    const auto moved = geom::transform(s, g, b);

    const auto ea = nn::encode(s, params), eb = nn::encode(moved, params);
    worst_h = std::max({worst_h, (ea.h.value() - eb.h.value()).abs().maxCoeff(),
                        (ea.e.value() - eb.e.value()).abs().maxCoeff()});

    const auto xa = nn::forward(s, params).final, xb = nn::forward(moved, params).final;
    worst_x = std::max(worst_x, (geom::transform(xa, g, b).coords - xb.coords).cwiseAbs().maxCoeff());
  }
  o.require(worst_h <= 1e-6, "encoder invariance");
  o.require(worst_x <= 1e-4, "decoder equivariance");
  o.detail = "invariance " + fmt("%.2e", worst_h) + ", equivariance " + fmt("%.2e", worst_x) +
             (o.detail.empty() ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- 2

enum class Domain { Any, Positive, AwayFromZero };

struct Leaf {
  Shape shape;
  Domain domain = Domain::Any;
};

Array sample(Eigen::Index n, Domain d, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.3, 2.0);
  Array a(n);
  for (auto& v : a) {
    if (d == Domain::Any) v = g(rng);
    else if (d == Domain::Positive) v = u(rng);
    else v = (g(rng) < 0 ? -1.0 : 1.0) * u(rng);
  }
  return a;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

// Worst relative error of d/dx sum(f(x) * w) against central differences.
double op_gradient_error(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Leaf>& leaves,
                         std::mt19937_64& rng) {
  std::vector<Tensor> xs;
  for (const auto& l : leaves) xs.push_back(Tensor::from(l.shape, sample(ad::shape_size(l.shape), l.domain, rng), true));
  const Tensor out = f(xs);
  const Tensor w = Tensor::from(out.shape(), random_array(out.size(), rng));
  ad::backward(ad::sum(out * w));
  double worst = 0.0;
  for (auto& x : xs) {
    const Array analytic = x.grad();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double keep = x.value()[i];
      ad::NoGradGuard ng;
      x.mutable_value()[i] = keep + 1e-5;
      const double up = ad::sum(f(xs) * w).item();
      x.mutable_value()[i] = keep - 1e-5;
      const double down = ad::sum(f(xs) * w).item();
      x.mutable_value()[i] = keep;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / 2e-5));
    }
  }
  return worst;
}

// Worst relative error over every parameter whose name starts with one of
// `prefixes`, for a scalar objective rebuilt from scratch on each call.
double param_gradient_error(const nn::ModelParams& params, const std::vector<std::string>& prefixes,
                            const std::function<Tensor()>& objective, int* checked) {
  for (auto [name, p] : params.named_parameters()) p.zero_grad();
  ad::backward(objective());
  double worst = 0.0;
  for (auto [name, p] : params.named_parameters()) {
    if (std::none_of(prefixes.begin(), prefixes.end(), [&](const auto& x) { return name.rfind(x, 0) == 0; })) continue;
    const Array analytic = p.grad();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const double keep = p.value()[i];
      ad::NoGradGuard ng;
      p.mutable_value()[i] = keep + 1e-5;
      const double up = objective().item();
      p.mutable_value()[i] = keep - 1e-5;
      const double down = objective().item();
      p.mutable_value()[i] = keep;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / 2e-5));
      ++*checked;
    }
  }
  return worst;
}

Outcome gradients() {
  Outcome o;
  using V = std::vector<Tensor>;
  const std::vector<int> index{2, 0, 2, 1, 3};
  const std::vector<std::pair<std::string, std::pair<std::function<Tensor(const V&)>, std::vector<Leaf>>>> ops{
      {"add", {[](const V& x) { return x[0] + x[1]; }, {{{3, 4}}, {{3, 4}}}}},
      {"add_broadcast", {[](const V& x) { return x[0] + x[1]; }, {{{3, 4}}, {{4}}}}},
      {"sub", {[](const V& x) { return x[0] - x[1]; }, {{{3, 4}}, {{3, 4}}}}},
      {"mul", {[](const V& x) { return x[0] * x[1]; }, {{{3, 4}}, {{3, 4}}}}},
      {"div", {[](const V& x) { return x[0] / x[1]; }, {{{3, 4}}, {{3, 4}, Domain::AwayFromZero}}}},
      {"atan2", {[](const V& x) { return ad::atan2(x[0], x[1]); }, {{{6}, Domain::AwayFromZero}, {{6}, Domain::AwayFromZero}}}},
      {"neg", {[](const V& x) { return -x[0]; }, {{{5}}}}},
      {"scalar", {[](const V& x) { return 2.5 * x[0] + 1.0; }, {{{5}}}}},
      {"relu", {[](const V& x) { return ad::relu(x[0]); }, {{{8}, Domain::AwayFromZero}}}},
      {"sigmoid", {[](const V& x) { return ad::sigmoid(x[0]); }, {{{8}}}}},
      {"tanh", {[](const V& x) { return ad::tanh(x[0]); }, {{{8}}}}},
      {"exp", {[](const V& x) { return ad::exp(x[0]); }, {{{8}}}}},
      {"log", {[](const V& x) { return ad::log(x[0]); }, {{{8}, Domain::Positive}}}},
      {"sqrt", {[](const V& x) { return ad::sqrt(x[0]); }, {{{8}, Domain::Positive}}}},
      {"square", {[](const V& x) { return ad::square(x[0]); }, {{{8}}}}},
      {"matmul", {[](const V& x) { return ad::matmul(x[0], x[1]); }, {{{3, 4}}, {{4, 5}}}}},
      {"transpose", {[](const V& x) { return ad::transpose(x[0]); }, {{{3, 4}}}}},
      {"reshape", {[](const V& x) { return ad::reshape(x[0], {4, 3}); }, {{{3, 4}}}}},
      {"concat", {[](const V& x) { return ad::concat({x[0], x[1]}, 1); }, {{{3, 2}}, {{3, 4}}}}},
      {"slice", {[](const V& x) { return ad::slice(x[0], 1, 1, 3); }, {{{3, 4}}}}},
      {"gather", {[&](const V& x) { return ad::gather(x[0], index); }, {{{4, 3}}}}},
      {"scatter_add", {[&](const V& x) { return ad::scatter_add(x[0], index, 4); }, {{{5, 3}}}}},
      {"sum", {[](const V& x) { return ad::sum(x[0]); }, {{{3, 4}}}}},
      {"sum_axis", {[](const V& x) { return ad::sum(x[0], 1); }, {{{3, 4}}}}},
      {"mean", {[](const V& x) { return ad::mean(x[0]); }, {{{3, 4}}}}},
      {"mean_axis", {[](const V& x) { return ad::mean(x[0], 0); }, {{{3, 4}}}}},
      {"softmax", {[](const V& x) { return ad::softmax(x[0], 1); }, {{{3, 5}}}}},
      {"layer_norm", {[](const V& x) { return ad::layer_norm(x[0]); }, {{{3, 6}}}}},
      {"norm", {[](const V& x) { return ad::norm(x[0], 1); }, {{{4, 3}}}}},
      {"cross", {[](const V& x) { return ad::cross(x[0], x[1]); }, {{{4, 3}}, {{4, 3}}}}},
      {"quat_to_rot", {[](const V& x) { return nn::quat_to_rot(x[0]); }, {{{4, 4}}}}},
  };
  std::mt19937_64 rng(2);
  double worst_op = 0.0;
  std::string worst_name;
  for (const auto& [name, op] : ops)
    for (int trial = 0; trial < 10; ++trial) {
      const double e = op_gradient_error(op.first, op.second, rng);
      if (e > worst_op) worst_op = e, worst_name = name;
      o.require(e <= 1e-4, "op " + name + " " + fmt("%.2e", e));
    }

  nn::DesaeConfig cfg;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  cfg.hidden_dim = 16;
  cfg.virtual_points = 2;
  cfg.neighbors = 2;
  const auto params = nn::ModelParams::init(cfg, 3);
  const auto s = desae::testing::make_backbone(5, 4);
  const auto corrupted = geom::corrupt_structure(s, 0.4, 5).structure;
  const loss::LossContext context(s, {.fragment_size = 3, .pair_neighbors = 2, .neighbors = 2});

  const auto state0 = nn::init_node_state(s, params);
  const Array wh = random_array(state0.h.size(), rng), we = random_array(state0.e.size(), rng);
  const Array wr = random_array(state0.rotations.size(), rng), wt = random_array(state0.translations.size(), rng);
  const Array wx = random_array(s.length() * 12, rng);
  auto weighted = [](const Tensor& t, const Array& w) { return ad::sum(t * Tensor::from(t.shape(), w)); };

  int checked = 0;
  std::vector<std::pair<std::string, double>> layer_errors;
  layer_errors.emplace_back(
      "frame_aggregation",
      param_gradient_error(params, {"node_embed", "edge_embed", "encoder.0."}, [&] {
        const auto out = nn::frame_aggregation(nn::init_node_state(s, params), params.encoder[0], cfg.virtual_points);
        return weighted(out.h, wh) + weighted(out.e, we);
      }, &checked));
  layer_errors.emplace_back(
      "frame_updating", param_gradient_error(params, {"decoder.0.update."}, [&] {
        const auto out = nn::frame_updating(nn::init_node_state(s, params), params.decoder_update[0]);
        return weighted(out.rotations, wr) + weighted(out.translations, wt);
      }, &checked));
  layer_errors.emplace_back(
      "decode", param_gradient_error(params, {"offset_head"}, [&] {
        return weighted(nn::decode_coordinates(nn::init_node_state(s, params), params), wx);
      }, &checked));
  layer_errors.emplace_back(
      "composite_loss_end_to_end", param_gradient_error(params, {""}, [&] {
        const auto out = nn::forward(corrupted, params);
        return loss::composite_loss(out.layer_coords, context).total();
      }, &checked));

  // Composite loss with respect to the predicted coordinates directly.
  {
    std::mt19937_64 prng(6);
    std::normal_distribution<double> g(0.0, 0.4);
    Array x = loss::coords_tensor(s.coords).value();
    for (auto& v : x) v += g(prng);
    Tensor pred = Tensor::from({s.length(), 4, 3}, x, true);
    const std::vector<Tensor> one{pred};
    ad::backward(loss::composite_loss(one, context).total());
    const Array analytic = pred.grad();
    double worst = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      auto value = [&](double d) {
        Array y = x;
        y[i] += d;
        const std::vector<Tensor> p{Tensor::from({s.length(), 4, 3}, y)};
        return loss::composite_loss(p, context).total().item();
      };
      worst = std::max(worst, relative_error(analytic[i], (value(1e-5) - value(-1e-5)) / 2e-5));
      ++checked;
    }
    layer_errors.emplace_back("composite_loss", worst);
  }

  double worst_layer = 0.0;
  for (const auto& [name, e] : layer_errors) {
    worst_layer = std::max(worst_layer, e);
    o.require(e <= 1e-3, name + " " + fmt("%.2e", e));
  }
  const std::string summary = std::to_string(ops.size()) + " ops worst " + fmt("%.2e", worst_op) + " (" + worst_name +
                              "), layers/loss worst " + fmt("%.2e", worst_layer) + " over " +
                              std::to_string(checked) + " parameters";
  o.detail = o.detail.empty() ? summary : summary + "; " + o.detail;
  return o;
}

// ---------------------------------------------------------------- 3

// Horn's closed-form superposition residual.
double horn_rmsd(const Eigen::MatrixX3d& a_in, const Eigen::MatrixX3d& b_in) {
  const Eigen::MatrixX3d a = a_in.rowwise() - a_in.colwise().mean();
  const Eigen::MatrixX3d b = b_in.rowwise() - b_in.colwise().mean();
  const Eigen::Matrix3d s = a.transpose() * b;
  Eigen::Matrix4d n;
  n << s(0, 0) + s(1, 1) + s(2, 2), s(1, 2) - s(2, 1), s(2, 0) - s(0, 2), s(0, 1) - s(1, 0),  //
      s(1, 2) - s(2, 1), s(0, 0) - s(1, 1) - s(2, 2), s(0, 1) + s(1, 0), s(2, 0) + s(0, 2),    //
      s(2, 0) - s(0, 2), s(0, 1) + s(1, 0), -s(0, 0) + s(1, 1) - s(2, 2), s(1, 2) + s(2, 1),   //
      s(0, 1) - s(1, 0), s(2, 0) + s(0, 2), s(1, 2) + s(2, 1), -s(0, 0) - s(1, 1) + s(2, 2);
  const double lambda = Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d>(n).eigenvalues().maxCoeff();
  return std::sqrt(std::max(0.0, a.squaredNorm() + b.squaredNorm() - 2 * lambda) / static_cast<double>(a.rows()));
}

std::vector<int> by_ca_distance(const BackboneStructure& t, int i) {
  std::vector<int> order;
  for (int j = 0; j < t.length(); ++j)
    if (j != i) order.push_back(j);
  auto d = [&](int j) { return (t.atom(i, Atom::CA) - t.atom(j, Atom::CA)).squaredNorm(); };
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return d(x) < d(y); });
  return order;
}

double group_rmsd(const CoordMatrix& pred, const BackboneStructure& t, const std::vector<int>& residues) {
  Eigen::MatrixX3d a(4 * residues.size(), 3), b(4 * residues.size(), 3);
  int r = 0;
  for (int res : residues)
    for (int atom = 0; atom < 4; ++atom, ++r) {
      a.row(r) = pred.row(4 * res + atom);
      b.row(r) = t.coords.row(4 * res + atom);
    }
  return horn_rmsd(a, b);
}

std::vector<int> fragment(const BackboneStructure& t, int i, int c) {
  std::vector<int> f{i};
  for (int j : by_ca_distance(t, i))
    if (static_cast<int>(f.size()) < c) f.push_back(j);
  return f;
}

Outcome loss_oracles() {
  Outcome o;
  std::mt19937_64 rng(3);
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const int n = std::uniform_int_distribution<int>(2, 8)(rng);
    const int c = std::uniform_int_distribution<int>(1, n + 1)(rng);
    const int k = std::uniform_int_distribution<int>(1, n + 1)(rng);
    const auto t = desae::testing::make_backbone(n, 3000 + inst);
    CoordMatrix p = t.coords;
    std::normal_distribution<double> g(0.0, 0.5);
    for (Eigen::Index i = 0; i < p.size(); ++i) p.data()[i] += g(rng);

    double frag = 0.0, pair = 0.0, nbr = 0.0, dist = 0.0;
    int pairs = 0, dpairs = 0;
    for (int i = 0; i < n; ++i) {
      frag += group_rmsd(p, t, fragment(t, i, c));
      auto near = by_ca_distance(t, i);
      near.resize(std::min<size_t>(k, near.size()));
      for (int j : near) {
        auto joined = fragment(t, i, c);
        const auto fj = fragment(t, j, c);
        joined.insert(joined.end(), fj.begin(), fj.end());
        pair += group_rmsd(p, t, joined);
        ++pairs;
      }
      if (!near.empty()) nbr += group_rmsd(p, t, near);
      for (int j = i + 1; j < n; ++j) {
        const double dp = (p.row(4 * i + 1) - p.row(4 * j + 1)).norm();
        const double dt = (t.coords.row(4 * i + 1) - t.coords.row(4 * j + 1)).norm();
        dist += (dp - dt) * (dp - dt);
        ++dpairs;
      }
    }
    const double errs[] = {
        std::abs(loss::loss_fragment(p, t, c) - frag / n),
        std::abs(loss::loss_pair(p, t, k, c) - pair / pairs),
        std::abs(loss::loss_neighbor(p, t, k) - nbr / n),
        std::abs(loss::loss_distance(p, t) - dist / dpairs),
    };
    for (double e : errs) worst = std::max(worst, e);
  }
  o.require(worst <= 1e-9, "oracle mismatch");
  o.detail = "50 instances, worst |diff| " + fmt("%.2e", worst) + (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- 4

Outcome quaternions() {
  Outcome o;
  using Q = nn::Quat<double>;
  const double h = std::cos(std::numbers::pi / 4), z = std::sin(std::numbers::pi / 4);
  Eigen::Matrix3d rz, flip = Eigen::Vector3d(1, -1, -1).asDiagonal();
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  o.require((nn::quat_to_rot<double>(Q(1, 0, 0, 0)) - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= 1e-12,
            "identity case");
  o.require((nn::quat_to_rot<double>(Q(0, 1, 0, 0)) - flip).cwiseAbs().maxCoeff() <= 1e-12, "x half-turn case");
  o.require((nn::quat_to_rot<double>(Q(h, 0, 0, z)) - rz).cwiseAbs().maxCoeff() <= 1e-12, "z quarter-turn case");

  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0.0, 3.0);
  double worst_orth = 0.0, worst_sign = 0.0;
  Array batch(4000);
  for (int i = 0; i < 1000; ++i) {
    const Q q(g(rng), g(rng), g(rng), g(rng));
    const Eigen::Matrix3d r = nn::quat_to_rot<double>(q);
    worst_orth = std::max({worst_orth, (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(),
                           std::abs(r.determinant() - 1.0)});
    worst_sign = std::max(worst_sign, (nn::quat_to_rot<double>(Q(-q)) - r).cwiseAbs().maxCoeff());
    for (int c = 0; c < 4; ++c) batch[4 * i + c] = q(c);
  }
  // The batched tensor version used by the model.
  const Array rt = nn::quat_to_rot(Tensor::from({1000, 4}, batch)).value();
  const Array rn = nn::quat_to_rot(Tensor::from({1000, 4}, Array(-batch))).value();
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Matrix3d r = mat3(rt, i);
    worst_orth = std::max({worst_orth, (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff(),
                           std::abs(r.determinant() - 1.0)});
  }
  worst_sign = std::max(worst_sign, (rt - rn).abs().maxCoeff());
  o.require(worst_orth <= 1e-10, "orthonormality");
  o.require(worst_sign == 0.0, "q and -q differ");
  const std::string summary = "3 closed-form cases, orthonormality " + fmt("%.2e", worst_orth) +
                              ", |R(q)-R(-q)| " + fmt("%.1e", worst_sign);
  o.detail = o.detail.empty() ? summary : summary + "; " + o.detail;
  return o;
}

// ---------------------------------------------------------------- 5

Outcome corruption() {
  Outcome o;
  std::mt19937_64 rng(5);
  double worst = 0.0;
  long altered_total = 0;
  for (int t = 0; t < 100; ++t) {
    const int length = std::uniform_int_distribution<int>(5, 150)(rng);
    auto s = desae::testing::make_backbone(length, 5000 + t);
    // Knock out a few atoms so some residues are not eligible.
    for (int i = 0; i < length; ++i)
      if (std::uniform_real_distribution<double>(0, 1)(rng) < 0.05)
        s.atom_mask[i][std::uniform_int_distribution<int>(0, 3)(rng)] = false;
    int eligible = 0;
    for (int i = 0; i < length; ++i) eligible += std::all_of(s.atom_mask[i].begin(), s.atom_mask[i].end(), [](bool b) { return b; });
    if (eligible == 0) continue;
    const int expected = std::max(1, (eligible + 9) / 10);

    const auto c = geom::corrupt_structure(s, 0.10, 9000 + t);
    std::set<int> residues;
    std::vector<bool> touched(s.coords.rows(), false);
    for (const auto& site : c.sites) {
      residues.insert(site.residue);
      o.require(std::all_of(s.atom_mask[site.residue].begin(), s.atom_mask[site.residue].end(), [](bool b) { return b; }),
                "ineligible residue corrupted");
      const int row = 4 * site.residue + static_cast<int>(site.atom);
      Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
      for (int a = 0; a < 4; ++a)
        if (a != static_cast<int>(site.atom)) centroid += s.coords.row(4 * site.residue + a);
      centroid /= 3.0;
      worst = std::max(worst, (c.structure.coords.row(row) - centroid).cwiseAbs().maxCoeff());
      touched[row] = true;
    }
    o.require(static_cast<int>(c.sites.size()) == expected && static_cast<int>(residues.size()) == expected,
              "structure " + std::to_string(t) + ": " + std::to_string(c.sites.size()) + " sites, expected " +
                  std::to_string(expected));
    altered_total += static_cast<long>(c.sites.size());
    for (Eigen::Index r = 0; r < s.coords.rows(); ++r)
      if (!touched[r])
        o.require(std::memcmp(s.coords.row(r).eval().data(), c.structure.coords.row(r).eval().data(), 3 * sizeof(double)) == 0,
                  "untouched coordinate changed");
    o.require(c.structure.atom_mask == s.atom_mask && c.structure.sequence == s.sequence, "metadata changed");
  }
  o.require(worst <= 1e-12, "centroid " + fmt("%.2e", worst));
  const std::string summary = "100 structures, " + std::to_string(altered_total) + " sites, centroid error " + fmt("%.2e", worst);
  o.detail = o.detail.empty() ? summary : summary + "; " + o.detail;
  return o;
}

// ---------------------------------------------------------------- 6

double ca_rmsd(const BackboneStructure& a, const BackboneStructure& b) {
  Eigen::MatrixX3d x(a.length(), 3), y(b.length(), 3);
  for (int i = 0; i < a.length(); ++i) {
    x.row(i) = a.atom(i, Atom::CA);
    y.row(i) = b.atom(i, Atom::CA);
  }
  return horn_rmsd(x, y);
}

Outcome overfit() {
  Outcome o;
  train::RunConfig cfg;
  cfg.model.hidden_dim = 32;
  cfg.model.encoder_layers = 2;
  cfg.model.decoder_layers = 2;
  cfg.train.epochs = 400;
  cfg.train.batch_size = 5;
  cfg.train.lr_init = 2e-3;
  cfg.train.seed = 6;
  if (const char* e = std::getenv("DESAE_OVERFIT_STEPS")) cfg.train.epochs = std::atoi(e);

  std::vector<train::Example> data;
  for (int i = 0; i < 5; ++i) {
    auto s = desae::testing::make_backbone(40 + 5 * i, 6000 + i);
    s.id = "overfit" + std::to_string(i);
    data.emplace_back(s.id, s, cfg.train.loss);
  }
  auto probe = [&](const nn::ModelParams& params) {
    ad::NoGradGuard ng;
    double worst = 0.0;
    for (const auto& ex : data) {
      const auto corrupted = geom::corrupt_structure(ex.target, cfg.train.corruption_fraction,
                                                     train::corruption_seed(99, 0, ex.id)).structure;
      worst = std::max(worst, ca_rmsd(nn::forward(corrupted, params).final, ex.target));
    }
    return worst;
  };
  const double before = probe(nn::ModelParams::init(cfg.model, cfg.train.seed));
  const auto r = train::train_examples(data, {}, cfg, {.write_files = false});
  const double after = probe(r.state.params);
  const double l0 = r.log.front().train.total, l1 = r.log.back().train.total;
  o.require(after < 1.0, "CA RMSD");
  o.require(l1 <= 0.5 * l0, "loss decrease");
  o.detail = std::to_string(r.state.step) + " steps, loss " + fmt("%.4f", l0) + " -> " + fmt("%.4f", l1) +
             ", worst CA RMSD " + fmt("%.3f", before) + " -> " + fmt("%.3f", after) + " A" +
             (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- 7

std::vector<geom::FeatureTable> corpus(std::uint64_t seed, int count, double jitter = 0.0) {
  std::vector<geom::FeatureTable> out;
  std::mt19937_64 rng(seed * 7919 + 1);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < count; ++i) {
    auto t = geom::extract_features(desae::testing::make_backbone(80, seed * 100 + i));
    if (jitter > 0.0)
      for (auto* series : {&t.phi, &t.psi, &t.omega, &t.alpha, &t.beta, &t.gamma})
        for (auto& v : series->values) v = geom::wrap_angle(v + jitter * g(rng));
    out.push_back(std::move(t));
  }
  return out;
}

Outcome stats_identities() {
  Outcome o;
  double worst = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto a = corpus(seed, 5 + 5 * static_cast<int>(seed));
    for (const auto& f : stats::corpus_compare(a, a).features)
      worst = std::max({worst, std::abs(f.kl), std::abs(f.wasserstein), std::abs(f.euclidean), std::abs(f.cosine - 1.0)});
  }
  o.require(worst <= 1e-12, "self comparison");
  const auto base = corpus(2, 60);
  std::vector<double> kl;
  for (double sigma : {0.01, 0.05, 0.1}) {
    const auto report = stats::corpus_compare(base, corpus(2, 60, sigma));
    kl.push_back(report.features[static_cast<int>(geom::Feature::Phi)].kl);
  }
  o.require(kl[0] < kl[1] && kl[1] < kl[2], "KL not monotone");
  o.detail = "self-comparison worst " + fmt("%.1e", worst) + ", phi KL " + fmt("%.4f", kl[0]) + " < " +
             fmt("%.4f", kl[1]) + " < " + fmt("%.4f", kl[2]) + (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- 8

Outcome geometry_anchors() {
  Outcome o;
  std::vector<BackboneStructure> set;
  std::string source = "synthetic";
  if (const char* dir = std::getenv("DESAE_EXPERIMENTAL_DIR")) {
    for (const auto& f : io::list_structure_files(dir)) set.push_back(io::parse_structure(f));
    source = dir;
  } else {
    desae::testing::SyntheticOptions opts;
    opts.length_noise = 0.02;
    for (int i = 0; i < 20; ++i) set.push_back(desae::testing::make_backbone(120, 8000 + i, opts));
  }
  o.require(set.size() >= 20, "fewer than 20 structures");
  double c_ca = 0.0, ca_n = 0.0;
  long n_c_ca = 0, n_ca_n = 0, omega_total = 0, omega_trans = 0;
  for (const auto& s : set) {
    const auto t = geom::extract_features(s);
    for (double v : t.c_ca.valid_values()) c_ca += v, ++n_c_ca;
    for (double v : t.ca_n.valid_values()) ca_n += v, ++n_ca_n;
    for (double w : t.omega.valid_values()) {
      ++omega_total;
      if (std::abs(geom::wrap_angle(w - std::numbers::pi)) < 0.5) ++omega_trans;
    }
  }
  c_ca /= static_cast<double>(std::max(1L, n_c_ca));
  ca_n /= static_cast<double>(std::max(1L, n_ca_n));
  const double trans = static_cast<double>(omega_trans) / static_cast<double>(std::max(1L, omega_total));
  o.require(c_ca >= 1.50 && c_ca <= 1.55, "C-CA mean");
  o.require(ca_n >= 1.43 && ca_n <= 1.49, "CA-N mean");
  o.require(trans > 0.90, "omega mass near pi");
  o.detail = std::to_string(set.size()) + " " + source + " structures, C-CA " + fmt("%.4f", c_ca) + ", CA-N " +
             fmt("%.4f", ca_n) + ", omega near pi " + fmt("%.3f", trans) + (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- 9

Outcome round_trips() {
  Outcome o;
  desae::testing::TempDir dir;
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    auto s = desae::testing::make_backbone(std::uniform_int_distribution<int>(1, 200)(rng), 9000 + i);
    s = geom::transform(s, desae::testing::random_rotation(rng), desae::testing::random_translation(rng, 200.0));
    if (s.length() > 3) s.atom_mask[2][3] = false;
    io::write_structure(s, dir / "s.pdb");
    const auto back = io::parse_structure(dir / "s.pdb");
    if (back.length() != s.length() || back.sequence != s.sequence || back.atom_mask != s.atom_mask) {
      o.require(false, "structure " + std::to_string(i) + " metadata");
      continue;
    }
    for (int r = 0; r < s.length(); ++r)
      for (int a = 0; a < 4; ++a)
        if (s.atom_mask[r][a])
          worst = std::max(worst, (s.coords.row(4 * r + a) - back.coords.row(4 * r + a)).cwiseAbs().maxCoeff());
  }
  o.require(worst <= 5e-4, "PDB round trip");

  const auto params = nn::ModelParams::init({}, 9);
  nn::save_model(params, dir / "m.ckpt");
  const auto loaded = nn::load_model(dir / "m.ckpt");
  ad::NoGradGuard ng;
  bool bitwise = true;
  for (int i = 0; i < 3; ++i) {
    const auto s = desae::testing::make_backbone(30 + 10 * i, 9500 + i);
    const auto a = nn::forward(s, params), b = nn::forward(s, loaded);
    for (size_t l = 0; l < a.layer_coords.size(); ++l)
      bitwise = bitwise && std::memcmp(a.layer_coords[l].value().data(), b.layer_coords[l].value().data(),
                                       sizeof(double) * a.layer_coords[l].size()) == 0;
  }
  o.require(bitwise, "checkpoint forward not bitwise");
  o.detail = "100 PDB round trips, worst " + fmt("%.2e", worst) + " A; checkpoint forward " +
             (bitwise ? "bitwise identical" : "differs") + (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

// ---------------------------------------------------------------- 10

Outcome parameter_budget() {
  Outcome o;
  const long count = nn::ModelParams::init({}, 0).parameter_count();
  o.require(std::abs(static_cast<double>(count) - 5.9e6) <= 0.15 * 5.9e6, "outside 5.9M +-15%");
  o.detail = std::to_string(count) + " parameters (" + fmt("%+.1f%%", 100.0 * (count - 5.9e6) / 5.9e6) +
             " vs 5.9M)" + (o.pass ? "" : " (" + o.detail + ")");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"equivariance", equivariance},
      {"gradients", gradients},
      {"loss oracles", loss_oracles},
      {"quaternion rotation", quaternions},
      {"corruption", corruption},
      {"overfit", overfit},
      {"stats identities", stats_identities},
      {"geometry anchors", geometry_anchors},
      {"round trips", round_trips},
      {"parameter budget", parameter_budget},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int number = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(number)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("[%s] criterion %2d %-20s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", number, criteria[i].first.c_str(),
                o.detail.c_str(), seconds);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d failed\n", failed);
  return failed == 0 ? 0 : 1;
}
