#include "desae/loss.hpp"

#include "desae/geometry.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

namespace desae::loss {

using ad::Array;

Tensor coords_tensor(const CoordMatrix& coords) {
  const int n = static_cast<int>(coords.rows() / 4);
  Array a = Eigen::Map<const Array>(coords.data(), coords.size());
  return Tensor::from({n, 4, 3}, std::move(a));
}

double aligned_rmsd(const CoordMatrix& pred, const CoordMatrix& target, const AtomMask* mask) {
  if (pred.rows() != target.rows()) {
    throw Error(ErrorCode::ShapeMismatch, "aligned_rmsd: coordinate blocks differ in size");
  }
  std::vector<char> flags;
  if (mask) {
    for (const auto& residue : *mask)
      for (bool b : residue) flags.push_back(b);
  }
  std::unique_ptr<bool[]> used(new bool[flags.size() + 1]);
  for (size_t i = 0; i < flags.size(); ++i) used[i] = flags[i] != 0;
  return geom::kabsch_align(pred, target, std::span<const bool>(used.get(), flags.size())).rmsd;
}

void AlignmentGroups::add(std::span<const int> atom_rows, const CoordMatrix& target_coords) {
  const auto start = static_cast<Eigen::Index>(rows.size());
  rows.insert(rows.end(), atom_rows.begin(), atom_rows.end());
  target.conservativeResize(static_cast<Eigen::Index>(rows.size()), 3);
  for (size_t p = 0; p < atom_rows.size(); ++p) {
    target.row(start + static_cast<Eigen::Index>(p)) = target_coords.row(atom_rows[p]);
  }
  offsets.push_back(static_cast<int>(rows.size()));
}

Tensor aligned_rmsd_groups(const Tensor& pred, const AlignmentGroups& groups) {
  if (pred.dim(-1) != 3) throw Error(ErrorCode::ShapeMismatch, "aligned_rmsd_groups: points must be 3-D");
  const int G = groups.groups();
  // Aligned residual of every group row, kept for backward.
  auto residuals = std::make_shared<Eigen::MatrixX3d>(groups.rows.size(), 3);
  auto rotations = std::make_shared<std::vector<Eigen::Matrix3d>>(G);
  Array out(G);
  const Array& x = pred.value();
  const int pred_rows = static_cast<int>(pred.size() / 3);
  for (int g = 0; g < G; ++g) {
    const int begin = groups.offsets[g], count = groups.offsets[g + 1] - begin;
    Eigen::MatrixX3d moving(count, 3);
    for (int p = 0; p < count; ++p) {
      const int row = groups.rows[begin + p];
      if (row < 0 || row >= pred_rows) throw Error(ErrorCode::ShapeMismatch, "alignment row out of range");
      moving.row(p) << x[3 * row], x[3 * row + 1], x[3 * row + 2];
    }
    const auto target = groups.target.middleRows(begin, count);
    const auto fit = geom::kabsch_align(moving, target);
    (*rotations)[g] = fit.rotation;
    const Eigen::RowVector3d c_moving = moving.colwise().mean();
    const Eigen::RowVector3d c_target = target.colwise().mean();
    residuals->middleRows(begin, count) =
        ((moving.rowwise() - c_moving) * fit.rotation.transpose()) - (target.rowwise() - c_target);
    out[g] = fit.rmsd;
  }
  Array saved = out;
  return ad::make_op(
      "aligned_rmsd", {G}, std::move(out), {pred},
      [groups_rows = groups.rows, offsets = groups.offsets, residuals, rotations,
       rmsd = std::move(saved)](const Array& g, std::span<Array* const> grads) {
        Array& gx = *grads[0];
        for (size_t b = 0; b + 1 < offsets.size(); ++b) {
          const int begin = offsets[b], count = offsets[b + 1] - begin;
          if (rmsd[b] <= 0.0 || g[b] == 0.0) continue;
          const double scale = g[b] / (count * rmsd[b]);
          const Eigen::Matrix3d& r = (*rotations)[b];
          for (int p = 0; p < count; ++p) {
            const Eigen::Vector3d d = scale * (r.transpose() * residuals->row(begin + p).transpose());
            const int row = groups_rows[begin + p];
            gx[3 * row] += d.x();
            gx[3 * row + 1] += d.y();
            gx[3 * row + 2] += d.z();
          }
        }
      });
}

// ---------------------------------------------------------------------------

LossContext::LossContext(const BackboneStructure& target, const LossOptions& options)
    : n_(target.length()), target_(target.coords), mask_(target.atom_mask) {
  validate(target);
  if (options.fragment_size < 1 || options.pair_neighbors < 1 || options.neighbors < 1) {
    throw Error(ErrorCode::InvalidConfig, "loss neighbourhood sizes must be positive");
  }
  const geom::GraphTopology order = geom::knn_graph(target, n_ - 1);
  fragments_.resize(n_);
  neighbors_.resize(n_);
  pair_neighbors_.resize(n_);
  for (int i = 0; i < n_; ++i) {
    const auto& sorted = order.neighbors[i];
    fragments_[i].push_back(i);
    for (int r = 0; r < static_cast<int>(sorted.size()) && r + 1 < options.fragment_size; ++r) {
      fragments_[i].push_back(sorted[r]);
    }
    const auto take = [&](int k) {
      return std::vector<int>(sorted.begin(), sorted.begin() + std::min<long>(k, static_cast<long>(sorted.size())));
    };
    neighbors_[i] = take(options.neighbors);
    pair_neighbors_[i] = take(options.pair_neighbors);
  }

  std::vector<int> all(n_);
  std::iota(all.begin(), all.end(), 0);
  global_groups_ = build_groups({all});
  fragment_groups_ = build_groups(fragments_);
  neighbor_groups_ = build_groups(neighbors_);
  std::vector<std::vector<int>> pair_sets;
  for (int i = 0; i < n_; ++i) {
    for (int j : pair_neighbors_[i]) {
      std::vector<int> joined = fragments_[i];
      joined.insert(joined.end(), fragments_[j].begin(), fragments_[j].end());
      pair_sets.push_back(std::move(joined));
    }
  }
  pair_groups_ = build_groups(pair_sets);

  for (int i = 0; i < n_; ++i) ca_rows_.push_back(4 * i + static_cast<int>(Atom::CA));
  Array d(static_cast<Eigen::Index>(n_) * (n_ - 1) / 2);
  Eigen::Index k = 0;
  for (int a = 0; a < n_; ++a) {
    for (int b = a + 1; b < n_; ++b) {
      pair_a_.push_back(a);
      pair_b_.push_back(b);
      d[k++] = (target_.row(ca_rows_[a]) - target_.row(ca_rows_[b])).norm();
    }
  }
  const int pairs = static_cast<int>(d.size());
  target_distances_ = Tensor::from({pairs}, std::move(d));
}

AlignmentGroups LossContext::build_groups(const std::vector<std::vector<int>>& residue_sets) const {
  AlignmentGroups groups;
  std::vector<int> rows;
  for (const auto& set : residue_sets) {
    rows.clear();
    for (int r : set)
      for (int a = 0; a < kAtomsPerResidue; ++a)
        if (mask_[r][a]) rows.push_back(4 * r + a);
    if (rows.size() >= 3) groups.add(rows, target_);
  }
  return groups;
}

namespace {

Tensor mean_rmsd(const Tensor& pred, const AlignmentGroups& groups) {
  if (groups.groups() == 0) return Tensor::scalar(0.0);
  return ad::mean(aligned_rmsd_groups(pred, groups));
}

}  // namespace

Tensor LossContext::global(const Tensor& pred) const { return mean_rmsd(pred, global_groups_); }
Tensor LossContext::fragment(const Tensor& pred) const { return mean_rmsd(pred, fragment_groups_); }
Tensor LossContext::pair(const Tensor& pred) const { return mean_rmsd(pred, pair_groups_); }
Tensor LossContext::neighbor(const Tensor& pred) const { return mean_rmsd(pred, neighbor_groups_); }

Tensor LossContext::distance(const Tensor& pred) const {
  using namespace ad;
  if (pair_a_.empty()) return Tensor::scalar(0.0);
  const Tensor ca = gather(reshape(pred, {4 * n_, 3}), ca_rows_);
  const Tensor d = norm(gather(ca, pair_a_) - gather(ca, pair_b_), 1);
  return mean(square(d - target_distances_));
}

Tensor LossTerms::total() const { return global + fragment + pair + neighbor + distance; }

LossBreakdown LossTerms::breakdown() const {
  LossBreakdown b;
  b.global = global.item();
  b.fragment = fragment.item();
  b.pair = pair.item();
  b.neighbor = neighbor.item();
  b.distance = distance.item();
  b.total = b.global + b.fragment + b.pair + b.neighbor + b.distance;
  return b;
}

LossTerms composite_loss(std::span<const Tensor> layer_preds, const LossContext& context) {
  if (layer_preds.empty()) throw Error(ErrorCode::ShapeMismatch, "composite_loss needs at least one layer");
  LossTerms acc;
  for (size_t l = 0; l < layer_preds.size(); ++l) {
    const Tensor& p = layer_preds[l];
    LossTerms t{context.global(p), context.fragment(p), context.pair(p), context.neighbor(p),
                context.distance(p)};
    if (l == 0) {
      acc = t;
    } else {
      acc.global = acc.global + t.global;
      acc.fragment = acc.fragment + t.fragment;
      acc.pair = acc.pair + t.pair;
      acc.neighbor = acc.neighbor + t.neighbor;
      acc.distance = acc.distance + t.distance;
    }
  }
  if (layer_preds.size() > 1) {
    const double inv = 1.0 / static_cast<double>(layer_preds.size());
    acc.global = acc.global * inv;
    acc.fragment = acc.fragment * inv;
    acc.pair = acc.pair * inv;
    acc.neighbor = acc.neighbor * inv;
    acc.distance = acc.distance * inv;
  }
  return acc;
}

double loss_global(const CoordMatrix& pred, const BackboneStructure& target) {
  return LossContext(target).global(coords_tensor(pred)).item();
}

double loss_fragment(const CoordMatrix& pred, const BackboneStructure& target, int c) {
  return LossContext(target, {.fragment_size = c}).fragment(coords_tensor(pred)).item();
}

double loss_pair(const CoordMatrix& pred, const BackboneStructure& target, int k, int c) {
  return LossContext(target, {.fragment_size = c, .pair_neighbors = k}).pair(coords_tensor(pred)).item();
}

double loss_neighbor(const CoordMatrix& pred, const BackboneStructure& target, int k) {
  return LossContext(target, {.neighbors = k}).neighbor(coords_tensor(pred)).item();
}

double loss_distance(const CoordMatrix& pred, const BackboneStructure& target) {
  return LossContext(target).distance(coords_tensor(pred)).item();
}

LossBreakdown composite_loss(std::span<const CoordMatrix> layer_preds, const BackboneStructure& target,
                             const LossOptions& options) {
  const LossContext context(target, options);
  std::vector<Tensor> preds;
  for (const auto& p : layer_preds) preds.push_back(coords_tensor(p));
  return composite_loss(preds, context).breakdown();
}

}  // namespace desae::loss
