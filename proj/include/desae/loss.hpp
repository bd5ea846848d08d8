#pragma once

// Structure-consistency loss: five aligned-RMSD / distance terms measured
// against a ground-truth backbone, averaged over decoder layers.

#include "desae/autodiff.hpp"
#include "desae/backbone.hpp"

#include <span>
#include <vector>

namespace desae::loss {

using ad::Tensor;

struct LossOptions {
  int fragment_size = 7;   // c: spatially closest residues per fragment, self included
  int pair_neighbors = 30; // K for the pair term
  int neighbors = 30;      // K for the neighbour term
};

struct LossBreakdown {
  double global = 0.0, fragment = 0.0, pair = 0.0, neighbor = 0.0, distance = 0.0, total = 0.0;
};

/// Aligned RMSD of `pred` onto `target` over atoms observed in `mask` (all when
/// null). Both are (4n) x 3 with rows 4*i + atom. Error(TooFewPoints) below 3.
double aligned_rmsd(const CoordMatrix& pred, const CoordMatrix& target, const AtomMask* mask = nullptr);

/// Groups of atom rows of a [n,4,3] prediction that are each rigidly aligned
/// to the matching target atoms. Group g spans rows [offsets[g], offsets[g+1]).
struct AlignmentGroups {
  std::vector<int> rows;        // flat atom rows (4*i + a), duplicates allowed
  std::vector<int> offsets{0};
  CoordMatrix target;           // target coordinates, one row per entry of `rows`

  int groups() const { return static_cast<int>(offsets.size()) - 1; }
  void add(std::span<const int> atom_rows, const CoordMatrix& target_coords);
};

/// Per-group aligned RMSD of prediction rows ([n*4,3] or [n,4,3]) against the
/// fixed targets, shape [groups]. The optimal rotation is held constant in
/// backward; at the optimum this is the exact gradient.
Tensor aligned_rmsd_groups(const Tensor& pred, const AlignmentGroups& groups);

/// Target-side bookkeeping (neighbour lists, fragments, alignment groups) for
/// one ground-truth structure. Neighbours are chosen on the target's CA
/// positions; atoms missing from the target are left out of every group.
class LossContext {
 public:
  LossContext(const BackboneStructure& target, const LossOptions& options = {});

  int length() const { return n_; }
  const std::vector<int>& fragment(int residue) const { return fragments_[residue]; }
  const std::vector<int>& neighbors(int residue) const { return neighbors_[residue]; }
  const std::vector<int>& pair_neighbors(int residue) const { return pair_neighbors_[residue]; }

  Tensor global(const Tensor& pred) const;
  Tensor fragment(const Tensor& pred) const;
  Tensor pair(const Tensor& pred) const;
  Tensor neighbor(const Tensor& pred) const;
  Tensor distance(const Tensor& pred) const;

 private:
  AlignmentGroups build_groups(const std::vector<std::vector<int>>& residue_sets) const;

  int n_ = 0;
  CoordMatrix target_;
  AtomMask mask_;
  std::vector<std::vector<int>> fragments_, neighbors_, pair_neighbors_;
  AlignmentGroups global_groups_, fragment_groups_, pair_groups_, neighbor_groups_;
  std::vector<int> ca_rows_, pair_a_, pair_b_;
  Tensor target_distances_;
};

struct LossTerms {
  Tensor global, fragment, pair, neighbor, distance;

  Tensor total() const;
  LossBreakdown breakdown() const;
};

/// Every term evaluated at each layer's [n,4,3] prediction and averaged over
/// layers; the total is their unweighted sum.
LossTerms composite_loss(std::span<const Tensor> layer_preds, const LossContext& context);

/// Convenience wrappers on plain coordinates (value only).
double loss_global(const CoordMatrix& pred, const BackboneStructure& target);
double loss_fragment(const CoordMatrix& pred, const BackboneStructure& target, int c = 7);
double loss_pair(const CoordMatrix& pred, const BackboneStructure& target, int k = 30, int c = 7);
double loss_neighbor(const CoordMatrix& pred, const BackboneStructure& target, int k = 30);
double loss_distance(const CoordMatrix& pred, const BackboneStructure& target);
LossBreakdown composite_loss(std::span<const CoordMatrix> layer_preds, const BackboneStructure& target,
                             const LossOptions& options = {});

Tensor coords_tensor(const CoordMatrix& coords);

}  // namespace desae::loss
