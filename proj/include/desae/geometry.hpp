#pragma once

#include "desae/backbone.hpp"
#include "desae/error.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <vector>

namespace desae::geom {

template <typename Scalar>
using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Mat3 = Eigen::Matrix<Scalar, 3, 3>;

/// Rigid transform x -> rotation * x + translation, anchored at a residue's CA.
struct ResidueFrame {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();
  bool degenerate = false;

  Eigen::Vector3d apply(const Eigen::Vector3d& x) const { return rotation * x + translation; }
  ResidueFrame inverse() const {
    return {rotation.transpose(), -rotation.transpose() * translation, degenerate};
  }
  ResidueFrame compose(const ResidueFrame& other) const {
    return {rotation * other.rotation, rotation * other.translation + translation,
            degenerate || other.degenerate};
  }
};

template <typename Derived>
Vec3<typename Derived::Scalar> as_vec3(const Eigen::MatrixBase<Derived>& v) {
  return {v(0), v(1), v(2)};
}

/// Wraps an angle into (-pi, pi].
template <typename Scalar>
Scalar wrap_angle(Scalar angle) {
  constexpr Scalar pi = std::numbers::pi_v<Scalar>;
  angle = std::remainder(angle, 2 * pi);
  return angle <= -pi ? angle + 2 * pi : angle;
}

/// Signed torsion angle p1-p2-p3-p4 in (-pi, pi].
/// Throws Error(DegenerateGeometry) for coincident points or collinear triples.
template <typename D1, typename D2, typename D3, typename D4>
typename D1::Scalar dihedral(const Eigen::MatrixBase<D1>& p1, const Eigen::MatrixBase<D2>& p2,
                             const Eigen::MatrixBase<D3>& p3, const Eigen::MatrixBase<D4>& p4) {
  using Scalar = typename D1::Scalar;
  const Vec3<Scalar> b1 = as_vec3(p2) - as_vec3(p1);
  const Vec3<Scalar> b2 = as_vec3(p3) - as_vec3(p2);
  const Vec3<Scalar> b3 = as_vec3(p4) - as_vec3(p3);
  const Vec3<Scalar> n1 = b1.cross(b2);
  const Vec3<Scalar> n2 = b2.cross(b3);
  constexpr Scalar tiny = Scalar(1e-8);
  if (b1.norm() < tiny || b2.norm() < tiny || b3.norm() < tiny || n1.norm() < tiny ||
      n2.norm() < tiny) {
    throw Error(ErrorCode::DegenerateGeometry, "dihedral of degenerate point quadruple");
  }
  const Scalar y = n1.cross(n2).dot(b2.normalized());
  const Scalar x = n1.dot(n2);
  return wrap_angle(std::atan2(y, x));
}

/// Angle at vertex b of the triple a-b-c, in [0, pi].
template <typename D1, typename D2, typename D3>
typename D1::Scalar bond_angle(const Eigen::MatrixBase<D1>& a, const Eigen::MatrixBase<D2>& b,
                               const Eigen::MatrixBase<D3>& c) {
  using Scalar = typename D1::Scalar;
  const Vec3<Scalar> u = as_vec3(a) - as_vec3(b);
  const Vec3<Scalar> v = as_vec3(c) - as_vec3(b);
  if (u.norm() < Scalar(1e-8) || v.norm() < Scalar(1e-8)) {
    throw Error(ErrorCode::DegenerateGeometry, "bond angle with coincident points");
  }
  return std::atan2(u.cross(v).norm(), u.dot(v));
}

/// Places d so that |c-d| = bond, angle(b,c,d) = angle and dihedral(a,b,c,d) = torsion.
template <typename Scalar>
Vec3<Scalar> place_atom(const Vec3<Scalar>& a, const Vec3<Scalar>& b, const Vec3<Scalar>& c,
                        Scalar bond, Scalar angle, Scalar torsion) {
  const Vec3<Scalar> bc = (c - b).normalized();
  const Vec3<Scalar> n = (b - a).cross(bc).normalized();
  Mat3<Scalar> basis;
  basis << bc, n.cross(bc), n;
  const Vec3<Scalar> local(-bond * std::cos(angle), bond * std::sin(angle) * std::cos(torsion),
                           bond * std::sin(angle) * std::sin(torsion));
  return c + basis * local;
}

template <typename Scalar>
struct RigidAlignment {
  Mat3<Scalar> rotation = Mat3<Scalar>::Identity();
  Vec3<Scalar> translation = Vec3<Scalar>::Zero();
  Scalar rmsd = 0;
};

/// Least-squares rigid superposition of `moving` onto `target` (both n x 3, one
/// point per row). Reflections are excluded. The returned transform maps a
/// moving point p to rotation * p + translation. Points whose mask entry is
/// false are ignored. Throws Error(TooFewPoints) below three usable points.
template <typename DA, typename DB>
RigidAlignment<typename DA::Scalar> kabsch_align(const Eigen::MatrixBase<DA>& moving,
                                                 const Eigen::MatrixBase<DB>& target,
                                                 std::span<const bool> mask = {}) {
  using Scalar = typename DA::Scalar;
  if (moving.rows() != target.rows() || moving.cols() != 3 || target.cols() != 3 ||
      (!mask.empty() && static_cast<Eigen::Index>(mask.size()) != moving.rows())) {
    throw Error(ErrorCode::ShapeMismatch, "kabsch_align: point sets differ in shape");
  }
  auto used = [&](Eigen::Index p) { return mask.empty() || mask[p]; };
  Eigen::Index n = 0;
  Vec3<Scalar> cm = Vec3<Scalar>::Zero();
  Vec3<Scalar> ct = Vec3<Scalar>::Zero();
  for (Eigen::Index p = 0; p < moving.rows(); ++p) {
    if (!used(p)) continue;
    cm += as_vec3(moving.row(p));
    ct += as_vec3(target.row(p));
    ++n;
  }
  if (n < 3) throw Error(ErrorCode::TooFewPoints, "kabsch_align needs at least 3 points");
  cm /= Scalar(n);
  ct /= Scalar(n);

  Mat3<Scalar> cov = Mat3<Scalar>::Zero();
  for (Eigen::Index p = 0; p < moving.rows(); ++p) {
    if (!used(p)) continue;
    cov += (as_vec3(moving.row(p)) - cm) * (as_vec3(target.row(p)) - ct).transpose();
  }
  Eigen::JacobiSVD<Mat3<Scalar>> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3<Scalar> correction = Mat3<Scalar>::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) correction(2, 2) = -1;

  RigidAlignment<Scalar> out;
  out.rotation = svd.matrixV() * correction * svd.matrixU().transpose();
  out.translation = ct - out.rotation * cm;
  Scalar sq = 0;
  for (Eigen::Index p = 0; p < moving.rows(); ++p) {
    if (!used(p)) continue;
    sq += (out.rotation * as_vec3(moving.row(p)) + out.translation - as_vec3(target.row(p)))
              .squaredNorm();
  }
  out.rmsd = std::sqrt(sq / Scalar(n));
  return out;
}

/// One CA-anchored frame per residue (Gram-Schmidt on C-CA, N-CA). Residues
/// with missing or collinear N/CA/C get the identity rotation and are flagged
/// degenerate.
std::vector<ResidueFrame> build_frames(const BackboneStructure& s);

inline constexpr double kChainBreakDistance = 2.0;  // C(i)-N(i+1), Angstrom

struct MaskedSeries {
  std::vector<double> values;
  std::vector<bool> valid;

  std::vector<double> valid_values() const;
};

/// Per-residue backbone internal coordinates. Angles in radians, lengths in
/// Angstrom. Inter-residue entries are masked at chain ends, where a needed
/// atom is missing, or across a chain break (C-N > kChainBreakDistance).
struct FeatureTable {
  MaskedSeries phi, psi, omega;      // torsions in (-pi, pi]
  MaskedSeries alpha, beta, gamma;   // N-CA-C, C(i-1)-N-CA, CA-C-N(i+1)
  MaskedSeries ca_n, c_ca, o_c, n_c; // N(i+1)-C(i) for n_c

  int length() const { return static_cast<int>(phi.values.size()); }
};

enum class Feature { Phi, Psi, Omega, Alpha, Beta, Gamma, CaN, CCa, OC, NC };
inline constexpr int kFeatureCount = 10;
std::string_view feature_name(Feature f) noexcept;
bool is_angle_feature(Feature f) noexcept;
const MaskedSeries& feature_series(const FeatureTable& t, Feature f);

FeatureTable extract_features(const BackboneStructure& s);

/// Neighbors of each residue by ascending CA-CA distance (ties by index), self
/// excluded; each list has min(k, L-1) entries.
struct GraphTopology {
  std::vector<std::vector<int>> neighbors;

  int size() const { return static_cast<int>(neighbors.size()); }
  int degree() const { return neighbors.empty() ? 0 : static_cast<int>(neighbors[0].size()); }
};

GraphTopology knn_graph(const Eigen::MatrixX3d& points, int k);
GraphTopology knn_graph(const BackboneStructure& s, int k);

struct CorruptedSite {
  int residue = 0;
  Atom atom = Atom::N;

  friend bool operator==(const CorruptedSite&, const CorruptedSite&) = default;
};

struct Corruption {
  BackboneStructure structure;
  std::vector<CorruptedSite> sites;  // ascending residue order
};

/// Picks ceil(fraction * L_eligible) complete residues uniformly without
/// replacement and, for each, one backbone atom uniformly from {N, CA, C, O};
/// that atom is moved to the centroid of the residue's other three atoms.
/// Throws Error(NoEligibleResidues) when no residue has all four atoms.
Corruption corrupt_structure(const BackboneStructure& s, double fraction, std::uint64_t seed);

/// Applies x -> rotation * x + translation to every atom.
BackboneStructure transform(const BackboneStructure& s, const Eigen::Matrix3d& rotation,
                            const Eigen::Vector3d& translation);

}  // namespace desae::geom
