#include "desae/geometry.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace desae::geom {

namespace {

constexpr double kCollinearTolerance = 1e-3;  // radians

Eigen::Vector3d xyz(const BackboneStructure& s, int residue, Atom a) {
  return as_vec3(s.atom(residue, a));
}

}  // namespace

std::vector<ResidueFrame> build_frames(const BackboneStructure& s) {
  std::vector<ResidueFrame> frames(static_cast<size_t>(s.length()));
  for (int i = 0; i < s.length(); ++i) {
    ResidueFrame& f = frames[i];
    f.translation = xyz(s, i, Atom::CA);
    if (!s.has(i, Atom::N) || !s.has(i, Atom::C)) {
      f.degenerate = true;
      continue;
    }
    const Eigen::Vector3d u = xyz(s, i, Atom::C) - f.translation;
    const Eigen::Vector3d v = xyz(s, i, Atom::N) - f.translation;
    if (u.norm() < 1e-8 || v.norm() < 1e-8) {
      f.degenerate = true;
      continue;
    }
    const double angle = std::atan2(u.cross(v).norm(), u.dot(v));
    if (angle < kCollinearTolerance || angle > std::numbers::pi - kCollinearTolerance) {
      f.degenerate = true;
      continue;
    }
    const Eigen::Vector3d e1 = u.normalized();
    const Eigen::Vector3d e2 = (v - v.dot(e1) * e1).normalized();
    f.rotation.col(0) = e1;
    f.rotation.col(1) = e2;
    f.rotation.col(2) = e1.cross(e2);
  }
  return frames;
}

std::vector<double> MaskedSeries::valid_values() const {
  std::vector<double> out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (valid[i]) out.push_back(values[i]);
  }
  return out;
}

std::string_view feature_name(Feature f) noexcept {
  switch (f) {
    case Feature::Phi: return "phi";
    case Feature::Psi: return "psi";
    case Feature::Omega: return "omega";
    case Feature::Alpha: return "alpha";
    case Feature::Beta: return "beta";
    case Feature::Gamma: return "gamma";
    case Feature::CaN: return "ca_n";
    case Feature::CCa: return "c_ca";
    case Feature::OC: return "o_c";
    case Feature::NC: return "n_c";
  }
  return "unknown";
}

bool is_angle_feature(Feature f) noexcept {
  return static_cast<int>(f) <= static_cast<int>(Feature::Gamma);
}

const MaskedSeries& feature_series(const FeatureTable& t, Feature f) {
  switch (f) {
    case Feature::Phi: return t.phi;
    case Feature::Psi: return t.psi;
    case Feature::Omega: return t.omega;
    case Feature::Alpha: return t.alpha;
    case Feature::Beta: return t.beta;
    case Feature::Gamma: return t.gamma;
    case Feature::CaN: return t.ca_n;
    case Feature::CCa: return t.c_ca;
    case Feature::OC: return t.o_c;
    case Feature::NC: return t.n_c;
  }
  return t.phi;
}

FeatureTable extract_features(const BackboneStructure& s) {
  const int L = s.length();
  FeatureTable t;
  for (MaskedSeries* m : {&t.phi, &t.psi, &t.omega, &t.alpha, &t.beta, &t.gamma, &t.ca_n,
                          &t.c_ca, &t.o_c, &t.n_c}) {
    m->values.assign(L, 0.0);
    m->valid.assign(L, false);
  }

  // peptide bond i -> i+1 exists
  std::vector<bool> linked(L, false);
  for (int i = 0; i + 1 < L; ++i) {
    linked[i] = s.has(i, Atom::C) && s.has(i + 1, Atom::N) &&
                (xyz(s, i + 1, Atom::N) - xyz(s, i, Atom::C)).norm() <= kChainBreakDistance;
  }

  auto set = [](MaskedSeries& m, int i, auto&& compute) {
    try {
      m.values[i] = compute();
      m.valid[i] = true;
    } catch (const Error&) {
      m.valid[i] = false;
    }
  };
  auto dist = [&](int i, Atom a, int j, Atom b) { return (xyz(s, i, a) - xyz(s, j, b)).norm(); };

  for (int i = 0; i < L; ++i) {
    const bool n = s.has(i, Atom::N), ca = s.has(i, Atom::CA), c = s.has(i, Atom::C),
               o = s.has(i, Atom::O);
    const auto N = xyz(s, i, Atom::N), CA = xyz(s, i, Atom::CA), C = xyz(s, i, Atom::C);

    if (i > 0 && linked[i - 1] && n && ca && c) {
      const auto Cprev = xyz(s, i - 1, Atom::C);
      set(t.phi, i, [&] { return dihedral(Cprev, N, CA, C); });
      set(t.beta, i, [&] { return bond_angle(Cprev, N, CA); });
    }
    if (i + 1 < L && linked[i] && n && ca && c) {
      const auto Nnext = xyz(s, i + 1, Atom::N);
      set(t.psi, i, [&] { return dihedral(N, CA, C, Nnext); });
    }
    if (i + 1 < L && linked[i] && ca && c && s.has(i + 1, Atom::CA)) {
      const auto Nnext = xyz(s, i + 1, Atom::N);
      const auto CAnext = xyz(s, i + 1, Atom::CA);
      set(t.omega, i, [&] { return dihedral(CA, C, Nnext, CAnext); });
      set(t.gamma, i, [&] { return bond_angle(CA, C, Nnext); });
    }
    if (n && ca && c) set(t.alpha, i, [&] { return bond_angle(N, CA, C); });

    if (n && ca) set(t.ca_n, i, [&] { return dist(i, Atom::CA, i, Atom::N); });
    if (c && ca) set(t.c_ca, i, [&] { return dist(i, Atom::C, i, Atom::CA); });
    if (o && c) set(t.o_c, i, [&] { return dist(i, Atom::O, i, Atom::C); });
    if (i + 1 < L && linked[i]) set(t.n_c, i, [&] { return dist(i + 1, Atom::N, i, Atom::C); });
  }
  return t;
}

GraphTopology knn_graph(const Eigen::MatrixX3d& points, int k) {
  const int L = static_cast<int>(points.rows());
  const int degree = std::max(0, std::min(k, L - 1));
  GraphTopology g;
  g.neighbors.resize(L);
  std::vector<std::pair<double, int>> order;
  for (int i = 0; i < L; ++i) {
    order.clear();
    for (int j = 0; j < L; ++j) {
      if (j != i) order.emplace_back((points.row(j) - points.row(i)).norm(), j);
    }
    std::partial_sort(order.begin(), order.begin() + degree, order.end());
    g.neighbors[i].reserve(degree);
    for (int r = 0; r < degree; ++r) g.neighbors[i].push_back(order[r].second);
  }
  return g;
}

GraphTopology knn_graph(const BackboneStructure& s, int k) { return knn_graph(ca_coords(s), k); }

Corruption corrupt_structure(const BackboneStructure& s, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw Error(ErrorCode::InvalidConfig, "corruption fraction must lie in (0, 1]");
  }
  std::vector<int> eligible;
  for (int i = 0; i < s.length(); ++i) {
    if (s.complete(i)) eligible.push_back(i);
  }
  if (eligible.empty()) {
    throw Error(ErrorCode::NoEligibleResidues,
                "structure '" + s.id + "' has no residue with all four backbone atoms");
  }
  const auto n_eligible = static_cast<double>(eligible.size());
  // Guard against 0.1 * 30 = 3.0000000000000004 rounding up to 4.
  const int count = std::clamp(static_cast<int>(std::ceil(fraction * n_eligible - 1e-9)), 1,
                               static_cast<int>(eligible.size()));

  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `count` entries become the sample.
  for (int r = 0; r < count; ++r) {
    std::uniform_int_distribution<size_t> pick(r, eligible.size() - 1);
    std::swap(eligible[r], eligible[pick(rng)]);
  }
  std::vector<CorruptedSite> sites;
  std::uniform_int_distribution<int> pick_atom(0, kAtomsPerResidue - 1);
  for (int r = 0; r < count; ++r) {
    sites.push_back({eligible[r], static_cast<Atom>(pick_atom(rng))});
  }
  std::sort(sites.begin(), sites.end(),
            [](const CorruptedSite& a, const CorruptedSite& b) { return a.residue < b.residue; });

  Corruption out{s, std::move(sites)};
  for (const CorruptedSite& site : out.sites) {
    Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
    for (int a = 0; a < kAtomsPerResidue; ++a) {
      if (a != static_cast<int>(site.atom)) centroid += s.coords.row(4 * site.residue + a);
    }
    out.structure.atom(site.residue, site.atom) = centroid / 3.0;
  }
  return out;
}

BackboneStructure transform(const BackboneStructure& s, const Eigen::Matrix3d& rotation,
                            const Eigen::Vector3d& translation) {
  BackboneStructure out = s;
  out.coords = (s.coords * rotation.transpose()).rowwise() + translation.transpose();
  return out;
}

}  // namespace desae::geom
