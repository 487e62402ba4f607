#pragma once

#include "flashdistill/geom.hpp"

#include <array>
#include <map>
#include <numbers>
#include <set>
#include <string>
#include <vector>

namespace flashdistill {

/// Two-element toy chemistry. Type A (index 0) has valence 1 and type B
/// (index 1) valence 2; atom types are one-hot in the feature block.
struct ToyChemSpec {
  struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    double mid() const { return 0.5 * (lo + hi); }
    bool contains(double v) const { return v >= lo && v <= hi; }
  };

  std::array<int, 2> valence{1, 2};
  // Indexed by type pair: [AA, AB, BB].
  std::array<Interval, 3> bonds{Interval{0.90, 1.10}, Interval{1.30, 1.50}, Interval{1.70, 1.90}};
  double jitter_sigma = 0.01;
  // Every non-bonded pair in a generated molecule is at least this far apart.
  double min_nonbonded = 2.1;

  static constexpr int feat_dim = 2;

  static int pair_index(int a, int b) { return a + b; }
  const Interval &bond(int a, int b) const { return bonds[static_cast<std::size_t>(pair_index(a, b))]; }
};

struct MolMetrics {
  double atom_stab = 0.0;
  double mol_stab = 0.0;
  double valid = 0.0;
  double valid_unique = 0.0;
  long n_samples = 0;
};

/// Bond analysis of a single point set under the lookup table.
struct BondGraph {
  std::vector<int> types;
  std::vector<std::pair<int, int>> bonds;
  std::vector<int> degree;

  bool atom_stable(const ToyChemSpec &spec, std::size_t i) const {
    return degree[i] == spec.valence[static_cast<std::size_t>(types[i])];
  }

  bool connected() const {
    const std::size_t n = types.size();
    if (n == 0) return false;
    std::vector<std::vector<int>> adj(n);
    for (auto [a, b] : bonds) {
      adj[static_cast<std::size_t>(a)].push_back(b);
      adj[static_cast<std::size_t>(b)].push_back(a);
    }
    std::vector<char> seen(n, 0);
    std::vector<int> stack{0};
    seen[0] = 1;
    std::size_t count = 1;
    while (!stack.empty()) {
      const int v = stack.back();
      stack.pop_back();
      for (int w : adj[static_cast<std::size_t>(v)])
        if (!seen[static_cast<std::size_t>(w)]) {
          seen[static_cast<std::size_t>(w)] = 1;
          ++count;
          stack.push_back(w);
        }
    }
    return count == n;
  }

  /// Atom-type counts plus the multiset of bonded type pairs.
  std::string key() const {
    std::array<int, 2> atoms{0, 0};
    for (int t : types) ++atoms[static_cast<std::size_t>(t)];
    std::array<int, 3> pairs{0, 0, 0};
    for (auto [a, b] : bonds) ++pairs[static_cast<std::size_t>(types[a] + types[b])];
    return "A" + std::to_string(atoms[0]) + "B" + std::to_string(atoms[1]) + "|AA" + std::to_string(pairs[0]) +
           "AB" + std::to_string(pairs[1]) + "BB" + std::to_string(pairs[2]);
  }
};

inline BondGraph analyze_bonds(const PointSet &p, const ToyChemSpec &spec) {
  BondGraph g;
  const auto n = static_cast<std::size_t>(p.node_count());
  g.types.resize(n);
  g.degree.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) g.types[i] = argmax_type(p.feats().row(static_cast<Eigen::Index>(i)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dist =
          (p.coords().row(static_cast<Eigen::Index>(i)) - p.coords().row(static_cast<Eigen::Index>(j))).norm();
      if (spec.bond(g.types[i], g.types[j]).contains(dist)) {
        g.bonds.emplace_back(static_cast<int>(i), static_cast<int>(j));
        ++g.degree[i];
        ++g.degree[j];
      }
    }
  return g;
}

inline bool molecule_valid(const PointSet &p, const ToyChemSpec &spec) {
  if (!p.finite()) return false;
  const auto g = analyze_bonds(p, spec);
  for (std::size_t i = 0; i < g.types.size(); ++i)
    if (!g.atom_stable(spec, i)) return false;
  return g.connected();
}

inline MolMetrics compute_metrics(const std::vector<PointSet> &samples, const ToyChemSpec &spec) {
  MolMetrics m;
  m.n_samples = static_cast<long>(samples.size());
  if (samples.empty()) return m;
  long atoms = 0, stable_atoms = 0, stable_mols = 0, valid = 0;
  std::set<std::string> keys;
  for (const auto &p : samples) {
    atoms += p.node_count();
    if (!p.finite()) continue;
    const auto g = analyze_bonds(p, spec);
    long stable_here = 0;
    for (std::size_t i = 0; i < g.types.size(); ++i) stable_here += g.atom_stable(spec, i);
    stable_atoms += stable_here;
    if (stable_here != p.node_count()) continue;
    ++stable_mols;
    if (!g.connected()) continue;
    ++valid;
    keys.insert(g.key());
  }
  const double n = static_cast<double>(samples.size());
  m.atom_stab = static_cast<double>(stable_atoms) / static_cast<double>(atoms);
  m.mol_stab = static_cast<double>(stable_mols) / n;
  m.valid = static_cast<double>(valid) / n;
  m.valid_unique = static_cast<double>(keys.size()) / n;
  return m;
}

/// Radius of gyration of the coordinate block.
inline double radius_of_gyration(const PointSet &p) {
  const Eigen::RowVector3d com = p.coords().colwise().mean();
  return std::sqrt((p.coords().rowwise() - com).rowwise().squaredNorm().mean());
}

enum class Template { dimer, chain, ring };

namespace detail {

// Place atom d given a, b, c with |cd| = bond, angle bcd = theta and dihedral
// abcd = phi (natural extension reference frame).
inline Eigen::RowVector3d place_atom(const Eigen::RowVector3d &a, const Eigen::RowVector3d &b,
                                     const Eigen::RowVector3d &c, double bond, double theta, double phi) {
  const Eigen::Vector3d bc = (c - b).transpose().normalized();
  Eigen::Vector3d n = (b - a).transpose().cross(bc);
  if (n.norm() < 1e-9) n = bc.unitOrthogonal();
  n.normalize();
  const Eigen::Vector3d m = n.cross(bc);
  const Eigen::Vector3d d2(-bond * std::cos(theta), bond * std::sin(theta) * std::cos(phi),
                           bond * std::sin(theta) * std::sin(phi));
  const Eigen::Vector3d d = c.transpose() + d2.x() * bc + d2.y() * m + d2.z() * n;
  return d.transpose();
}

} // namespace detail

/// Types of a template molecule with n atoms.
inline std::vector<int> template_types(Template kind, int n) {
  switch (kind) {
  case Template::dimer: return {0, 0};
  case Template::ring: return std::vector<int>(static_cast<std::size_t>(n), 1);
  case Template::chain: {
    std::vector<int> t(static_cast<std::size_t>(n), 1);
    t.front() = 0;
    t.back() = 0;
    return t;
  }
  }
  return {};
}

/// Embed one template with bonds at interval midpoints and a random pose,
/// without jitter. Chains use random bond angles in [110, 130] degrees and
/// random torsions.
inline Matrix embed_template(Template kind, int n, const ToyChemSpec &spec, RngStream &rng) {
  const auto types = template_types(kind, n);
  Matrix x = Matrix::Zero(n, 3);
  if (kind == Template::dimer) {
    x(1, 0) = spec.bond(0, 0).mid();
  } else if (kind == Template::ring) {
    const double side = spec.bond(1, 1).mid();
    const double radius = side / (2.0 * std::sin(std::numbers::pi / n));
    for (int i = 0; i < n; ++i) {
      const double ang = 2.0 * std::numbers::pi * i / n;
      x.row(i) << radius * std::cos(ang), radius * std::sin(ang), 0.0;
    }
  } else {
    auto len = [&](int i) { return spec.bond(types[static_cast<std::size_t>(i - 1)], types[static_cast<std::size_t>(i)]).mid(); };
    auto angle = [&] { return (110.0 + 20.0 * rng.uniform()) * std::numbers::pi / 180.0; };
    x(1, 0) = len(1);
    if (n > 2) {
      const double th = angle();
      x.row(2) = x.row(1) + len(2) * Eigen::RowVector3d(-std::cos(th), std::sin(th), 0.0);
    }
    for (int i = 3; i < n; ++i) {
      const double phi = (2.0 * rng.uniform() - 1.0) * std::numbers::pi;
      x.row(i) = detail::place_atom(x.row(i - 3), x.row(i - 2), x.row(i - 1), len(i), angle(), phi);
    }
  }
  x.rowwise() -= x.colwise().mean();
  return x * random_rotation(rng).mat();
}

inline PointSet make_molecule(Template kind, int n, const Matrix &coords) {
  const auto types = template_types(kind, n);
  Matrix feats = Matrix::Zero(n, ToyChemSpec::feat_dim);
  for (int i = 0; i < n; ++i) feats(i, types[static_cast<std::size_t>(i)]) = 1.0;
  return project_zero_com(PointSet(coords, feats));
}

/// Procedural dataset of chains A-B..B-A, B rings and (for n = 2) A-A dimers.
/// Every emitted molecule is valid under `compute_metrics`; rejects are
/// regenerated.
inline std::vector<PointSet> generate_dataset(const ToyChemSpec &spec, int count, int n_min, int n_max,
                                              RngStream &rng) {
  if (n_min < 2 || n_max > 9 || n_min > n_max) throw ConfigError("generate_dataset: need 2 <= n_min <= n_max <= 9");
  if (count < 1) throw ConfigError("generate_dataset: count must be positive");
  std::vector<PointSet> out;
  out.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(out.size()) < count) {
    const int n = static_cast<int>(rng.uniform_int(n_min, n_max));
    const Template kind = n == 2 ? Template::dimer : (rng.uniform() < 0.5 ? Template::chain : Template::ring);
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      Matrix x = embed_template(kind, n, spec, rng);
      // Steric check on the pristine geometry: only template bonds may be short.
      bool ok = true;
      const auto types = template_types(kind, n);
      for (int i = 0; i < n && ok; ++i)
        for (int j = i + 1; j < n && ok; ++j) {
          const bool bonded = (kind == Template::ring) ? (j == i + 1 || (i == 0 && j == n - 1)) : (j == i + 1);
          if (!bonded && (x.row(i) - x.row(j)).norm() < spec.min_nonbonded) ok = false;
        }
      if (!ok) continue;
      for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] += spec.jitter_sigma * rng.normal();
      PointSet mol = make_molecule(kind, n, x);
      if (!molecule_valid(mol, spec)) continue;
      out.push_back(std::move(mol));
      placed = true;
    }
    if (!placed) throw Error("generate_dataset: could not embed a molecule with " + std::to_string(n) + " atoms");
  }
  return out;
}

/// Empirical distribution of node counts, used to size samples.
class NodeCountSampler {
public:
  NodeCountSampler() = default;
  explicit NodeCountSampler(const std::vector<PointSet> &data) {
    for (const auto &p : data) counts_.push_back(static_cast<int>(p.node_count()));
    if (counts_.empty()) throw Error("NodeCountSampler: empty dataset");
  }

  int sample(RngStream &rng) const {
    return counts_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(counts_.size()) - 1))];
  }

  std::map<int, long> histogram() const {
    std::map<int, long> h;
    for (int c : counts_) ++h[c];
    return h;
  }

private:
  std::vector<int> counts_;
};

} // namespace flashdistill
