#pragma once

#include "flashdistill/egnn.hpp"
#include "flashdistill/geom.hpp"
#include "flashdistill/netgrad.hpp"
#include "flashdistill/schedule.hpp"

#include <functional>
#include <optional>
#include <vector>

namespace flashdistill {

struct CorruptedSample {
  PointSet noisy;
  Matrix eps_true;
  int t = 0;
  double alpha = 1.0;
  double sigma = 0.0;
};

/// z_t = alpha_t x0 + sigma_t eps with the given eps; its coordinate block is
/// projected to zero center of mass first.
inline CorruptedSample corrupt_with(const PointSet &p, int t, const BaseSchedule &base, Matrix eps) {
  base.check_step(t);
  if (eps.rows() != p.data().rows() || eps.cols() != p.data().cols()) throw Error("corrupt: noise shape mismatch");
  project_zero_com_inplace(eps);
  CorruptedSample c;
  c.t = t;
  c.alpha = base.alpha(t);
  c.sigma = base.sigma(t);
  c.noisy = PointSet::from_matrix(c.alpha * p.data() + c.sigma * eps);
  c.eps_true = std::move(eps);
  return c;
}

inline CorruptedSample corrupt(const PointSet &p, int t, const BaseSchedule &base, RngStream &rng) {
  return corrupt_with(p, t, base, rng.normal_matrix(p.node_count(), 3 + p.feat_dim()));
}

/// Expected per-node value of |eps|^2 for projected noise: the zero-COM
/// constraint removes three coordinate degrees of freedom.
inline double expected_eps_sq_per_node(Eigen::Index nodes, Eigen::Index feat_dim) {
  const double n = static_cast<double>(nodes);
  return (3.0 * (n - 1.0) + static_cast<double>(feat_dim) * n) / n;
}

/// Lowest timestep drawn by the training loss for a given t_min fraction.
inline int min_train_step(double t_min_frac, const BaseSchedule &base) {
  const int t = static_cast<int>(round_half_away(t_min_frac * base.total_steps()));
  return std::clamp(t, 0, base.total_steps());
}

/// Denoising loss: per sample, t ~ U{round(t_min_frac T), .., T}, then the
/// squared error between predicted and true noise summed over both blocks
/// and divided by the node count; averaged over the batch. `conds`, when
/// present, gives one condition value per batch element.
inline GradReport eps_loss(const Egnn &net, const ParamVector &params, const std::vector<PointSet> &batch,
                           const BaseSchedule &base, RngStream &rng, double t_min_frac = 0.02,
                           const std::vector<double> *conds = nullptr) {
  if (batch.empty()) throw Error("eps_loss: empty batch");
  if (conds && conds->size() != batch.size()) throw Error("eps_loss: one condition per sample required");
  const int t_lo = min_train_step(t_min_frac, base);
  GradReport report(net.layout());
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (std::size_t k = 0; k < batch.size(); ++k) {
    const int t = static_cast<int>(rng.uniform_int(t_lo, base.total_steps()));
    const auto c = corrupt(batch[k], t, base, rng);
    std::optional<double> cond;
    if (conds) cond = (*conds)[k];
    egnn::Tape tape;
    const auto out = net.forward(params, c.noisy.data(), static_cast<double>(t) / base.total_steps(), cond, &tape);
    const Matrix diff = out.eps - c.eps_true;
    const double inv_n = 1.0 / static_cast<double>(diff.rows());
    report.loss += inv_b * inv_n * diff.squaredNorm();
    net.backward(params, tape, (2.0 * inv_b * inv_n) * diff, {}, report.grad);
  }
  return report;
}

/// Anything callable as `Matrix(const Matrix &z, const GridEntry &entry)`
/// returning an epsilon prediction for state z.
template <class F>
concept Denoiser = requires(const F &f, const Matrix &z, const GridEntry &e) {
  { f(z, e) } -> std::convertible_to<Matrix>;
};

/// Epsilon predictor backed by an EGNN and a parameter vector.
struct NeuralDenoiser {
  const Egnn *net = nullptr;
  const ParamVector *params = nullptr;
  int total_steps = 1000;
  std::optional<double> cond;

  NeuralDenoiser(const Egnn &n, const ParamVector &p, const BaseSchedule &base,
                 std::optional<double> c = std::nullopt)
      : net(&n), params(&p), total_steps(base.total_steps()), cond(c) {}

  Matrix operator()(const Matrix &z, const GridEntry &e) const {
    return net->forward(*params, z, static_cast<double>(e.t) / total_steps, cond).eps;
  }
};

struct SamplerOptions {
  // Every x0 prediction is projected onto a convex set that contains the
  // data: each node's coordinates onto the ball of radius `coord_radius`
  // (disabled when <= 0) and features onto the box [feat_lo, feat_hi]
  // (disabled when feat_lo >= feat_hi). Posterior means lie in the convex
  // hull of the data, so the projection can only move an estimate closer to
  // them. The ball keeps the map rotation-equivariant.
  double coord_radius = 0.0;
  double feat_lo = 0.0;
  double feat_hi = 0.0;
  // Called with every intermediate state (noisy inputs and x0 predictions).
  std::function<void(const Matrix &)> observer;
};

namespace detail {

inline void check_alpha(const GridEntry &e, const BaseSchedule &base) {
  if (e.alpha < std::sqrt(base.precision()) * (1.0 - 1e-9))
    throw Error("sampler: alpha below the precision floor at t=" + std::to_string(e.t));
}

inline void project_x0_inplace(Matrix &x, const SamplerOptions &opt) {
  if (opt.coord_radius > 0.0)
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double n = x.row(i).head<3>().norm();
      if (n > opt.coord_radius) x.row(i).head<3>() *= opt.coord_radius / n;
    }
  if (opt.feat_lo < opt.feat_hi) {
    const Eigen::Index d = x.cols() - 3;
    x.rightCols(d) = x.rightCols(d).cwiseMax(opt.feat_lo).cwiseMin(opt.feat_hi);
  }
  project_zero_com_inplace(x);
}

inline Matrix x0_from_eps(const Matrix &z, const Matrix &eps, const GridEntry &e, const SamplerOptions &opt) {
  Matrix x = (z - e.sigma * eps) / e.alpha;
  project_x0_inplace(x, opt);
  return x;
}

inline void observe(const SamplerOptions &opt, const Matrix &m) {
  if (opt.observer) opt.observer(m);
}

} // namespace detail

/// Noise used by one trajectory: the initial state followed by one fresh
/// draw per re-noising step. Coordinate blocks are zero-COM.
struct TrajectoryNoise {
  Matrix z0;
  std::vector<Matrix> renoise;

  static TrajectoryNoise draw(RngStream &rng, Eigen::Index nodes, Eigen::Index feat_dim, int renoise_steps) {
    TrajectoryNoise n;
    n.z0 = gaussian_state(rng, nodes, feat_dim);
    for (int k = 0; k < renoise_steps; ++k) n.renoise.push_back(gaussian_state(rng, nodes, feat_dim));
    return n;
  }
};

/// Deterministic DDIM over consecutive grid entries. A grid of n entries
/// costs n - 1 network evaluations; the x0 prediction made at the
/// second-to-last entry is returned.
template <Denoiser F>
Matrix ddim_sample(const F &eps_fn, const NoiseGrid &grid, const Matrix &z0, const BaseSchedule &base,
                   const SamplerOptions &opt = {}) {
  if (grid.size() < 2) throw Error("ddim_sample: grid needs at least 2 entries");
  Matrix z = z0;
  project_zero_com_inplace(z);
  detail::observe(opt, z);
  Matrix x;
  for (std::size_t k = 0; k + 1 < grid.size(); ++k) {
    const auto &e = grid[k];
    detail::check_alpha(e, base);
    Matrix eps = eps_fn(z, e);
    project_zero_com_inplace(eps);
    x = detail::x0_from_eps(z, eps, e, opt);
    detail::observe(opt, x);
    if (k + 2 < grid.size()) {
      // Re-derive the noise direction so it agrees with a clipped x0.
      eps = (z - e.alpha * x) / e.sigma;
      const auto &nx = grid[k + 1];
      z = nx.alpha * x + nx.sigma * eps;
      project_zero_com_inplace(z);
      detail::observe(opt, z);
    }
  }
  return x;
}

template <Denoiser F>
PointSet ddim_sample(const F &eps_fn, const NoiseGrid &grid, int n_nodes, int feat_dim, const BaseSchedule &base,
                     RngStream &rng, const SamplerOptions &opt = {}) {
  if (n_nodes < 1) throw Error("ddim_sample: need n_nodes >= 1");
  return PointSet::from_matrix(ddim_sample(eps_fn, grid, gaussian_state(rng, n_nodes, feat_dim), base, opt));
}

/// State of a consistency rollout just before its last generator call.
struct RolloutPrefix {
  Matrix z;        // input to the final generator application
  std::size_t entry = 0;
};

/// Runs the first K - 1 generator applications and re-noisings of a
/// K-step consistency rollout.
template <Denoiser F>
RolloutPrefix consistency_prefix(const F &eps_fn, const NoiseGrid &grid, int K, const TrajectoryNoise &noise,
                                 const BaseSchedule &base, const SamplerOptions &opt = {}) {
  if (K < 1) throw Error("consistency_sample: need K >= 1");
  if (static_cast<std::size_t>(K) > grid.size())
    throw Error("consistency_sample: K=" + std::to_string(K) + " exceeds grid length " + std::to_string(grid.size()));
  if (noise.renoise.size() + 1 < static_cast<std::size_t>(K)) throw Error("consistency_sample: not enough noise");
  RolloutPrefix pre{noise.z0, 0};
  project_zero_com_inplace(pre.z);
  detail::observe(opt, pre.z);
  for (int k = 0; k + 1 < K; ++k) {
    const auto &e = grid[static_cast<std::size_t>(k)];
    detail::check_alpha(e, base);
    Matrix eps = eps_fn(pre.z, e);
    project_zero_com_inplace(eps);
    const Matrix x = detail::x0_from_eps(pre.z, eps, e, opt);
    detail::observe(opt, x);
    const auto &nx = grid[static_cast<std::size_t>(k + 1)];
    Matrix fresh = noise.renoise[static_cast<std::size_t>(k)];
    project_zero_com_inplace(fresh);
    pre.z = nx.alpha * x + nx.sigma * fresh;
    project_zero_com_inplace(pre.z);
    detail::observe(opt, pre.z);
    pre.entry = static_cast<std::size_t>(k + 1);
  }
  return pre;
}

/// K-step consistency sampling: generator in x0-prediction form at grid
/// entries 0..K-1, re-noising with fresh noise between applications.
template <Denoiser F>
Matrix consistency_sample(const F &eps_fn, const NoiseGrid &grid, int K, const TrajectoryNoise &noise,
                          const BaseSchedule &base, const SamplerOptions &opt = {}) {
  const auto pre = consistency_prefix(eps_fn, grid, K, noise, base, opt);
  const auto &e = grid[pre.entry];
  detail::check_alpha(e, base);
  Matrix eps = eps_fn(pre.z, e);
  project_zero_com_inplace(eps);
  Matrix x = detail::x0_from_eps(pre.z, eps, e, opt);
  detail::observe(opt, x);
  return x;
}

template <Denoiser F>
PointSet consistency_sample(const F &eps_fn, const NoiseGrid &grid, int K, int n_nodes, int feat_dim,
                            const BaseSchedule &base, RngStream &rng, const SamplerOptions &opt = {}) {
  if (n_nodes < 1) throw Error("consistency_sample: need n_nodes >= 1");
  const auto noise = TrajectoryNoise::draw(rng, n_nodes, feat_dim, std::max(0, K - 1));
  return PointSet::from_matrix(consistency_sample(eps_fn, grid, K, noise, base, opt));
}

/// Grid with K + 1 entries, so that K-step samplers spend exactly K network
/// evaluations and stop short of t = 0.
inline NoiseGrid sampling_grid(SpacingKind kind, int K, double rho, const BaseSchedule &base) {
  if (K < 1) throw ConfigError("sampling grid: need K >= 1");
  return make_grid(kind, K + 1, rho, base);
}

} // namespace flashdistill
