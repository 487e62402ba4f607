#pragma once

#include "flashdistill/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace flashdistill {

enum class Divergence { reverse_kl, forward_kl, js };

inline const char *to_string(Divergence d) {
  switch (d) {
  case Divergence::reverse_kl: return "reverse_kl";
  case Divergence::forward_kl: return "forward_kl";
  case Divergence::js: return "js";
  }
  return "?";
}

inline Divergence parse_divergence(const std::string &s) {
  if (s == "reverse_kl") return Divergence::reverse_kl;
  if (s == "forward_kl") return Divergence::forward_kl;
  if (s == "js") return Divergence::js;
  throw ConfigError("unknown divergence '" + s + "' (expected reverse_kl|forward_kl|js)");
}

struct DivergenceSpec {
  Divergence kind = Divergence::reverse_kl;
  double lambda_js = 0.1;
  double r_min = 1e-3;
  double r_max = 1e3;

  void validate() const {
    if (!(r_min > 0.0 && r_min < r_max)) throw ConfigError("divergence: need 0 < r_min < r_max");
    if (!std::isfinite(lambda_js) || lambda_js < 0.0) throw ConfigError("divergence: lambda_js must be finite and >= 0");
  }

  /// Whether the update needs density-ratio estimates at all.
  bool needs_ratio() const { return kind != Divergence::reverse_kl || lambda_js > 0.0; }
};

/// Weight f''(r) r^2 multiplying the score difference.
inline double fdiv_weight(Divergence kind, double r) {
  switch (kind) {
  case Divergence::reverse_kl: return 1.0;
  case Divergence::forward_kl: return r;
  case Divergence::js: return r / (r + 1.0);
  }
  return 1.0;
}

inline constexpr double kProbClamp = 1e-4;

/// Density ratio p_real / p_fake from a discriminator's real-class
/// probability. The probability is clamped first, the ratio second.
inline double ratio_from_disc(double p_real, const DivergenceSpec &spec = {}) {
  const double p = std::clamp(p_real, kProbClamp, 1.0 - kProbClamp);
  return std::clamp(p / (1.0 - p), spec.r_min, spec.r_max);
}

/// Noise consumed by one generator sample inside a distillation step: the
/// rollout noise, the diffusion step used for the score evaluation, and the
/// corruption noise at that step.
struct DmdNoise {
  TrajectoryNoise rollout;
  int t = 0;
  Matrix eps;
  std::optional<double> cond; // per-sample condition for conditional models
};

/// Uniform draw of the score-evaluation step over [0.02 T, 0.98 T].
inline int sample_dmd_step(const BaseSchedule &base, RngStream &rng) {
  const int lo = static_cast<int>(round_half_away(0.02 * base.total_steps()));
  const int hi = static_cast<int>(round_half_away(0.98 * base.total_steps()));
  return static_cast<int>(rng.uniform_int(std::max(lo, 1), std::max(hi, 1)));
}

inline DmdNoise draw_dmd_noise(RngStream &rng, Eigen::Index nodes, Eigen::Index feat_dim, int K,
                               const BaseSchedule &base, bool zero_com = true) {
  DmdNoise n;
  n.rollout = TrajectoryNoise::draw(rng, nodes, feat_dim, std::max(0, K - 1));
  n.t = sample_dmd_step(base, rng);
  n.eps = rng.normal_matrix(nodes, 3 + feat_dim);
  if (zero_com) project_zero_com_inplace(n.eps);
  return n;
}

struct DistillGrad {
  GradReport gen_grad;
  double mean_score_gap = 0.0;
  double mean_weight = 0.0;
  double eta = 1.0;
  std::vector<int> t_values;
  // Per-sample regression targets of the surrogate loss, for diagnostics and
  // finite-difference checks.
  std::vector<Matrix> targets;

  double t_mean() const {
    if (t_values.empty()) return 0.0;
    double s = 0.0;
    for (int t : t_values) s += t;
    return s / static_cast<double>(t_values.size());
  }
};

/// Generator contract used by the distillation step: a forward pass that
/// records what its reverse pass needs, and a reverse pass accumulating
/// parameter gradients from an upstream gradient on the generated sample.
template <class G>
concept DistillGenerator = requires(const G &g, const TrajectoryNoise &n, const Matrix &gx, ParamVector &grad) {
  typename G::Tape;
  { g.generate(n, std::declval<typename G::Tape *>()) } -> std::convertible_to<Matrix>;
  g.backward(std::declval<const typename G::Tape &>(), gx, grad);
  { g.layout() } -> std::convertible_to<const ParamLayout &>;
};

/// Score provider: `Matrix(const Matrix &y, int t)`.
template <class S>
concept ScoreFn = requires(const S &s, const Matrix &y, int t) {
  { s(y, t) } -> std::convertible_to<Matrix>;
};

/// Real-class probability provider for a noised sample, its step and its
/// condition.
using RatioFn = std::function<double(const Matrix &, int, std::optional<double>)>;

namespace detail {

// Conditional models take the per-sample condition; unconditional ones
// (such as the analytic oracles) are called without it.
template <class G>
Matrix generate_with(const G &gen, const DmdNoise &nz, typename G::Tape *tape) {
  if constexpr (requires { gen.generate(nz.rollout, nz.cond, tape); })
    return gen.generate(nz.rollout, nz.cond, tape);
  else
    return gen.generate(nz.rollout, tape);
}

template <class S> Matrix score_with(const S &s, const Matrix &y, const DmdNoise &nz) {
  if constexpr (requires { s(y, nz.t, nz.cond); })
    return s(y, nz.t, nz.cond);
  else
    return s(y, nz.t);
}

} // namespace detail

struct DmdOptions {
  bool normalize = true; // per-batch eta = 1 / rms(x - x0_real)
  bool zero_com = true;  // corrupt with zero-COM noise in the coordinate block
};

/// One generator gradient of the mixed distillation objective. The rollout
/// keeps a parameter path only through the final generator application;
/// gradients are realized through the surrogate 1/2 |x - sg(x - g)|^2 with
/// g = eta * w * (s_fake - s_real), averaged over the batch.
template <DistillGenerator G, ScoreFn R, ScoreFn F>
DistillGrad dmd_step(const G &gen, const R &score_real, const F &score_fake, const RatioFn *disc,
                     const DivergenceSpec &spec, const std::vector<DmdNoise> &batch, const BaseSchedule &base,
                     const DmdOptions &opt = {}) {
  spec.validate();
  if (batch.empty()) throw Error("dmd_step: empty batch");
  if (spec.needs_ratio() && disc == nullptr)
    throw Error("dmd_step: divergence '" + std::string(to_string(spec.kind)) + "' needs a discriminator");

  struct Item {
    typename G::Tape tape;
    Matrix x;
    Matrix diff;
    double weight = 1.0;
  };
  std::vector<Item> items(batch.size());
  double sq_sum = 0.0;
  double entry_count = 0.0;
  DistillGrad out;
  out.gen_grad = GradReport(gen.layout());

  for (std::size_t b = 0; b < batch.size(); ++b) {
    auto &it = items[b];
    const auto &nz = batch[b];
    base.check_step(nz.t);
    it.x = detail::generate_with(gen, nz, &it.tape);
    const double alpha = base.alpha(nz.t);
    const double sigma = base.sigma(nz.t);
    Matrix eps = nz.eps;
    if (opt.zero_com) project_zero_com_inplace(eps);
    const Matrix y = alpha * it.x + sigma * eps;
    const Matrix s_real = detail::score_with(score_real, y, nz);
    const Matrix s_fake = detail::score_with(score_fake, y, nz);
    it.diff = s_fake - s_real;
    if (!it.diff.allFinite()) throw NumericError("dmd_step: non-finite score difference at t=" + std::to_string(nz.t));
    // x0 prediction of the real score model: (y + sigma^2 s_real) / alpha.
    const Matrix x0_real = (y + sigma * sigma * s_real) / alpha;
    // Root-mean-square rather than mean absolute value: the Frobenius norm is
    // rotation-invariant, so eta does not break the gradient's invariance.
    sq_sum += (it.x - x0_real).squaredNorm();
    entry_count += static_cast<double>(it.x.size());
    if (spec.needs_ratio()) {
      const double r = ratio_from_disc((*disc)(y, nz.t, nz.cond), spec);
      if (spec.kind == Divergence::reverse_kl)
        it.weight = 1.0 + spec.lambda_js * fdiv_weight(Divergence::js, r);
      else
        it.weight = fdiv_weight(spec.kind, r);
    }
    out.mean_score_gap += it.diff.norm();
    out.mean_weight += it.weight;
    out.t_values.push_back(nz.t);
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  out.eta = 1.0;
  if (opt.normalize) out.eta = 1.0 / std::max(std::sqrt(sq_sum / entry_count), 1e-12);
  out.mean_score_gap *= inv_b;
  out.mean_weight *= inv_b;

  for (auto &it : items) {
    const Matrix g = (out.eta * it.weight) * it.diff;
    out.gen_grad.loss += 0.5 * inv_b * g.squaredNorm();
    out.targets.push_back(it.x - g);
    gen.backward(it.tape, inv_b * g, out.gen_grad.grad);
  }
  if (!out.gen_grad.grad.finite()) throw NumericError("dmd_step: non-finite generator gradient");
  return out;
}

/// Few-step generator: the epsilon network in x0-prediction form applied
/// along a consistency rollout of K steps.
class ConsistencyGenerator {
public:
  struct Tape {
    egnn::Tape net;
    double scale = 0.0; // d raw / d eps = -sigma / alpha
    Matrix raw;         // x0 prediction before projection
  };

  ConsistencyGenerator(const Egnn &net, const ParamVector &params, const NoiseGrid &grid, int K,
                       const BaseSchedule &base, std::optional<double> cond = std::nullopt,
                       SamplerOptions opt = {})
      : net_(&net), params_(&params), grid_(&grid), K_(K), base_(&base), cond_(cond), opt_(std::move(opt)) {}

  const ParamLayout &layout() const { return net_->layout(); }
  int steps() const { return K_; }

  /// Parameter-free part of the rollout (the first K - 1 steps).
  RolloutPrefix prefix(const TrajectoryNoise &noise, std::optional<double> cond = std::nullopt) const {
    NeuralDenoiser den(*net_, *params_, *base_, cond ? cond : cond_);
    return consistency_prefix(den, *grid_, K_, noise, *base_, opt_);
  }

  /// Final generator application, the only one gradients flow through.
  Matrix finish(const RolloutPrefix &pre, Tape *tape, std::optional<double> cond = std::nullopt) const {
    const auto &e = (*grid_)[pre.entry];
    egnn::Tape local;
    const auto out = net_->forward(*params_, pre.z, static_cast<double>(e.t) / base_->total_steps(),
                                   cond ? cond : cond_, tape ? &tape->net : &local);
    Matrix eps = out.eps;
    project_zero_com_inplace(eps);
    Matrix x = (pre.z - e.sigma * eps) / e.alpha;
    if (tape) {
      tape->scale = -e.sigma / e.alpha;
      tape->raw = x;
    }
    detail::project_x0_inplace(x, opt_);
    return x;
  }

  Matrix generate(const TrajectoryNoise &noise, Tape *tape) const { return finish(prefix(noise), tape); }

  /// Per-sample condition, overriding the generator's own when set.
  Matrix generate(const TrajectoryNoise &noise, std::optional<double> cond, Tape *tape) const {
    return finish(prefix(noise, cond), tape, cond);
  }

  void backward(const Tape &tape, const Matrix &g_x, ParamVector &grad) const {
    // Reverse of: ball and box projections, then the (symmetric) zero-COM map.
    Matrix g = g_x;
    project_zero_com_inplace(g);
    const Matrix &raw = tape.raw;
    if (opt_.coord_radius > 0.0)
      for (Eigen::Index i = 0; i < raw.rows(); ++i) {
        const Eigen::RowVector3d u = raw.row(i).head<3>();
        const double n = u.norm();
        if (n <= opt_.coord_radius) continue;
        const Eigen::RowVector3d gi = g.row(i).head<3>();
        const Eigen::RowVector3d uh = u / n;
        g.row(i).head<3>() = (opt_.coord_radius / n) * (gi - gi.dot(uh) * uh);
      }
    if (opt_.feat_lo < opt_.feat_hi) {
      const Eigen::Index d = raw.cols() - 3;
      for (Eigen::Index i = 0; i < raw.rows(); ++i)
        for (Eigen::Index c = 3; c < 3 + d; ++c)
          if (raw(i, c) < opt_.feat_lo || raw(i, c) > opt_.feat_hi) g(i, c) = 0.0;
    }
    net_->backward(*params_, tape.net, tape.scale * g, {}, grad);
  }

private:
  const Egnn *net_;
  const ParamVector *params_;
  const NoiseGrid *grid_;
  int K_;
  const BaseSchedule *base_;
  std::optional<double> cond_;
  SamplerOptions opt_;
};

/// Score of a frozen epsilon network, -eps / sigma.
struct NeuralScore {
  const Egnn *net = nullptr;
  const ParamVector *params = nullptr;
  const BaseSchedule *base = nullptr;
  std::optional<double> cond;

  Matrix operator()(const Matrix &y, int t) const { return (*this)(y, t, std::nullopt); }

  Matrix operator()(const Matrix &y, int t, std::optional<double> c) const {
    const auto out = net->forward(*params, y, static_cast<double>(t) / base->total_steps(), c ? c : cond);
    return eps_to_score(out.eps, base->sigma(t));
  }
};

} // namespace flashdistill
