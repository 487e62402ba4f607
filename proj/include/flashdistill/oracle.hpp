#pragma once

#include "flashdistill/distill.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace flashdistill {

/// Isotropic Gaussian data distribution N(mu_star, var_star I).
struct GaussianTeacher {
  Vector mu_star;
  double var_star = 1.0;

  GaussianTeacher(Vector mu, double var) : mu_star(std::move(mu)), var_star(var) {
    if (!(var > 0.0)) throw ConfigError("GaussianTeacher: variance must be positive");
  }

  Eigen::Index dim() const { return mu_star.size(); }

  /// Variance of the diffused marginal at t.
  double diffused_var(int t, const BaseSchedule &base) const {
    const double a = base.alpha(t);
    return a * a * var_star + base.sigma(t) * base.sigma(t);
  }
};

/// Generator x = scale_g z + mu_g with z ~ N(0, I).
struct LinearGenerator {
  Vector mu_g;
  double scale_g = 1.0;

  LinearGenerator(Vector mu, double scale) : mu_g(std::move(mu)), scale_g(scale) {
    if (!(scale > 0.0)) throw ConfigError("LinearGenerator: scale must be positive");
  }

  /// Pushforward as a Gaussian teacher, the exact "fake" distribution.
  GaussianTeacher as_teacher() const { return GaussianTeacher(mu_g, scale_g * scale_g); }
};

/// Gradient over the linear generator parameters.
struct LinearGrad {
  Vector mu;
  double scale = 0.0;
};

inline Vector diffused_score(const GaussianTeacher &teacher, const Vector &x, int t, const BaseSchedule &base) {
  return -(x - base.alpha(t) * teacher.mu_star) / teacher.diffused_var(t, base);
}

inline double diffused_log_density(const GaussianTeacher &teacher, const Vector &x, int t, const BaseSchedule &base) {
  const double v = teacher.diffused_var(t, base);
  const double D = static_cast<double>(x.size());
  return -0.5 * (x - base.alpha(t) * teacher.mu_star).squaredNorm() / v - 0.5 * D * std::log(2.0 * std::numbers::pi * v);
}

/// Mixture of isotropic Gaussians; its diffused score is the
/// responsibility-weighted sum of component scores.
struct GaussianMixture {
  std::vector<double> weights;
  std::vector<GaussianTeacher> components;

  GaussianMixture(std::vector<double> w, std::vector<GaussianTeacher> c) : weights(std::move(w)), components(std::move(c)) {
    if (weights.size() != components.size() || weights.empty()) throw ConfigError("GaussianMixture: shape mismatch");
    double s = 0.0;
    for (double v : weights) {
      if (!(v > 0.0)) throw ConfigError("GaussianMixture: weights must be positive");
      s += v;
    }
    for (double &v : weights) v /= s;
  }

  std::vector<double> responsibilities(const Vector &x, int t, const BaseSchedule &base) const {
    std::vector<double> logp(weights.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < weights.size(); ++k) {
      logp[k] = std::log(weights[k]) + diffused_log_density(components[k], x, t, base);
      mx = std::max(mx, logp[k]);
    }
    double z = 0.0;
    for (double &l : logp) z += (l = std::exp(l - mx));
    for (double &l : logp) l /= z;
    return logp;
  }

  double log_density(const Vector &x, int t, const BaseSchedule &base) const {
    double mx = -std::numeric_limits<double>::infinity();
    std::vector<double> logp(weights.size());
    for (std::size_t k = 0; k < weights.size(); ++k) {
      logp[k] = std::log(weights[k]) + diffused_log_density(components[k], x, t, base);
      mx = std::max(mx, logp[k]);
    }
    double s = 0.0;
    for (double l : logp) s += std::exp(l - mx);
    return mx + std::log(s);
  }

  Vector score(const Vector &x, int t, const BaseSchedule &base) const {
    const auto g = responsibilities(x, t, base);
    Vector s = Vector::Zero(x.size());
    for (std::size_t k = 0; k < g.size(); ++k) s += g[k] * diffused_score(components[k], x, t, base);
    return s;
  }
};

/// Closed-form expectation over z and eps of (s_fake - s_real) contracted
/// with dG/dtheta at one diffusion step, where s_fake is the exact score of
/// the generator's pushforward.
inline LinearGrad analytic_dmd_grad(const GaussianTeacher &teacher, const LinearGenerator &gen, int t,
                                    const BaseSchedule &base) {
  const double a = base.alpha(t);
  const double vr = teacher.diffused_var(t, base);
  const double vf = gen.as_teacher().diffused_var(t, base);
  LinearGrad g;
  g.mu = a * (gen.mu_g - teacher.mu_star) / vr;
  g.scale = static_cast<double>(teacher.dim()) * a * gen.scale_g * (1.0 / vr - 1.0 / vf);
  return g;
}

/// Real-class probability of the Bayes-optimal discriminator between the
/// diffused teacher (real) and generator (fake) marginals.
inline double exact_disc_prob(const GaussianTeacher &teacher, const LinearGenerator &gen, const Vector &y, int t,
                              const BaseSchedule &base) {
  const double log_r = diffused_log_density(teacher, y, t, base) - diffused_log_density(gen.as_teacher(), y, t, base);
  return 1.0 / (1.0 + std::exp(-log_r));
}

struct McEstimate {
  LinearGrad mean;
  LinearGrad stderr_;
};

/// Brute-force sample average of the (optionally f-weighted) gradient at one
/// step. The weight uses the exact density ratio routed through the same
/// clamps as a learned discriminator.
inline McEstimate mc_dmd_grad(const GaussianTeacher &teacher, const LinearGenerator &gen, int t, const BaseSchedule &base,
                              long samples, RngStream &rng, Divergence kind = Divergence::reverse_kl,
                              const DivergenceSpec &clamps = {}) {
  const Eigen::Index D = teacher.dim();
  const double a = base.alpha(t);
  const double s = base.sigma(t);
  const auto fake = gen.as_teacher();
  Vector sum_mu = Vector::Zero(D), sq_mu = Vector::Zero(D);
  double sum_sc = 0.0, sq_sc = 0.0;
  for (long k = 0; k < samples; ++k) {
    Vector z(D), e(D);
    for (Eigen::Index i = 0; i < D; ++i) z[i] = rng.normal();
    for (Eigen::Index i = 0; i < D; ++i) e[i] = rng.normal();
    const Vector y = a * (gen.scale_g * z + gen.mu_g) + s * e;
    Vector diff = diffused_score(fake, y, t, base) - diffused_score(teacher, y, t, base);
    if (kind != Divergence::reverse_kl)
      diff *= fdiv_weight(kind, ratio_from_disc(exact_disc_prob(teacher, gen, y, t, base), clamps));
    const double sc = diff.dot(z);
    sum_mu += diff;
    sq_mu += diff.cwiseAbs2();
    sum_sc += sc;
    sq_sc += sc * sc;
  }
  const double n = static_cast<double>(samples);
  McEstimate m;
  m.mean.mu = sum_mu / n;
  m.mean.scale = sum_sc / n;
  m.stderr_.mu = ((sq_mu / n - m.mean.mu.cwiseAbs2()).cwiseMax(0.0) / (n - 1.0)).cwiseSqrt();
  m.stderr_.scale = std::sqrt(std::max(0.0, sq_sc / n - m.mean.scale * m.mean.scale) / (n - 1.0));
  return m;
}

struct OracleRunOptions {
  Divergence kind = Divergence::reverse_kl;
  // Diffusion steps averaged per iteration, spread over [0.02 T, 0.98 T].
  int t_points = 8;
  // Fixed draws per step for weighted variants (common random numbers).
  long mc_samples = 512;
  std::uint64_t seed = 0;
  DivergenceSpec clamps{};
};

/// Gradient descent on the distillation gradient of a linear generator
/// against a Gaussian teacher. Reverse-KL uses the closed form; weighted
/// variants use a fixed Monte-Carlo design with the exact density ratio.
inline LinearGenerator oracle_convergence(const GaussianTeacher &teacher, LinearGenerator gen, int iters, double lr,
                                          const BaseSchedule &base, const OracleRunOptions &opt = {}) {
  if (gen.mu_g.size() != teacher.dim()) throw ConfigError("oracle_convergence: dimension mismatch");
  if (opt.t_points < 1 || iters < 0 || !(lr > 0.0)) throw ConfigError("oracle_convergence: bad options");
  const Eigen::Index D = teacher.dim();
  std::vector<int> steps;
  const double lo = 0.02 * base.total_steps();
  const double hi = 0.98 * base.total_steps();
  for (int k = 0; k < opt.t_points; ++k) {
    const double f = opt.t_points == 1 ? 0.5 : static_cast<double>(k) / (opt.t_points - 1);
    steps.push_back(static_cast<int>(round_half_away(lo + f * (hi - lo))));
  }
  // Common random numbers for the weighted variants.
  std::vector<Matrix> zs, es;
  if (opt.kind != Divergence::reverse_kl) {
    RngStream rng(opt.seed, 0x0c1e);
    for (std::size_t k = 0; k < steps.size(); ++k) {
      zs.push_back(rng.normal_matrix(opt.mc_samples, D));
      es.push_back(rng.normal_matrix(opt.mc_samples, D));
    }
  }
  const double inv_t = 1.0 / static_cast<double>(steps.size());
  for (int it = 0; it < iters; ++it) {
    LinearGrad g{Vector::Zero(D), 0.0};
    for (std::size_t k = 0; k < steps.size(); ++k) {
      const int t = steps[k];
      if (opt.kind == Divergence::reverse_kl) {
        const auto a = analytic_dmd_grad(teacher, gen, t, base);
        g.mu += inv_t * a.mu;
        g.scale += inv_t * a.scale;
        continue;
      }
      const double al = base.alpha(t), sg = base.sigma(t);
      const auto fake = gen.as_teacher();
      const double inv_n = inv_t / static_cast<double>(opt.mc_samples);
      for (long n = 0; n < opt.mc_samples; ++n) {
        const Vector z = zs[k].row(n).transpose();
        const Vector y = al * (gen.scale_g * z + gen.mu_g) + sg * es[k].row(n).transpose();
        const double w = fdiv_weight(opt.kind, ratio_from_disc(exact_disc_prob(teacher, gen, y, t, base), opt.clamps));
        const Vector diff = w * (diffused_score(fake, y, t, base) - diffused_score(teacher, y, t, base));
        g.mu += inv_n * diff;
        g.scale += inv_n * diff.dot(z);
      }
    }
    gen.mu_g -= lr * g.mu;
    gen.scale_g = std::max(gen.scale_g - lr * g.scale, 1e-6);
    if (!gen.mu_g.allFinite() || gen.mu_g.norm() > 1e6)
      throw NumericError("oracle_convergence: diverged at iteration " + std::to_string(it));
  }
  return gen;
}

namespace oracle {

/// Generator over flat D-vectors stored as 1 x D matrices, in the shape
/// expected by `dmd_step`; parameters are "mu" (1 x D) and "scale" (1 x 1).
class LinearDistillGenerator {
public:
  struct Tape {
    Matrix z;
  };

  explicit LinearDistillGenerator(const LinearGenerator &g) : params_(make_layout(g.mu_g.size())) {
    params_.segment("mu").row(0) = g.mu_g.transpose();
    params_.segment("scale")(0, 0) = g.scale_g;
  }

  static ParamLayout make_layout(Eigen::Index D) {
    ParamLayout l;
    l.add("mu", 1, D);
    l.add("scale", 1, 1);
    return l;
  }

  const ParamLayout &layout() const { return params_.layout; }
  const ParamVector &params() const { return params_; }

  Matrix generate(const TrajectoryNoise &noise, Tape *tape) const {
    if (tape) tape->z = noise.z0;
    return params_.segment("scale")(0, 0) * noise.z0 + Matrix(params_.segment("mu"));
  }

  void backward(const Tape &tape, const Matrix &g_x, ParamVector &grad) const {
    grad.segment("mu") += g_x;
    grad.segment("scale")(0, 0) += g_x.cwiseProduct(tape.z).sum();
  }

private:
  ParamVector params_;
};

/// Noise batch whose first and second moments over the joint (z, eps) space
/// equal those of the standard Gaussian exactly: the 4D points
/// +-sqrt(2D) e_k. Sample averages of quantities up to quadratic order then
/// reproduce expectations without Monte-Carlo error.
inline std::vector<DmdNoise> moment_design(Eigen::Index D, int t) {
  const Eigen::Index J = 2 * D;
  const double c = std::sqrt(static_cast<double>(J));
  std::vector<DmdNoise> out;
  for (Eigen::Index k = 0; k < J; ++k)
    for (double sign : {1.0, -1.0}) {
      Vector v = Vector::Zero(J);
      v[k] = sign * c;
      DmdNoise n;
      n.rollout.z0 = v.head(D).transpose();
      n.eps = v.tail(D).transpose();
      n.t = t;
      out.push_back(std::move(n));
    }
  return out;
}

/// Score provider over 1 x D matrices from a Gaussian teacher.
struct GaussianScore {
  const GaussianTeacher *teacher;
  const BaseSchedule *base;
  Matrix operator()(const Matrix &y, int t) const {
    return diffused_score(*teacher, y.row(0).transpose(), t, *base).transpose();
  }
};

} // namespace oracle

struct BridgeResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass() const { return error <= tolerance; }
};

/// The oracle gates: the distillation step with analytic scores against the
/// closed form, a Monte-Carlo check of the closed form, zero gradient at the
/// optimum, and convergence of the reverse-KL, JS and forward-KL variants.
inline std::vector<BridgeResult> run_oracle_bridge(const BaseSchedule &base = BaseSchedule(1000)) {
  std::vector<BridgeResult> out;
  Vector mu_star(2);
  mu_star << 1.0, -2.0;
  const GaussianTeacher teacher(mu_star, 1.0);

  {
    Vector mu(2);
    mu << 0.3, 0.4;
    const LinearGenerator gen(mu, 0.7);
    double worst = 0.0;
    for (int t : {20, 137, 500, 861, 980}) {
      const auto fake = gen.as_teacher();
      oracle::LinearDistillGenerator g(gen);
      const oracle::GaussianScore sr{&teacher, &base}, sf{&fake, &base};
      DmdOptions opt;
      opt.normalize = false;
      opt.zero_com = false;
      DivergenceSpec spec;
      spec.lambda_js = 0.0;
      const auto got = dmd_step(g, sr, sf, nullptr, spec, oracle::moment_design(2, t), base, opt);
      const auto want = analytic_dmd_grad(teacher, gen, t, base);
      Vector w(3), h(3);
      w << want.mu, want.scale;
      h << got.gen_grad.grad.segment("mu").row(0).transpose(), got.gen_grad.grad.segment("scale")(0, 0);
      worst = std::max(worst, (h - w).norm() / std::max(w.norm(), 1e-300));
    }
    out.push_back({"dmd_step vs closed form (relative)", worst, 1e-6});
  }
  {
    Vector mu(2);
    mu << -0.5, 0.5;
    const LinearGenerator gen(mu, 1.3);
    RngStream rng(2024);
    const int t = 400;
    const auto mc = mc_dmd_grad(teacher, gen, t, base, 200000, rng);
    const auto want = analytic_dmd_grad(teacher, gen, t, base);
    double z = std::abs(mc.mean.scale - want.scale) / mc.stderr_.scale;
    for (Eigen::Index i = 0; i < 2; ++i) z = std::max(z, std::abs(mc.mean.mu[i] - want.mu[i]) / mc.stderr_.mu[i]);
    out.push_back({"Monte-Carlo vs closed form (standard errors)", z, 3.0});
  }
  {
    const LinearGenerator same(mu_star, 1.0);
    double worst = 0.0;
    for (int t : {20, 500, 980}) {
      const auto g = analytic_dmd_grad(teacher, same, t, base);
      worst = std::max({worst, g.mu.cwiseAbs().maxCoeff(), std::abs(g.scale)});
    }
    out.push_back({"zero gradient at the optimum", worst, 0.0});
  }
  const LinearGenerator init(Vector::Zero(2), 1.0);
  for (auto [kind, tol, name] : {std::tuple{Divergence::reverse_kl, 1e-2, "reverse-KL converges to mu*"},
                                 std::tuple{Divergence::js, 1e-2, "JS converges to mu*"},
                                 std::tuple{Divergence::forward_kl, 5e-2, "forward-KL converges to mu*"}}) {
    OracleRunOptions opt;
    opt.kind = kind;
    const auto fin = oracle_convergence(teacher, init, 5000, 1e-2, base, opt);
    out.push_back({name, (fin.mu_g - mu_star).norm(), tol});
  }
  return out;
}

} // namespace flashdistill
