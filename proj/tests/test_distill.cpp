#include <catch_amalgamated.hpp>

#include "flashdistill/disc.hpp"
#include "flashdistill/distill.hpp"

using namespace flashdistill;

namespace {

double f_of(Divergence kind, double r) {
  switch (kind) {
  case Divergence::reverse_kl: return -std::log(r);
  case Divergence::forward_kl: return r * std::log(r);
  case Divergence::js: return r * std::log(r) - (r + 1.0) * std::log((r + 1.0) / 2.0);
  }
  return 0.0;
}

// f''(r) r^2 by central differences on the generator function itself.
double weight_numeric(Divergence kind, double r) {
  const double h = 1e-3 * r;
  const double f2 = (f_of(kind, r + h) - 2.0 * f_of(kind, r) + f_of(kind, r - h)) / (h * h);
  return f2 * r * r;
}

// Student, real and fake score networks plus a discriminator head over the
// fake network's features.
struct Setup {
  BaseSchedule base{1000};
  NetSpec ns{4, 10, 2, 0};
  Egnn net{ns};
  ParamVector gen, real, fake, dp;
  Discriminator disc{make_disc()};
  NoiseGrid grid = sampling_grid(SpacingKind::respaced, 4, 2.25, base);
  SamplerOptions proj = make_proj();

  static SamplerOptions make_proj() {
    SamplerOptions o;
    o.coord_radius = 3.0;
    o.feat_lo = 0.0;
    o.feat_hi = 1.0;
    return o;
  }

  static DiscSpec make_disc() {
    DiscSpec s;
    s.hidden = 10;
    s.attn_dim = 4;
    s.mlp_dim = 6;
    return s;
  }

  explicit Setup(std::uint64_t seed = 1) {
    RngStream rng(seed);
    real = net.init_params(rng);
    for (Eigen::Index i = 0; i < real.size(); ++i) real.values[i] += 0.02 * rng.normal();
    gen = real;
    fake = real;
    for (Eigen::Index i = 0; i < gen.size(); ++i) gen.values[i] += 0.01 * rng.normal();
    for (Eigen::Index i = 0; i < fake.size(); ++i) fake.values[i] += 0.01 * rng.normal();
    dp = disc.init_params(rng);
    for (Eigen::Index i = 0; i < dp.size(); ++i) dp.values[i] += 0.3 * rng.normal();
  }

  NeuralScore score(const ParamVector &p) const { return NeuralScore{&net, &p, &base, std::nullopt}; }

  RatioFn ratio() const {
    return [this](const Matrix &y, int t, std::optional<double> c) { return disc_prob(disc, dp, net, fake, y, t, base, c); };
  }

  std::vector<DmdNoise> noise(RngStream &rng, int K, int b = 4) const {
    std::vector<DmdNoise> out;
    for (int i = 0; i < b; ++i) out.push_back(draw_dmd_noise(rng, 3 + i % 3, 2, K, base));
    return out;
  }

  DistillGrad step(const ParamVector &g, int K, const DivergenceSpec &spec, const std::vector<DmdNoise> &batch,
                   bool with_disc = true) const {
    ConsistencyGenerator cg(net, g, grid, K, base, std::nullopt, proj);
    const auto r = ratio();
    return dmd_step(cg, score(real), score(fake), with_disc ? &r : nullptr, spec, batch, base);
  }
};

} // namespace

TEST_CASE("f-divergence weights", "[distill]") {
  CHECK(fdiv_weight(Divergence::reverse_kl, 0.37) == 1.0);
  CHECK(fdiv_weight(Divergence::js, 1.0) == 0.5);
  CHECK(fdiv_weight(Divergence::forward_kl, 3.0) == 3.0);
  RngStream rng(1);
  for (int k = 0; k < 1000; ++k) {
    const double r = std::exp(rng.uniform() * 2.0 * std::log(1e3) - std::log(1e3));
    for (auto kind : {Divergence::reverse_kl, Divergence::forward_kl, Divergence::js})
      CHECK(std::abs(fdiv_weight(kind, r) - weight_numeric(kind, r)) <= 1e-5 * std::max(1.0, weight_numeric(kind, r)));
  }
}

TEST_CASE("density ratio from discriminator probabilities", "[distill]") {
  CHECK(ratio_from_disc(0.5) == 1.0);
  CHECK(ratio_from_disc(0.9) == Catch::Approx(9.0).epsilon(1e-14));
  CHECK(ratio_from_disc(1.0 - 1e-9) == 1e3);
  CHECK(ratio_from_disc(1e-9) == 1e-3);
  RngStream rng(2);
  for (int k = 0; k < 1000; ++k) {
    const double p = 0.001 + 0.998 * rng.uniform();
    CHECK(std::abs(fdiv_weight(Divergence::js, ratio_from_disc(p)) - p) <= 1e-12);
  }
}

TEST_CASE("divergence spec parsing and validation", "[distill]") {
  CHECK(parse_divergence("js") == Divergence::js);
  CHECK_THROWS_AS(parse_divergence("hellinger"), ConfigError);
  DivergenceSpec s;
  s.r_min = 2.0;
  s.r_max = 1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
}

TEST_CASE("matching score networks give zero gradient", "[distill]") {
  Setup s;
  s.fake = s.real;
  RngStream rng(3);
  DivergenceSpec spec;
  const auto out = s.step(s.gen, 3, spec, s.noise(rng, 3));
  CHECK(out.gen_grad.grad.values.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.mean_score_gap == 0.0);
}

TEST_CASE("surrogate gradient matches finite differences", "[distill]") {
  Setup s;
  RngStream rng(4);
  for (int K : {1, 3}) {
    const auto batch = s.noise(rng, K);
    DivergenceSpec spec;
    const auto out = s.step(s.gen, K, spec, batch);
    REQUIRE(out.targets.size() == batch.size());
    // The rollout prefix is held fixed: gradients flow through the last step only.
    ConsistencyGenerator base_gen(s.net, s.gen, s.grid, K, s.base, std::nullopt, s.proj);
    std::vector<RolloutPrefix> pre;
    for (const auto &n : batch) pre.push_back(base_gen.prefix(n.rollout));
    auto f = [&](const Vector &v) {
      ParamVector g = s.gen;
      g.values = v;
      ConsistencyGenerator cg(s.net, g, s.grid, K, s.base, std::nullopt, s.proj);
      double loss = 0.0;
      for (std::size_t b = 0; b < batch.size(); ++b)
        loss += 0.5 * (cg.finish(pre[b], nullptr) - out.targets[b]).squaredNorm();
      return loss / static_cast<double>(batch.size());
    };
    RngStream dirs(5);
    CHECK(grad_check(f, s.gen.values, out.gen_grad.grad.values, 100, 1e-5, dirs) <= 1e-4);
  }
}

TEST_CASE("clipped generator gradient matches finite differences", "[distill]") {
  Setup s;
  RngStream rng(6);
  SamplerOptions clip;
  clip.coord_radius = 0.5;
  clip.feat_lo = 0.0;
  clip.feat_hi = 1.0;
  const auto batch = s.noise(rng, 2);
  ConsistencyGenerator cg(s.net, s.gen, s.grid, 2, s.base, std::nullopt, clip);
  std::vector<Matrix> targets;
  std::vector<RolloutPrefix> pre;
  ParamVector grad(s.net.layout());
  for (const auto &n : batch) {
    ConsistencyGenerator::Tape tape;
    pre.push_back(cg.prefix(n.rollout));
    const Matrix x = cg.finish(pre.back(), &tape);
    const Matrix target = x + 0.1 * rng.normal_matrix(x.rows(), x.cols());
    targets.push_back(target);
    cg.backward(tape, x - target, grad);
  }
  auto f = [&](const Vector &v) {
    ParamVector g = s.gen;
    g.values = v;
    ConsistencyGenerator c2(s.net, g, s.grid, 2, s.base, std::nullopt, clip);
    double loss = 0.0;
    for (std::size_t b = 0; b < batch.size(); ++b) loss += 0.5 * (c2.finish(pre[b], nullptr) - targets[b]).squaredNorm();
    return loss;
  };
  RngStream dirs(7);
  CHECK(grad_check(f, s.gen.values, grad.values, 100, 1e-6, dirs) <= 1e-4);
}

TEST_CASE("gradient mixing is additive", "[distill]") {
  Setup s;
  RngStream rng(8);
  const auto batch = s.noise(rng, 2);
  DivergenceSpec dmd;
  dmd.lambda_js = 0.0;
  DivergenceSpec js;
  js.kind = Divergence::js;
  js.lambda_js = 0.0;
  DivergenceSpec mixed;
  mixed.lambda_js = 0.1;
  const auto a = s.step(s.gen, 2, dmd, batch);
  const auto b = s.step(s.gen, 2, js, batch);
  const auto c = s.step(s.gen, 2, mixed, batch);
  const Vector sum = a.gen_grad.grad.values + 0.1 * b.gen_grad.grad.values;
  CHECK((sum - c.gen_grad.grad.values).cwiseAbs().maxCoeff() <= 1e-10 * std::max(1.0, sum.cwiseAbs().maxCoeff()));
  CHECK(b.mean_weight > 0.0);
  CHECK(b.mean_weight < 1.0);
}

TEST_CASE("reverse-KL with unit weights matches plain DMD bit for bit", "[distill]") {
  Setup s;
  RngStream rng(9);
  const auto batch = s.noise(rng, 3);
  DivergenceSpec spec;
  spec.lambda_js = 0.0;
  const auto with = s.step(s.gen, 3, spec, batch, true);
  const auto without = s.step(s.gen, 3, spec, batch, false);
  CHECK(with.gen_grad.grad.values == without.gen_grad.grad.values);
  CHECK(with.mean_weight == 1.0);
}

TEST_CASE("generator gradient is invariant under rotated noise", "[distill]") {
  Setup s;
  RngStream rng(10);
  DivergenceSpec spec;
  double worst = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const int K = 1 + trial % 4;
    auto batch = s.noise(rng, K, 2);
    const auto R = random_rotation(rng);
    auto rotated = batch;
    for (auto &n : rotated) {
      apply_rotation_inplace(n.rollout.z0, R);
      for (auto &e : n.rollout.renoise) apply_rotation_inplace(e, R);
      apply_rotation_inplace(n.eps, R);
    }
    const Vector a = s.step(s.gen, K, spec, batch).gen_grad.grad.values;
    const Vector b = s.step(s.gen, K, spec, rotated).gen_grad.grad.values;
    worst = std::max(worst, (a - b).norm() / std::max(a.norm(), 1e-300));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("distillation step errors", "[distill]") {
  Setup s;
  RngStream rng(11);
  DivergenceSpec spec;
  spec.lambda_js = 0.1;
  CHECK_THROWS_AS(s.step(s.gen, 2, spec, s.noise(rng, 2), false), Error);
  CHECK_THROWS_AS(s.step(s.gen, 2, spec, {}, true), Error);
  auto bad = [](const Matrix &y, int) { return Matrix(Matrix::Constant(y.rows(), y.cols(), std::nan(""))); };
  ConsistencyGenerator cg(s.net, s.gen, s.grid, 1, s.base);
  DivergenceSpec plain;
  plain.lambda_js = 0.0;
  CHECK_THROWS_AS(dmd_step(cg, s.score(s.real), bad, nullptr, plain, s.noise(rng, 1), s.base), NumericError);
}

TEST_CASE("dmd steps are drawn inside the interior range", "[distill]") {
  BaseSchedule base(1000);
  RngStream rng(12);
  int lo = 1000, hi = 0;
  for (int k = 0; k < 20000; ++k) {
    const int t = sample_dmd_step(base, rng);
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  CHECK(lo == 20);
  CHECK(hi == 980);
}
