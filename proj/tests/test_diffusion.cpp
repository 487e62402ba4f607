#include <catch_amalgamated.hpp>

#include "flashdistill/diffusion.hpp"

using namespace flashdistill;

namespace {

ParamVector busy_params(const Egnn &net, RngStream &rng, double scale = 0.1) {
  ParamVector p = net.init_params(rng);
  for (Eigen::Index i = 0; i < p.size(); ++i) p.values[i] += scale * rng.normal();
  return p;
}

PointSet random_set(RngStream &rng, int n, int d = 2) {
  return PointSet::from_matrix(gaussian_state(rng, n, d));
}

// Exact posterior-mean noise for data x0 ~ N(mu, v I) restricted to the
// zero-COM subspace in the coordinate block.
struct GaussianEps {
  Matrix mu;
  double var;
  Matrix operator()(const Matrix &z, const GridEntry &e) const {
    Matrix out = e.sigma * (z - e.alpha * mu) / (e.alpha * e.alpha * var + e.sigma * e.sigma);
    project_zero_com_inplace(out);
    return out;
  }
};

// Exact Gaussian posterior plus a small equivariant network term, so that
// trajectories stay bounded while still exercising the EGNN.
struct PerturbedOracle {
  GaussianEps oracle;
  NeuralDenoiser net;
  double weight;
  Matrix operator()(const Matrix &z, const GridEntry &e) const { return oracle(z, e) + weight * net(z, e); }
};

PerturbedOracle perturbed(const Egnn &net, const ParamVector &params, const BaseSchedule &base, int n) {
  return PerturbedOracle{GaussianEps{Matrix::Zero(n, 5), 1.0}, NeuralDenoiser(net, params, base), 1e-3};
}

} // namespace

TEST_CASE("corrupt follows the forward process", "[diffusion]") {
  BaseSchedule base(1000);
  RngStream rng(3);
  const auto p = random_set(rng, 6);
  for (int t : {0, 1, 250, 999, 1000}) {
    RngStream a(42), b(42);
    const auto c = corrupt(p, t, base, a);
    Matrix eps = b.normal_matrix(6, 5);
    project_zero_com_inplace(eps);
    CHECK((c.eps_true - eps).cwiseAbs().maxCoeff() == 0.0);
    CHECK(c.eps_true.leftCols(3).colwise().mean().cwiseAbs().maxCoeff() <= 1e-8);
    CHECK(std::abs(c.alpha * c.alpha + c.sigma * c.sigma - 1.0) <= 1e-12);
    CHECK((c.noisy.data() - (c.alpha * p.data() + c.sigma * eps)).cwiseAbs().maxCoeff() <= 1e-15);
    CHECK(c.noisy.com_error() <= 1e-12);
  }
  SECTION("t = 0 is nearly clean") {
    const auto c = corrupt(p, 0, base, rng);
    CHECK((c.noisy.data() - p.data()).cwiseAbs().maxCoeff() <= 8.0 * base.sigma(0) + 1e-5);
  }
  SECTION("zero input gives pure scaled noise") {
    const PointSet zero = PointSet::from_matrix(Matrix::Zero(5, 5));
    const auto c = corrupt(zero, 500, base, rng);
    CHECK((c.noisy.data() - base.sigma(500) * c.eps_true).cwiseAbs().maxCoeff() <= 1e-15);
  }
  SECTION("out-of-range step") { CHECK_THROWS_AS(corrupt(p, 1001, base, rng), Error); }
}

TEST_CASE("true noise maps to the perturbation-kernel score", "[diffusion]") {
  BaseSchedule base(1000);
  RngStream rng(5);
  const auto p = random_set(rng, 5);
  const auto c = corrupt(p, 400, base, rng);
  const Matrix kernel_score = -(c.noisy.data() - c.alpha * p.data()) / (c.sigma * c.sigma);
  CHECK((eps_to_score(c.eps_true, c.sigma) - kernel_score).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("zero head loss matches the projected noise energy", "[diffusion]") {
  BaseSchedule base(1000);
  Egnn net(NetSpec{2, 8, 2, 0});
  RngStream rng(6);
  const auto params = net.init_params(rng);
  const int n = 4;
  std::vector<PointSet> batch(100, random_set(rng, n));
  const int draws = 100;
  std::vector<double> losses;
  for (int k = 0; k < draws; ++k) losses.push_back(eps_loss(net, params, batch, base, rng).loss);
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / draws;
  double var = 0.0;
  for (double l : losses) var += (l - mean) * (l - mean);
  const double se = std::sqrt(var / (draws - 1) / draws);
  const double expected = expected_eps_sq_per_node(n, 2);
  CHECK(expected == Catch::Approx((3.0 * 3.0 + 2.0 * 4.0) / 4.0));
  CHECK(std::abs(mean - expected) <= 3.0 * se);
}

TEST_CASE("eps_loss gradient matches finite differences", "[diffusion]") {
  BaseSchedule base(1000);
  for (int cond_dim : {0, 1}) {
    Egnn net(NetSpec{3, 8, 2, cond_dim});
    RngStream rng(7);
    const auto params = busy_params(net, rng);
    std::vector<PointSet> batch{random_set(rng, 3), random_set(rng, 5), random_set(rng, 1)};
    std::vector<double> conds{0.3, -1.2, 0.8};
    const auto *cp = cond_dim ? &conds : nullptr;
    auto f = [&](const Vector &v) {
      ParamVector q = params;
      q.values = v;
      RngStream r(77);
      return eps_loss(net, q, batch, base, r, 0.02, cp).loss;
    };
    RngStream r(77);
    const auto rep = eps_loss(net, params, batch, base, r, 0.02, cp);
    RngStream dirs(9);
    CHECK(grad_check(f, params.values, rep.grad.values, 100, 1e-5, dirs) <= 1e-4);
  }
}

TEST_CASE("eps_loss argument errors", "[diffusion]") {
  BaseSchedule base(100);
  Egnn net(NetSpec{2, 4, 2, 0});
  RngStream rng(1);
  const auto params = net.init_params(rng);
  CHECK_THROWS_AS(eps_loss(net, params, {}, base, rng), Error);
  std::vector<double> conds{1.0, 2.0};
  CHECK_THROWS_AS(eps_loss(net, params, {random_set(rng, 3)}, base, rng, 0.02, &conds), Error);
}

TEST_CASE("eps_loss samples t from the configured range", "[diffusion]") {
  BaseSchedule base(200);
  CHECK(min_train_step(0.02, base) == 4);
  CHECK(min_train_step(0.0, base) == 0);
  CHECK(min_train_step(1.5, base) == 200);
}

TEST_CASE("DDIM with the exact Gaussian posterior recovers the data moments", "[diffusion]") {
  BaseSchedule base(1000);
  const int n = 3;
  const int d = 1;
  Matrix mu(n, 3 + d);
  mu << 1.0, -0.5, 0.2, 0.7, -1.0, 0.5, 0.1, -0.3, 0.0, 0.0, -0.3, 1.5;
  project_zero_com_inplace(mu);
  const double var = 0.25;
  GaussianEps oracle{mu, var};
  const auto grid = uniform_grid(500, base);
  RngStream rng(10);
  const int samples = 10000;
  Matrix sum = Matrix::Zero(n, 3 + d);
  Matrix sq = Matrix::Zero(n, 3 + d);
  for (int s = 0; s < samples; ++s) {
    const Matrix x = ddim_sample(oracle, grid, gaussian_state(rng, n, d), base);
    sum += x;
    sq += (x - mu).cwiseAbs2();
  }
  const Matrix mean = sum / samples;
  const Matrix var_hat = sq / samples;
  // Coordinates live on the zero-COM subspace: per-entry variance v (n-1)/n.
  const double coord_var = var * (n - 1) / n;
  const double se_mean = std::sqrt(var / samples);
  CHECK((mean - mu).cwiseAbs().maxCoeff() <= 4.0 * se_mean);
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) CHECK(std::abs(var_hat(i, c) / coord_var - 1.0) <= 0.06);
    CHECK(std::abs(var_hat(i, 3) / var - 1.0) <= 0.06);
  }
}

TEST_CASE("samplers keep the center of mass at zero", "[diffusion]") {
  BaseSchedule base(1000);
  Egnn net(NetSpec{2, 8, 2, 0});
  RngStream rng(12);
  const auto params = busy_params(net, rng, 0.1);
  double worst = 0.0;
  SamplerOptions opt;
  opt.observer = [&](const Matrix &m) { worst = std::max(worst, m.leftCols(3).colwise().mean().cwiseAbs().maxCoeff()); };
  const auto grid = sampling_grid(SpacingKind::respaced, 4, 2.25, base);
  const auto ugrid = sampling_grid(SpacingKind::uniform, 4, 1.0, base);
  for (int s = 0; s < 100; ++s) {
    const int n = 3 + s % 5;
    const auto den = perturbed(net, params, base, n);
    consistency_sample(den, grid, 4, n, 2, base, rng, opt);
    ddim_sample(den, ugrid, n, 2, base, rng, opt);
  }
  CHECK(worst <= 1e-8);
}

TEST_CASE("consistency sampling calls the generator once per step", "[diffusion]") {
  BaseSchedule base(1000);
  const auto grid = sampling_grid(SpacingKind::respaced, 4, 2.0, base);
  REQUIRE(grid.size() == 5);
  std::vector<int> seen;
  auto fn = [&](const Matrix &z, const GridEntry &e) {
    seen.push_back(e.t);
    return Matrix(Matrix::Zero(z.rows(), z.cols()));
  };
  RngStream rng(1);
  consistency_sample(fn, grid, 1, 4, 2, base, rng);
  REQUIRE(seen.size() == 1);
  CHECK(seen[0] == 1000);
  seen.clear();
  consistency_sample(fn, grid, 4, 4, 2, base, rng);
  REQUIRE(seen.size() == 4);
  for (std::size_t k = 0; k < 4; ++k) CHECK(seen[k] == grid[k].t);
  seen.clear();
  ddim_sample(fn, grid, 4, 2, base, rng);
  CHECK(seen.size() == 4);
  CHECK_THROWS_AS(consistency_sample(fn, grid, 6, 4, 2, base, rng), Error);
  CHECK_THROWS_AS(consistency_sample(fn, grid, 0, 4, 2, base, rng), Error);
}

TEST_CASE("samplers are deterministic given the seed", "[diffusion]") {
  BaseSchedule base(1000);
  Egnn net(NetSpec{2, 8, 2, 0});
  RngStream rng(13);
  const auto params = busy_params(net, rng, 0.1);
  const auto den = perturbed(net, params, base, 5);
  const auto grid = sampling_grid(SpacingKind::respaced, 3, 2.25, base);
  RngStream a(5), b(5);
  const auto x = consistency_sample(den, grid, 3, 5, 2, base, a);
  const auto y = consistency_sample(den, grid, 3, 5, 2, base, b);
  CHECK((x.data() - y.data()).cwiseAbs().maxCoeff() == 0.0);
  const auto u = ddim_sample(den, grid, 5, 2, base, a);
  const auto v = ddim_sample(den, grid, 5, 2, base, b);
  CHECK((u.data() - v.data()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sampling commutes with rotations of all injected noise", "[diffusion]") {
  BaseSchedule base(1000);
  Egnn net(NetSpec{3, 8, 2, 0});
  RngStream rng(14);
  const auto params = busy_params(net, rng, 0.1);
  const auto den = perturbed(net, params, base, 5);
  const auto grid = sampling_grid(SpacingKind::respaced, 4, 2.25, base);
  for (int trial = 0; trial < 10; ++trial) {
    const auto noise = TrajectoryNoise::draw(rng, 5, 2, 3);
    const auto R = random_rotation(rng);
    TrajectoryNoise rotated = noise;
    apply_rotation_inplace(rotated.z0, R);
    for (auto &e : rotated.renoise) apply_rotation_inplace(e, R);
    Matrix x = consistency_sample(den, grid, 4, noise, base);
    const Matrix y = consistency_sample(den, grid, 4, rotated, base);
    apply_rotation_inplace(x, R);
    const double scale = std::max(1.0, x.cwiseAbs().maxCoeff());
    CHECK((x - y).cwiseAbs().maxCoeff() <= 1e-6 * scale);
  }
}

TEST_CASE("x0 projection bounds every prediction", "[diffusion]") {
  BaseSchedule base(1000);
  auto wild = [](const Matrix &z, const GridEntry &) { return Matrix(-5.0 * z); };
  const auto grid = sampling_grid(SpacingKind::uniform, 4, 1.0, base);
  SamplerOptions opt;
  opt.coord_radius = 3.0;
  opt.feat_lo = 0.0;
  opt.feat_hi = 1.0;
  double worst_radius = 0.0, worst_feat = 0.0;
  int predictions = 0;
  opt.observer = [&](const Matrix &m) {
    // Every other observed state is an x0 prediction.
    if (predictions++ % 2 == 0) return;
    worst_radius = std::max(worst_radius, m.leftCols(3).rowwise().norm().maxCoeff());
    worst_feat = std::max(worst_feat, (m.rightCols(2).array() - 0.5).abs().maxCoeff());
  };
  RngStream rng(2);
  consistency_sample(wild, grid, 3, 4, 2, base, rng, opt);
  // The zero-COM shift after the ball projection moves nodes by at most the radius.
  CHECK(worst_radius <= 6.0);
  CHECK(worst_feat <= 0.5);
}

TEST_CASE("x0 projection keeps sampling rotation-equivariant", "[diffusion]") {
  BaseSchedule base(1000);
  auto wild = [](const Matrix &z, const GridEntry &) { return Matrix(-5.0 * z); };
  const auto grid = sampling_grid(SpacingKind::respaced, 3, 2.25, base);
  SamplerOptions opt;
  opt.coord_radius = 2.0;
  RngStream rng(3);
  const auto noise = TrajectoryNoise::draw(rng, 5, 2, 2);
  const auto R = random_rotation(rng);
  auto rotated = noise;
  apply_rotation_inplace(rotated.z0, R);
  for (auto &e : rotated.renoise) apply_rotation_inplace(e, R);
  Matrix x = consistency_sample(wild, grid, 3, noise, base, opt);
  apply_rotation_inplace(x, R);
  CHECK((x - consistency_sample(wild, grid, 3, rotated, base, opt)).cwiseAbs().maxCoeff() <= 1e-12);
}
