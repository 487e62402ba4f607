#include <catch_amalgamated.hpp>

#include "flashdistill/oracle.hpp"

using namespace flashdistill;

namespace {

Vector vec2(double a, double b) {
  Vector v(2);
  v << a, b;
  return v;
}

// Central-difference gradient of a scalar function of a vector.
template <class F> Vector numeric_grad(const F &f, const Vector &x, double h = 1e-5) {
  Vector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vector a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

} // namespace

TEST_CASE("diffused Gaussian score", "[oracle]") {
  BaseSchedule base(1000);
  const GaussianTeacher teacher(vec2(1.0, -2.0), 0.5);
  SECTION("vanishes at the diffused mode") {
    for (int t : {0, 300, 1000}) CHECK(diffused_score(teacher, base.alpha(t) * teacher.mu_star, t, base).norm() == 0.0);
  }
  SECTION("clean limit of a unit Gaussian") {
    const GaussianTeacher unit(vec2(0.5, 0.5), 1.0);
    const Vector x = vec2(2.0, -1.0);
    // alpha^2 + sigma^2 = 1 makes the diffused variance exactly 1 for v* = 1.
    const Vector s = diffused_score(unit, x, 0, base);
    CHECK((s + (x - base.alpha(0) * unit.mu_star)).norm() <= 1e-15);
    CHECK((s + (x - unit.mu_star)).norm() <= 1e-5);
  }
  SECTION("matches the derivative of the log-density") {
    RngStream rng(3);
    for (int k = 0; k < 50; ++k) {
      const int t = static_cast<int>(rng.uniform_int(0, 1000));
      const Vector x = vec2(3.0 * rng.normal(), 3.0 * rng.normal());
      const auto f = [&](const Vector &v) { return diffused_log_density(teacher, v, t, base); };
      CHECK((numeric_grad(f, x) - diffused_score(teacher, x, t, base)).cwiseAbs().maxCoeff() <= 1e-6);
    }
  }
}

TEST_CASE("two-component mixture score", "[oracle]") {
  BaseSchedule base(1000);
  const GaussianMixture gmm({0.3, 0.7}, {GaussianTeacher(vec2(-2.0, 0.0), 0.2), GaussianTeacher(vec2(2.0, 1.0), 0.4)});
  RngStream rng(4);
  for (int k = 0; k < 50; ++k) {
    const int t = static_cast<int>(rng.uniform_int(0, 1000));
    const Vector x = vec2(3.0 * rng.normal(), 3.0 * rng.normal());
    const auto f = [&](const Vector &v) { return gmm.log_density(v, t, base); };
    CHECK((numeric_grad(f, x) - gmm.score(x, t, base)).cwiseAbs().maxCoeff() <= 1e-6);
  }
  const auto g = gmm.responsibilities(vec2(-2.0, 0.0), 0, base);
  CHECK(g[0] > 0.99);
}

TEST_CASE("closed-form distillation gradient", "[oracle]") {
  BaseSchedule base(1000);
  const GaussianTeacher teacher(vec2(1.0, -2.0), 1.0);
  SECTION("zero at the teacher") {
    const auto g = analytic_dmd_grad(teacher, LinearGenerator(teacher.mu_star, 1.0), 500, base);
    CHECK(g.mu.norm() == 0.0);
    CHECK(g.scale == 0.0);
  }
  SECTION("descent moves the mean toward the teacher") {
    const LinearGenerator gen(vec2(3.0, 0.0), 1.0);
    for (int t : {20, 500, 980}) {
      const auto g = analytic_dmd_grad(teacher, gen, t, base);
      for (Eigen::Index i = 0; i < 2; ++i)
        CHECK(std::signbit(-g.mu[i]) == std::signbit(teacher.mu_star[i] - gen.mu_g[i]));
      CHECK(g.scale == Catch::Approx(0.0).margin(1e-15));
    }
  }
  SECTION("too-wide generators shrink, too-narrow ones widen") {
    CHECK(analytic_dmd_grad(teacher, LinearGenerator(teacher.mu_star, 2.0), 400, base).scale > 0.0);
    CHECK(analytic_dmd_grad(teacher, LinearGenerator(teacher.mu_star, 0.5), 400, base).scale < 0.0);
  }
  SECTION("brute-force sampling agrees within three standard errors") {
    const LinearGenerator gen(vec2(-0.5, 0.5), 1.3);
    RngStream rng(11);
    for (int t : {100, 600}) {
      const auto mc = mc_dmd_grad(teacher, gen, t, base, 1000000, rng);
      const auto want = analytic_dmd_grad(teacher, gen, t, base);
      for (Eigen::Index i = 0; i < 2; ++i) CHECK(std::abs(mc.mean.mu[i] - want.mu[i]) <= 3.0 * mc.stderr_.mu[i]);
      CHECK(std::abs(mc.mean.scale - want.scale) <= 3.0 * mc.stderr_.scale);
    }
  }
}

TEST_CASE("moment design reproduces Gaussian moments", "[oracle]") {
  const auto design = oracle::moment_design(3, 10);
  REQUIRE(design.size() == 12);
  Matrix m2 = Matrix::Zero(6, 6);
  Vector m1 = Vector::Zero(6);
  for (const auto &n : design) {
    Vector v(6);
    v << n.rollout.z0.row(0).transpose(), n.eps.row(0).transpose();
    m1 += v / 12.0;
    m2 += v * v.transpose() / 12.0;
  }
  CHECK(m1.cwiseAbs().maxCoeff() <= 1e-15);
  CHECK((m2 - Matrix::Identity(6, 6)).cwiseAbs().maxCoeff() <= 1e-14);
}

TEST_CASE("oracle bridge gates", "[oracle]") {
  for (const auto &r : run_oracle_bridge()) {
    INFO(r.name << " error=" << r.error << " tol=" << r.tolerance);
    CHECK(r.pass());
  }
}

TEST_CASE("JS and forward-KL share the reverse-KL fixed point", "[oracle]") {
  BaseSchedule base(1000);
  const GaussianTeacher teacher(vec2(1.0, -2.0), 1.0);
  for (auto kind : {Divergence::js, Divergence::forward_kl}) {
    OracleRunOptions opt;
    opt.kind = kind;
    const auto fin = oracle_convergence(teacher, LinearGenerator(Vector::Zero(2), 1.0), 5000, 1e-2, base, opt);
    CHECK(std::abs(fin.scale_g - 1.0) <= 5e-2);
  }
}

TEST_CASE("oracle convergence reports divergence", "[oracle]") {
  BaseSchedule base(1000);
  const GaussianTeacher teacher(vec2(1.0, -2.0), 1.0);
  CHECK_THROWS_AS(oracle_convergence(teacher, LinearGenerator(Vector::Zero(2), 1.0), 2000, 50.0, base), NumericError);
  CHECK_THROWS_AS(oracle_convergence(teacher, LinearGenerator(Vector::Zero(3), 1.0), 10, 1e-2, base), ConfigError);
}
