#include <catch_amalgamated.hpp>

#include "flashdistill/schedule.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>

using namespace flashdistill;
using Catch::Approx;

namespace {

std::vector<int> steps(const NoiseGrid &g) {
  std::vector<int> out;
  for (const auto &e : g.entries) out.push_back(e.t);
  return out;
}

// Inverse of the VP relation sigma^2 = 1 - (1 - f^2)^2 by bisection; an
// independent route to the closed-form respacing fraction.
double invert_by_bisection(double sigma) {
  double lo = 0.0, hi = 1.0;
  for (int k = 0; k < 200; ++k) {
    const double mid = 0.5 * (lo + hi);
    const double a = 1.0 - mid * mid;
    (std::sqrt(1.0 - a * a) < sigma ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

} // namespace

TEST_CASE("base schedule is variance preserving and monotone", "[schedule]") {
  const BaseSchedule base(1000);
  double prev_alpha = 2.0, prev_sigma = -1.0;
  for (int t = 0; t <= 1000; ++t) {
    const double a = base.alpha(t), s = base.sigma(t);
    CHECK(a * a + s * s == Approx(1.0).margin(1e-12));
    CHECK(a < prev_alpha);
    CHECK(s > prev_sigma);
    CHECK(a >= std::sqrt(base.precision()));
    prev_alpha = a;
    prev_sigma = s;
  }
  CHECK(base.alpha(500) == Approx(0.75).epsilon(1e-5));
  CHECK_THROWS_AS(base.check_step(1001), Error);
}

TEST_CASE("edm_sigmas ladder", "[schedule]") {
  const auto s = edm_sigmas(5, 0.1, 1.0, 2.0);
  CHECK(s[0] == 1.0);
  CHECK(s[4] == 0.1);
  CHECK(s[2] == Approx(0.43311).margin(1e-5));
  for (std::size_t i = 1; i < s.size(); ++i) CHECK(s[i] < s[i - 1]);
  CHECK_THROWS_AS(edm_sigmas(1, 0.1, 1.0, 2.0), ConfigError);
  CHECK_THROWS_AS(edm_sigmas(4, 1.0, 0.1, 2.0), ConfigError);
}

TEST_CASE("respace follows the inverted ladder", "[schedule]") {
  const BaseSchedule base(1000);
  SECTION("endpoints") {
    for (double rho : {0.5, 1.0, 2.25, 7.0}) CHECK(steps(respace(2, rho, base)) == std::vector<int>{1000, 0});
  }
  SECTION("n = 3, rho = 2 middle step") {
    const auto g = respace(3, 2.0, base);
    REQUIRE(g.size() == 3);
    CHECK(std::abs(g[1].t - 178) <= 1);
    CHECK(respaced_fraction(1, 3, 2.0) == Approx(0.17820).margin(1e-5));
  }
  SECTION("closed form agrees with numeric inversion of the ladder") {
    for (double rho : {1.0, 2.25, 5.0, 7.0})
      for (int i = 0; i < 10; ++i) {
        const double u = i / 9.0;
        // Ladder with sigma_max = 1 and sigma_min -> 0, indexed from low noise.
        const double sigma = std::pow(u, rho);
        CHECK(respaced_fraction(i, 10, rho) == Approx(invert_by_bisection(sigma)).margin(1e-9));
      }
  }
  SECTION("rho = 7 degenerates toward t = 0") {
    int tiny = 0;
    for (int i = 0; i < 1000; ++i) tiny += respaced_fraction(i, 1000, 7.0) < 1e-3;
    CHECK(tiny >= 380);
  }
  SECTION("grids are high-noise first with strictly decreasing sigma") {
    for (double rho : {0.5, 1.0, 2.25, 3.0, 7.0, 12.0})
      for (int n : {2, 4, 8, 50, 1000}) {
        const auto g = respace(n, rho, base);
        REQUIRE(g.size() == static_cast<std::size_t>(n));
        CHECK(g[0].t == 1000);
        CHECK(g[g.size() - 1].t == 0);
        for (std::size_t k = 1; k < g.size(); ++k) {
          CHECK(g[k].t < g[k - 1].t);
          CHECK(g[k].sigma < g[k - 1].sigma);
        }
      }
  }
  SECTION("rho = 1 is not the uniform grid") {
    // Continuous fraction at the midpoint: sqrt(1 - sqrt(3/4)) vs 1/2.
    CHECK(std::abs(respaced_fraction(500, 1000, 1.0) - 500.0 / 999.0) > 0.1);
    const auto r = respace(100, 1.0, base);
    const auto u = uniform_grid(100, base);
    CHECK(r[50].t != u[50].t);
  }
  SECTION("larger rho concentrates steps at low noise") {
    auto low = [&](double rho) {
      int c = 0;
      for (const auto &e : respace(1000, rho, base).entries) c += e.t < 300;
      return c;
    };
    int prev = 0;
    for (double rho : {0.5, 1.0, 2.0, 2.25, 3.0, 5.0, 7.0}) {
      const int c = low(rho);
      CHECK(c >= prev);
      prev = c;
    }
  }
}

TEST_CASE("uniform grid", "[schedule]") {
  CHECK(steps(uniform_grid(2, BaseSchedule(1000))) == std::vector<int>{1000, 0});
  CHECK(steps(uniform_grid(5, BaseSchedule(1000))) == std::vector<int>{1000, 750, 500, 250, 0});
  CHECK(steps(uniform_grid(3, BaseSchedule(999))) == std::vector<int>{999, 500, 0});
  CHECK_THROWS_AS(uniform_grid(1, BaseSchedule(10)), ConfigError);
  CHECK_THROWS_AS(uniform_grid(11, BaseSchedule(10)), ConfigError);
  CHECK(round_half_away(-2.5) == -3);
  CHECK(round_half_away(2.5) == 3);
}

TEST_CASE("share of ladder steps below a small t/T", "[schedule]") {
  // Ladder sigma_i = (i/(n-1))^rho is below the sigma at t/T = f exactly when
  // t_i/T < f, so count directly in sigma.
  auto by_sigma = [](int n, double rho, double f) {
    const double s = std::sqrt(1.0 - std::pow(1.0 - f * f, 2));
    int c = 0;
    for (int i = 0; i < n; ++i) c += std::pow(static_cast<double>(i) / (n - 1), rho) < s;
    return static_cast<double>(c) / n;
  };
  for (double rho : {1.0, 2.25, 5.0, 7.0})
    for (int n : {8, 64, 1000})
      CHECK(small_step_fraction(SpacingKind::respaced, n, rho) == Approx(by_sigma(n, rho, 1e-3)).margin(1e-12));
  CHECK(small_step_fraction(SpacingKind::respaced, 1000, 7.0) == Approx(0.392).margin(1e-12));
  CHECK(small_step_fraction(SpacingKind::uniform, 1000, 7.0) == Approx(0.001).margin(1e-12)); // only i = 0
  CHECK(small_step_fraction(SpacingKind::respaced, 1000, 7.0) > small_step_fraction(SpacingKind::respaced, 1000, 2.25));
  CHECK_THROWS_AS(small_step_fraction(SpacingKind::respaced, 1, 7.0), ConfigError);
}

TEST_CASE("grid csv layout", "[schedule]") {
  const BaseSchedule base(1000);
  const auto g = uniform_grid(3, base);
  std::ostringstream os;
  os << std::setprecision(3);
  write_grid_csv(os, g);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "i,t,alpha,sigma");
  int rows = 0;
  while (std::getline(is, line)) {
    int i = 0, t = 0;
    double a = 0.0, s = 0.0;
    char c1, c2, c3;
    std::istringstream row(line);
    row >> i >> c1 >> t >> c2 >> a >> c3 >> s;
    REQUIRE(row);
    CHECK(i == rows);
    CHECK(t == g[static_cast<std::size_t>(i)].t);
    CHECK(a == Approx(g[static_cast<std::size_t>(i)].alpha).margin(1e-11));
    CHECK(s == Approx(g[static_cast<std::size_t>(i)].sigma).margin(1e-11));
    ++rows;
  }
  CHECK(rows == 3);
  CHECK(os.precision() == 3);
}
