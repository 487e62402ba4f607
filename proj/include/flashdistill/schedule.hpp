#pragma once

#include "flashdistill/core.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

namespace flashdistill {

/// Variance-preserving polynomial schedule with alpha_t ~ 1 - (t/T)^2 and
/// sigma_t = sqrt(1 - alpha_t^2). The precision floor is applied on the
/// squared signal level, alpha_t^2 = (1 - 2p) (1 - (t/T)^2)^2 + p, which keeps
/// alpha strictly decreasing in t and bounded inside [sqrt(p), sqrt(1 - p)].
class BaseSchedule {
public:
  explicit BaseSchedule(int total_steps = 1000, double precision = 1e-5)
      : total_(total_steps), precision_(precision) {
    if (total_steps < 1) throw ConfigError("BaseSchedule: T must be positive");
    if (!(precision > 0.0 && precision < 0.5)) throw ConfigError("BaseSchedule: bad precision");
  }

  int total_steps() const { return total_; }
  double precision() const { return precision_; }

  double alpha(int t) const { return alpha_frac(static_cast<double>(t) / total_); }
  double sigma(int t) const { return sigma_of(alpha(t)); }

  double alpha_frac(double frac) const {
    const double a = 1.0 - frac * frac;
    return std::sqrt((1.0 - 2.0 * precision_) * a * a + precision_);
  }

  static double sigma_of(double alpha) { return std::sqrt(1.0 - alpha * alpha); }

  void check_step(int t) const {
    if (t < 0 || t > total_) throw Error("timestep " + std::to_string(t) + " outside [0, T]");
  }

private:
  int total_;
  double precision_;
};

enum class SpacingKind { uniform, respaced };

inline const char *to_string(SpacingKind k) { return k == SpacingKind::uniform ? "uniform" : "respaced"; }

inline SpacingKind parse_spacing(const std::string &s) {
  if (s == "uniform") return SpacingKind::uniform;
  if (s == "respaced") return SpacingKind::respaced;
  throw ConfigError("unknown grid kind '" + s + "' (expected uniform|respaced)");
}

struct GridEntry {
  int t = 0;
  double alpha = 1.0;
  double sigma = 0.0;
};

/// Timesteps selected from a base schedule, ordered from highest to lowest
/// noise. Samplers consume the grid front to back.
struct NoiseGrid {
  std::vector<GridEntry> entries;
  SpacingKind kind = SpacingKind::uniform;
  double rho = 1.0;

  std::size_t size() const { return entries.size(); }
  const GridEntry &operator[](std::size_t k) const { return entries[k]; }
};

/// EDM noise ladder, sigma_max at i = 0 down to sigma_min at i = n - 1.
inline std::vector<double> edm_sigmas(int n, double sigma_min, double sigma_max, double rho) {
  if (n < 2) throw ConfigError("edm_sigmas: need n >= 2");
  if (!(sigma_min > 0.0 && sigma_max > sigma_min && rho > 0.0))
    throw ConfigError("edm_sigmas: need 0 < sigma_min < sigma_max and rho > 0");
  const double a = std::pow(sigma_max, 1.0 / rho);
  const double b = std::pow(sigma_min, 1.0 / rho);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double frac = static_cast<double>(i) / (n - 1);
    out[static_cast<std::size_t>(i)] = std::pow(a + frac * (b - a), rho);
  }
  out.front() = sigma_max;
  out.back() = sigma_min;
  return out;
}

/// Continuous t/T for ladder index i of n, obtained by inverting
/// sigma^2 = 1 - (1 - (t/T)^2)^2 for the EDM ladder with sigma in [0, 1].
inline double respaced_fraction(int i, int n, double rho) {
  const double u = static_cast<double>(i) / (n - 1);
  const double inner = 1.0 - std::pow(u, 2.0 * rho);
  return std::sqrt(std::max(0.0, 1.0 - std::sqrt(std::max(0.0, inner))));
}

namespace detail {

inline NoiseGrid grid_from_steps(const std::vector<int> &ascending, const BaseSchedule &base,
                                 SpacingKind kind, double rho) {
  NoiseGrid g;
  g.kind = kind;
  g.rho = rho;
  g.entries.reserve(ascending.size());
  for (auto it = ascending.rbegin(); it != ascending.rend(); ++it)
    g.entries.push_back({*it, base.alpha(*it), base.sigma(*it)});
  return g;
}

} // namespace detail

/// Respaced grid: t/T from the inverted EDM ladder, rounded half away from
/// zero; collisions are resolved by nudging later steps up one at a time.
inline NoiseGrid respace(int n, double rho, const BaseSchedule &base) {
  const int T = base.total_steps();
  if (n < 2) throw ConfigError("respace: need n >= 2");
  if (n > T + 1) throw ConfigError("respace: n exceeds T + 1 distinct steps");
  if (!(rho > 0.0)) throw ConfigError("respace: rho must be positive");
  std::vector<int> steps(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    steps[static_cast<std::size_t>(i)] = static_cast<int>(round_half_away(respaced_fraction(i, n, rho) * T));
  for (std::size_t i = 1; i < steps.size(); ++i)
    if (steps[i] <= steps[i - 1]) steps[i] = steps[i - 1] + 1;
  // Nudging can push the tail past T; pull it back down while keeping the
  // sequence strictly increasing and the endpoint at T.
  if (steps.back() > T) {
    steps.back() = T;
    for (std::size_t i = steps.size() - 1; i-- > 0;)
      if (steps[i] >= steps[i + 1]) steps[i] = steps[i + 1] - 1;
  }
  return detail::grid_from_steps(steps, base, SpacingKind::respaced, rho);
}

/// DDIM-style grid with t_i = round(i T / (n - 1)).
inline NoiseGrid uniform_grid(int n, const BaseSchedule &base) {
  const int T = base.total_steps();
  if (n < 2 || n > T) throw ConfigError("uniform_grid: need 2 <= n <= T");
  std::vector<int> steps(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    steps[static_cast<std::size_t>(i)] =
        static_cast<int>(round_half_away(static_cast<double>(i) * T / (n - 1)));
  return detail::grid_from_steps(steps, base, SpacingKind::uniform, 1.0);
}

inline NoiseGrid make_grid(SpacingKind kind, int n, double rho, const BaseSchedule &base) {
  return kind == SpacingKind::uniform ? uniform_grid(n, base) : respace(n, rho, base);
}

/// Fraction of the n continuous (pre-rounding) grid fractions t/T below
/// `threshold`. Rounding and deduplication hide the collapse this measures.
inline double small_step_fraction(SpacingKind kind, int n, double rho, double threshold = 1e-3) {
  if (n < 2) throw ConfigError("small_step_fraction: need n >= 2");
  int count = 0;
  for (int i = 0; i < n; ++i) {
    const double f = kind == SpacingKind::uniform ? static_cast<double>(i) / (n - 1) : respaced_fraction(i, n, rho);
    count += f < threshold;
  }
  return static_cast<double>(count) / n;
}

/// CSV with header `i,t,alpha,sigma`, 12 significant digits.
inline void write_grid_csv(std::ostream &os, const NoiseGrid &grid) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os << "i,t,alpha,sigma\n" << std::setprecision(12);
  for (std::size_t i = 0; i < grid.size(); ++i)
    os << i << ',' << grid[i].t << ',' << grid[i].alpha << ',' << grid[i].sigma << '\n';
  os.flags(flags);
  os.precision(prec);
}

} // namespace flashdistill
