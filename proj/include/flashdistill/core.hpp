#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace flashdistill {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Base class for every error raised by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments (CLI exit code 2).
struct ConfigError : Error {
  using Error::Error;
};

/// Non-finite values or divergence during numerics (CLI exit code 3).
struct NumericError : Error {
  using Error::Error;
};

/// Seeded random stream. Streams derived from the same (seed, id) pair
/// produce identical sequences.
class RngStream {
public:
  explicit RngStream(std::uint64_t seed = 0, std::uint64_t stream_id = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32), 0x9e3779b9u};
    engine_.seed(seq);
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  /// Uniform integer in [lo, hi] inclusive.
  long uniform_int(long lo, long hi) {
    std::uniform_int_distribution<long> dist(lo, hi);
    return dist(engine_);
  }

  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = normal();
    return m;
  }

  /// Derive an independent child stream; advances this stream.
  RngStream split() {
    const auto a = engine_();
    const auto b = engine_();
    return RngStream(a, b);
  }

  std::mt19937_64 &engine() { return engine_; }

private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

inline bool all_finite(const Eigen::Ref<const Matrix> &m) { return m.allFinite(); }

/// Round half away from zero.
inline long round_half_away(double v) {
  return static_cast<long>(v < 0.0 ? -std::floor(-v + 0.5) : std::floor(v + 0.5));
}

} // namespace flashdistill
