#pragma once

#include "flashdistill/core.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace flashdistill {

struct Segment {
  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 1;

  Eigen::Index size() const { return rows * cols; }
};

/// Named, disjoint segments covering a flat parameter vector.
class ParamLayout {
public:
  /// Append a rows x cols segment (stored row-major) and return its offset.
  Eigen::Index add(const std::string &name, Eigen::Index rows, Eigen::Index cols = 1) {
    if (index_.count(name)) throw Error("ParamLayout: duplicate segment '" + name + "'");
    Segment s{name, total_, rows, cols};
    index_[name] = segments_.size();
    segments_.push_back(s);
    total_ += s.size();
    return s.offset;
  }

  const Segment &at(const std::string &name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("ParamLayout: unknown segment '" + name + "'");
    return segments_[it->second];
  }

  bool contains(const std::string &name) const { return index_.count(name) != 0; }
  const std::vector<Segment> &segments() const { return segments_; }
  Eigen::Index total() const { return total_; }

  bool operator==(const ParamLayout &o) const {
    if (segments_.size() != o.segments_.size() || total_ != o.total_) return false;
    for (std::size_t i = 0; i < segments_.size(); ++i) {
      const auto &a = segments_[i];
      const auto &b = o.segments_[i];
      if (a.name != b.name || a.offset != b.offset || a.rows != b.rows || a.cols != b.cols) return false;
    }
    return true;
  }

private:
  std::vector<Segment> segments_;
  std::map<std::string, std::size_t> index_;
  Eigen::Index total_ = 0;
};

using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

/// Flat parameter values plus the layout that names them.
struct ParamVector {
  ParamLayout layout;
  Vector values;

  ParamVector() = default;
  explicit ParamVector(ParamLayout l) : layout(std::move(l)), values(Vector::Zero(layout.total())) {}

  RowMap segment(const std::string &name) {
    const auto &s = layout.at(name);
    return RowMap(values.data() + s.offset, s.rows, s.cols);
  }
  ConstRowMap segment(const std::string &name) const {
    const auto &s = layout.at(name);
    return ConstRowMap(values.data() + s.offset, s.rows, s.cols);
  }

  Eigen::Index size() const { return values.size(); }
  bool finite() const { return values.allFinite(); }
};

/// Gradient aligned with a ParamVector layout, plus the scalar it differentiates.
struct GradReport {
  double loss = 0.0;
  ParamVector grad;

  GradReport() = default;
  explicit GradReport(const ParamLayout &layout) : grad(layout) {}

  GradReport &operator+=(const GradReport &o) {
    loss += o.loss;
    grad.values += o.grad.values;
    return *this;
  }
  GradReport &operator*=(double s) {
    loss *= s;
    grad.values *= s;
    return *this;
  }
};

/// Compare analytic directional derivatives against central differences along
/// random unit directions. Returns the largest relative error
/// |a - b| / max(|a|, |b|, 1e-12).
inline double grad_check(const std::function<double(const Vector &)> &f, const Vector &p,
                         const Vector &analytic_grad, int directions, double eps, RngStream &rng) {
  if (directions < 1) throw Error("grad_check: need at least one direction");
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw Error("grad_check: eps must lie in [1e-7, 1e-3]");
  if (analytic_grad.size() != p.size()) throw Error("grad_check: gradient size mismatch");
  double worst = 0.0;
  for (int k = 0; k < directions; ++k) {
    Vector u(p.size());
    for (Eigen::Index i = 0; i < u.size(); ++i) u[i] = rng.normal();
    const double nrm = u.norm();
    if (nrm == 0.0) continue;
    u /= nrm;
    const double fp = f(p + eps * u);
    const double fm = f(p - eps * u);
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("grad_check: non-finite value at probe " + std::to_string(k));
    const double numeric = (fp - fm) / (2.0 * eps);
    const double analytic = analytic_grad.dot(u);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

/// Adam with bias correction; owns its moment buffers.
class Adam {
public:
  Adam() = default;
  Adam(Eigen::Index size, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), m_(Vector::Zero(size)), v_(Vector::Zero(size)) {}

  void step(Vector &params, const Vector &grad) {
    if (grad.size() != params.size() || grad.size() != m_.size()) throw Error("Adam: size mismatch");
    ++steps_;
    m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
    v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    params.array() -= lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  long steps() const { return steps_; }
  const Vector &first_moment() const { return m_; }
  const Vector &second_moment() const { return v_; }

private:
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  long steps_ = 0;
  Vector m_;
  Vector v_;
};

/// ema <- decay * ema + (1 - decay) * current
inline void ema_update(Vector &ema, const Vector &current, double decay) {
  ema = decay * ema + (1.0 - decay) * current;
}

// Checkpoint file:
//   magic "FDCK", u32 schema version, u32 description length, description
//   bytes, u32 segment count, then per segment: u32 name length, name,
//   u64 rows, u64 cols, rows*cols little-endian float64 values.

namespace detail {

inline void put_u32(std::ostream &os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char *>(b), 4);
}
inline void put_u64(std::ostream &os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char *>(b), 8);
}
inline std::uint32_t get_u32(std::istream &is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char *>(b), 4)) throw Error("checkpoint: truncated");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}
inline std::uint64_t get_u64(std::istream &is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char *>(b), 8)) throw Error("checkpoint: truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}
inline void put_f64(std::ostream &os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(std::istream &is) { return std::bit_cast<double>(get_u64(is)); }

} // namespace detail

inline constexpr std::uint32_t kCheckpointSchema = 1;

struct Checkpoint {
  std::string description;
  std::vector<std::pair<std::string, ParamVector>> nets;
};

inline void write_checkpoint(std::ostream &os, const Checkpoint &ck) {
  os.write("FDCK", 4);
  detail::put_u32(os, kCheckpointSchema);
  detail::put_u32(os, static_cast<std::uint32_t>(ck.description.size()));
  os.write(ck.description.data(), static_cast<std::streamsize>(ck.description.size()));
  std::uint32_t count = 0;
  for (const auto &[prefix, pv] : ck.nets) count += static_cast<std::uint32_t>(pv.layout.segments().size());
  detail::put_u32(os, count);
  for (const auto &[prefix, pv] : ck.nets) {
    for (const auto &s : pv.layout.segments()) {
      const std::string name = prefix + "/" + s.name;
      detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      detail::put_u64(os, static_cast<std::uint64_t>(s.rows));
      detail::put_u64(os, static_cast<std::uint64_t>(s.cols));
      for (Eigen::Index i = 0; i < s.size(); ++i) detail::put_f64(os, pv.values[s.offset + i]);
    }
  }
  if (!os) throw Error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream &is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "FDCK", 4) != 0) throw Error("checkpoint: bad magic");
  const auto version = detail::get_u32(is);
  if (version != kCheckpointSchema) throw Error("checkpoint: unsupported schema " + std::to_string(version));
  Checkpoint ck;
  ck.description.resize(detail::get_u32(is));
  if (!is.read(ck.description.data(), static_cast<std::streamsize>(ck.description.size())))
    throw Error("checkpoint: truncated description");
  const auto count = detail::get_u32(is);
  std::vector<std::pair<std::string, std::pair<Segment, std::vector<double>>>> raw;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name(detail::get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw Error("checkpoint: truncated name");
    Segment s;
    s.rows = static_cast<Eigen::Index>(detail::get_u64(is));
    s.cols = static_cast<Eigen::Index>(detail::get_u64(is));
    std::vector<double> vals(static_cast<std::size_t>(s.size()));
    for (auto &v : vals) v = detail::get_f64(is);
    raw.emplace_back(std::move(name), std::make_pair(s, std::move(vals)));
  }
  std::vector<std::pair<std::string, ParamLayout>> layouts;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
  for (auto &[full, payload] : raw) {
    const auto slash = full.find('/');
    if (slash == std::string::npos) throw Error("checkpoint: segment name without net prefix");
    const std::string prefix = full.substr(0, slash);
    if (layouts.empty() || layouts.back().first != prefix) {
      layouts.emplace_back(prefix, ParamLayout{});
      buffers.emplace_back(prefix, std::vector<double>{});
    }
    layouts.back().second.add(full.substr(slash + 1), payload.first.rows, payload.first.cols);
    auto &buf = buffers.back().second;
    buf.insert(buf.end(), payload.second.begin(), payload.second.end());
  }
  for (std::size_t i = 0; i < layouts.size(); ++i) {
    ParamVector pv(layouts[i].second);
    pv.values = Eigen::Map<const Vector>(buffers[i].second.data(), static_cast<Eigen::Index>(buffers[i].second.size()));
    ck.nets.emplace_back(layouts[i].first, std::move(pv));
  }
  return ck;
}

inline void save_checkpoint(const std::string &path, const Checkpoint &ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open '" + path + "' for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open '" + path + "'");
  return read_checkpoint(is);
}

inline const ParamVector &find_net(const Checkpoint &ck, const std::string &name) {
  for (const auto &[n, pv] : ck.nets)
    if (n == name) return pv;
  throw Error("checkpoint: no network named '" + name + "'");
}

} // namespace flashdistill
