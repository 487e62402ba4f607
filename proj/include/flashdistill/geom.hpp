#pragma once

#include "flashdistill/core.hpp"

#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace flashdistill {

/// A molecule-like point cloud: N nodes, each with 3 coordinates followed by
/// d invariant features, stored row-wise in one N x (3+d) matrix.
///
/// Group actions use the right-multiplication convention: a rotation R acts
/// on coordinates as coords * R and leaves features untouched.
class PointSet {
public:
  PointSet() = default;

  PointSet(Eigen::Index nodes, Eigen::Index feat_dim) : data_(Matrix::Zero(nodes, 3 + feat_dim)) {
    if (nodes < 1 || feat_dim < 1) throw Error("PointSet needs N >= 1 and d >= 1");
  }

  PointSet(const Eigen::Ref<const Matrix> &coords, const Eigen::Ref<const Matrix> &feats)
      : PointSet(coords.rows(), feats.cols()) {
    if (coords.cols() != 3 || feats.rows() != coords.rows())
      throw Error("PointSet: coords must be N x 3 and feats N x d");
    data_.leftCols(3) = coords;
    data_.rightCols(feats.cols()) = feats;
  }

  static PointSet from_matrix(Matrix data) {
    if (data.cols() < 4 || data.rows() < 1) throw Error("PointSet: matrix needs >= 4 columns");
    PointSet p;
    p.data_ = std::move(data);
    return p;
  }

  Eigen::Index node_count() const { return data_.rows(); }
  Eigen::Index feat_dim() const { return data_.cols() - 3; }

  auto coords() { return data_.leftCols(3); }
  auto coords() const { return data_.leftCols(3); }
  auto feats() { return data_.rightCols(data_.cols() - 3); }
  auto feats() const { return data_.rightCols(data_.cols() - 3); }

  Matrix &data() { return data_; }
  const Matrix &data() const { return data_; }

  bool finite() const { return data_.allFinite(); }

  /// Largest absolute column mean of the coordinate block.
  double com_error() const { return data_.leftCols(3).colwise().mean().cwiseAbs().maxCoeff(); }

private:
  Matrix data_;
};

/// Subtract the column-wise coordinate mean in place; only the first three
/// columns of `m` are touched.
inline void project_zero_com_inplace(Eigen::Ref<Matrix> m) {
  const Eigen::RowVector3d mean = m.leftCols(3).colwise().mean();
  m.leftCols(3).rowwise() -= mean;
}

inline PointSet project_zero_com(PointSet p) {
  project_zero_com_inplace(p.data());
  return p;
}

/// Proper rotation in SO(3).
class Rotation {
public:
  Rotation() : mat_(Eigen::Matrix3d::Identity()) {}

  explicit Rotation(const Eigen::Matrix3d &m) : mat_(m) {
    if ((m * m.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-10 ||
        std::abs(m.determinant() - 1.0) > 1e-10)
      throw Error("Rotation: matrix is not in SO(3)");
  }

  /// Rotation by `angle` radians about a unit axis, in the row-vector
  /// convention (x * R rotates x counter-clockwise about the axis).
  static Rotation about_axis(const Eigen::Vector3d &axis, double angle) {
    const Eigen::Matrix3d col = Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
    return Rotation(Eigen::Matrix3d(col.transpose()));
  }

  const Eigen::Matrix3d &mat() const { return mat_; }

  /// Block-diagonal extension diag(R, I_d) acting on a full N x (3+d) row.
  Matrix block(Eigen::Index feat_dim) const {
    Matrix b = Matrix::Identity(3 + feat_dim, 3 + feat_dim);
    b.topLeftCorner(3, 3) = mat_;
    return b;
  }

private:
  Eigen::Matrix3d mat_;
};

inline void apply_rotation_inplace(Eigen::Ref<Matrix> m, const Rotation &r) {
  m.leftCols(3) = (m.leftCols(3) * r.mat()).eval();
}

inline PointSet apply_rotation(PointSet p, const Rotation &r) {
  apply_rotation_inplace(p.data(), r);
  return p;
}

/// Haar-uniform rotation from a normalized Gaussian quaternion.
inline Rotation random_rotation(RngStream &rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  const Eigen::Matrix3d m = q.toRotationMatrix();
  return Rotation(Eigen::Matrix3d(m.transpose()));
}

/// Draw an N x (3+d) standard Gaussian with the coordinate block projected
/// to zero center of mass.
inline Matrix gaussian_state(RngStream &rng, Eigen::Index nodes, Eigen::Index feat_dim) {
  Matrix m = rng.normal_matrix(nodes, 3 + feat_dim);
  project_zero_com_inplace(m);
  return m;
}

// XYZ-style records: count line, comment line, then one line per node as
// `<type-index> x y z f1 .. fd` where type-index is the argmax feature.

inline int argmax_type(const Eigen::Ref<const Eigen::RowVectorXd> &feats) {
  Eigen::Index idx = 0;
  feats.maxCoeff(&idx);
  return static_cast<int>(idx);
}

inline void write_xyz(std::ostream &os, const PointSet &p, const std::string &comment = "") {
  os << p.node_count() << '\n' << comment << '\n';
  const auto old_flags = os.flags();
  const auto old_prec = os.precision();
  os << std::setprecision(9);
  for (Eigen::Index i = 0; i < p.node_count(); ++i) {
    os << argmax_type(p.feats().row(i));
    for (Eigen::Index c = 0; c < p.data().cols(); ++c) os << ' ' << p.data()(i, c);
    os << '\n';
  }
  os.flags(old_flags);
  os.precision(old_prec);
}

/// Read one record; returns false on clean end of stream.
inline bool read_xyz(std::istream &is, PointSet &out, std::string *comment = nullptr) {
  std::string line;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") != std::string::npos) break;
  }
  if (!is) return false;
  long n = 0;
  {
    std::istringstream ls(line);
    if (!(ls >> n) || n < 1) throw Error("xyz: bad node count line '" + line + "'");
  }
  std::string cmt;
  if (!std::getline(is, cmt)) throw Error("xyz: missing comment line");
  if (comment) *comment = cmt;
  std::vector<std::vector<double>> rows;
  for (long i = 0; i < n; ++i) {
    if (!std::getline(is, line)) throw Error("xyz: truncated record");
    std::istringstream ls(line);
    int type = 0;
    if (!(ls >> type)) throw Error("xyz: bad node line '" + line + "'");
    std::vector<double> vals;
    double v = 0;
    while (ls >> v) vals.push_back(v);
    if (vals.size() < 4) throw Error("xyz: node line needs 3 coordinates and >= 1 feature");
    if (!rows.empty() && vals.size() != rows.front().size())
      throw Error("xyz: inconsistent column count");
    rows.push_back(std::move(vals));
  }
  Matrix m(n, static_cast<Eigen::Index>(rows.front().size()));
  for (long i = 0; i < n; ++i)
    for (std::size_t c = 0; c < rows[i].size(); ++c) m(i, static_cast<Eigen::Index>(c)) = rows[i][c];
  if (!m.allFinite()) throw Error("xyz: non-finite entry");
  out = PointSet::from_matrix(std::move(m));
  return true;
}

inline void write_xyz_file(std::ostream &os, const std::vector<PointSet> &sets) {
  for (std::size_t k = 0; k < sets.size(); ++k) {
    if (k) os << '\n';
    write_xyz(os, sets[k], "sample " + std::to_string(k));
  }
}

inline std::vector<PointSet> read_xyz_all(std::istream &is) {
  std::vector<PointSet> out;
  PointSet p;
  while (read_xyz(is, p)) out.push_back(p);
  return out;
}

} // namespace flashdistill
