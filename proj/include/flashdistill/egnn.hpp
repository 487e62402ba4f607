#pragma once

#include "flashdistill/geom.hpp"
#include "flashdistill/netgrad.hpp"
#include "flashdistill/schedule.hpp"

#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace flashdistill {

/// Architecture of the equivariant epsilon-predictor.
struct NetSpec {
  int layers = 4;
  int hidden = 64;
  int feat_dim = 2;
  int cond_dim = 0;

  int input_dim() const { return feat_dim + 1 + cond_dim; }

  void validate() const {
    if (layers < 2) throw ConfigError("NetSpec: need at least 2 layers");
    if (hidden < 4) throw ConfigError("NetSpec: hidden width must be >= 4");
    if (feat_dim < 1) throw ConfigError("NetSpec: feat_dim must be >= 1");
    if (cond_dim != 0 && cond_dim != 1) throw ConfigError("NetSpec: cond_dim must be 0 or 1");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "egnn layers=" << layers << " hidden=" << hidden << " feat_dim=" << feat_dim
       << " cond_dim=" << cond_dim;
    return os.str();
  }

  static NetSpec parse(const std::string &desc) {
    NetSpec s;
    std::istringstream is(desc);
    std::string tok;
    is >> tok;
    if (tok != "egnn") throw Error("NetSpec: bad description '" + desc + "'");
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) continue;
      const auto key = tok.substr(0, eq);
      const int val = std::stoi(tok.substr(eq + 1));
      if (key == "layers") s.layers = val;
      else if (key == "hidden") s.hidden = val;
      else if (key == "feat_dim") s.feat_dim = val;
      else if (key == "cond_dim") s.cond_dim = val;
    }
    s.validate();
    return s;
  }

  bool operator==(const NetSpec &) const = default;
};

/// Network output: epsilon prediction for coordinates (zero-COM) and
/// features packed as N x (3+d), plus the hidden features after every layer.
struct EpsOut {
  Matrix eps;
  std::vector<Matrix> layer_feats;

  auto eps_x() const { return eps.leftCols(3); }
  auto eps_h() const { return eps.rightCols(eps.cols() - 3); }
};

namespace egnn {

// SiLU activation, x * sigmoid(x).
inline double silu(double v) { return v / (1.0 + std::exp(-v)); }
inline double silu_grad(double v) {
  const double s = 1.0 / (1.0 + std::exp(-v));
  return s * (1.0 + v * (1.0 - s));
}
inline Matrix silu(const Matrix &m) { return m.unaryExpr([](double v) { return silu(v); }); }
inline Matrix silu_grad(const Matrix &m) { return m.unaryExpr([](double v) { return silu_grad(v); }); }

inline std::string seg(int layer, const char *name) { return "l" + std::to_string(layer) + "." + name; }

inline ParamLayout make_layout(const NetSpec &spec) {
  spec.validate();
  const int H = spec.hidden;
  ParamLayout l;
  l.add("emb.W", H, spec.input_dim());
  l.add("emb.b", 1, H);
  for (int k = 0; k < spec.layers; ++k) {
    l.add(seg(k, "e1.W"), H, 2 * H + 1);
    l.add(seg(k, "e1.b"), 1, H);
    l.add(seg(k, "e2.W"), H, H);
    l.add(seg(k, "e2.b"), 1, H);
    l.add(seg(k, "x1.W"), H, H);
    l.add(seg(k, "x1.b"), 1, H);
    l.add(seg(k, "x2.W"), 1, H);
    l.add(seg(k, "x2.b"), 1, 1);
    l.add(seg(k, "h1.W"), H, 2 * H);
    l.add(seg(k, "h1.b"), 1, H);
    l.add(seg(k, "h2.W"), H, H);
    l.add(seg(k, "h2.b"), 1, H);
  }
  l.add("out.W", spec.feat_dim, H);
  l.add("out.b", 1, spec.feat_dim);
  return l;
}

struct LayerTape {
  Matrix x;      // N x 3 coordinates entering the layer
  Matrix h;      // N x H features entering the layer
  Matrix diff;   // E x 3, x_src - x_dst
  Vector d2;     // E squared distances
  Vector r;      // E distances
  Matrix P1, A1; // edge MLP, first layer pre/post activation
  Matrix P2, M;  // edge MLP, second layer pre/post activation (messages)
  Matrix Q1, B1; // coordinate MLP hidden layer
  Vector c;      // E coordinate weights
  Matrix Nin;    // N x 2H node MLP input [h, agg]
  Matrix R1, C1; // node MLP hidden layer
};

struct Tape {
  Matrix a0; // N x input_dim
  std::vector<LayerTape> layers;
  Matrix h_final;
};

} // namespace egnn

/// E(n)-equivariant epsilon network over fully connected point clouds.
class Egnn {
public:
  explicit Egnn(NetSpec spec) : spec_(spec), layout_(egnn::make_layout(spec)) {}

  const NetSpec &spec() const { return spec_; }
  const ParamLayout &layout() const { return layout_; }

  /// He-style Gaussian init for hidden layers; the coordinate head and the
  /// feature output head start at zero so the fresh network predicts 0.
  ParamVector init_params(RngStream &rng) const {
    ParamVector p(layout_);
    for (const auto &s : layout_.segments()) {
      const bool is_weight = s.name.size() > 2 && s.name.compare(s.name.size() - 2, 2, ".W") == 0;
      const bool zero_head = s.name == "out.W" || s.name.find("x2.W") != std::string::npos;
      if (!is_weight || zero_head) continue;
      const double stddev = std::sqrt(2.0 / static_cast<double>(s.cols));
      for (Eigen::Index i = 0; i < s.size(); ++i) p.values[s.offset + i] = stddev * rng.normal();
    }
    return p;
  }

  /// Forward pass. `state` is N x (3+d); its coordinate block is projected to
  /// zero center of mass before use. `t_frac` is t/T.
  EpsOut forward(const ParamVector &params, const Eigen::Ref<const Matrix> &state, double t_frac,
                 std::optional<double> cond = std::nullopt, egnn::Tape *tape = nullptr) const {
    using namespace egnn;
    const Eigen::Index N = state.rows();
    const int H = spec_.hidden;
    const int d = spec_.feat_dim;
    if (state.cols() != 3 + d) throw Error("Egnn: state width does not match feat_dim");
    if (cond.has_value() != (spec_.cond_dim == 1))
      throw Error("Egnn: condition must be given iff cond_dim == 1");

    Matrix a0(N, spec_.input_dim());
    a0.leftCols(d) = state.rightCols(d);
    a0.col(d).setConstant(t_frac);
    if (cond) a0.col(d + 1).setConstant(*cond);

    Matrix x = state.leftCols(3);
    x.rowwise() -= x.colwise().mean();
    const Matrix x_in = x;

    Matrix h = (a0 * params.segment("emb.W").transpose()).rowwise() +
               params.segment("emb.b").row(0);

    const Eigen::Index E = N * (N - 1);
    const double inv_nb = N > 1 ? 1.0 / static_cast<double>(N - 1) : 0.0;

    EpsOut out;
    out.layer_feats.reserve(static_cast<std::size_t>(spec_.layers));
    if (tape) {
      tape->a0 = a0;
      tape->layers.assign(static_cast<std::size_t>(spec_.layers), {});
    }

    for (int k = 0; k < spec_.layers; ++k) {
      const auto W1 = params.segment(seg(k, "e1.W"));
      const auto b1 = params.segment(seg(k, "e1.b"));
      const auto W2 = params.segment(seg(k, "e2.W"));
      const auto b2 = params.segment(seg(k, "e2.b"));
      const auto Wx1 = params.segment(seg(k, "x1.W"));
      const auto bx1 = params.segment(seg(k, "x1.b"));
      const auto wx2 = params.segment(seg(k, "x2.W"));
      const double bx2 = params.segment(seg(k, "x2.b"))(0, 0);
      const auto Wh1 = params.segment(seg(k, "h1.W"));
      const auto bh1 = params.segment(seg(k, "h1.b"));
      const auto Wh2 = params.segment(seg(k, "h2.W"));
      const auto bh2 = params.segment(seg(k, "h2.b"));

      Matrix diff(E, 3);
      Vector d2(E), r(E);
      for (Eigen::Index i = 0, e = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j) continue;
          diff.row(e) = x.row(i) - x.row(j);
          d2[e] = diff.row(e).squaredNorm();
          r[e] = std::sqrt(d2[e]);
          ++e;
        }

      // First edge layer, factored per node: [h_i, h_j, d2] W1^T.
      const Matrix hs = h * W1.leftCols(H).transpose();
      const Matrix hd = h * W1.middleCols(H, H).transpose();
      Matrix P1(E, H);
      for (Eigen::Index i = 0, e = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j) continue;
          P1.row(e) = hs.row(i) + hd.row(j) + d2[e] * W1.col(2 * H).transpose() + b1.row(0);
          ++e;
        }
      const Matrix A1 = silu(P1);
      const Matrix P2 = (A1 * W2.transpose()).rowwise() + b2.row(0);
      const Matrix M = silu(P2);
      const Matrix Q1 = (M * Wx1.transpose()).rowwise() + bx1.row(0);
      const Matrix B1 = silu(Q1);
      const Vector c = (B1 * wx2.row(0).transpose()).array() + bx2;

      Matrix agg = Matrix::Zero(N, H);
      Matrix x_next = x;
      for (Eigen::Index i = 0, e = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j) continue;
          agg.row(i) += M.row(e);
          x_next.row(i) += (inv_nb * c[e] / (r[e] + 1.0)) * diff.row(e);
          ++e;
        }

      Matrix Nin(N, 2 * H);
      Nin << h, agg;
      const Matrix R1 = (Nin * Wh1.transpose()).rowwise() + bh1.row(0);
      const Matrix C1 = silu(R1);
      Matrix h_next = h + ((C1 * Wh2.transpose()).rowwise() + bh2.row(0));

      if (tape) {
        auto &lt = tape->layers[static_cast<std::size_t>(k)];
        lt.x = x;
        lt.h = h;
        lt.diff = std::move(diff);
        lt.d2 = std::move(d2);
        lt.r = std::move(r);
        lt.P1 = std::move(P1);
        lt.A1 = A1;
        lt.P2 = P2;
        lt.M = M;
        lt.Q1 = Q1;
        lt.B1 = B1;
        lt.c = c;
        lt.Nin = std::move(Nin);
        lt.R1 = R1;
        lt.C1 = C1;
      }
      x = std::move(x_next);
      h = std::move(h_next);
      out.layer_feats.push_back(h);
    }

    out.eps.resize(N, 3 + d);
    Matrix ex = x - x_in;
    ex.rowwise() -= ex.colwise().mean();
    out.eps.leftCols(3) = ex;
    out.eps.rightCols(d) = (h * params.segment("out.W").transpose()).rowwise() + params.segment("out.b").row(0);
    if (tape) tape->h_final = h;
    return out;
  }

  EpsOut forward(const ParamVector &params, const PointSet &p, int t, const BaseSchedule &base,
                 std::optional<double> cond = std::nullopt) const {
    base.check_step(t);
    return forward(params, p.data(), static_cast<double>(t) / base.total_steps(), cond);
  }

  /// Reverse pass. Accumulates d(loss)/d(params) into `grad` given the
  /// upstream gradient on the packed epsilon output and, optionally, on each
  /// layer's hidden features (empty matrices mean zero).
  void backward(const ParamVector &params, const egnn::Tape &tape, const Eigen::Ref<const Matrix> &g_eps,
                const std::vector<Matrix> &g_feats, ParamVector &grad) const {
    using namespace egnn;
    const int H = spec_.hidden;
    const int d = spec_.feat_dim;
    const Eigen::Index N = tape.a0.rows();
    const double inv_nb = N > 1 ? 1.0 / static_cast<double>(N - 1) : 0.0;

    Matrix g_epsh = g_eps.rightCols(d);
    grad.segment("out.W") += g_epsh.transpose() * tape.h_final;
    grad.segment("out.b").row(0) += g_epsh.colwise().sum();
    Matrix gh = g_epsh * params.segment("out.W");

    // eps_x = P (x_L - x_0); P is symmetric and x_0 carries no parameters.
    Matrix gx = g_eps.leftCols(3);
    gx.rowwise() -= gx.colwise().mean();

    for (int k = spec_.layers - 1; k >= 0; --k) {
      const auto &lt = tape.layers[static_cast<std::size_t>(k)];
      const auto W1 = params.segment(seg(k, "e1.W"));
      const auto W2 = params.segment(seg(k, "e2.W"));
      const auto Wx1 = params.segment(seg(k, "x1.W"));
      const auto wx2 = params.segment(seg(k, "x2.W"));
      const auto Wh1 = params.segment(seg(k, "h1.W"));
      const auto Wh2 = params.segment(seg(k, "h2.W"));

      if (static_cast<std::size_t>(k) < g_feats.size() && g_feats[static_cast<std::size_t>(k)].size() > 0)
        gh += g_feats[static_cast<std::size_t>(k)];

      // Node update h' = h + MLP_h([h, agg]).
      grad.segment(seg(k, "h2.W")) += gh.transpose() * lt.C1;
      grad.segment(seg(k, "h2.b")).row(0) += gh.colwise().sum();
      const Matrix gR1 = (gh * Wh2).cwiseProduct(silu_grad(lt.R1));
      grad.segment(seg(k, "h1.W")) += gR1.transpose() * lt.Nin;
      grad.segment(seg(k, "h1.b")).row(0) += gR1.colwise().sum();
      const Matrix gNin = gR1 * Wh1;
      Matrix gh_prev = gh + gNin.leftCols(H);
      const Matrix gagg = gNin.rightCols(H);

      const Eigen::Index E = lt.M.rows();
      Matrix gM(E, H);
      Vector gc(E);
      Matrix gdiff(E, 3);
      for (Eigen::Index i = 0, e = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j) continue;
          // u = diff / (r + 1); g_u = inv_nb * c * gx_i.
          const double rr = lt.r[e];
          const Eigen::RowVector3d gu = inv_nb * lt.c[e] * gx.row(i);
          gM.row(e) = gagg.row(i);
          gc[e] = inv_nb * gx.row(i).dot(lt.diff.row(e)) / (rr + 1.0);
          gdiff.row(e) = gu / (rr + 1.0);
          if (rr > 0.0) gdiff.row(e) -= lt.diff.row(e) * (lt.diff.row(e).dot(gu) / (rr * (rr + 1.0) * (rr + 1.0)));
          ++e;
        }

      // Coordinate weight MLP.
      grad.segment(seg(k, "x2.W")).row(0) += gc.transpose() * lt.B1;
      grad.segment(seg(k, "x2.b"))(0, 0) += gc.sum();
      const Matrix gQ1 = (gc * wx2.row(0)).cwiseProduct(silu_grad(lt.Q1));
      grad.segment(seg(k, "x1.W")) += gQ1.transpose() * lt.M;
      grad.segment(seg(k, "x1.b")).row(0) += gQ1.colwise().sum();
      gM += gQ1 * Wx1;

      // Edge MLP.
      const Matrix gP2 = gM.cwiseProduct(silu_grad(lt.P2));
      grad.segment(seg(k, "e2.W")) += gP2.transpose() * lt.A1;
      grad.segment(seg(k, "e2.b")).row(0) += gP2.colwise().sum();
      const Matrix gP1 = (gP2 * W2).cwiseProduct(silu_grad(lt.P1));
      grad.segment(seg(k, "e1.b")).row(0) += gP1.colwise().sum();

      Matrix g_src = Matrix::Zero(N, H);
      Matrix g_dst = Matrix::Zero(N, H);
      Vector gd2 = gP1 * W1.col(2 * H);
      for (Eigen::Index i = 0, e = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j) continue;
          g_src.row(i) += gP1.row(e);
          g_dst.row(j) += gP1.row(e);
          ++e;
        }
      auto gW1 = grad.segment(seg(k, "e1.W"));
      gW1.leftCols(H) += g_src.transpose() * lt.h;
      gW1.middleCols(H, H) += g_dst.transpose() * lt.h;
      gW1.col(2 * H) += gP1.transpose() * lt.d2;
      gh_prev += g_src * W1.leftCols(H) + g_dst * W1.middleCols(H, H);

      // Coordinates: identity path plus diff = x_i - x_j from both the update
      // and the squared distance.
      Matrix gx_prev = gx;
      for (Eigen::Index i = 0, e = 0; i < N; ++i)
        for (Eigen::Index j = 0; j < N; ++j) {
          if (i == j) continue;
          const Eigen::RowVector3d g = gdiff.row(e) + 2.0 * gd2[e] * lt.diff.row(e);
          gx_prev.row(i) += g;
          gx_prev.row(j) -= g;
          ++e;
        }
      gx = std::move(gx_prev);
      gh = std::move(gh_prev);
    }

    grad.segment("emb.W") += gh.transpose() * tape.a0;
    grad.segment("emb.b").row(0) += gh.colwise().sum();
  }

private:
  NetSpec spec_;
  ParamLayout layout_;
};

/// Score of the Gaussian perturbation kernel, -eps / sigma.
inline Matrix eps_to_score(const Eigen::Ref<const Matrix> &eps, double sigma) {
  if (!(sigma > 1e-6)) throw Error("score undefined at near-zero noise");
  return -eps / sigma;
}

} // namespace flashdistill
