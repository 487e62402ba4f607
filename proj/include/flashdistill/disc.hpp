#pragma once

#include "flashdistill/distill.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace flashdistill {

struct DiscSpec {
  std::array<int, 3> tap_layers{1, 2, 3};
  int hidden = 64;   // width of the tapped backbone features
  int attn_dim = 16;
  int mlp_dim = 32;
  double r1_weight = 1e-3;
  double r1_sigma = 0.01;
  double gan_backbone_coeff = 0.2;

  void validate(int backbone_layers) const {
    for (std::size_t i = 0; i < 3; ++i) {
      if (tap_layers[i] < 0 || tap_layers[i] >= backbone_layers)
        throw ConfigError("DiscSpec: tap layer " + std::to_string(tap_layers[i]) + " outside the backbone");
      for (std::size_t j = 0; j < i; ++j)
        if (tap_layers[i] == tap_layers[j]) throw ConfigError("DiscSpec: tap layers must be distinct");
    }
    if (hidden < 1 || attn_dim < 1 || mlp_dim < 1) throw ConfigError("DiscSpec: sizes must be positive");
    if (r1_weight < 0.0 || !(r1_sigma > 0.0)) throw ConfigError("DiscSpec: need r1_weight >= 0 and r1_sigma > 0");
  }
};

namespace disc {

inline std::string seg(std::size_t tap, const char *name) { return "d" + std::to_string(tap) + "." + name; }

inline ParamLayout make_layout(const DiscSpec &s) {
  ParamLayout l;
  for (std::size_t k = 0; k < 3; ++k) {
    l.add(seg(k, "q"), 1, s.attn_dim);
    l.add(seg(k, "Wk"), s.attn_dim, s.hidden);
    l.add(seg(k, "Wv"), s.attn_dim, s.hidden);
    l.add(seg(k, "m1.W"), s.mlp_dim, s.attn_dim);
    l.add(seg(k, "m1.b"), 1, s.mlp_dim);
    l.add(seg(k, "m2.W"), 2, s.mlp_dim);
    l.add(seg(k, "m2.b"), 1, 2);
  }
  return l;
}

struct TapTape {
  Matrix h;       // N x hidden
  Matrix keys;    // N x A
  Matrix values;  // N x A
  Vector attn;    // N
  Eigen::RowVectorXd pooled, pre1, act1;
  double p = 0.5;
};

struct Tape {
  std::array<TapTape, 3> taps;
};

} // namespace disc

/// Discriminator head: per tap, one learnable query attends over the node
/// features, an MLP maps the pooled vector to two class logits, and the
/// real-class softmax probabilities of the three taps are averaged.
class Discriminator {
public:
  explicit Discriminator(DiscSpec spec) : spec_(spec), layout_(disc::make_layout(spec)) {}

  const DiscSpec &spec() const { return spec_; }
  const ParamLayout &layout() const { return layout_; }

  ParamVector init_params(RngStream &rng) const {
    ParamVector p(layout_);
    for (const auto &s : layout_.segments()) {
      if (s.name.find(".b") != std::string::npos || s.name.find("m2.W") != std::string::npos) continue;
      const double stddev = std::sqrt((s.name.find(".q") != std::string::npos ? 1.0 : 2.0) / static_cast<double>(s.cols));
      for (Eigen::Index i = 0; i < s.size(); ++i) p.values[s.offset + i] = stddev * rng.normal();
    }
    return p;
  }

  /// Probability that the features come from real data. `feats` holds every
  /// backbone layer's output; only the tapped layers are read.
  double forward(const ParamVector &params, const std::vector<Matrix> &feats, disc::Tape *tape = nullptr) const {
    double p = 0.0;
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec_.attn_dim));
    for (std::size_t k = 0; k < 3; ++k) {
      const auto layer = static_cast<std::size_t>(spec_.tap_layers[k]);
      if (layer >= feats.size()) throw Error("Discriminator: missing tapped layer features");
      const Matrix &h = feats[layer];
      if (h.cols() != spec_.hidden) throw Error("Discriminator: feature width mismatch");
      disc::TapTape tt;
      tt.keys = h * params.segment(disc::seg(k, "Wk")).transpose();
      tt.values = h * params.segment(disc::seg(k, "Wv")).transpose();
      Vector s = scale * (tt.keys * params.segment(disc::seg(k, "q")).row(0).transpose());
      s.array() -= s.maxCoeff();
      tt.attn = s.array().exp();
      tt.attn /= tt.attn.sum();
      tt.pooled = tt.attn.transpose() * tt.values;
      tt.pre1 = tt.pooled * params.segment(disc::seg(k, "m1.W")).transpose() + params.segment(disc::seg(k, "m1.b"));
      tt.act1 = tt.pre1.unaryExpr([](double v) { return egnn::silu(v); });
      const Eigen::RowVector2d logits =
          tt.act1 * params.segment(disc::seg(k, "m2.W")).transpose() + params.segment(disc::seg(k, "m2.b"));
      // Index 0 is the real class.
      tt.p = 1.0 / (1.0 + std::exp(logits[1] - logits[0]));
      p += tt.p / 3.0;
      if (tape) {
        tt.h = h;
        tape->taps[k] = std::move(tt);
      }
    }
    return p;
  }

  /// Reverse pass for upstream gradient `g_p` on the output probability.
  /// Accumulates into `grad`; when `g_feats` is given, adds the gradient on
  /// each backbone layer's features (sized like the forward input).
  void backward(const ParamVector &params, const disc::Tape &tape, double g_p, ParamVector &grad,
                std::vector<Matrix> *g_feats = nullptr) const {
    const double scale = 1.0 / std::sqrt(static_cast<double>(spec_.attn_dim));
    for (std::size_t k = 0; k < 3; ++k) {
      const auto &tt = tape.taps[k];
      const double g_l0 = g_p / 3.0 * tt.p * (1.0 - tt.p);
      const Eigen::RowVector2d g_logits(g_l0, -g_l0);
      grad.segment(disc::seg(k, "m2.W")) += g_logits.transpose() * tt.act1;
      grad.segment(disc::seg(k, "m2.b")) += g_logits;
      Eigen::RowVectorXd g_act = g_logits * params.segment(disc::seg(k, "m2.W"));
      Eigen::RowVectorXd g_pre = g_act.cwiseProduct(tt.pre1.unaryExpr([](double v) { return egnn::silu_grad(v); }));
      grad.segment(disc::seg(k, "m1.W")) += g_pre.transpose() * tt.pooled;
      grad.segment(disc::seg(k, "m1.b")) += g_pre;
      const Eigen::RowVectorXd g_pool = g_pre * params.segment(disc::seg(k, "m1.W"));
      // pooled = attn^T V with attn = softmax(scale K q).
      const Matrix g_values = tt.attn * g_pool;
      const Vector g_attn = tt.values * g_pool.transpose();
      const Vector g_s = tt.attn.cwiseProduct(g_attn.array().matrix() - Vector::Constant(g_attn.size(), tt.attn.dot(g_attn)));
      const Eigen::RowVectorXd q = params.segment(disc::seg(k, "q")).row(0);
      grad.segment(disc::seg(k, "q")) += scale * (g_s.transpose() * tt.keys);
      const Matrix g_keys = scale * g_s * q;
      grad.segment(disc::seg(k, "Wk")) += g_keys.transpose() * tt.h;
      grad.segment(disc::seg(k, "Wv")) += g_values.transpose() * tt.h;
      if (g_feats) {
        auto &gf = (*g_feats)[static_cast<std::size_t>(spec_.tap_layers[k])];
        if (gf.size() == 0) gf = Matrix::Zero(tt.h.rows(), tt.h.cols());
        gf += g_keys * params.segment(disc::seg(k, "Wk")) + g_values * params.segment(disc::seg(k, "Wv"));
      }
    }
  }

private:
  DiscSpec spec_;
  ParamLayout layout_;
};

struct GanReport {
  double disc_loss = 0.0;  // binary cross-entropy
  double r1 = 0.0;         // weighted perturbation penalty
  double p_real_mean = 0.0;
  double p_fake_mean = 0.0;
  GradReport disc_grad;    // d(disc_loss + r1) / d(disc params)
  GradReport backbone_grad; // gan_backbone_coeff * d(disc_loss) / d(backbone params)
};

/// Noise consumed by one (real, fake) pair of the discriminator update.
struct GanNoise {
  int t = 0;
  Matrix eps_real, eps_fake, r1_dir;
};

inline GanNoise draw_gan_noise(RngStream &rng, const PointSet &real, const PointSet &fake, const BaseSchedule &base) {
  GanNoise n;
  n.t = sample_dmd_step(base, rng);
  n.eps_real = gaussian_state(rng, real.node_count(), real.feat_dim());
  n.eps_fake = gaussian_state(rng, fake.node_count(), fake.feat_dim());
  n.r1_dir = gaussian_state(rng, real.node_count(), real.feat_dim());
  return n;
}

/// Binary cross-entropy of the discriminator on noised real and fake inputs
/// (shared t per pair), plus the R1 penalty in perturbation form
/// E[(D(y) - D(y + s n))^2] / s^2 on real inputs, scaled by r1_weight. The
/// penalty trains only the discriminator head.
inline GanReport gan_losses(const Discriminator &disc, const ParamVector &disc_params, const Egnn &backbone,
                            const ParamVector &backbone_params, const std::vector<PointSet> &real,
                            const std::vector<PointSet> &fake, const std::vector<GanNoise> &noise,
                            const BaseSchedule &base, const std::vector<double> *real_conds = nullptr,
                            const std::vector<double> *fake_conds = nullptr) {
  if (real.empty() || fake.empty()) throw Error("gan_losses: both batches must be non-empty");
  if (real.size() != fake.size() || noise.size() != real.size())
    throw Error("gan_losses: real, fake and noise batches must have equal sizes");
  const auto &spec = disc.spec();
  GanReport rep;
  rep.disc_grad = GradReport(disc.layout());
  rep.backbone_grad = GradReport(backbone.layout());
  const double inv_b = 1.0 / static_cast<double>(real.size());
  const double s = spec.r1_sigma;

  auto cond_of = [](const std::vector<double> *c, std::size_t i) -> std::optional<double> {
    if (!c) return std::nullopt;
    return (*c)[i];
  };

  for (std::size_t i = 0; i < real.size(); ++i) {
    const int t = noise[i].t;
    base.check_step(t);
    const double tf = static_cast<double>(t) / base.total_steps();
    const auto cr = corrupt_with(real[i], t, base, noise[i].eps_real);
    const auto cf = corrupt_with(fake[i], t, base, noise[i].eps_fake);

    // Real and fake terms, with gradients into both the head and the backbone.
    for (int which = 0; which < 2; ++which) {
      const auto &y = which == 0 ? cr.noisy.data() : cf.noisy.data();
      const auto cond = cond_of(which == 0 ? real_conds : fake_conds, i);
      egnn::Tape btape;
      const auto out = backbone.forward(backbone_params, y, tf, cond, &btape);
      disc::Tape dtape;
      const double p = std::clamp(disc.forward(disc_params, out.layer_feats, &dtape), 1e-12, 1.0 - 1e-12);
      const double loss = which == 0 ? -std::log(p) : -std::log(1.0 - p);
      const double g_p = inv_b * (which == 0 ? -1.0 / p : 1.0 / (1.0 - p));
      rep.disc_loss += inv_b * loss;
      (which == 0 ? rep.p_real_mean : rep.p_fake_mean) += inv_b * p;
      std::vector<Matrix> g_feats(out.layer_feats.size());
      disc.backward(disc_params, dtape, g_p, rep.disc_grad.grad, spec.gan_backbone_coeff != 0.0 ? &g_feats : nullptr);
      if (spec.gan_backbone_coeff != 0.0) {
        for (auto &g : g_feats)
          if (g.size()) g *= spec.gan_backbone_coeff;
        backbone.backward(backbone_params, btape, Matrix::Zero(y.rows(), y.cols()), g_feats, rep.backbone_grad.grad);
      }
    }

    if (spec.r1_weight > 0.0) {
      const auto cond = cond_of(real_conds, i);
      const Matrix y2 = cr.noisy.data() + s * noise[i].r1_dir;
      const auto o1 = backbone.forward(backbone_params, cr.noisy.data(), tf, cond);
      const auto o2 = backbone.forward(backbone_params, y2, tf, cond);
      disc::Tape t1, t2;
      const double p1 = disc.forward(disc_params, o1.layer_feats, &t1);
      const double p2 = disc.forward(disc_params, o2.layer_feats, &t2);
      const double c = spec.r1_weight * inv_b / (s * s);
      rep.r1 += c * (p1 - p2) * (p1 - p2);
      disc.backward(disc_params, t1, 2.0 * c * (p1 - p2), rep.disc_grad.grad);
      disc.backward(disc_params, t2, -2.0 * c * (p1 - p2), rep.disc_grad.grad);
    }
  }
  rep.disc_grad.loss = rep.disc_loss + rep.r1;
  rep.backbone_grad.loss = spec.gan_backbone_coeff * rep.disc_loss;
  if (!std::isfinite(rep.disc_grad.loss)) throw NumericError("gan_losses: non-finite loss");
  return rep;
}

/// Real-class probability of the discriminator on one noised input, using
/// the current fake-score backbone as the feature extractor.
inline double disc_prob(const Discriminator &disc, const ParamVector &disc_params, const Egnn &backbone,
                        const ParamVector &backbone_params, const Matrix &y, int t, const BaseSchedule &base,
                        std::optional<double> cond = std::nullopt) {
  const auto out = backbone.forward(backbone_params, y, static_cast<double>(t) / base.total_steps(), cond);
  return disc.forward(disc_params, out.layer_feats);
}

} // namespace flashdistill
