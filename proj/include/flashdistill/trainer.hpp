#pragma once

#include "flashdistill/disc.hpp"
#include "flashdistill/distill.hpp"
#include "flashdistill/toymol.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace flashdistill {

/// Flat `key = value` run configuration. Required keys must be present in
/// the file; everything else has a default.
struct TrainConfig {
  // Required.
  std::uint64_t seed = 0;
  int t_total = 1000;
  SpacingKind grid_kind = SpacingKind::respaced;
  double rho = 2.25;
  int k_target = 4;
  std::vector<int> k_curriculum{1, 2, 3, 4};
  double lr_scale = 1.0;
  double lambda_js = 0.1;
  Divergence divergence = Divergence::reverse_kl;
  int batch_size = 16;
  int max_iters = 1000;
  int aux_steps = 5;
  double ema_decay = 0.9999;
  double r1_weight = 1e-3;
  double r1_sigma = 0.01;
  double gan_coeff = 0.2;
  std::string dataset_path;
  std::string out_dir;

  // Optional.
  int layers = 4;
  int hidden = 32;
  bool conditional = false;
  int dataset_count = 2000;
  int n_min = 3;
  int n_max = 7;
  int teacher_iters = 20000;
  double teacher_lr = 1e-3;
  int teacher_batch = 32;
  double teacher_ema = 0.999;
  double teacher_lr_floor = 0.1; // cosine decay to floor * teacher_lr; 1 keeps it constant
  double warmup_frac = 0.05;
  double coord_radius = 0.0; // 0: derive from the dataset
  int ckpt_every = 0;        // 0: only at exit
  int eval_every = 0;        // 0: no periodic evaluation
  int eval_samples = 200;
  int disc_hidden_mlp = 32;
  int disc_attn = 16;
  double disc_lr_ratio = 200.0; // discriminator lr as a multiple of the generator lr
  double gen_grad_clip = 0.0;   // generator gradient norm cap; 0 disables

  static constexpr double kLrGen = 8e-7;
  static constexpr double kLrFake = 3.2e-6;

  double lr_gen() const { return kLrGen * lr_scale; }
  double lr_fake() const { return kLrFake * lr_scale; }
  double lr_disc() const { return lr_gen() * disc_lr_ratio; }

  static const std::vector<std::string> &required_keys() {
    static const std::vector<std::string> keys{
        "seed",      "t_total",    "grid_kind", "rho",       "k_target",  "k_curriculum",
        "lr_scale",  "lambda_js",  "divergence", "batch_size", "max_iters", "aux_steps",
        "ema_decay", "r1_weight",  "r1_sigma",  "gan_coeff", "dataset_path", "out_dir"};
    return keys;
  }

  /// Smallest rollout length allowed for a target step count.
  int rollout_floor() const { return k_target >= 8 ? 3 : 1; }

  void set(const std::string &key, const std::string &value);
  std::string get(const std::string &key) const;
  std::vector<std::string> keys() const;

  void validate() const {
    if (t_total < 2) throw ConfigError("config: t_total must be >= 2");
    if (!(rho > 0.0)) throw ConfigError("config: rho must be > 0");
    if (k_target < 1 || k_target > t_total) throw ConfigError("config: k_target out of range");
    if (k_curriculum.empty()) throw ConfigError("config: k_curriculum must be non-empty");
    for (int k : k_curriculum)
      if (k < 1 || k > k_target) throw ConfigError("config: k_curriculum entries must lie in [1, k_target]");
    if (std::none_of(k_curriculum.begin(), k_curriculum.end(), [&](int k) { return k >= rollout_floor(); }))
      throw ConfigError("config: k_curriculum has no entry at or above the rollout floor");
    if (!(lr_scale > 0.0)) throw ConfigError("config: lr_scale must be > 0");
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("config: ema_decay must lie in (0, 1)");
    if (!(teacher_ema > 0.0 && teacher_ema < 1.0)) throw ConfigError("config: teacher_ema must lie in (0, 1)");
    if (batch_size < 1 || max_iters < 0 || aux_steps < 0) throw ConfigError("config: batch_size, max_iters, aux_steps");
    if (r1_weight < 0.0 || !(r1_sigma > 0.0) || gan_coeff < 0.0) throw ConfigError("config: r1_weight, r1_sigma, gan_coeff");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) throw ConfigError("config: warmup_frac must lie in [0, 1)");
    if (n_min < 2 || n_max < n_min || n_max > 9) throw ConfigError("config: need 2 <= n_min <= n_max <= 9");
    if (teacher_iters < 0 || teacher_batch < 1 || !(teacher_lr > 0.0) ||
        !(teacher_lr_floor > 0.0 && teacher_lr_floor <= 1.0))
      throw ConfigError("config: teacher settings");
    if (!(disc_lr_ratio > 0.0)) throw ConfigError("config: disc_lr_ratio must be > 0");
    if (!(gen_grad_clip >= 0.0)) throw ConfigError("config: gen_grad_clip must be >= 0");
    if (eval_samples < 1) throw ConfigError("config: eval_samples must be >= 1");
    DivergenceSpec{divergence, lambda_js}.validate();
    NetSpec{layers, hidden, 2, conditional ? 1 : 0}.validate();
  }

  NetSpec net_spec() const { return NetSpec{layers, hidden, 2, conditional ? 1 : 0}; }

  DiscSpec disc_spec() const {
    DiscSpec s;
    s.hidden = hidden;
    s.attn_dim = disc_attn;
    s.mlp_dim = disc_hidden_mlp;
    s.r1_weight = r1_weight;
    s.r1_sigma = r1_sigma;
    s.gan_backbone_coeff = gan_coeff;
    return s;
  }

  DivergenceSpec divergence_spec() const { return DivergenceSpec{divergence, lambda_js}; }

  /// Parses `key = value` lines; `#` starts a comment.
  static TrainConfig parse(const std::string &text) {
    TrainConfig c;
    std::istringstream is(text);
    std::string line;
    std::vector<std::string> seen;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto first = line.find_first_not_of(" \t\r");
      if (first == std::string::npos) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      c.set(key, value);
      seen.push_back(key);
    }
    for (const auto &k : required_keys())
      if (std::find(seen.begin(), seen.end(), k) == seen.end()) throw ConfigError("config: missing required key '" + k + "'");
    c.validate();
    return c;
  }

  static TrainConfig load(const std::string &path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto &k : keys()) os << k << " = " << get(k) << "\n";
    return os.str();
  }

  static std::string trim(const std::string &s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double to_double(const std::string &key, const std::string &v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception &) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + v + "'");
  }
}

inline long to_long(const std::string &key, const std::string &v) {
  try {
    std::size_t used = 0;
    const long d = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception &) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + v + "'");
  }
}

inline bool to_bool(const std::string &key, const std::string &v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config: '" + key + "' expects true|false, got '" + v + "'");
}

/// "1..4" or "3,4,5".
inline std::vector<int> parse_int_set(const std::string &key, const std::string &v) {
  std::vector<int> out;
  if (const auto dots = v.find(".."); dots != std::string::npos) {
    const long a = to_long(key, TrainConfig::trim(v.substr(0, dots)));
    const long b = to_long(key, TrainConfig::trim(v.substr(dots + 2)));
    if (b < a) throw ConfigError("config: '" + key + "' range is empty");
    for (long k = a; k <= b; ++k) out.push_back(static_cast<int>(k));
    return out;
  }
  std::istringstream is(v);
  std::string tok;
  while (std::getline(is, tok, ',')) out.push_back(static_cast<int>(to_long(key, TrainConfig::trim(tok))));
  return out;
}

inline std::string format_int_set(const std::vector<int> &v) {
  bool contiguous = !v.empty();
  for (std::size_t i = 1; i < v.size(); ++i) contiguous = contiguous && v[i] == v[i - 1] + 1;
  if (contiguous && v.size() > 1) return std::to_string(v.front()) + ".." + std::to_string(v.back());
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

} // namespace detail

inline void TrainConfig::set(const std::string &key, const std::string &v) {
  using namespace detail;
  if (key == "seed") seed = static_cast<std::uint64_t>(to_long(key, v));
  else if (key == "t_total") t_total = static_cast<int>(to_long(key, v));
  else if (key == "grid_kind") grid_kind = parse_spacing(v);
  else if (key == "rho") rho = to_double(key, v);
  else if (key == "k_target") k_target = static_cast<int>(to_long(key, v));
  else if (key == "k_curriculum") k_curriculum = parse_int_set(key, v);
  else if (key == "lr_scale") lr_scale = to_double(key, v);
  else if (key == "lambda_js") lambda_js = to_double(key, v);
  else if (key == "divergence") divergence = parse_divergence(v);
  else if (key == "batch_size") batch_size = static_cast<int>(to_long(key, v));
  else if (key == "max_iters") max_iters = static_cast<int>(to_long(key, v));
  else if (key == "aux_steps") aux_steps = static_cast<int>(to_long(key, v));
  else if (key == "ema_decay") ema_decay = to_double(key, v);
  else if (key == "r1_weight") r1_weight = to_double(key, v);
  else if (key == "r1_sigma") r1_sigma = to_double(key, v);
  else if (key == "gan_coeff") gan_coeff = to_double(key, v);
  else if (key == "dataset_path") dataset_path = v;
  else if (key == "out_dir") out_dir = v;
  else if (key == "layers") layers = static_cast<int>(to_long(key, v));
  else if (key == "hidden") hidden = static_cast<int>(to_long(key, v));
  else if (key == "conditional") conditional = to_bool(key, v);
  else if (key == "dataset_count") dataset_count = static_cast<int>(to_long(key, v));
  else if (key == "n_min") n_min = static_cast<int>(to_long(key, v));
  else if (key == "n_max") n_max = static_cast<int>(to_long(key, v));
  else if (key == "teacher_iters") teacher_iters = static_cast<int>(to_long(key, v));
  else if (key == "teacher_lr") teacher_lr = to_double(key, v);
  else if (key == "teacher_batch") teacher_batch = static_cast<int>(to_long(key, v));
  else if (key == "teacher_ema") teacher_ema = to_double(key, v);
  else if (key == "teacher_lr_floor") teacher_lr_floor = to_double(key, v);
  else if (key == "warmup_frac") warmup_frac = to_double(key, v);
  else if (key == "coord_radius") coord_radius = to_double(key, v);
  else if (key == "ckpt_every") ckpt_every = static_cast<int>(to_long(key, v));
  else if (key == "eval_every") eval_every = static_cast<int>(to_long(key, v));
  else if (key == "eval_samples") eval_samples = static_cast<int>(to_long(key, v));
  else if (key == "disc_mlp") disc_hidden_mlp = static_cast<int>(to_long(key, v));
  else if (key == "disc_attn") disc_attn = static_cast<int>(to_long(key, v));
  else if (key == "disc_lr_ratio") disc_lr_ratio = to_double(key, v);
  else if (key == "gen_grad_clip") gen_grad_clip = to_double(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

inline std::vector<std::string> TrainConfig::keys() const {
  auto k = required_keys();
  for (const char *o : {"layers", "hidden", "conditional", "dataset_count", "n_min", "n_max", "teacher_iters",
                        "teacher_lr", "teacher_batch", "teacher_ema", "teacher_lr_floor", "warmup_frac", "coord_radius", "ckpt_every",
                        "eval_every", "eval_samples", "disc_mlp", "disc_attn", "disc_lr_ratio", "gen_grad_clip"})
    k.emplace_back(o);
  return k;
}

inline std::string TrainConfig::get(const std::string &key) const {
  using detail::fmt_double;
  if (key == "seed") return std::to_string(seed);
  if (key == "t_total") return std::to_string(t_total);
  if (key == "grid_kind") return to_string(grid_kind);
  if (key == "rho") return fmt_double(rho);
  if (key == "k_target") return std::to_string(k_target);
  if (key == "k_curriculum") return detail::format_int_set(k_curriculum);
  if (key == "lr_scale") return fmt_double(lr_scale);
  if (key == "lambda_js") return fmt_double(lambda_js);
  if (key == "divergence") return to_string(divergence);
  if (key == "batch_size") return std::to_string(batch_size);
  if (key == "max_iters") return std::to_string(max_iters);
  if (key == "aux_steps") return std::to_string(aux_steps);
  if (key == "ema_decay") return fmt_double(ema_decay);
  if (key == "r1_weight") return fmt_double(r1_weight);
  if (key == "r1_sigma") return fmt_double(r1_sigma);
  if (key == "gan_coeff") return fmt_double(gan_coeff);
  if (key == "dataset_path") return dataset_path;
  if (key == "out_dir") return out_dir;
  if (key == "layers") return std::to_string(layers);
  if (key == "hidden") return std::to_string(hidden);
  if (key == "conditional") return conditional ? "true" : "false";
  if (key == "dataset_count") return std::to_string(dataset_count);
  if (key == "n_min") return std::to_string(n_min);
  if (key == "n_max") return std::to_string(n_max);
  if (key == "teacher_iters") return std::to_string(teacher_iters);
  if (key == "teacher_lr") return fmt_double(teacher_lr);
  if (key == "teacher_batch") return std::to_string(teacher_batch);
  if (key == "teacher_ema") return fmt_double(teacher_ema);
  if (key == "teacher_lr_floor") return fmt_double(teacher_lr_floor);
  if (key == "warmup_frac") return fmt_double(warmup_frac);
  if (key == "coord_radius") return fmt_double(coord_radius);
  if (key == "ckpt_every") return std::to_string(ckpt_every);
  if (key == "eval_every") return std::to_string(eval_every);
  if (key == "eval_samples") return std::to_string(eval_samples);
  if (key == "disc_mlp") return std::to_string(disc_hidden_mlp);
  if (key == "disc_attn") return std::to_string(disc_attn);
  if (key == "disc_lr_ratio") return fmt_double(disc_lr_ratio);
  if (key == "gen_grad_clip") return fmt_double(gen_grad_clip);
  throw ConfigError("config: unknown key '" + key + "'");
}

// ---------------------------------------------------------------------------
// Datasets

/// Loads the dataset file, or generates and writes it when absent.
inline std::vector<PointSet> load_or_make_dataset(const TrainConfig &cfg, const ToyChemSpec &spec = {}) {
  if (!cfg.dataset_path.empty() && std::filesystem::exists(cfg.dataset_path)) {
    std::ifstream is(cfg.dataset_path);
    auto data = read_xyz_all(is);
    if (data.empty()) throw ConfigError("dataset '" + cfg.dataset_path + "' is empty");
    return data;
  }
  RngStream rng(cfg.seed, 0xda7a);
  auto data = generate_dataset(spec, cfg.dataset_count, cfg.n_min, cfg.n_max, rng);
  if (!cfg.dataset_path.empty()) {
    const auto parent = std::filesystem::path(cfg.dataset_path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream os(cfg.dataset_path);
    if (!os) throw ConfigError("cannot write dataset '" + cfg.dataset_path + "'");
    write_xyz_file(os, data);
  }
  return data;
}

/// Largest node distance from the center of mass in the dataset.
inline double max_node_radius(const std::vector<PointSet> &data) {
  double r = 0.0;
  for (const auto &p : data) r = std::max(r, p.coords().rowwise().norm().maxCoeff());
  return r;
}

inline SamplerOptions sampler_options(double coord_radius) {
  SamplerOptions o;
  o.coord_radius = coord_radius;
  o.feat_lo = 0.0;
  o.feat_hi = 1.0;
  return o;
}

/// Per-sample condition: the molecule's radius of gyration.
inline std::vector<double> conditions_of(const std::vector<PointSet> &batch) {
  std::vector<double> c;
  c.reserve(batch.size());
  for (const auto &p : batch) c.push_back(radius_of_gyration(p));
  return c;
}

// ---------------------------------------------------------------------------
// Checkpoint metadata

/// Reads `key=value` from a checkpoint description.
inline std::optional<double> description_value(const std::string &desc, const std::string &key) {
  std::istringstream is(desc);
  std::string tok;
  while (is >> tok) {
    const auto eq = tok.find('=');
    if (eq != std::string::npos && tok.substr(0, eq) == key) return std::stod(tok.substr(eq + 1));
  }
  return std::nullopt;
}

inline std::string describe_model(const NetSpec &ns, int t_total, double coord_radius) {
  std::ostringstream os;
  os << ns.describe() << " t_total=" << t_total << " coord_radius=" << detail::fmt_double(coord_radius);
  return os.str();
}

/// A sampling-ready model read back from a checkpoint.
struct LoadedModel {
  NetSpec spec;
  ParamVector params;
  int t_total = 1000;
  double coord_radius = 0.0;
  std::string net_name;
};

/// Prefers the student's EMA weights, then the teacher.
inline LoadedModel load_model(const std::string &path) {
  const auto ck = load_checkpoint(path);
  LoadedModel m;
  m.spec = NetSpec::parse(ck.description);
  m.t_total = static_cast<int>(description_value(ck.description, "t_total").value_or(1000));
  m.coord_radius = description_value(ck.description, "coord_radius").value_or(0.0);
  for (const char *name : {"ema_gen", "teacher"}) {
    for (const auto &[n, pv] : ck.nets)
      if (n == name) {
        m.params = pv;
        m.net_name = n;
        return m;
      }
  }
  throw Error("checkpoint '" + path + "' holds neither a student nor a teacher");
}

// ---------------------------------------------------------------------------
// Worker fan-out

/// Worker count: FLASHDISTILL_THREADS when set, otherwise all cores.
inline unsigned worker_count() {
  if (const char *env = std::getenv("FLASHDISTILL_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Results must
/// be written to per-index slots so the reduction order stays fixed.
template <class F> void parallel_for(std::size_t n, F &&fn) {
  const std::size_t workers = std::min<std::size_t>(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto &t : pool) t.join();
  for (auto &e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  MolMetrics metrics;
  int nfe = 0;
  double cond_mae = 0.0; // mean |Rg(sample) - target| when targets were given
};

/// Consistency samples with the given node counts (and, for `targets`, one
/// condition per sample). All randomness is drawn up front so results do not
/// depend on the thread count.
inline std::vector<PointSet> draw_samples_for(const Egnn &net, const ParamVector &params, const NoiseGrid &grid, int K,
                                              const std::vector<int> &node_counts, int feat_dim,
                                              const BaseSchedule &base, RngStream &rng, const SamplerOptions &opt,
                                              const std::vector<double> *targets = nullptr, bool feed_targets = true) {
  if (node_counts.empty()) throw Error("evaluate: need n_samples >= 1");
  if (targets && targets->size() != node_counts.size()) throw Error("evaluate: one target per sample required");
  std::vector<TrajectoryNoise> noise;
  for (int n : node_counts) noise.push_back(TrajectoryNoise::draw(rng, n, feat_dim, K - 1));
  std::vector<PointSet> out(node_counts.size());
  parallel_for(out.size(), [&](std::size_t i) {
    std::optional<double> cond;
    if (targets && feed_targets) cond = (*targets)[i];
    NeuralDenoiser den(net, params, base, cond);
    out[i] = PointSet::from_matrix(consistency_sample(den, grid, K, noise[i], base, opt));
  });
  return out;
}

/// As draw_samples_for, with node counts drawn from the reference dataset.
inline std::vector<PointSet> draw_samples(const Egnn &net, const ParamVector &params, const NoiseGrid &grid, int K,
                                          int n_samples, const std::vector<PointSet> &reference,
                                          const BaseSchedule &base, RngStream &rng, const SamplerOptions &opt,
                                          const std::vector<double> *targets = nullptr, bool feed_targets = true) {
  if (n_samples < 1) throw Error("evaluate: need n_samples >= 1");
  if (reference.empty()) throw Error("evaluate: empty reference dataset");
  NodeCountSampler counts(reference);
  std::vector<int> nodes;
  for (int i = 0; i < n_samples; ++i) nodes.push_back(counts.sample(rng));
  return draw_samples_for(net, params, grid, K, nodes, reference.front().feat_dim(), base, rng, opt, targets,
                          feed_targets);
}

inline EvalRecord score_samples(const std::vector<PointSet> &samples, int K, const ToyChemSpec &chem = {},
                                const std::vector<double> *targets = nullptr) {
  EvalRecord r;
  r.metrics = compute_metrics(samples, chem);
  r.nfe = K;
  if (targets) {
    double s = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) s += std::abs(radius_of_gyration(samples[i]) - (*targets)[i]);
    r.cond_mae = s / static_cast<double>(samples.size());
  }
  return r;
}

/// Node counts and radius-of-gyration targets of randomly drawn molecules.
struct ConditionTargets {
  std::vector<int> nodes;
  std::vector<double> rg;
};

inline ConditionTargets draw_condition_targets(const std::vector<PointSet> &data, int n, RngStream &rng) {
  if (data.empty()) throw Error("draw_condition_targets: empty dataset");
  ConditionTargets t;
  for (int i = 0; i < n; ++i) {
    const auto &p = data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(data.size()) - 1))];
    t.nodes.push_back(p.node_count());
    t.rg.push_back(radius_of_gyration(p));
  }
  return t;
}

inline EvalRecord evaluate(const Egnn &net, const ParamVector &params, const NoiseGrid &grid, int K, int n_samples,
                           const std::vector<PointSet> &reference, const BaseSchedule &base, RngStream &rng,
                           const SamplerOptions &opt, const ToyChemSpec &chem = {},
                           const std::vector<double> *targets = nullptr, bool feed_targets = true) {
  if (net.spec().cond_dim == 1 && !targets) {
    // Conditional nets need a condition; pair data Rg values with their node counts.
    if (n_samples < 1) throw Error("evaluate: need n_samples >= 1");
    const auto t = draw_condition_targets(reference, n_samples, rng);
    const auto samples = draw_samples_for(net, params, grid, K, t.nodes, reference.front().feat_dim(), base, rng, opt, &t.rg);
    return score_samples(samples, K, chem, &t.rg);
  }
  const auto samples = draw_samples(net, params, grid, K, n_samples, reference, base, rng, opt, targets, feed_targets);
  return score_samples(samples, K, chem, targets);
}

// ---------------------------------------------------------------------------
// Teacher

struct TeacherResult {
  Checkpoint checkpoint;
  std::vector<double> losses;
};

/// Trains the epsilon predictor with the denoising loss. The checkpoint holds
/// the EMA weights as "teacher". A non-finite loss aborts with NumericError
/// after writing the last good EMA weights to `abort_path` when given.
inline TeacherResult train_teacher(const TrainConfig &cfg, const std::vector<PointSet> &data,
                                   const std::string &abort_path = "",
                                   const std::function<void(int, double)> &on_loss = {}) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train_teacher: empty dataset");
  const BaseSchedule base(cfg.t_total);
  const Egnn net(cfg.net_spec());
  RngStream init(cfg.seed, 1), draw(cfg.seed, 2), noise(cfg.seed, 3);
  auto params = net.init_params(init);
  auto ema = params;
  Adam opt(params.size(), cfg.teacher_lr);
  const double radius = cfg.coord_radius > 0.0 ? cfg.coord_radius : max_node_radius(data);
  TeacherResult res;
  auto make_ck = [&](const ParamVector &p) {
    Checkpoint ck;
    ck.description = describe_model(net.spec(), cfg.t_total, radius);
    ck.nets.emplace_back("teacher", p);
    return ck;
  };
  for (int it = 0; it < cfg.teacher_iters; ++it) {
    std::vector<PointSet> batch;
    for (int b = 0; b < cfg.teacher_batch; ++b)
      batch.push_back(data[static_cast<std::size_t>(draw.uniform_int(0, static_cast<long>(data.size()) - 1))]);
    const auto conds = conditions_of(batch);
    const auto rep = eps_loss(net, params, batch, base, noise, 0.02, cfg.conditional ? &conds : nullptr);
    if (!std::isfinite(rep.loss) || !rep.grad.finite()) {
      if (!abort_path.empty()) save_checkpoint(abort_path, make_ck(ema));
      throw NumericError("train_teacher: non-finite loss at iteration " + std::to_string(it));
    }
    res.losses.push_back(rep.loss);
    if (on_loss) on_loss(it, rep.loss);
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.teacher_iters));
    opt.set_lr(cfg.teacher_lr * (cfg.teacher_lr_floor + (1.0 - cfg.teacher_lr_floor) * cosine));
    opt.step(params.values, rep.grad.values);
    // Short horizon early on so the average is not dominated by the init.
    ema_update(ema.values, params.values, std::min(cfg.teacher_ema, (1.0 + it) / (10.0 + it)));
  }
  res.checkpoint = make_ck(ema);
  return res;
}

// ---------------------------------------------------------------------------
// Distillation

/// One JSONL record per iteration.
struct IterRecord {
  int iter = 0;
  double dmd_grad_norm = 0.0;
  double fake_loss = 0.0;
  double disc_loss = 0.0;
  double r1 = 0.0;
  double mean_weight = 0.0;
  int k_sampled = 0;
  double eta = 0.0;
  double p_real = 0.0;
  double p_fake = 0.0;
  bool gen_updated = false;
  bool skipped = false;

  nlohmann::json to_json() const {
    return nlohmann::json{{"iter", iter},           {"dmd_grad_norm", dmd_grad_norm}, {"fake_loss", fake_loss},
                          {"disc_loss", disc_loss}, {"r1", r1},                       {"mean_weight", mean_weight},
                          {"k_sampled", k_sampled}, {"eta", eta},                     {"p_real", p_real},
                          {"p_fake", p_fake},       {"gen_updated", gen_updated},     {"skipped", skipped}};
  }
};

enum class UpdateKind { aux, gen };

struct DistillHooks {
  std::function<void(const IterRecord &)> on_iter;
  // Called after every applied optimizer update, in order.
  std::function<void(int iter, UpdateKind)> on_update;
  // Called every eval_every iterations (and at the end) with the EMA weights.
  std::function<void(int iter, const ParamVector &ema)> on_eval;
};

/// Parameters and optimizer state of a distillation run.
struct TrainState {
  ParamVector gen, fake, disc, ema_gen;
  Adam opt_gen, opt_fake, opt_disc;
  int iter = 0;
  RngStream data_rng, rollout_rng, corrupt_rng, init_rng;
};

struct DistillResult {
  Checkpoint checkpoint;
  std::vector<IterRecord> records;
  int skipped = 0;
};

inline constexpr int kMaxConsecutiveSkips = 10;

/// Student, fake score and discriminator trained against a frozen teacher.
/// Each iteration draws K from the curriculum, rolls the student out, makes
/// `aux_steps` updates of the fake score (denoising loss on student samples)
/// and of the discriminator, then one generator update whose gradient uses
/// the fake score after those updates. The generator is held fixed during
/// the warmup fraction. Evaluation uses the EMA weights.
class Distiller {
public:
  Distiller(const TrainConfig &cfg, const ParamVector &teacher, std::vector<PointSet> data, double coord_radius)
      : cfg_(cfg), base_(cfg.t_total), net_(cfg.net_spec()), disc_(cfg.disc_spec()), teacher_(teacher),
        data_(std::move(data)), opt_(sampler_options(coord_radius)), radius_(coord_radius),
        grid_(sampling_grid(cfg.grid_kind, cfg.k_target, cfg.rho, base_)) {
    cfg_.validate();
    if (data_.empty()) throw ConfigError("distill: empty dataset");
    if (teacher_.layout.total() != net_.layout().total()) throw ConfigError("distill: teacher does not match the network spec");
    disc_.spec().validate(cfg_.layers);
    st_.data_rng = RngStream(cfg_.seed, 11);
    st_.rollout_rng = RngStream(cfg_.seed, 12);
    st_.corrupt_rng = RngStream(cfg_.seed, 13);
    st_.init_rng = RngStream(cfg_.seed, 14);
    st_.gen = teacher_;
    st_.fake = teacher_;
    st_.ema_gen = teacher_;
    st_.disc = disc_.init_params(st_.init_rng);
    st_.opt_gen = Adam(st_.gen.size(), cfg_.lr_gen());
    st_.opt_fake = Adam(st_.fake.size(), cfg_.lr_fake());
    st_.opt_disc = Adam(st_.disc.size(), cfg_.lr_disc());
    for (int k : cfg_.k_curriculum)
      if (k >= cfg_.rollout_floor()) ks_.push_back(k);
  }

  const TrainState &state() const { return st_; }
  const Egnn &net() const { return net_; }
  const NoiseGrid &grid() const { return grid_; }
  const BaseSchedule &base() const { return base_; }
  const SamplerOptions &sampler() const { return opt_; }
  int warmup_iters() const { return static_cast<int>(std::floor(cfg_.warmup_frac * cfg_.max_iters)); }

  Checkpoint checkpoint() const {
    Checkpoint ck;
    ck.description = describe_model(net_.spec(), cfg_.t_total, radius_);
    ck.nets.emplace_back("ema_gen", st_.ema_gen);
    ck.nets.emplace_back("gen", st_.gen);
    ck.nets.emplace_back("fake", st_.fake);
    ck.nets.emplace_back("disc", st_.disc);
    return ck;
  }

  /// One full iteration: aux updates, then (after warmup) the generator update.
  IterRecord step(const DistillHooks &hooks = {}) {
    IterRecord rec;
    rec.iter = st_.iter;
    const int K = ks_[static_cast<std::size_t>(st_.rollout_rng.uniform_int(0, static_cast<long>(ks_.size()) - 1))];
    rec.k_sampled = K;
    const auto B = static_cast<std::size_t>(cfg_.batch_size);

    // Student samples for the auxiliary networks.
    std::vector<PointSet> fake_batch(B);
    std::vector<double> fake_conds(B);
    {
      const auto ref = data_batch(B);
      std::vector<TrajectoryNoise> noise;
      for (std::size_t i = 0; i < B; ++i)
        noise.push_back(TrajectoryNoise::draw(st_.rollout_rng, ref[i].node_count(), ref[i].feat_dim(), K - 1));
      const ConsistencyGenerator cg(net_, st_.gen, grid_, K, base_, std::nullopt, opt_);
      for (std::size_t i = 0; i < B; ++i) {
        fake_conds[i] = radius_of_gyration(ref[i]);
        fake_batch[i] = PointSet::from_matrix(cg.generate(noise[i], cond_or_none(fake_conds[i]), nullptr));
      }
    }

    bool skip = false;
    for (int a = 0; a < cfg_.aux_steps; ++a) {
      const auto real = data_batch(B);
      const auto real_conds = conditions_of(real);
      auto fake_rep = eps_loss(net_, st_.fake, fake_batch, base_, st_.corrupt_rng, 0.02,
                               cfg_.conditional ? &fake_conds : nullptr);
      std::vector<GanNoise> gn;
      for (std::size_t i = 0; i < B; ++i) gn.push_back(draw_gan_noise(st_.corrupt_rng, real[i], fake_batch[i], base_));
      GanReport gan;
      try {
        gan = gan_losses(disc_, st_.disc, net_, st_.fake, real, fake_batch, gn, base_,
                         cfg_.conditional ? &real_conds : nullptr, cfg_.conditional ? &fake_conds : nullptr);
      } catch (const NumericError &) {
        skip = true;
        continue;
      }
      fake_rep.grad.values += gan.backbone_grad.grad.values;
      rec.fake_loss = fake_rep.loss;
      rec.disc_loss = gan.disc_loss;
      rec.r1 = gan.r1;
      rec.p_real = gan.p_real_mean;
      rec.p_fake = gan.p_fake_mean;
      if (!fake_rep.grad.finite() || !gan.disc_grad.grad.finite() || !std::isfinite(fake_rep.loss)) {
        skip = true;
        continue;
      }
      st_.opt_fake.step(st_.fake.values, fake_rep.grad.values);
      st_.opt_disc.step(st_.disc.values, gan.disc_grad.grad.values);
      if (hooks.on_update) hooks.on_update(st_.iter, UpdateKind::aux);
    }

    if (st_.iter >= warmup_iters()) {
      std::vector<DmdNoise> batch;
      const auto ref = data_batch(B);
      for (std::size_t i = 0; i < B; ++i) {
        auto n = draw_dmd_noise(st_.corrupt_rng, ref[i].node_count(), ref[i].feat_dim(), K, base_);
        n.cond = cond_or_none(radius_of_gyration(ref[i]));
        batch.push_back(std::move(n));
      }
      const ConsistencyGenerator cg(net_, st_.gen, grid_, K, base_, std::nullopt, opt_);
      const NeuralScore real{&net_, &teacher_, &base_, std::nullopt};
      const NeuralScore fake{&net_, &st_.fake, &base_, std::nullopt};
      const RatioFn ratio = [this](const Matrix &y, int t, std::optional<double> c) {
        return disc_prob(disc_, st_.disc, net_, st_.fake, y, t, base_, c);
      };
      try {
        const auto g = dmd_step(cg, real, fake, &ratio, cfg_.divergence_spec(), batch, base_);
        rec.dmd_grad_norm = g.gen_grad.grad.values.norm();
        rec.mean_weight = g.mean_weight;
        rec.eta = g.eta;
        Vector step = g.gen_grad.grad.values;
        if (cfg_.gen_grad_clip > 0.0 && rec.dmd_grad_norm > cfg_.gen_grad_clip)
          step *= cfg_.gen_grad_clip / rec.dmd_grad_norm;
        st_.opt_gen.step(st_.gen.values, step);
        ema_update(st_.ema_gen.values, st_.gen.values, cfg_.ema_decay);
        rec.gen_updated = true;
        if (hooks.on_update) hooks.on_update(st_.iter, UpdateKind::gen);
      } catch (const NumericError &) {
        skip = true;
      }
    }

    rec.skipped = skip;
    consecutive_skips_ = skip ? consecutive_skips_ + 1 : 0;
    ++st_.iter;
    if (consecutive_skips_ >= kMaxConsecutiveSkips)
      throw NumericError("distill: " + std::to_string(kMaxConsecutiveSkips) + " consecutive non-finite updates at iteration " +
                         std::to_string(rec.iter));
    return rec;
  }

  /// Runs to max_iters, writing metrics.jsonl and checkpoints under out_dir
  /// when it is set.
  DistillResult run(const DistillHooks &hooks = {}) {
    DistillResult res;
    std::ofstream metrics;
    const bool write = !cfg_.out_dir.empty();
    if (write) {
      std::filesystem::create_directories(cfg_.out_dir);
      metrics.open(std::filesystem::path(cfg_.out_dir) / "metrics.jsonl", std::ios::app);
      if (!metrics) throw ConfigError("distill: cannot write metrics under '" + cfg_.out_dir + "'");
    }
    while (st_.iter < cfg_.max_iters) {
      IterRecord rec;
      try {
        rec = step(hooks);
      } catch (const NumericError &) {
        if (write) save_checkpoint((std::filesystem::path(cfg_.out_dir) / "student_abort.ck").string(), checkpoint());
        throw;
      }
      if (rec.skipped) ++res.skipped;
      if (write) metrics << rec.to_json().dump() << "\n" << std::flush;
      if (hooks.on_iter) hooks.on_iter(rec);
      res.records.push_back(rec);
      if (write && cfg_.ckpt_every > 0 && st_.iter % cfg_.ckpt_every == 0)
        save_checkpoint((std::filesystem::path(cfg_.out_dir) / ("student_" + std::to_string(st_.iter) + ".ck")).string(),
                        checkpoint());
      if (hooks.on_eval && cfg_.eval_every > 0 && st_.iter % cfg_.eval_every == 0 && st_.iter < cfg_.max_iters)
        hooks.on_eval(st_.iter, st_.ema_gen);
    }
    if (hooks.on_eval) hooks.on_eval(st_.iter, st_.ema_gen);
    res.checkpoint = checkpoint();
    if (write) save_checkpoint((std::filesystem::path(cfg_.out_dir) / "student.ck").string(), res.checkpoint);
    return res;
  }

private:
  std::vector<PointSet> data_batch(std::size_t b) {
    std::vector<PointSet> out;
    out.reserve(b);
    for (std::size_t i = 0; i < b; ++i)
      out.push_back(data_[static_cast<std::size_t>(st_.data_rng.uniform_int(0, static_cast<long>(data_.size()) - 1))]);
    return out;
  }

  std::optional<double> cond_or_none(double c) const {
    if (cfg_.conditional) return c;
    return std::nullopt;
  }

  TrainConfig cfg_;
  BaseSchedule base_;
  Egnn net_;
  Discriminator disc_;
  ParamVector teacher_;
  std::vector<PointSet> data_;
  SamplerOptions opt_;
  double radius_;
  NoiseGrid grid_;
  TrainState st_;
  std::vector<int> ks_;
  int consecutive_skips_ = 0;
};

} // namespace flashdistill
