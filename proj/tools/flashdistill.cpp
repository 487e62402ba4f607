// flashdistill: command-line front end for schedules, teacher training,
// distillation, sampling, evaluation and the analytic oracle gates.
//
// Exit codes: 0 success, 1 failed gate or unexpected error, 2 configuration
// or usage error, 3 numeric abort.

#include "flashdistill/oracle.hpp"
#include "flashdistill/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;
using namespace flashdistill;
using nlohmann::json;

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// FNV-1a over the bytes of every input.
class ContentHash {
public:
  void add(const std::string &bytes) {
    for (unsigned char c : bytes) {
      h_ ^= c;
      h_ *= 0x100000001b3ull;
    }
    h_ ^= 0xff; // separator between inputs
    h_ *= 0x100000001b3ull;
  }

  void add_file(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) return add("<missing:" + path + ">");
    std::stringstream ss;
    ss << is.rdbuf();
    add(ss.str());
  }

  std::string hex() const {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h_;
    return os.str();
  }

private:
  std::uint64_t h_ = 0xcbf29ce484222325ull;
};

/// Written before a run starts and rewritten with the outcome at exit.
class RunManifest {
public:
  RunManifest(std::string command, const TrainConfig &cfg, const std::vector<std::string> &inputs) {
    ContentHash h;
    h.add(cfg.to_text());
    for (const auto &p : inputs) h.add_file(p);
    doc_ = json{{"command", std::move(command)},
                {"config", cfg.to_text()},
                {"input_hash", h.hex()},
                {"inputs", inputs},
                {"seed", cfg.seed},
                {"start", utc_now()},
                {"end", nullptr},
                {"status", "running"},
                {"outputs", json::array()}};
    path_ = fs::path(cfg.out_dir) / "manifest.json";
    write();
  }

  void output(const std::string &p) { doc_["outputs"].push_back(p); }

  void finish(const std::string &status) {
    doc_["status"] = status;
    doc_["end"] = utc_now();
    write();
  }

private:
  void write() const {
    std::ofstream os(path_);
    os << doc_.dump(2) << "\n";
  }

  json doc_;
  fs::path path_;
};

/// Config file plus `--<key> value` overrides for every config key.
struct ConfigArgs {
  std::string path;
  std::map<std::string, std::string> overrides;

  void attach(CLI::App *cmd) {
    cmd->add_option("--config", path, "key = value config file")->required()->check(CLI::ExistingFile);
    for (const auto &k : TrainConfig{}.keys()) cmd->add_option("--" + k, overrides[k], "override config key " + k);
  }

  TrainConfig load() const {
    auto cfg = TrainConfig::load(path);
    for (const auto &[k, v] : overrides)
      if (!v.empty()) cfg.set(k, v);
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("config: out_dir must be set");
    return cfg;
  }
};

void print_metrics(const EvalRecord &r, const std::string &label) {
  json j{{"label", label},
         {"nfe", r.nfe},
         {"n_samples", r.metrics.n_samples},
         {"atom_stab", r.metrics.atom_stab},
         {"mol_stab", r.metrics.mol_stab},
         {"valid", r.metrics.valid},
         {"valid_unique", r.metrics.valid_unique}};
  std::cout << j.dump() << std::endl;
}

int cmd_schedule(int n, double rho, int t_total, const std::string &kind_name, const std::string &out) {
  const auto kind = parse_spacing(kind_name);
  const BaseSchedule base(t_total);
  const auto grid = make_grid(kind, n, rho, base);
  if (out.empty() || out == "-") {
    write_grid_csv(std::cout, grid);
  } else {
    std::ofstream os(out);
    if (!os) throw ConfigError("cannot write '" + out + "'");
    write_grid_csv(os, grid);
  }
  std::cerr << "entries: " << grid.size() << "\n"
            << "fraction t/T < 1e-3 (before rounding): " << small_step_fraction(kind, n, rho) << "\n";
  return 0;
}

int cmd_teacher(const ConfigArgs &args) {
  const auto cfg = args.load();
  fs::create_directories(cfg.out_dir);
  const auto data = load_or_make_dataset(cfg);
  RunManifest manifest("teacher-train", cfg, {cfg.dataset_path});
  const auto ck_path = (fs::path(cfg.out_dir) / "teacher.ck").string();
  std::ofstream losses(fs::path(cfg.out_dir) / "teacher_loss.jsonl");
  const int every = std::max(1, cfg.teacher_iters / 20);
  try {
    const auto res = train_teacher(cfg, data, ck_path, [&](int it, double loss) {
      losses << json{{"iter", it}, {"loss", loss}}.dump() << "\n";
      if (it % every == 0) std::cerr << "teacher iter " << it << " loss " << loss << "\n";
    });
    save_checkpoint(ck_path, res.checkpoint);
  } catch (const NumericError &) {
    manifest.finish("numeric_abort");
    throw;
  }
  manifest.output(ck_path);
  manifest.output((fs::path(cfg.out_dir) / "teacher_loss.jsonl").string());

  const auto model = load_model(ck_path);
  const Egnn net(model.spec);
  const BaseSchedule base(cfg.t_total);
  const auto grid = sampling_grid(SpacingKind::uniform, 64, 1.0, base);
  RngStream rng(cfg.seed, 0xe7a1);
  print_metrics(evaluate(net, model.params, grid, 64, cfg.eval_samples, data, base, rng, sampler_options(model.coord_radius)),
                "teacher_64");
  manifest.finish("ok");
  return 0;
}

int cmd_distill(const ConfigArgs &args, std::string teacher_path) {
  const auto cfg = args.load();
  fs::create_directories(cfg.out_dir);
  if (teacher_path.empty()) teacher_path = (fs::path(cfg.out_dir) / "teacher.ck").string();
  if (!fs::exists(teacher_path)) throw ConfigError("teacher checkpoint '" + teacher_path + "' not found");
  const auto data = load_or_make_dataset(cfg);
  const auto teacher = load_model(teacher_path);
  if (teacher.net_name != "teacher") throw ConfigError("'" + teacher_path + "' is not a teacher checkpoint");
  if (!(teacher.spec == cfg.net_spec())) throw ConfigError("teacher network does not match the config");
  RunManifest manifest("distill", cfg, {cfg.dataset_path, teacher_path});
  // A rerun replaces the metrics stream instead of appending to it.
  fs::remove(fs::path(cfg.out_dir) / "metrics.jsonl");
  std::ofstream evals(fs::path(cfg.out_dir) / "evals.jsonl");

  Distiller d(cfg, teacher.params, data, teacher.coord_radius);
  DistillHooks hooks;
  const int every = std::max(1, cfg.max_iters / 20);
  hooks.on_iter = [&](const IterRecord &r) {
    if (r.iter % every == 0)
      std::cerr << "distill iter " << r.iter << " K=" << r.k_sampled << " grad " << r.dmd_grad_norm << " fake "
                << r.fake_loss << " disc " << r.disc_loss << "\n";
  };
  hooks.on_eval = [&](int it, const ParamVector &ema) {
    RngStream rng(cfg.seed, 0xe7a1);
    const auto r = evaluate(d.net(), ema, d.grid(), cfg.k_target, cfg.eval_samples, data, d.base(), rng, d.sampler());
    evals << json{{"iter", it},
                  {"nfe", r.nfe},
                  {"atom_stab", r.metrics.atom_stab},
                  {"mol_stab", r.metrics.mol_stab},
                  {"valid", r.metrics.valid},
                  {"valid_unique", r.metrics.valid_unique}}
                 .dump()
          << "\n"
          << std::flush;
  };
  try {
    d.run(hooks);
  } catch (const NumericError &) {
    manifest.finish("numeric_abort");
    throw;
  }
  for (const char *f : {"student.ck", "metrics.jsonl", "evals.jsonl"}) manifest.output((fs::path(cfg.out_dir) / f).string());
  manifest.finish("ok");
  return 0;
}

struct SampleArgs {
  std::string ckpt;
  int k = 4;
  std::string grid = "respaced";
  double rho = 2.25;
  int count = 100;
  std::uint64_t seed = 0;
  std::string out;
  std::string dataset;
  std::string nodes = "3..7";
  double cond = std::nan("");
};

std::vector<PointSet> node_reference(const SampleArgs &a) {
  if (!a.dataset.empty()) {
    std::ifstream is(a.dataset);
    if (!is) throw ConfigError("cannot open dataset '" + a.dataset + "'");
    auto data = read_xyz_all(is);
    if (data.empty()) throw ConfigError("dataset '" + a.dataset + "' is empty");
    return data;
  }
  // Without a dataset, node counts are uniform over the requested range.
  std::vector<PointSet> ref;
  for (int n : detail::parse_int_set("nodes", a.nodes)) {
    if (n < 1) throw ConfigError("--nodes entries must be >= 1");
    ref.emplace_back(n, 2);
  }
  return ref;
}

std::vector<PointSet> sample_from(const SampleArgs &a, const std::vector<PointSet> &ref) {
  const auto model = load_model(a.ckpt);
  const Egnn net(model.spec);
  const BaseSchedule base(model.t_total);
  if (a.k < 1) throw ConfigError("--k must be >= 1");
  const auto grid = sampling_grid(parse_spacing(a.grid), a.k, a.rho, base);
  RngStream rng(a.seed, 0x5a);
  std::vector<double> targets;
  const bool conditional = model.spec.cond_dim == 1;
  if (conditional) {
    if (std::isnan(a.cond)) throw ConfigError("conditional checkpoint: pass --cond <radius of gyration>");
    targets.assign(static_cast<std::size_t>(a.count), a.cond);
  }
  return draw_samples(net, model.params, grid, a.k, a.count, ref, base, rng, sampler_options(model.coord_radius),
                      conditional ? &targets : nullptr);
}

int cmd_sample(const SampleArgs &a) {
  const auto samples = sample_from(a, node_reference(a));
  if (a.out.empty() || a.out == "-") {
    write_xyz_file(std::cout, samples);
  } else {
    std::ofstream os(a.out);
    if (!os) throw ConfigError("cannot write '" + a.out + "'");
    write_xyz_file(os, samples);
  }
  std::cerr << "wrote " << samples.size() << " samples\n";
  return 0;
}

int cmd_eval(const SampleArgs &a, const std::string &input) {
  if (!input.empty()) {
    std::ifstream is(input);
    if (!is) throw ConfigError("cannot open '" + input + "'");
    const auto sets = read_xyz_all(is);
    if (sets.empty()) throw ConfigError("'" + input + "' holds no molecules");
    EvalRecord r;
    r.metrics = compute_metrics(sets, ToyChemSpec{});
    print_metrics(r, input);
    return 0;
  }
  if (a.ckpt.empty()) throw ConfigError("eval needs --input or --ckpt");
  const auto samples = sample_from(a, node_reference(a));
  EvalRecord r;
  r.metrics = compute_metrics(samples, ToyChemSpec{});
  r.nfe = a.k;
  print_metrics(r, a.ckpt);
  return 0;
}

int cmd_oracle() {
  bool ok = true;
  std::cout << std::left << std::setw(50) << "gate" << std::setw(14) << "error" << std::setw(14) << "tolerance"
            << "result\n";
  for (const auto &r : run_oracle_bridge()) {
    std::cout << std::left << std::setw(50) << r.name << std::setw(14) << r.error << std::setw(14) << r.tolerance
              << (r.pass() ? "PASS" : "FAIL") << "\n";
    ok = ok && r.pass();
  }
  return ok ? 0 : 1;
}

void add_sample_options(CLI::App *cmd, SampleArgs &a, bool ckpt_required) {
  auto *c = cmd->add_option("--ckpt", a.ckpt, "teacher or student checkpoint");
  if (ckpt_required) c->required();
  c->check(CLI::ExistingFile);
  cmd->add_option("--k", a.k, "sampling steps (NFE)");
  cmd->add_option("--grid", a.grid, "uniform | respaced")->check(CLI::IsMember({"uniform", "respaced"}));
  cmd->add_option("--rho", a.rho, "respacing exponent");
  cmd->add_option("--count", a.count, "number of samples")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", a.seed, "sampling seed");
  cmd->add_option("--dataset", a.dataset, "XYZ dataset supplying node counts")->check(CLI::ExistingFile);
  cmd->add_option("--nodes", a.nodes, "node-count range when no dataset is given, e.g. 3..7");
  cmd->add_option("--cond", a.cond, "target radius of gyration for conditional checkpoints");
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Few-step distillation of equivariant point-cloud diffusion models"};
  app.require_subcommand(1);

  int sch_n = 5, sch_t = 1000;
  double sch_rho = 2.25;
  std::string sch_kind = "respaced", sch_out;
  auto *sch = app.add_subcommand("schedule", "write a sampling grid as CSV");
  sch->add_option("--n", sch_n, "grid entries")->check(CLI::Range(2, 1000000));
  sch->add_option("--rho", sch_rho, "respacing exponent");
  sch->add_option("--t", sch_t, "diffusion steps T")->check(CLI::Range(2, 100000000));
  sch->add_option("--kind", sch_kind, "uniform | respaced")->check(CLI::IsMember({"uniform", "respaced"}));
  sch->add_option("--out", sch_out, "CSV path (default stdout)");

  ConfigArgs teacher_args;
  auto *teach = app.add_subcommand("teacher-train", "train the multi-step teacher");
  teacher_args.attach(teach);

  ConfigArgs distill_args;
  std::string teacher_ckpt;
  auto *dist = app.add_subcommand("distill", "distill the teacher into a few-step student");
  distill_args.attach(dist);
  dist->add_option("--teacher", teacher_ckpt, "teacher checkpoint (default <out_dir>/teacher.ck)");

  SampleArgs sample_args;
  auto *samp = app.add_subcommand("sample", "draw samples to an XYZ file");
  add_sample_options(samp, sample_args, true);
  samp->add_option("--out", sample_args.out, "XYZ path (default stdout)");

  SampleArgs eval_args;
  std::string eval_input;
  auto *ev = app.add_subcommand("eval", "stability, validity and uniqueness metrics");
  add_sample_options(ev, eval_args, false);
  ev->add_option("--input", eval_input, "score an XYZ file instead of sampling")->check(CLI::ExistingFile);

  auto *orc = app.add_subcommand("oracle", "run the analytic Gaussian oracle gates");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*sch) return cmd_schedule(sch_n, sch_rho, sch_t, sch_kind, sch_out);
    if (*teach) return cmd_teacher(teacher_args);
    if (*dist) return cmd_distill(distill_args, teacher_ckpt);
    if (*samp) return cmd_sample(sample_args);
    if (*ev) return cmd_eval(eval_args, eval_input);
    if (*orc) return cmd_oracle();
  } catch (const ConfigError &e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError &e) {
    std::cerr << "numeric abort: " << e.what() << "\n";
    return 3;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
