// Command-line entry point: routing demos, schedule checks, toy training,
// retrofitting, convergence analysis and cluster simulation.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "ecdlm/analysis.h"
#include "ecdlm/checkpoint.h"
#include "ecdlm/cluster_sim.h"
#include "ecdlm/error.h"
#include "ecdlm/io.h"
#include "ecdlm/routing.h"
#include "ecdlm/scheduler.h"
#include "ecdlm/trainer.h"

namespace fs = std::filesystem;
using namespace ecdlm;

namespace {

constexpr const char* kArtifact = "ecdlm";
constexpr const char* kVersion = "0.1.0";
constexpr int kManifestFormat = 1;
constexpr int kTraceFormat = 1;

std::string version_text() {
  std::ostringstream os;
  os << kArtifact << ' ' << kVersion << " (checkpoint format " << kCheckpointVersion << ", manifest format "
     << kManifestFormat << ", trace format " << kTraceFormat << ')';
  return os.str();
}

// Failures that should exit with the usage status rather than a domain error.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::string config_path;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt = nullptr;
  std::string out = "out";
  Json config = Json::object();
};

Json load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kInvalidInput, "cannot open config " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kParseError, path + ": " + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::kInvalidConfig, path + ": top level must be an object");
  static const std::set<std::string> known{"artifact", "version", "formats", "subcommand", "seed", "model",
                                           "train", "route", "schedule_check", "retrofit", "analyze",
                                           "simulate"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw Error(ErrorKind::kInvalidConfig, "unknown config section '" + it.key() + "'");
  }
  return j;
}

// Resolved parameter value: explicit flag, then config block, then default.
template <typename T>
T resolve(Json& block, const char* key, const CLI::Option* opt, const T& value) {
  if (opt->count() > 0 || !block.contains(key)) {
    block[key] = value;
    return value;
  }
  try {
    return block.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorKind::kInvalidConfig, std::string("bad value for '") + key + "'");
  }
}

Json section(const Globals& g, const char* name) {
  if (!g.config.contains(name)) return Json::object();
  const Json& s = g.config.at(name);
  if (!s.is_object()) throw Error(ErrorKind::kInvalidConfig, std::string("section '") + name + "' must be an object");
  return s;
}

std::uint64_t resolved_seed(const Globals& g) {
  if (g.seed_opt->count() > 0) return g.seed;
  if (g.config.contains("seed")) return g.config.at("seed").get<std::uint64_t>();
  return 0;
}

void reject_unknown_keys(const Json& block, const Json& resolved, const char* name) {
  for (auto it = block.begin(); it != block.end(); ++it) {
    if (!resolved.contains(it.key())) {
      throw Error(ErrorKind::kInvalidConfig, std::string("unknown key '") + it.key() + "' in " + name);
    }
  }
}

fs::path out_dir(const Globals& g) {
  fs::path p(g.out);
  fs::create_directories(p);
  return p;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error(ErrorKind::kInvalidInput, "cannot write " + path.string());
  os << text;
  if (!os) throw Error(ErrorKind::kInvalidInput, "failed writing " + path.string());
}

template <typename Fn>
void write_with(const fs::path& path, Fn&& fn) {
  std::ostringstream os;
  fn(os);
  write_file(path, os.str());
}

void write_manifest(const fs::path& dir, const std::string& subcommand, std::uint64_t seed, Json body) {
  Json m{{"artifact", kArtifact},
         {"version", kVersion},
         {"formats", {{"manifest", kManifestFormat}, {"trace", kTraceFormat}, {"checkpoint", kCheckpointVersion}}},
         {"subcommand", subcommand},
         {"seed", seed}};
  for (auto it = body.begin(); it != body.end(); ++it) m[it.key()] = it.value();
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

std::vector<double> parse_double_list(const std::string& text, const char* what) {
  std::vector<double> out;
  for (const auto& f : split_csv_line(text)) {
    if (f.empty()) continue;
    try {
      std::size_t used = 0;
      out.push_back(std::stod(f, &used));
      if (used != f.size()) throw std::invalid_argument(f);
    } catch (const std::exception&) {
      throw UsageError(std::string("bad number '") + f + "' in " + what);
    }
  }
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

// --- route ---------------------------------------------------------------

struct RouteArgs {
  std::string scores;
  bool figure2a = false;
  int tokens = 16, experts = 4;
  std::string policy;
  int k = 1, c = 0;
  double cf = 0.0;
  std::string balance = "none";
  double alpha = 0.01;
  CLI::Option *o_scores, *o_fig, *o_tokens, *o_experts, *o_policy, *o_k, *o_c, *o_cf, *o_balance, *o_alpha;
};

void add_route(CLI::App& app, RouteArgs& a) {
  auto* sub = app.add_subcommand("route", "Route one score matrix and report assignment and loads");
  a.o_scores = sub->add_option("--scores", a.scores, "CSV score matrix (tokens x experts)");
  a.o_fig = sub->add_flag("--figure2a", a.figure2a, "Use the built-in 6x3 demo matrix");
  a.o_tokens = sub->add_option("--tokens", a.tokens, "Tokens for random scores")->check(CLI::PositiveNumber);
  a.o_experts = sub->add_option("--experts", a.experts, "Experts for random scores")->check(CLI::PositiveNumber);
  a.o_policy = sub->add_option("--policy", a.policy, "tc or ec")->check(CLI::IsMember({"tc", "ec"}));
  a.o_k = sub->add_option("--k", a.k, "TC top-k")->check(CLI::PositiveNumber);
  a.o_c = sub->add_option("--c", a.c, "EC per-expert capacity")->check(CLI::PositiveNumber);
  a.o_cf = sub->add_option("--cf", a.cf, "TC capacity factor (omit for dropless)")->check(CLI::PositiveNumber);
  a.o_balance = sub->add_option("--balance", a.balance, "none, aux_loss or loss_free_bias");
  a.o_alpha = sub->add_option("--alpha", a.alpha, "Aux loss weight");
}

int run_route(const Globals& g, RouteArgs& a) {
  const std::uint64_t seed = resolved_seed(g);
  Json block = section(g, "route");
  const Json given = block;
  Json p = Json::object();
  p["scores"] = block.value("scores", std::string());
  if (a.o_scores->count()) p["scores"] = a.scores;
  p["figure2a"] = a.o_fig->count() ? a.figure2a : block.value("figure2a", false);
  p["tokens"] = resolve(block, "tokens", a.o_tokens, a.tokens);
  p["experts"] = resolve(block, "experts", a.o_experts, a.experts);
  std::string policy = a.o_policy->count() ? a.policy : block.value("policy", std::string());
  if (policy.empty()) throw UsageError("route needs --policy tc|ec");
  if (policy != "tc" && policy != "ec") throw UsageError("--policy must be tc or ec");
  p["policy"] = policy;
  p["k"] = resolve(block, "k", a.o_k, a.k);
  p["balance"] = resolve(block, "balance", a.o_balance, a.balance);
  p["alpha"] = resolve(block, "alpha", a.o_alpha, a.alpha);
  if (a.o_cf->count()) {
    p["cf"] = a.cf;
  } else {
    p["cf"] = block.contains("cf") ? block.at("cf") : Json(nullptr);
  }
  if (a.o_c->count()) {
    p["c"] = a.c;
  } else {
    p["c"] = block.contains("c") ? block.at("c") : Json(nullptr);
  }
  reject_unknown_keys(given, p, "route");

  const std::string scores_path = p["scores"].get<std::string>();
  if (p["figure2a"].get<bool>() && !scores_path.empty()) throw UsageError("--figure2a and --scores are exclusive");
  auto build_scores = [&]() -> ScoreMatrix {
    if (p["figure2a"].get<bool>()) return example_6x3_scores();
    if (!scores_path.empty()) {
      std::ifstream in(scores_path);
      if (!in) throw Error(ErrorKind::kInvalidInput, "cannot open " + scores_path);
      return read_score_matrix(in, scores_path);
    }
    const int n = p["tokens"].get<int>();
    const int e = p["experts"].get<int>();
    Rng rng = Rng(seed).split(7);
    std::vector<double> v(static_cast<std::size_t>(n) * static_cast<std::size_t>(e));
    for (double& x : v) x = rng.normal();
    return ScoreMatrix(static_cast<std::size_t>(n), static_cast<std::size_t>(e), std::move(v));
  };
  const ScoreMatrix scores = build_scores();

  RoutingAssignment assignment;
  Json extra = Json::object();
  if (policy == "ec") {
    if (p["c"].is_null()) throw UsageError("EC routing needs --c");
    assignment = route_ec(scores, EcConfig{p["c"].get<int>()});
  } else {
    TcConfig tc;
    tc.k = p["k"].get<int>();
    if (!p["cf"].is_null()) tc.capacity_factor = p["cf"].get<double>();
    tc.balance = parse_balance_mode(p["balance"].get<std::string>());
    tc.aux_alpha = p["alpha"].get<double>();
    BiasState bias = BiasState::zeros(scores.n_experts(), tc.bias_update_rate);
    assignment = route_tc(scores, tc, &bias);
    if (tc.balance == BalanceMode::kAuxLoss) {
      extra["aux_loss"] = aux_load_balance_loss(scores, assignment, tc.aux_alpha);
    }
  }

  const fs::path dir = out_dir(g);
  Json out = to_json(assignment);
  for (auto it = extra.begin(); it != extra.end(); ++it) out[it.key()] = it.value();
  write_file(dir / "assignment.json", out.dump(2) + "\n");
  const LoadStats stats = load_stats(assignment, scores.n_tokens(), scores.n_experts());
  write_with(dir / "load_stats.csv", [&](std::ostream& os) { write_load_stats(os, {stats}); });
  write_manifest(dir, "route", seed, Json{{"route", p}});
  std::cout << assignment.policy_tag << " loads " << join_ints(assignment.per_expert_load) << '\n';
  return 0;
}

// --- schedule-check ------------------------------------------------------

struct ScheduleArgs {
  double k_min = 8, k_max = 32, sigma = kDefaultGaussianSigma, baseline = 20;
  std::vector<std::string> kinds;
  int resolution = 100000;
  CLI::Option *o_kmin, *o_kmax, *o_sigma, *o_baseline, *o_kinds, *o_res;
};

void add_schedule(CLI::App& app, ScheduleArgs& a) {
  auto* sub = app.add_subcommand("schedule-check", "Expected top-k of capacity schedules (FLOPs equivalence)");
  a.o_kmin = sub->add_option("--k-min", a.k_min, "Lower k bound");
  a.o_kmax = sub->add_option("--k-max", a.k_max, "Upper k bound");
  a.o_sigma = sub->add_option("--sigma", a.sigma, "Gaussian width");
  a.o_baseline = sub->add_option("--baseline", a.baseline, "Static top-k to match");
  a.o_kinds = sub->add_option("--kinds", a.kinds, "Comma-separated scheduler kinds (default: all)")
                  ->delimiter(',')
                  ->allow_extra_args(false);
  a.o_res = sub->add_option("--resolution", a.resolution, "Quadrature points")->check(CLI::PositiveNumber);
}

int run_schedule(const Globals& g, ScheduleArgs& a) {
  const std::uint64_t seed = resolved_seed(g);
  Json block = section(g, "schedule_check");
  const Json given = block;
  Json p = Json::object();
  p["k_min"] = resolve(block, "k_min", a.o_kmin, a.k_min);
  p["k_max"] = resolve(block, "k_max", a.o_kmax, a.k_max);
  p["sigma"] = resolve(block, "sigma", a.o_sigma, a.sigma);
  p["baseline"] = resolve(block, "baseline", a.o_baseline, a.baseline);
  p["resolution"] = resolve(block, "resolution", a.o_res, a.resolution);
  std::vector<std::string> kinds;
  if (a.o_kinds->count()) {
    for (const auto& k : a.kinds) {
      if (!k.empty()) kinds.push_back(k);
    }
    if (kinds.empty()) throw UsageError("--kinds lists no schedulers");
  } else if (block.contains("kinds")) {
    kinds = block.at("kinds").get<std::vector<std::string>>();
    if (kinds.empty()) throw UsageError("schedule_check.kinds lists no schedulers");
  } else {
    for (const auto& s : standard_schedules(8, 32, kDefaultGaussianSigma, 20)) {
      kinds.emplace_back(to_string(s.kind));
    }
  }
  p["kinds"] = kinds;
  reject_unknown_keys(given, p, "schedule_check");

  std::vector<CapacitySchedule> schedules;
  for (const auto& name : kinds) {
    auto kind = parse_scheduler_kind(name);
    if (!kind) throw UsageError("unknown scheduler kind '" + name + "'");
    CapacitySchedule s;
    s.kind = *kind;
    s.k_min = p["k_min"].get<double>();
    s.k_max = p["k_max"].get<double>();
    s.sigma = p["sigma"].get<double>();
    s.k_static = p["baseline"].get<double>();
    schedules.push_back(s);
  }
  const auto rows =
      flops_equivalence_report(schedules, p["baseline"].get<double>(), p["resolution"].get<int>());
  const fs::path dir = out_dir(g);
  write_with(dir / "flops.csv", [&](std::ostream& os) { write_flops_report(os, rows); });
  write_manifest(dir, "schedule-check", seed, Json{{"schedule_check", p}});
  for (const auto& r : rows) {
    std::printf("%-16s E[k]=%.2f delta=%+.2f%s\n", std::string(to_string(r.kind)).c_str(), r.expected_k,
                r.delta, r.flagged ? "  (off baseline)" : "");
  }
  return 0;
}

// --- train ---------------------------------------------------------------

struct TrainArgs {
  int steps = 0;
  std::string resume;
  CLI::Option *o_steps, *o_resume;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* sub = app.add_subcommand("train", "Train the toy diffusion model");
  a.o_steps = sub->add_option("--steps", a.steps, "Override train.total_steps")->check(CLI::NonNegativeNumber);
  a.o_resume = sub->add_option("--resume", a.resume, "Continue from a checkpoint");
}

void write_drop_header(std::ostream& os) { os << "step,layer,drop_ratio,max_over_mean,load_std,loads\n"; }

void write_drop_rows(std::ostream& os, const StepResult& r) {
  for (std::size_t l = 0; l < r.layer_stats.size(); ++l) {
    const auto& s = r.layer_stats[l];
    std::string loads;
    for (std::size_t j = 0; j < s.loads.size(); ++j) loads += (j ? ";" : "") + std::to_string(s.loads[j]);
    os << r.step << ',' << l << ',' << format_double(s.drop_ratio) << ',' << format_double(s.max_over_mean)
       << ',' << format_double(s.load_std) << ',' << loads << '\n';
  }
}

// Runs the trainer to its total step count and writes trace, drops and the
// checkpoint. Returns the summary JSON.
Json train_and_write(Trainer& trainer, const fs::path& dir, std::vector<LossRecord> prefix = {}) {
  std::ostringstream drops;
  write_drop_header(drops);
  std::map<long, long> pairs_per_epoch;
  const long start_step = trainer.step();
  auto records = trainer.run([&](const StepResult& r) {
    write_drop_rows(drops, r);
    pairs_per_epoch[trainer.epoch()] += r.routed_pairs;
  });
  records.insert(records.begin(), prefix.begin(), prefix.end());
  write_with(dir / "trace.csv", [&](std::ostream& os) { write_loss_trace(os, records); });
  write_file(dir / "drops.csv", drops.str());
  save_checkpoint(trainer, (dir / "checkpoint.bin").string());

  Json epochs = Json::array();
  for (const auto& [e, n] : pairs_per_epoch) epochs.push_back(Json{{"epoch", e}, {"routed_pairs", n}});
  std::vector<LossRecord> last;
  for (const auto& r : records) {
    if (r.step == trainer.step()) last.push_back(r);
  }
  Json summary{{"start_step", start_step},
               {"final_step", trainer.step()},
               {"routed_pairs_by_epoch", epochs},
               {"checksum", trainer.model().checksum()}};
  summary["final_eval_loss"] = last.empty() ? Json(nullptr) : Json(pooled_loss(last));
  return summary;
}

int run_train(const Globals& g, TrainArgs& a) {
  const fs::path dir = out_dir(g);
  if (a.o_resume->count()) {
    Trainer trainer = load_checkpoint(a.resume);
    if (a.o_steps->count()) trainer.set_total_steps(a.steps);
    const Json summary = train_and_write(trainer, dir);
    write_file(dir / "summary.json", summary.dump(2) + "\n");
    write_manifest(dir, "train", trainer.config().seed,
                   Json{{"resume", a.resume},
                        {"model", to_json(trainer.model().config())},
                        {"train", to_json(trainer.config())}});
    return 0;
  }
  ModelConfig mc = model_config_from_json(section(g, "model"));
  TrainConfig tc = train_config_from_json(section(g, "train"));
  if (g.seed_opt->count() || g.config.contains("seed")) tc.seed = resolved_seed(g);
  if (a.o_steps->count()) tc.total_steps = a.steps;
  Trainer trainer = new_trainer(mc, tc);
  const Json summary = train_and_write(trainer, dir);
  write_file(dir / "summary.json", summary.dump(2) + "\n");
  write_manifest(dir, "train", tc.seed, Json{{"model", to_json(mc)}, {"train", to_json(tc)}});
  std::cout << "trained to step " << trainer.step() << ", eval loss "
            << (summary["final_eval_loss"].is_null() ? std::string("n/a")
                                                      : format_double(summary["final_eval_loss"].get<double>()))
            << '\n';
  return 0;
}

// --- retrofit ------------------------------------------------------------

struct RetrofitArgs {
  std::string checkpoint;
  std::string schedule;
  double k_min = 2, k_max = 14, sigma = kDefaultGaussianSigma;
  int finetune_steps = 0;
  CLI::Option *o_ckpt, *o_schedule, *o_kmin, *o_kmax, *o_sigma, *o_steps;
};

void add_retrofit(CLI::App& app, RetrofitArgs& a) {
  auto* sub = app.add_subcommand("retrofit", "Swap a TC router for EC and optionally finetune");
  a.o_ckpt = sub->add_option("--checkpoint", a.checkpoint, "TC checkpoint");
  a.o_schedule = sub->add_option("--schedule", a.schedule, "Capacity scheduler kind for dynamic EC");
  a.o_kmin = sub->add_option("--k-min", a.k_min, "Schedule lower k");
  a.o_kmax = sub->add_option("--k-max", a.k_max, "Schedule upper k");
  a.o_sigma = sub->add_option("--sigma", a.sigma, "Gaussian width");
  a.o_steps = sub->add_option("--finetune-steps", a.finetune_steps, "Steps after the swap")
                  ->check(CLI::NonNegativeNumber);
}

int run_retrofit(const Globals& g, RetrofitArgs& a) {
  Json block = section(g, "retrofit");
  const Json given = block;
  Json p = Json::object();
  p["checkpoint"] = resolve(block, "checkpoint", a.o_ckpt, a.checkpoint);
  p["schedule"] = resolve(block, "schedule", a.o_schedule, a.schedule);
  p["k_min"] = resolve(block, "k_min", a.o_kmin, a.k_min);
  p["k_max"] = resolve(block, "k_max", a.o_kmax, a.k_max);
  p["sigma"] = resolve(block, "sigma", a.o_sigma, a.sigma);
  p["finetune_steps"] = resolve(block, "finetune_steps", a.o_steps, a.finetune_steps);
  reject_unknown_keys(given, p, "retrofit");
  const std::string ckpt = p["checkpoint"].get<std::string>();
  if (ckpt.empty()) throw UsageError("retrofit needs --checkpoint");

  std::optional<CapacitySchedule> schedule;
  if (const std::string name = p["schedule"].get<std::string>(); !name.empty()) {
    auto kind = parse_scheduler_kind(name);
    if (!kind) throw UsageError("unknown scheduler kind '" + name + "'");
    CapacitySchedule s;
    s.kind = *kind;
    s.k_min = p["k_min"].get<double>();
    s.k_max = p["k_max"].get<double>();
    s.sigma = p["sigma"].get<double>();
    schedule = s;
  }

  Trainer trainer = load_checkpoint(ckpt);
  const std::uint64_t before = trainer.model().checksum();
  const auto pre = trainer.evaluate();
  trainer.model() = retrofit_router(trainer.model(), schedule);
  const std::uint64_t after = trainer.model().checksum();
  auto post = trainer.evaluate();
  const double post_loss = pooled_loss(post);
  if (!std::isfinite(post_loss)) throw Error(ErrorKind::kTrainingDiverged, "post-retrofit loss is not finite");

  const fs::path dir = out_dir(g);
  trainer.set_total_steps(static_cast<int>(trainer.step()) + p["finetune_steps"].get<int>());
  Json summary = train_and_write(trainer, dir, post);
  summary["checksum_before"] = before;
  summary["checksum_after_retrofit"] = after;
  summary["loss_before"] = pooled_loss(pre);
  summary["loss_after_retrofit"] = post_loss;
  summary["routing"] = trainer.model().config().routing.tag();
  write_file(dir / "retrofit.json", summary.dump(2) + "\n");
  write_manifest(dir, "retrofit", trainer.config().seed, Json{{"retrofit", p}});
  std::cout << "retrofit " << summary["routing"].get<std::string>() << ": loss "
            << format_double(summary["loss_before"].get<double>()) << " -> " << format_double(post_loss);
  if (!summary["final_eval_loss"].is_null() && p["finetune_steps"].get<int>() > 0) {
    std::cout << " -> " << format_double(summary["final_eval_loss"].get<double>()) << " after finetuning";
  }
  std::cout << '\n';
  return 0;
}

// --- analyze -------------------------------------------------------------

struct AnalyzeArgs {
  std::vector<std::string> traces;
  long stage_start = 0, stage_end = 0;
  CLI::Option *o_traces, *o_start, *o_end;
};

void add_analyze(CLI::App& app, AnalyzeArgs& a) {
  auto* sub = app.add_subcommand("analyze", "Per-bin convergence rates and dyn/static ratios");
  a.o_traces = sub->add_option("--trace", a.traces, "Loss trace CSV; a second trace is the static reference");
  a.o_start = sub->add_option("--stage-start", a.stage_start, "First stage start (default: first step > 0)");
  a.o_end = sub->add_option("--stage-end", a.stage_end, "Last stage end (default: last step)");
}

LossTrace read_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kInvalidInput, "cannot open " + path);
  return LossTrace(read_loss_trace(in, path));
}

void write_plot_data(const fs::path& dir, const std::string& stem, const LossTrace& trace,
                     const ConvergenceReport& report) {
  for (int b = 0; b < trace.bin_count(); ++b) {
    write_with(dir / (stem + "_loss_bin" + std::to_string(b) + ".dat"), [&](std::ostream& os) {
      os << "# step mean_loss\n";
      for (const auto& r : trace.records()) {
        if (r.bin == b) os << r.step << ' ' << format_double(r.mean_loss) << '\n';
      }
    });
  }
  write_with(dir / (stem + "_eta.dat"), [&](std::ostream& os) {
    os << "# bin stage_start stage_end eta\n";
    for (int b = 0; b < report.bin_count; ++b) {
      for (std::size_t s = 0; s < report.stages.stages.size(); ++s) {
        const auto& c = report.cell(b, s);
        if (!c.eta) continue;
        os << b << ' ' << report.stages.stages[s].start << ' ' << report.stages.stages[s].end << ' '
           << format_double(*c.eta) << '\n';
      }
    }
  });
}

int run_analyze(const Globals& g, AnalyzeArgs& a) {
  const std::uint64_t seed = resolved_seed(g);
  Json block = section(g, "analyze");
  const Json given = block;
  Json p = Json::object();
  p["traces"] = resolve(block, "traces", a.o_traces, a.traces);
  p["stage_start"] = resolve(block, "stage_start", a.o_start, a.stage_start);
  p["stage_end"] = resolve(block, "stage_end", a.o_end, a.stage_end);
  reject_unknown_keys(given, p, "analyze");
  const auto paths = p["traces"].get<std::vector<std::string>>();
  if (paths.empty() || paths.size() > 2) throw UsageError("analyze takes one or two --trace files");

  std::vector<LossTrace> traces;
  for (const auto& path : paths) traces.push_back(read_trace(path));
  long start = p["stage_start"].get<long>();
  long end = p["stage_end"].get<long>();
  if (start <= 0 || end <= 0) {
    long lo = 0, hi = 0;
    for (const auto& r : traces.front().records()) {
      if (r.step > 0 && (lo == 0 || r.step < lo)) lo = r.step;
      hi = std::max(hi, r.step);
    }
    if (start <= 0) start = lo;
    if (end <= 0) end = hi;
  }
  if (start <= 0 || end <= start) throw UsageError("trace spans no positive step range for stages");
  p["stage_start"] = start;
  p["stage_end"] = end;
  const StageSpec stages = geometric_stages(start, end);

  const fs::path dir = out_dir(g);
  std::vector<ConvergenceReport> reports;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    reports.push_back(convergence_rate(traces[i], stages));
    const std::string suffix = i == 0 ? "" : "_" + std::to_string(i + 1);
    write_with(dir / ("convergence" + suffix + ".csv"),
               [&](std::ostream& os) { write_convergence(os, reports.back()); });
    write_plot_data(dir, "trace" + std::to_string(i + 1), traces[i], reports.back());
    for (int b = 0; b < reports.back().bin_count; ++b) {
      for (std::size_t s = 0; s < stages.stages.size(); ++s) {
        if (!reports.back().cell(b, s).eta) {
          std::cerr << "warning: " << paths[i] << ": bin " << b << " stage [" << stages.stages[s].start << ", "
                    << stages.stages[s].end << "] has too few points; marked NA\n";
        }
      }
    }
  }
  if (reports.size() == 2) {
    const auto ratio = eta_ratio(reports[0], reports[1]);
    write_with(dir / "ratio.csv", [&](std::ostream& os) { write_eta_ratio(os, reports[0], ratio); });
  }
  write_manifest(dir, "analyze", seed, Json{{"analyze", p}});
  return 0;
}

// --- simulate ------------------------------------------------------------

struct SimulateArgs {
  int experts = 64, devices = 8, k = 8, tokens = 4096, steps = 50;
  std::string cf = "1.0,1.25,1.5";
  bool dropless = true;
  std::string dist = "zipf";
  double zipf_s = 1.2;
  std::string dump;
  std::string balance = "aux_loss";
  double alpha = 0.01;
  double token_cost = StepCostModel{}.per_token_expert_cost;
  double dispatch_cost = StepCostModel{}.dispatch_cost;
  bool pad = true;
  CLI::Option *o_experts, *o_devices, *o_k, *o_tokens, *o_steps, *o_cf, *o_dropless, *o_dist, *o_zipf, *o_dump,
      *o_balance, *o_alpha, *o_token_cost, *o_dispatch, *o_pad;
};

void add_simulate(CLI::App& app, SimulateArgs& a) {
  auto* sub = app.add_subcommand("simulate", "Expert-parallel step-time simulation of routing policies");
  a.o_experts = sub->add_option("--experts", a.experts, "Experts (E)")->check(CLI::PositiveNumber);
  a.o_devices = sub->add_option("--devices", a.devices, "Devices (G)")->check(CLI::PositiveNumber);
  a.o_k = sub->add_option("--k", a.k, "Top-k / EC matched k")->check(CLI::PositiveNumber);
  a.o_tokens = sub->add_option("--tokens", a.tokens, "Tokens per step")->check(CLI::PositiveNumber);
  a.o_steps = sub->add_option("--steps", a.steps, "Simulated steps")->check(CLI::PositiveNumber);
  a.o_cf = sub->add_option("--cf", a.cf, "Comma-separated TC capacity factors");
  a.o_dropless = sub->add_option("--dropless", a.dropless, "Include dropless TC");
  a.o_dist = sub->add_option("--dist", a.dist, "zipf, uniform or dump")->check(CLI::IsMember({"zipf", "uniform", "dump"}));
  a.o_zipf = sub->add_option("--zipf-s", a.zipf_s, "Zipf exponent of expert popularity");
  a.o_dump = sub->add_option("--dump", a.dump, "Router score CSV for --dist dump");
  a.o_balance = sub->add_option("--balance", a.balance, "TC balance mode");
  a.o_alpha = sub->add_option("--alpha", a.alpha, "Aux loss weight");
  a.o_token_cost = sub->add_option("--token-cost", a.token_cost, "Seconds per routed token slot");
  a.o_dispatch = sub->add_option("--dispatch-cost", a.dispatch_cost, "Seconds per received selection");
  a.o_pad = sub->add_option("--pad", a.pad, "Charge capacity-bounded experts their full buffer");
}

ArchSpec arch_from_json(const Json& j, const SimulateArgs& a, int tokens) {
  ArchSpec arch;
  arch.batch = 1;
  arch.seq_len = tokens;
  arch.n_layers = j.value("n_layers", 20.0);
  arch.hidden = j.value("hidden", 2048.0);
  arch.expert_ffn = j.value("expert_ffn", 512.0);
  arch.shared_ffn = j.value("shared_ffn", 1024.0);
  arch.routed_k = a.k;
  arch.n_experts = a.experts;
  arch.vocab = j.value("vocab", 157184.0);
  for (auto it = j.begin(); it != j.end(); ++it) {
    static const std::set<std::string> known{"n_layers", "hidden", "expert_ffn", "shared_ffn", "vocab"};
    if (!known.count(it.key())) throw Error(ErrorKind::kInvalidConfig, "unknown key '" + it.key() + "' in simulate.arch");
  }
  return arch;
}

int run_simulate(const Globals& g, SimulateArgs& a) {
  const std::uint64_t seed = resolved_seed(g);
  Json block = section(g, "simulate");
  const Json given = block;
  Json p = Json::object();
  a.experts = resolve(block, "experts", a.o_experts, a.experts);
  a.devices = resolve(block, "devices", a.o_devices, a.devices);
  a.k = resolve(block, "k", a.o_k, a.k);
  a.tokens = resolve(block, "tokens", a.o_tokens, a.tokens);
  a.steps = resolve(block, "steps", a.o_steps, a.steps);
  a.cf = resolve(block, "cf", a.o_cf, a.cf);
  a.dropless = resolve(block, "dropless", a.o_dropless, a.dropless);
  a.dist = resolve(block, "dist", a.o_dist, a.dist);
  a.zipf_s = resolve(block, "zipf_s", a.o_zipf, a.zipf_s);
  a.dump = resolve(block, "dump", a.o_dump, a.dump);
  a.balance = resolve(block, "balance", a.o_balance, a.balance);
  a.alpha = resolve(block, "alpha", a.o_alpha, a.alpha);
  a.token_cost = resolve(block, "token_cost", a.o_token_cost, a.token_cost);
  a.dispatch_cost = resolve(block, "dispatch_cost", a.o_dispatch, a.dispatch_cost);
  a.pad = resolve(block, "pad", a.o_pad, a.pad);
  p = block;
  const Json arch_json = given.contains("arch") ? given.at("arch") : Json::object();
  const ArchSpec arch = arch_from_json(arch_json, a, a.tokens);
  p["arch"] = Json{{"n_layers", arch.n_layers},
                   {"hidden", arch.hidden},
                   {"expert_ffn", arch.expert_ffn},
                   {"shared_ffn", arch.shared_ffn},
                   {"vocab", arch.vocab}};
  reject_unknown_keys(given, p, "simulate");

  if (a.experts % a.devices != 0) throw UsageError("--devices must divide --experts");
  const ClusterConfig cluster = ClusterConfig::contiguous(a.experts, a.devices);
  WorkloadSpec w;
  w.n_tokens_per_step = a.tokens;
  w.n_steps = a.steps;
  w.seed = seed;
  w.zipf_s = a.zipf_s;
  if (a.dist == "uniform") {
    w.distribution = ScoreDistribution::kUniform;
  } else if (a.dist == "dump") {
    if (a.dump.empty()) throw UsageError("--dist dump needs --dump");
    std::ifstream in(a.dump);
    if (!in) throw Error(ErrorKind::kInvalidInput, "cannot open " + a.dump);
    w.distribution = ScoreDistribution::kTrainedDump;
    w.router_dump = std::make_shared<RowMatrix>(read_score_matrix(in, a.dump).matrix());
  }
  StepCostModel cost;
  cost.per_token_expert_cost = a.token_cost;
  cost.dispatch_cost = a.dispatch_cost;
  cost.pad_to_capacity = a.pad;

  std::vector<SimPolicy> policies;
  SimPolicy ec;
  ec.policy = RoutingPolicy::kExpertChoice;
  ec.ec_k = a.k;
  policies.push_back(ec);
  const auto cfs = parse_double_list(a.cf, "--cf");
  std::vector<std::optional<double>> tc_caps(cfs.begin(), cfs.end());
  if (a.dropless) tc_caps.emplace_back(std::nullopt);
  for (const auto& cf : tc_caps) {
    SimPolicy tc;
    tc.policy = RoutingPolicy::kTokenChoice;
    tc.tc.k = a.k;
    tc.tc.capacity_factor = cf;
    tc.tc.balance = parse_balance_mode(a.balance);
    tc.tc.aux_alpha = a.alpha;
    policies.push_back(tc);
  }
  const PolicyReport report = compare_policies(policies, w, cluster, cost, arch);

  const fs::path dir = out_dir(g);
  write_with(dir / "sim.csv", [&](std::ostream& os) { write_sim_results(os, report.rows); });
  Json ranking = Json::array();
  for (const auto& r : report.rows) ranking.push_back(r.policy_tag);
  Json ordering{{"ranking", ranking},
                {"ec_first", !report.rows.empty() && report.rows.front().policy_tag == ec.tag()},
                {"cf_monotone", report.violations.empty()},
                {"violations", report.violations}};
  write_file(dir / "ordering.json", ordering.dump(2) + "\n");
  write_manifest(dir, "simulate", seed, Json{{"simulate", p}});
  for (const auto& r : report.rows) {
    std::printf("%-32s %10.3f TFLOP/s  load std %.2f\n", r.policy_tag.c_str(), r.throughput_tflops,
                r.per_device_load_std);
  }
  for (const auto& v : report.violations) std::cerr << "warning: " << v << '\n';
  return 0;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig:
    case ErrorKind::kInvalidInput:
    case ErrorKind::kNotApplicable:
      return 3;
    case ErrorKind::kParseError:
      return 4;
    case ErrorKind::kTrainingDiverged:
    case ErrorKind::kUndefinedLoss:
      return 5;
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expert-choice routing toolkit for masked diffusion language models"};
  app.set_version_flag("--version", version_text());
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON config (or a previous run's manifest.json)");
  g.seed_opt = app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--out", g.out, "Output directory");

  RouteArgs route;
  ScheduleArgs schedule;
  TrainArgs train;
  RetrofitArgs retrofit;
  AnalyzeArgs analyze;
  SimulateArgs simulate;
  add_route(app, route);
  add_schedule(app, schedule);
  add_train(app, train);
  add_retrofit(app, retrofit);
  add_analyze(app, analyze);
  add_simulate(app, simulate);
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // --help and --version come through here with a zero status
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (!g.config_path.empty()) g.config = load_config(g.config_path);
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "route") return run_route(g, route);
    if (name == "schedule-check") return run_schedule(g, schedule);
    if (name == "train") return run_train(g, train);
    if (name == "retrofit") return run_retrofit(g, retrofit);
    if (name == "analyze") return run_analyze(g, analyze);
    return run_simulate(g, simulate);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: invalid-config: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
