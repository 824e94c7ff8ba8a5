#pragma once

// Experiment configs and the batch commands behind the command line tool:
// run, compare, verify-neumann, verify-covariance-order and gen-data.
//
// Exit codes: 0 success, 1 bad config / construction / I/O, 2 divergence
// (verify commands return 2 when a cell fails).

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fedmsa/baselines.hpp"
#include "fedmsa/datagen.hpp"
#include "fedmsa/errors.hpp"
#include "fedmsa/estimator_stats.hpp"
#include "fedmsa/instances.hpp"
#include "fedmsa/msa.hpp"
#include "fedmsa/neumann.hpp"
#include "fedmsa/numerics.hpp"
#include "fedmsa/rng.hpp"
#include "fedmsa/serialization.hpp"

namespace fedmsa {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitDiverged = 2 };

// ---------------------------------------------------------------------------
// Strict JSON object reading
// ---------------------------------------------------------------------------

namespace detail {

// Reads fields of one JSON object and remembers which keys were consumed, so
// finish() can reject anything left over.
class FieldReader {
 public:
  FieldReader(const Json& j, std::string context) : j_(j), ctx_(std::move(context)) {
    if (!j_.is_object()) throw ConfigError(ctx_ + ": expected a JSON object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const Json& raw(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void read(const char* key, double& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_number()) fail(key, "expected a number");
    out = v.get<double>();
    if (!std::isfinite(out)) fail(key, "expected a finite number");
  }
  void read(const char* key, std::uint64_t& out) {
    if (!has(key)) return;
    out = read_unsigned(key);
  }
  void read(const char* key, bool& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_boolean()) fail(key, "expected true or false");
    out = v.get<bool>();
  }
  void read(const char* key, std::string& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_string()) fail(key, "expected a string");
    out = v.get<std::string>();
  }
  void read(const char* key, std::vector<double>& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_array()) fail(key, "expected an array of numbers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number()) fail(key, "expected an array of numbers");
      out.push_back(e.get<double>());
    }
  }
  void read(const char* key, std::vector<std::size_t>& out) {
    if (!has(key)) return;
    const Json& v = raw(key);
    if (!v.is_array()) fail(key, "expected an array of non-negative integers");
    out.clear();
    for (const auto& e : v) {
      if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0))
        fail(key, "expected an array of non-negative integers");
      out.push_back(e.get<std::size_t>());
    }
  }

  void finish() const {
    std::vector<std::string> unknown;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) unknown.push_back(it.key());
    if (unknown.empty()) return;
    std::string msg = ctx_ + ": unknown field";
    msg += unknown.size() > 1 ? "s" : "";
    for (std::size_t i = 0; i < unknown.size(); ++i) msg += (i ? ", '" : " '") + unknown[i] + "'";
    throw ConfigError(msg);
  }

  [[noreturn]] void fail(const char* key, const std::string& what) const {
    throw ConfigError(ctx_ + "." + key + ": " + what);
  }

 private:
  std::uint64_t read_unsigned(const char* key) {
    const Json& v = raw(key);
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer()) {
      if (v.get<std::int64_t>() < 0) fail(key, "must be >= 0");
      return static_cast<std::uint64_t>(v.get<std::int64_t>());
    }
    fail(key, "expected a non-negative integer");
  }

  const Json& j_;
  std::string ctx_;
  std::set<std::string> seen_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Problem and experiment configs
// ---------------------------------------------------------------------------

struct ProblemSpec {
  std::string kind = "toy-bilevel";  // toy-bilevel | quadratic-bilevel | risk-averse | bilevel-file
  std::size_t toy_clients = 1;
  double toy_x0 = 1.0;
  BilevelGenOptions bilevel;
  RiskAverseOptions risk;
  std::string path;  // bilevel-file, relative paths resolve against the config's directory

  bool operator==(const ProblemSpec&) const = default;
};

struct ExperimentConfig {
  ProblemSpec problem;
  std::vector<std::string> algorithms{"fedmsa"};
  HyperParams hyper;
  std::vector<std::size_t> k_sweep;  // compare only; empty means hyper.K
  std::string output_dir = "out";
  std::size_t metric_every = 1;

  bool operator==(const ExperimentConfig&) const = default;
};

inline const std::vector<std::string>& known_algorithms() {
  static const std::vector<std::string> names{"fedmsa", "centralized", "frozen-indirect"};
  return names;
}

inline ProblemSpec parse_problem(const Json& j) {
  detail::FieldReader r(j, "problem");
  ProblemSpec p;
  if (!r.has("kind")) throw ConfigError("problem.kind: missing");
  r.read("kind", p.kind);
  if (p.kind == "toy-bilevel") {
    r.read("clients", p.toy_clients);
    r.read("x0", p.toy_x0);
    if (p.toy_clients == 0) r.fail("clients", "must be >= 1");
  } else if (p.kind == "quadratic-bilevel") {
    auto& o = p.bilevel;
    r.read("M", o.M);
    r.read("d1", o.d1);
    r.read("d2", o.d2);
    r.read("tau", o.tau);
    r.read("mu_g", o.mu_g);
    r.read("L_g", o.L_g);
    r.read("seed", o.seed);
    r.read("b_min", o.b_min);
    r.read("b_max", o.b_max);
    r.read("c_min", o.c_min);
    r.read("c_max", o.c_max);
    r.read("d_scale", o.d_scale);
    r.read("pure_indirect", o.pure_indirect);
    r.read("sigma_f", o.sigma_f);
    r.read("sigma_g", o.sigma_g);
  } else if (p.kind == "risk-averse") {
    auto& o = p.risk;
    r.read("d", o.d);
    r.read("n", o.n);
    r.read("x_star_seed", o.x_star_seed);
    r.read("data_seed", o.data_seed);
    r.read("zero_noise", o.zero_noise);
    r.read("lambda", o.lambda);
    r.read("delta", o.delta);
    r.read("squared_risk", o.squared_risk);
    r.read("clients", o.clients);
    r.read("q", o.q);
    r.read("partition_seed", o.partition_seed);
    r.read("sub_split", o.sub_split);
    r.read("init_scale", o.init_scale);
    r.read("init_seed", o.init_seed);
  } else if (p.kind == "bilevel-file") {
    if (!r.has("path")) throw ConfigError("problem.path: missing for kind 'bilevel-file'");
    r.read("path", p.path);
  } else {
    throw ConfigError("problem.kind: unknown kind '" + p.kind +
                      "' (expected toy-bilevel, quadratic-bilevel, risk-averse or bilevel-file)");
  }
  r.finish();
  return p;
}

inline Json problem_to_json(const ProblemSpec& p) {
  Json j{{"kind", p.kind}};
  if (p.kind == "toy-bilevel") {
    j["clients"] = p.toy_clients;
    j["x0"] = p.toy_x0;
  } else if (p.kind == "quadratic-bilevel") {
    const auto& o = p.bilevel;
    j["M"] = o.M;
    j["d1"] = o.d1;
    j["d2"] = o.d2;
    j["tau"] = o.tau;
    j["mu_g"] = o.mu_g;
    j["L_g"] = o.L_g;
    j["seed"] = o.seed;
    j["b_min"] = o.b_min;
    j["b_max"] = o.b_max;
    j["c_min"] = o.c_min;
    j["c_max"] = o.c_max;
    j["d_scale"] = o.d_scale;
    j["pure_indirect"] = o.pure_indirect;
    j["sigma_f"] = o.sigma_f;
    j["sigma_g"] = o.sigma_g;
  } else if (p.kind == "risk-averse") {
    const auto& o = p.risk;
    j["d"] = o.d;
    j["n"] = o.n;
    j["x_star_seed"] = o.x_star_seed;
    j["data_seed"] = o.data_seed;
    j["zero_noise"] = o.zero_noise;
    j["lambda"] = o.lambda;
    j["delta"] = o.delta;
    j["squared_risk"] = o.squared_risk;
    j["clients"] = o.clients;
    j["q"] = o.q;
    j["partition_seed"] = o.partition_seed;
    j["sub_split"] = o.sub_split;
    j["init_scale"] = o.init_scale;
    j["init_seed"] = o.init_seed;
  } else {
    j["path"] = p.path;
  }
  return j;
}

inline HyperParams parse_hyper(const Json& j) {
  detail::FieldReader r(j, "hyper");
  HyperParams hp;
  r.read("alpha", hp.alpha);
  r.read("betas", hp.betas);
  r.read("rho", hp.rho);
  r.read("K", hp.K);
  r.read("R", hp.R);
  r.read("batch", hp.batch);
  r.read("warm_start_batch", hp.warm_start_batch);
  r.read("seed", hp.seed);
  r.read("clients_per_round", hp.clients_per_round);
  std::string mode = "final";
  r.read("report_mode", mode);
  if (mode == "final")
    hp.report_mode = ReportMode::kFinalIterate;
  else if (mode == "uniform-random")
    hp.report_mode = ReportMode::kUniformRandomIterate;
  else
    r.fail("report_mode", "expected 'final' or 'uniform-random', got '" + mode + "'");
  std::string scaling = "per-step";
  r.read("step_scaling", scaling);
  if (scaling == "per-step")
    hp.step_scaling = StepScaling::kPerStep;
  else if (scaling == "per-round")
    hp.step_scaling = StepScaling::kPerRound;
  else
    r.fail("step_scaling", "expected 'per-step' or 'per-round', got '" + scaling + "'");
  r.finish();
  if (hp.K == 0) throw ConfigError("hyper.K: must be >= 1");
  if (hp.batch == 0) throw ConfigError("hyper.batch: must be >= 1");
  if (!(hp.rho >= 0.0 && hp.rho <= 1.0)) throw ConfigError("hyper.rho: must lie in [0, 1]");
  if (hp.alpha < 0.0) throw ConfigError("hyper.alpha: must be >= 0");
  for (double b : hp.betas)
    if (b < 0.0) throw ConfigError("hyper.betas: entries must be >= 0");
  if (hp.clients_per_round == 0) throw ConfigError("hyper.clients_per_round: must be >= 1");
  return hp;
}

inline Json hyper_to_json(const HyperParams& hp) {
  return Json{{"alpha", hp.alpha},
              {"betas", hp.betas},
              {"rho", hp.rho},
              {"K", hp.K},
              {"R", hp.R},
              {"batch", hp.batch},
              {"warm_start_batch", hp.warm_start_batch},
              {"seed", hp.seed},
              {"clients_per_round", hp.clients_per_round},
              {"report_mode",
               hp.report_mode == ReportMode::kFinalIterate ? "final" : "uniform-random"},
              {"step_scaling",
               hp.step_scaling == StepScaling::kPerStep ? "per-step" : "per-round"}};
}

inline ExperimentConfig parse_experiment(const Json& j) {
  try {
    detail::FieldReader r(j, "config");
    ExperimentConfig cfg;
    if (!r.has("problem")) throw ConfigError("config.problem: missing");
    cfg.problem = parse_problem(r.raw("problem"));
    if (r.has("algorithm") && r.has("algorithms"))
      throw ConfigError("config: give either 'algorithm' or 'algorithms', not both");
    if (r.has("algorithm")) {
      std::string name;
      r.read("algorithm", name);
      cfg.algorithms = {name};
    } else if (r.has("algorithms")) {
      const Json& list = r.raw("algorithms");
      if (!list.is_array()) r.fail("algorithms", "expected an array of names");
      cfg.algorithms.clear();
      for (const auto& e : list) {
        if (!e.is_string()) r.fail("algorithms", "expected an array of names");
        cfg.algorithms.push_back(e.get<std::string>());
      }
    }
    for (const auto& a : cfg.algorithms) {
      const auto& known = known_algorithms();
      if (std::find(known.begin(), known.end(), a) == known.end())
        throw ConfigError("config.algorithm: unknown algorithm '" + a +
                          "' (expected fedmsa, centralized or frozen-indirect)");
    }
    if (r.has("hyper")) cfg.hyper = parse_hyper(r.raw("hyper"));
    r.read("k_sweep", cfg.k_sweep);
    for (auto k : cfg.k_sweep)
      if (k == 0) r.fail("k_sweep", "entries must be >= 1");
    r.read("output_dir", cfg.output_dir);
    r.read("metric_every", cfg.metric_every);
    if (cfg.metric_every == 0) r.fail("metric_every", "must be >= 1");
    r.finish();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline Json experiment_to_json(const ExperimentConfig& cfg) {
  Json j{{"problem", problem_to_json(cfg.problem)}};
  if (cfg.algorithms.size() == 1)
    j["algorithm"] = cfg.algorithms.front();
  else
    j["algorithms"] = cfg.algorithms;
  j["hyper"] = hyper_to_json(cfg.hyper);
  if (!cfg.k_sweep.empty()) j["k_sweep"] = cfg.k_sweep;
  j["output_dir"] = cfg.output_dir;
  j["metric_every"] = cfg.metric_every;
  return j;
}

// Problem-level seed override from FEDMSA_SEED, if set. Throws ConfigError on
// anything that is not a plain unsigned integer.
inline std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("FEDMSA_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  const std::string s(raw);
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
    throw ConfigError("FEDMSA_SEED: expected an unsigned integer, got '" + s + "'");
  return v;
}

inline MsaProblem build_problem(const ProblemSpec& spec, const std::string& base_dir = ".") {
  if (spec.kind == "toy-bilevel") return bilevel_to_msa(toy_bilevel(spec.toy_clients, spec.toy_x0));
  if (spec.kind == "quadratic-bilevel") return bilevel_to_msa(gen_quadratic_bilevel(spec.bilevel));
  if (spec.kind == "risk-averse") return mco_to_msa(make_risk_averse_instance(spec.risk));
  if (spec.kind == "bilevel-file") {
    std::filesystem::path p(spec.path);
    if (p.is_relative()) p = std::filesystem::path(base_dir) / p;
    return bilevel_to_msa(bilevel_from_json(read_json_file(p.string())));
  }
  throw ConfigError("problem.kind: unknown kind '" + spec.kind + "'");
}

inline RunTrajectory run_algorithm(const std::string& name, const MsaProblem& problem,
                                   const HyperParams& hp, std::size_t threads) {
  if (name == "fedmsa") return run_fedmsa(problem, hp, threads);
  if (name == "centralized") return run_centralized_msa(problem, hp);
  if (name == "frozen-indirect") return run_frozen_indirect(problem, hp, threads);
  throw ConfigError("unknown algorithm '" + name + "'");
}

// ---------------------------------------------------------------------------
// Metrics output
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "round,updates,comms,stationarity,norm_P_sq,sum_z_gap_sq,dist_to_xstar";

namespace detail {

inline void csv_cell(std::string& out, std::optional<double> v) {
  out += ',';
  if (v && !std::isnan(*v)) out += format_double(*v);
}

inline std::optional<double> stationarity_value(const StationarityReport& m) {
  if (m.partial) return std::nullopt;
  return m.value();
}

inline Json optional_number(std::optional<double> v) {
  if (!v || !std::isfinite(*v)) return nullptr;
  return *v;
}

}  // namespace detail

// One row per `every` rounds (plus the last round), LF line endings.
inline std::string metrics_csv(const RunTrajectory& traj, std::size_t every = 1) {
  std::string out = kMetricsHeader;
  out += '\n';
  for (std::size_t i = 0; i < traj.rounds.size(); ++i) {
    if (i % every != 0 && i + 1 != traj.rounds.size()) continue;
    const auto& rec = traj.rounds[i];
    out += std::to_string(rec.round);
    out += ',' + std::to_string(rec.updates);
    out += ',' + std::to_string(rec.comms);
    detail::csv_cell(out, detail::stationarity_value(rec.metric));
    detail::csv_cell(out, rec.metric.norm_p_sq);
    detail::csv_cell(out, rec.metric.sum_z_gap_sq);
    detail::csv_cell(out, rec.dist_to_xstar);
    out += '\n';
  }
  return out;
}

inline Json record_to_json(const RoundRecord& rec) {
  return Json{{"round", rec.round},
              {"updates", rec.updates},
              {"comms", rec.comms},
              {"stationarity", detail::optional_number(detail::stationarity_value(rec.metric))},
              {"norm_P_sq", detail::optional_number(rec.metric.norm_p_sq)},
              {"sum_z_gap_sq", detail::optional_number(rec.metric.sum_z_gap_sq)},
              {"dist_to_xstar", detail::optional_number(rec.dist_to_xstar)}};
}

// ---------------------------------------------------------------------------
// run / compare
// ---------------------------------------------------------------------------

struct CommandOptions {
  std::string config_path;
  std::optional<std::string> out_dir;
  std::optional<std::string> algorithm;
  std::size_t threads = 1;
};

namespace detail {

struct LoadedConfig {
  ExperimentConfig cfg;
  std::string base_dir;
  std::string seed_source = "config";
};

inline LoadedConfig load_experiment(const CommandOptions& opt) {
  LoadedConfig out;
  out.cfg = parse_experiment(read_json_file(opt.config_path));
  out.base_dir = std::filesystem::path(opt.config_path).parent_path().string();
  if (out.base_dir.empty()) out.base_dir = ".";
  if (opt.out_dir) out.cfg.output_dir = *opt.out_dir;
  if (opt.algorithm) {
    const auto& known = known_algorithms();
    if (std::find(known.begin(), known.end(), *opt.algorithm) == known.end())
      throw ConfigError("--algorithm: unknown algorithm '" + *opt.algorithm + "'");
    out.cfg.algorithms = {*opt.algorithm};
  }
  if (auto env = seed_from_env()) {
    out.cfg.hyper.seed = *env;
    out.seed_source = "FEDMSA_SEED";
  }
  if (opt.threads == 0) throw ConfigError("--threads: must be >= 1");
  return out;
}

struct RunOutcome {
  std::optional<RunTrajectory> traj;
  std::optional<DivergenceError> divergence;
  double seconds = 0.0;
};

inline RunOutcome timed_run(const std::string& algorithm, const MsaProblem& problem,
                            const HyperParams& hp, std::size_t threads) {
  RunOutcome out;
  const auto start = std::chrono::steady_clock::now();
  try {
    out.traj = run_algorithm(algorithm, problem, hp, threads);
  } catch (const DivergenceError& e) {
    out.divergence = e;
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline Json sequence_to_json(const Sequence& z) {
  Json j = Json::array();
  for (const auto& zn : z) j.push_back(to_json(zn));
  return j;
}

inline Json outcome_to_json(const RunOutcome& o, const std::string& algorithm) {
  Json j{{"algorithm", algorithm}};
  if (o.divergence) {
    j["status"] = "diverged";
    j["divergence_round"] = o.divergence->round();
    j["message"] = o.divergence->what();
  } else {
    const auto& t = *o.traj;
    j["status"] = "completed";
    j["final"] = t.rounds.empty() ? Json(nullptr) : record_to_json(t.rounds.back());
    j["report"] = Json{{"round", t.report_round},
                       {"step", t.report_step},
                       {"x", to_json(t.report_x)},
                       {"z", sequence_to_json(t.report_z)}};
  }
  j["wall_time_seconds"] = o.seconds;
  return j;
}

inline void write_metrics(const std::filesystem::path& dir, const RunOutcome& o,
                          std::size_t every) {
  std::filesystem::create_directories(dir);
  write_text_file((dir / "metrics.csv").string(),
                  o.traj ? metrics_csv(*o.traj, every) : std::string(kMetricsHeader) + "\n");
}

template <typename Body>
int guarded(Body&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
  } catch (const ConstructionError& e) {
    std::cerr << "invalid problem: " << e.what() << '\n';
  } catch (const UnsupportedProblemError& e) {
    std::cerr << "unsupported: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
  }
  return kExitConfig;
}

}  // namespace detail

// Writes <out>/metrics.csv and <out>/result.json.
inline int cmd_run(const CommandOptions& opt) {
  return detail::guarded([&] {
    const auto loaded = detail::load_experiment(opt);
    const auto& cfg = loaded.cfg;
    if (cfg.algorithms.size() != 1)
      throw ConfigError("run: expected exactly one algorithm, got " +
                        std::to_string(cfg.algorithms.size()) + " (use compare)");
    const MsaProblem problem = build_problem(cfg.problem, loaded.base_dir);
    cfg.hyper.validate(problem);
    const std::string& algorithm = cfg.algorithms.front();
    const auto outcome = detail::timed_run(algorithm, problem, cfg.hyper, opt.threads);

    const std::filesystem::path dir(cfg.output_dir);
    detail::write_metrics(dir, outcome, cfg.metric_every);
    Json result = detail::outcome_to_json(outcome, algorithm);
    result["problem"] = problem.name;
    result["seed"] = cfg.hyper.seed;
    result["seed_source"] = loaded.seed_source;
    result["config"] = experiment_to_json(cfg);
    write_text_file((dir / "result.json").string(), result.dump(2) + "\n");

    if (outcome.divergence) {
      std::cerr << outcome.divergence->what() << '\n';
      return static_cast<int>(kExitDiverged);
    }
    return static_cast<int>(kExitOk);
  });
}

// Runs every listed algorithm (for every K in k_sweep) on one problem and
// writes <out>/<algorithm>[-K<k>]/metrics.csv plus <out>/summary.json, which
// ranks the algorithms by their final dist_to_xstar when the problem knows x*
// and by final stationarity otherwise.
inline int cmd_compare(const CommandOptions& opt) {
  return detail::guarded([&] {
    const auto loaded = detail::load_experiment(opt);
    const auto& cfg = loaded.cfg;
    if (cfg.algorithms.size() < 2)
      throw ConfigError("compare: need at least two algorithms, got " +
                        std::to_string(cfg.algorithms.size()));
    const MsaProblem problem = build_problem(cfg.problem, loaded.base_dir);
    cfg.hyper.validate(problem);
    const bool sweep = !cfg.k_sweep.empty();
    const std::vector<std::size_t> ks = sweep ? cfg.k_sweep : std::vector<std::size_t>{cfg.hyper.K};
    const std::string order_by = problem.x_star ? "dist_to_xstar" : "stationarity";
    const std::filesystem::path root(cfg.output_dir);

    bool any_diverged = false;
    Json groups = Json::array();
    Json by_algorithm = Json::object();
    for (const auto& a : cfg.algorithms) by_algorithm[a] = Json::array();
    for (std::size_t k : ks) {
      HyperParams hp = cfg.hyper;
      hp.K = k;
      std::vector<std::pair<double, std::string>> ranking;
      Json results = Json::array();
      for (const auto& a : cfg.algorithms) {
        const auto outcome = detail::timed_run(a, problem, hp, opt.threads);
        const std::string sub = sweep ? a + "-K" + std::to_string(k) : a;
        detail::write_metrics(root / sub, outcome, cfg.metric_every);
        double key = std::numeric_limits<double>::infinity();
        Json trend{{"K", k}, {"stationarity", nullptr}, {"dist_to_xstar", nullptr}};
        Json entry = detail::outcome_to_json(outcome, a);
        entry.erase("report");
        entry["K"] = k;
        entry["metrics"] = (std::filesystem::path(sub) / "metrics.csv").generic_string();
        if (outcome.divergence) {
          any_diverged = true;
        } else if (!outcome.traj->rounds.empty()) {
          const auto& last = outcome.traj->rounds.back();
          const auto v = order_by == "dist_to_xstar" ? last.dist_to_xstar
                                                     : detail::stationarity_value(last.metric);
          if (v && std::isfinite(*v)) key = *v;
          entry["updates"] = last.updates;
          trend["stationarity"] = detail::optional_number(detail::stationarity_value(last.metric));
          trend["dist_to_xstar"] = detail::optional_number(last.dist_to_xstar);
        }
        ranking.emplace_back(key, a);
        by_algorithm[a].push_back(std::move(trend));
        results.push_back(std::move(entry));
      }
      std::stable_sort(ranking.begin(), ranking.end(),
                       [](const auto& l, const auto& r) { return l.first < r.first; });
      Json order = Json::array();
      for (const auto& [v, name] : ranking) order.push_back(name);
      groups.push_back(Json{{"K", k}, {"ranking", std::move(order)}, {"results", std::move(results)}});
    }

    Json summary{{"problem", problem.name},
                 {"order_by", order_by},
                 {"seed", cfg.hyper.seed},
                 {"seed_source", loaded.seed_source},
                 {"groups", std::move(groups)},
                 {"by_algorithm", std::move(by_algorithm)},
                 {"config", experiment_to_json(cfg)}};
    std::filesystem::create_directories(root);
    write_text_file((root / "summary.json").string(), summary.dump(2) + "\n");
    return static_cast<int>(any_diverged ? kExitDiverged : kExitOk);
  });
}

// ---------------------------------------------------------------------------
// Neumann verification grids
// ---------------------------------------------------------------------------

// Xi is the normalized noise level (sigma2 + sigma_bar2) / (B L^2).
struct GridCell {
  std::size_t dim = 1;
  double kappa = 2.0;
  double xi = 0.0;
  std::size_t N = 8;
  std::size_t B = 2;
  double L = 1.0;

  bool operator==(const GridCell&) const = default;
};

struct VerifyConfig {
  std::vector<GridCell> cells;
  std::size_t trials = 100000;
  std::uint64_t seed = 1;
  double slack_constant = 5.0;  // covariance-order slack c * tr(Cov) / sqrt(trials)
  std::string output_dir = "out";
};

// Default grid: dims {1,2,5} x kappa {1.5,4,10} x Xi*kappa {0.1,0.5}.
inline std::vector<GridCell> expand_grid(const std::vector<std::size_t>& dims,
                                         const std::vector<double>& kappas,
                                         const std::vector<double>& xi_kappas, std::size_t N,
                                         std::size_t B, double L) {
  std::vector<GridCell> out;
  for (auto d : dims)
    for (double k : kappas)
      for (double xk : xi_kappas) out.push_back(GridCell{d, k, xk / k, N, B, L});
  return out;
}

inline VerifyConfig parse_verify(const Json& j) {
  try {
    detail::FieldReader r(j, "config");
    VerifyConfig cfg;
    r.read("trials", cfg.trials);
    r.read("seed", cfg.seed);
    r.read("slack_constant", cfg.slack_constant);
    r.read("output_dir", cfg.output_dir);
    if (r.has("grid")) {
      detail::FieldReader g(r.raw("grid"), "grid");
      std::vector<std::size_t> dims{1, 2, 5};
      std::vector<double> kappas{1.5, 4.0, 10.0};
      std::vector<double> xi_kappas{0.1, 0.5};
      std::size_t N = 8;
      std::size_t B = 2;
      double L = 1.0;
      g.read("dims", dims);
      g.read("kappas", kappas);
      g.read("xi_kappas", xi_kappas);
      g.read("N", N);
      g.read("B", B);
      g.read("L", L);
      g.finish();
      cfg.cells = expand_grid(dims, kappas, xi_kappas, N, B, L);
    }
    if (r.has("cells")) {
      const Json& list = r.raw("cells");
      if (!list.is_array()) r.fail("cells", "expected an array of objects");
      for (std::size_t i = 0; i < list.size(); ++i) {
        detail::FieldReader c(list[i], "cells[" + std::to_string(i) + "]");
        GridCell cell;
        c.read("dim", cell.dim);
        c.read("kappa", cell.kappa);
        c.read("xi", cell.xi);
        c.read("N", cell.N);
        c.read("B", cell.B);
        c.read("L", cell.L);
        c.finish();
        cfg.cells.push_back(cell);
      }
    }
    r.finish();
    if (cfg.cells.empty()) throw ConfigError("config: need a 'grid' or a non-empty 'cells' list");
    if (cfg.trials < 2) throw ConfigError("config.trials: must be >= 2");
    if (!(cfg.slack_constant >= 0.0)) throw ConfigError("config.slack_constant: must be >= 0");
    for (const auto& c : cfg.cells) {
      if (c.dim == 0) throw ConfigError("cell: dim must be >= 1");
      if (!(c.kappa >= 1.0)) throw ConfigError("cell: kappa must be >= 1");
      if (!(c.xi >= 0.0)) throw ConfigError("cell: xi must be >= 0");
      if (c.N == 0 || c.B == 0) throw ConfigError("cell: N and B must be >= 1");
      if (!(c.L > 0.0)) throw ConfigError("cell: L must be > 0");
    }
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

struct CellInstance {
  HessianSampler sampler;
  NeumannConfig cfg;
  Vector v;
};

// Two clients Hbar +- delta E with ||E|| = 1 and Hbar's spectrum in
// [mu + delta, L - delta], plus per-sample noise of scale sigma, chosen so
// that sigma^2 + delta^2 = Xi B L^2.
inline CellInstance make_cell_instance(const GridCell& cell, Stream rng) {
  const double L = cell.L;
  const double mu = L / cell.kappa;
  const double target = cell.xi * static_cast<double>(cell.B) * L * L;
  const double delta = std::min(std::sqrt(target / 2.0), 0.25 * (L - mu));
  const double sigma2 = std::max(0.0, target - delta * delta);
  const Matrix Hbar = detail::random_spd_band(rng, cell.dim, mu + delta, L - delta);
  Matrix E = detail::gaussian_symmetric(rng, cell.dim);
  const double en = operator_norm(E);
  if (en > 0.0) E *= 1.0 / en;
  Matrix plus = Hbar;
  Matrix minus = Hbar;
  plus.add_scaled(delta, E);
  minus.add_scaled(-delta, E);
  HessianSampler sampler({symmetrized(plus), symmetrized(minus)}, std::sqrt(sigma2));
  const NeumannConfig cfg = config_for(sampler, mu, L, cell.N, cell.B);
  Vector v = detail::gaussian_vector(rng, cell.dim);
  v /= norm(v);
  return CellInstance{std::move(sampler), cfg, std::move(v)};
}

struct NeumannCellReport {
  GridCell cell;
  double xi_actual = 0.0;
  double exact_bias = 0.0;  // ||HI[N-1] v - H^{-1} v|| / ||v||
  double bias_bound = 0.0;
  double empirical_bias = 0.0;
  double max_mean_z = 0.0;  // max_i |mean_i - exact_i| / se_i
  bool unbiased = false;
  double variance = 0.0;
  double variance_se = 0.0;
  double bound_general = 0.0;
  std::optional<double> bound_small_noise;
  bool small_noise = false;
  bool pass = false;
};

inline NeumannCellReport verify_neumann_cell(const GridCell& cell, std::size_t trials,
                                             const Stream& instance_rng, const Stream& trial_rng,
                                             std::size_t threads = 1) {
  const auto inst = make_cell_instance(cell, instance_rng);
  const Matrix& H = inst.sampler.mean_hessian();
  const double vn = norm(inst.v);
  const Vector target = solve_spd(H, inst.v);
  const Vector truncated = truncated_neumann_exact(H, cell.L, inst.v, cell.N - 1);

  NeumannCellReport rep;
  rep.cell = cell;
  rep.xi_actual = inst.cfg.xi();
  rep.exact_bias = norm(truncated - target) / vn;
  rep.bias_bound = bias_bound(inst.cfg);

  const auto draws = monte_carlo_draws(
      [&](Stream& s) { return stochastic_ihvp_avg(inst.sampler, inst.cfg, inst.v, s); }, trials,
      trial_rng, threads);
  const auto mom = moments_of(draws);
  rep.empirical_bias = norm(mom.mean - target) / vn;
  rep.unbiased = true;
  for (std::size_t i = 0; i < cell.dim; ++i) {
    const double se = std::sqrt(mom.covariance(i, i) / static_cast<double>(trials));
    const double gap = std::abs(mom.mean[i] - truncated[i]);
    const double tol = 4.0 * se + 1e-12 * (1.0 + std::abs(truncated[i]));
    if (se > 0.0) rep.max_mean_z = std::max(rep.max_mean_z, gap / se);
    if (gap > tol) rep.unbiased = false;
  }
  const auto tv = total_variance(draws, mom.mean);
  rep.variance = tv.value / (vn * vn);
  rep.variance_se = tv.standard_error / (vn * vn);
  rep.bound_general = variance_bound_general(inst.cfg);
  rep.small_noise = small_noise_regime(inst.cfg);
  if (rep.small_noise) rep.bound_small_noise = variance_bound_small_noise(inst.cfg);

  const double slack = 3.0 * rep.variance_se;
  rep.pass = rep.exact_bias <= rep.bias_bound && rep.unbiased &&
             rep.variance <= rep.bound_general + slack &&
             (!rep.bound_small_noise || rep.variance <= *rep.bound_small_noise + slack);
  return rep;
}

namespace detail {

inline Json cell_to_json(const GridCell& c) {
  return Json{{"dim", c.dim}, {"kappa", c.kappa}, {"xi", c.xi}, {"N", c.N}, {"B", c.B}, {"L", c.L}};
}

inline Stream cell_stream(std::uint64_t seed, StreamTag tag, std::size_t index) {
  return Stream(seed, static_cast<std::uint64_t>(tag)).derive({index});
}

template <typename Cell>
int finish_verify(const VerifyConfig& cfg, const char* title, const std::vector<Cell>& cells,
                  const std::vector<Json>& rows, double seconds) {
  bool all = true;
  for (const auto& c : cells) all = all && c.pass;
  Json report{{"command", title},
              {"trials", cfg.trials},
              {"seed", cfg.seed},
              {"pass", all},
              {"wall_time_seconds", seconds},
              {"cells", rows}};
  std::filesystem::create_directories(cfg.output_dir);
  write_text_file((std::filesystem::path(cfg.output_dir) / "report.json").string(),
                  report.dump(2) + "\n");
  std::size_t passed = 0;
  for (const auto& c : cells) passed += c.pass ? 1 : 0;
  std::cout << title << ": " << passed << "/" << cells.size() << " cells pass\n";
  return all ? kExitOk : kExitDiverged;
}

inline VerifyConfig load_verify(const CommandOptions& opt) {
  VerifyConfig cfg = parse_verify(read_json_file(opt.config_path));
  if (opt.out_dir) cfg.output_dir = *opt.out_dir;
  if (auto env = seed_from_env()) cfg.seed = *env;
  if (opt.threads == 0) throw ConfigError("--threads: must be >= 1");
  return cfg;
}

}  // namespace detail

// Writes <out>/report.json with one entry per cell; exit 0 iff every cell passes.
inline int cmd_verify_neumann(const CommandOptions& opt) {
  return detail::guarded([&] {
    const VerifyConfig cfg = detail::load_verify(opt);
    const auto start = std::chrono::steady_clock::now();
    std::vector<NeumannCellReport> reps;
    std::vector<Json> rows;
    for (std::size_t i = 0; i < cfg.cells.size(); ++i) {
      const auto rep = verify_neumann_cell(
          cfg.cells[i], cfg.trials, detail::cell_stream(cfg.seed, StreamTag::kInstance, i),
          detail::cell_stream(cfg.seed, StreamTag::kTrial, i), opt.threads);
      rows.push_back(Json{{"cell", detail::cell_to_json(rep.cell)},
                          {"xi_actual", rep.xi_actual},
                          {"exact_bias", rep.exact_bias},
                          {"bias_bound", rep.bias_bound},
                          {"empirical_bias", rep.empirical_bias},
                          {"max_mean_z", rep.max_mean_z},
                          {"unbiased", rep.unbiased},
                          {"variance", rep.variance},
                          {"variance_se", rep.variance_se},
                          {"variance_bound_general", rep.bound_general},
                          {"variance_bound_small_noise", detail::optional_number(rep.bound_small_noise)},
                          {"small_noise_regime", rep.small_noise},
                          {"pass", rep.pass}});
      reps.push_back(rep);
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return detail::finish_verify(cfg, "verify-neumann", reps, rows, secs);
  });
}

struct OrderCellReport {
  GridCell cell;
  double witness = 0.0;
  double slack = 0.0;
  double trace_gap = 0.0;
  double variance_rand = 0.0;  // tr Cov(Est1)
  double variance_avg = 0.0;   // tr Cov(Est2)
  bool pass = false;
};

inline OrderCellReport verify_order_cell(const GridCell& cell, std::size_t trials,
                                         double slack_constant, const Stream& instance_rng,
                                         const Stream& trial_rng, std::size_t threads = 1) {
  const auto inst = make_cell_instance(cell, instance_rng);
  const auto r = verify_est_order(inst.sampler, inst.cfg, inst.v, trials, trial_rng,
                                  slack_constant, threads);
  return OrderCellReport{cell,
                         r.witness,
                         r.slack,
                         r.trace_gap,
                         r.random_index.covariance.trace(),
                         r.averaged.covariance.trace(),
                         r.pass};
}

inline int cmd_verify_covariance_order(const CommandOptions& opt) {
  return detail::guarded([&] {
    const VerifyConfig cfg = detail::load_verify(opt);
    const auto start = std::chrono::steady_clock::now();
    std::vector<OrderCellReport> reps;
    std::vector<Json> rows;
    for (std::size_t i = 0; i < cfg.cells.size(); ++i) {
      const auto rep = verify_order_cell(
          cfg.cells[i], cfg.trials, cfg.slack_constant,
          detail::cell_stream(cfg.seed, StreamTag::kInstance, i),
          detail::cell_stream(cfg.seed, StreamTag::kTrial, i), opt.threads);
      rows.push_back(Json{{"cell", detail::cell_to_json(rep.cell)},
                          {"witness_eigenvalue", rep.witness},
                          {"slack", rep.slack},
                          {"trace_gap", rep.trace_gap},
                          {"variance_est1", rep.variance_rand},
                          {"variance_est2", rep.variance_avg},
                          {"pass", rep.pass}});
      reps.push_back(rep);
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return detail::finish_verify(cfg, "verify-covariance-order", reps, rows, secs);
  });
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

// Bilevel problems: <out>/instance.json (loadable as kind bilevel-file).
// Risk-averse: <out>/dataset.csv, <out>/partition.json, <out>/meta.json.
inline int cmd_gen_data(const CommandOptions& opt) {
  return detail::guarded([&] {
    const Json j = read_json_file(opt.config_path);
    detail::FieldReader r(j, "config");
    if (!r.has("problem")) throw ConfigError("config.problem: missing");
    ProblemSpec spec = parse_problem(r.raw("problem"));
    std::string out_dir = "out";
    r.read("output_dir", out_dir);
    r.finish();
    if (opt.out_dir) out_dir = *opt.out_dir;
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);

    if (spec.kind == "risk-averse") {
      const auto inst = make_risk_averse_instance(spec.risk);
      std::ostringstream csv;
      write_dataset_csv(csv, inst.a, inst.b);
      write_text_file((dir / "dataset.csv").string(), csv.str());
      write_text_file((dir / "partition.json").string(), to_json(inst.partition).dump() + "\n");
      Json meta{{"problem", problem_to_json(spec)},
                {"x_star", to_json(*inst.x_star)},
                {"x0", to_json(inst.x0)}};
      write_text_file((dir / "meta.json").string(), meta.dump(2) + "\n");
      std::cout << "wrote " << inst.num_samples() << " samples for " << inst.num_clients()
                << " clients to " << dir.string() << '\n';
      return static_cast<int>(kExitOk);
    }
    QuadraticBilevelInstance inst;
    if (spec.kind == "toy-bilevel")
      inst = toy_bilevel(spec.toy_clients, spec.toy_x0);
    else if (spec.kind == "quadratic-bilevel")
      inst = gen_quadratic_bilevel(spec.bilevel);
    else
      throw ConfigError("gen-data: kind '" + spec.kind + "' has nothing to generate");
    write_text_file((dir / "instance.json").string(), to_json(inst).dump(2) + "\n");
    std::cout << "wrote bilevel instance with " << inst.num_clients() << " clients (measured "
              << "heterogeneity " << inst.heterogeneity << ") to " << dir.string() << '\n';
    return static_cast<int>(kExitOk);
  });
}

}  // namespace fedmsa
