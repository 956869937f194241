// SPDX-License-Identifier: Apache-2.0
// moesim: trace generation, analysis, interval search and policy simulation.
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "moesim/moesim.hpp"

#ifndef MOESIM_VERSION
#define MOESIM_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace moesim;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Everything needed to rerun a command: resolved options, seeds, input
// fingerprints and the files written.
class Manifest {
 public:
  Manifest(std::string command, const CLI::App& sub) : command_(std::move(command)) {
    std::istringstream in(sub.config_to_str(true, false));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto key = line.substr(0, eq);
      auto value = line.substr(eq + 1);
      key.erase(key.find_last_not_of(' ') + 1);
      value.erase(0, value.find_first_not_of(' '));
      if (value.size() >= 2 && (value.front() == '"' || value.front() == '\'') && value.back() == value.front())
        value = value.substr(1, value.size() - 2);
      config_[key] = value;
    }
  }

  void set(const std::string& key, json value) { config_[key] = std::move(value); }
  void seed(std::uint64_t s) { seeds_.push_back(s); }
  void input(const fs::path& path, std::string_view data) { inputs_[path.string()] = io::fnv1a_hex(data); }

  void output(const fs::path& path, std::string_view contents) {
    io::write_file_atomic(path, contents);
    outputs_.push_back(path.string());
  }

  void write_beside(const fs::path& primary) const {
    json j;
    j["command"] = command_;
    j["version"] = MOESIM_VERSION;
    j["config"] = config_;
    j["seeds"] = seeds_;
    j["inputs"] = inputs_;
    j["outputs"] = outputs_;
    auto path = primary;
    path += ".manifest.json";
    io::write_file_atomic(path, j.dump(2) + '\n');
  }

 private:
  std::string command_;
  json config_ = json::object();
  std::vector<std::uint64_t> seeds_;
  json inputs_ = json::object();
  std::vector<std::string> outputs_;
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("MOE_SIM_SEED"); env != nullptr && *env != '\0') {
    try {
      return io::parse_uint(env);
    } catch (const Error&) {
      throw UsageError(std::string("MOE_SIM_SEED is not an unsigned integer: '") + env + "'");
    }
  }
  throw UsageError("--seed is required (or set MOE_SIM_SEED)");
}

RoutingTrace load_trace(const std::string& path, Manifest& m) {
  const auto data = io::read_file(path);
  m.input(path, data);
  return load(path);
}

struct ProfileOpts {
  std::string file;
  HardwareProfile value = calibrated_profile();

  void add(CLI::App* app) {
    app->add_option("--profile", file, "Hardware profile file (key=value); overrides --c-* flags")
        ->check(CLI::ExistingFile);
    app->add_option("--c-io", value.c_io, "Time per expert migration")->capture_default_str();
    app->add_option("--c-cpu", value.c_cpu, "Time per (token, expert) pair on the CPU")->capture_default_str();
    app->add_option("--c-gpu", value.c_gpu, "Time per (token, expert) pair on the GPU")->capture_default_str();
    app->add_flag("--io-overlap", value.io_overlap, "Overlap migrations with compute");
  }

  HardwareProfile resolve(Manifest& m) const {
    if (file.empty()) {
      value.validate();
      return value;
    }
    const auto text = io::read_file(file);
    m.input(file, text);
    return profile_from_text(text);
  }
};

void add_config_option(CLI::App* c) {
  c->add_option("--config", "key=value file of long option names; flags take precedence");
}

// Appends "--key value" for every config entry whose option was not given on
// the command line. CLI11 reads config files only for the top-level app.
std::vector<std::string> expand_config(CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  if (args.size() < 2) return args;
  CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args[1]);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::string file;
  for (std::size_t i = 2; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) file = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) file = args[i].substr(9);
  }
  if (file.empty()) return args;

  auto given = [&](const CLI::Option* opt) {
    for (std::size_t i = 2; i < args.size(); ++i) {
      const auto& a = args[i];
      for (const auto& n : opt->get_lnames())
        if (a == "--" + n || a.rfind("--" + n + "=", 0) == 0) return true;
      for (const auto& n : opt->get_snames())
        if (a == "-" + n) return true;
    }
    return false;
  };
  std::istringstream in(io::read_file(file));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto b = line.find_first_not_of(" \t");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(file + ":" + std::to_string(lineno) + ": expected key=value");
    auto key = line.substr(b, eq - b);
    auto value = line.substr(eq + 1);
    key.erase(key.find_last_not_of(" \t") + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    value.erase(value.find_last_not_of(" \t") + 1);
    const auto* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr || key == "config") throw UsageError(file + ": unknown key '" + key + "'");
    if (given(opt)) continue;
    if (opt->get_items_expected_max() == 0) {
      if (value == "true") args.push_back("--" + key);
      else if (value != "false") throw UsageError(file + ": " + key + " must be true or false");
    } else {
      args.push_back("--" + key);
      args.push_back(value);
    }
  }
  return args;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// ---------------------------------------------------------------------------
// gen-trace

struct GenTraceOpts {
  std::optional<std::uint32_t> experts, topk, tokens, steps, budget;
  std::uint32_t layers = 1, blocks = 1;
  double persistence = 0.9, skew = 1.0, shift = 0.0, unmask_rate = 0.15;
  std::string unmask = "none", decoded = "freeze", preset, out;
  std::optional<std::uint64_t> seed;
};

void add_gen_trace(CLI::App& app, GenTraceOpts& o) {
  auto* c = app.add_subcommand("gen-trace", "Generate a synthetic routing trace");
  add_config_option(c);
  c->add_option("--preset", o.preset, "Start from a named workload (calibrated)")
      ->check(CLI::IsMember({"calibrated"}));
  c->add_option("--experts", o.experts, "Experts per layer (E)");
  c->add_option("--topk", o.topk, "Experts per token (k)");
  c->add_option("--tokens", o.tokens, "Tokens per block (N)");
  c->add_option("--steps", o.steps, "Denoising steps per block (T)");
  c->add_option("--budget", o.budget, "GPU expert slots per layer (B); default E/4");
  c->add_option("--layers", o.layers, "MoE layers (L)")->capture_default_str();
  c->add_option("--blocks", o.blocks, "Blocks to generate")->capture_default_str();
  c->add_option("--persistence", o.persistence, "Per-step probability an expert choice persists")
      ->capture_default_str();
  c->add_option("--skew", o.skew, "Zipf exponent of expert popularity")->capture_default_str();
  c->add_option("--shift", o.shift, "Share of fresh draws from the block's own ranking by block end")
      ->capture_default_str();
  c->add_option("--unmask", o.unmask, "Decode schedule of tokens within a block")
      ->check(CLI::IsMember({"none", "linear", "geometric"}))
      ->capture_default_str();
  c->add_option("--unmask-rate", o.unmask_rate, "Per-step rate of the geometric schedule")->capture_default_str();
  c->add_option("--decoded", o.decoded, "Routing of decoded tokens")
      ->check(CLI::IsMember({"freeze", "drop"}))
      ->capture_default_str();
  c->add_option("--seed", o.seed, "PRNG seed (default: $MOE_SIM_SEED)");
  c->add_option("-o,--output", o.out, "Trace file (.tbin for binary)")->required();
}

int run_gen_trace(const CLI::App& sub, const GenTraceOpts& o) {
  Manifest m("gen-trace", sub);
  const auto seed = resolve_seed(o.seed);
  GenSpec g;
  if (o.preset == "calibrated") g = calibrated_spec(seed);
  auto pick = [&](const std::optional<std::uint32_t>& v, std::uint32_t fallback, const char* flag) {
    if (v) return *v;
    if (!o.preset.empty()) return fallback;
    throw UsageError(std::string(flag) + " is required");
  };
  g.shape.experts = pick(o.experts, g.shape.experts, "--experts");
  g.shape.top_k = pick(o.topk, g.shape.top_k, "--topk");
  g.shape.tokens = pick(o.tokens, g.shape.tokens, "--tokens");
  g.shape.block_size = pick(o.steps, g.shape.block_size, "--steps");
  if (o.budget) g.shape.gpu_budget = *o.budget;
  else if (o.preset.empty()) g.shape.gpu_budget = std::max(1u, g.shape.experts / 4);
  if (o.preset.empty() || sub.count("--layers")) g.shape.layers = o.layers;
  if (o.preset.empty() || sub.count("--blocks")) g.blocks = o.blocks;
  if (o.preset.empty() || sub.count("--persistence")) g.persistence = o.persistence;
  if (o.preset.empty() || sub.count("--skew")) g.popularity_skew = o.skew;
  if (o.preset.empty() || sub.count("--shift")) g.content_shift = o.shift;
  if (o.unmask == "linear") g.unmask = UnmaskSchedule::linear(g.shape.block_size, g.shape.tokens);
  if (o.unmask == "geometric") g.unmask = UnmaskSchedule::geometric(g.shape.block_size, g.shape.tokens, o.unmask_rate);
  g.decoded_mode = o.decoded == "drop" ? DecodedMode::Drop : DecodedMode::Freeze;
  g.seed = seed;

  if (!(o.persistence >= 0.0 && o.persistence <= 1.0)) throw UsageError("--persistence must lie in [0,1]");
  if (!(o.shift >= 0.0 && o.shift <= 1.0)) throw UsageError("--shift must lie in [0,1]");
  if (!(o.unmask_rate > 0.0 && o.unmask_rate < 1.0)) throw UsageError("--unmask-rate must lie in (0,1)");

  const auto trace = generate(g);
  m.seed(seed);
  m.set("seed", std::to_string(seed));
  m.set("resolved", {{"layers", g.shape.layers},
                     {"experts", g.shape.experts},
                     {"topk", g.shape.top_k},
                     {"budget", g.shape.gpu_budget},
                     {"steps", g.shape.block_size},
                     {"tokens", g.shape.tokens},
                     {"blocks", g.blocks},
                     {"persistence", g.persistence},
                     {"skew", g.popularity_skew},
                     {"shift", g.content_shift}});
  m.output(o.out, format_for(o.out) == TraceFormat::Binary ? to_binary(trace) : to_text(trace));
  m.write_beside(o.out);
  std::cout << "wrote " << o.out << " (" << trace.total_steps() << " steps, mean adjacent similarity "
            << io::format_double(mean_adjacent_similarity(trace)) << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeOpts {
  std::string trace, out, activation = "counts";
  std::optional<std::uint32_t> layer, budget;
  std::uint32_t block = 0;
};

void add_analyze(CLI::App& app, AnalyzeOpts& o) {
  auto* c = app.add_subcommand("analyze", "Similarity, unique-expert and drift series of a trace");
  add_config_option(c);
  c->add_option("-t,--trace", o.trace, "Trace file")->required();
  c->add_option("--layer", o.layer, "Analyze one layer (default: average over layers)");
  c->add_option("--block", o.block, "Block to analyze")->capture_default_str();
  c->add_option("--budget", o.budget, "Top-B size for the drift series");
  c->add_option("--activation", o.activation, "Similarity input per step")
      ->check(CLI::IsMember({"counts", "binary"}))
      ->capture_default_str();
  c->add_option("-o,--output", o.out, "Output prefix")->required();
}

int run_analyze(const CLI::App& sub, const AnalyzeOpts& o) {
  Manifest m("analyze", sub);
  const auto trace = load_trace(o.trace, m);
  const auto act = o.activation == "binary" ? Activation::Binary : Activation::Counts;
  const auto sel = o.layer ? LayerSelector::only(*o.layer) : LayerSelector::all();
  const auto sim = similarity_matrix(trace, sel, o.block, act);

  std::vector<std::uint32_t> layers;
  if (o.layer) layers.push_back(*o.layer);
  else
    for (std::uint32_t l = 0; l < trace.shape().layers; ++l) layers.push_back(l);
  const std::uint32_t T = trace.shape().block_size;
  std::vector<double> unique(T, 0.0), drift(T, 0.0);
  for (std::uint32_t l : layers) {
    const auto u = unique_experts_per_step(trace, l, o.block);
    for (std::uint32_t t = 0; t < T; ++t) unique[t] += u[t];
    if (o.budget) {
      const auto d = drift_rate(trace, l, *o.budget, o.block);
      for (std::size_t i = 0; i < d.values.size(); ++i) drift[i + 1] += d.values[i];
    }
  }
  std::ostringstream steps;
  steps << "t,unique,adjacent_similarity" << (o.budget ? ",drift" : "") << '\n';
  for (std::uint32_t t = 0; t < T; ++t) {
    steps << t << ',' << io::format_double(unique[t] / layers.size()) << ','
          << (t ? io::format_double(sim.at(t - 1, t)) : std::string());
    if (o.budget) steps << ',' << (t ? io::format_double(drift[t] / layers.size()) : std::string());
    steps << '\n';
  }

  double mean_sim = 0.0;
  for (std::uint32_t l : layers) mean_sim += similarity_matrix(trace, LayerSelector::only(l), o.block, act).mean_at_lag(1);
  mean_sim /= layers.size();
  json summary = {{"block", o.block},
                  {"layers", layers},
                  {"activation", o.activation},
                  {"mean_adjacent_similarity", mean_sim},
                  {"mean_unique_experts", std::accumulate(unique.begin(), unique.end(), 0.0) / (T * layers.size())}};
  if (o.budget) {
    double d = 0.0;
    for (std::uint32_t l : layers) d += drift_rate(trace, l, *o.budget, o.block).mean;
    summary["budget"] = *o.budget;
    summary["mean_drift"] = d / layers.size();
  }

  const fs::path prefix = o.out;
  m.output(prefix.string() + ".similarity.csv", similarity_csv(sim));
  m.output(prefix.string() + ".steps.csv", steps.str());
  m.output(prefix.string() + ".summary.json", summary.dump(2) + '\n');
  m.write_beside(prefix);
  std::cout << "mean adjacent similarity " << io::format_double(mean_sim) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// optimize-tau

struct OptimizeOpts {
  std::string trace, mode = "analytic", growth = "auto", basis = "pairs", out;
  std::optional<double> drift;
  std::optional<std::uint32_t> block_size, budget;
  unsigned jobs = 1;
  ProfileOpts profile;
};

void add_optimize(CLI::App& app, OptimizeOpts& o) {
  auto* c = app.add_subcommand("optimize-tau", "Choose the refresh interval");
  add_config_option(c);
  c->add_option("--mode", o.mode, "Cost source")->check(CLI::IsMember({"analytic", "simulated"}))->capture_default_str();
  c->add_option("-t,--trace", o.trace, "Trace to calibrate from (required for simulated mode)");
  c->add_option("--drift", o.drift, "Drift rate d, when no trace is given");
  c->add_option("--block-size", o.block_size, "Steps per block T, when no trace is given");
  c->add_option("--budget", o.budget, "GPU expert slots B (default: the trace's)");
  c->add_option("--growth", o.growth, "Miss growth model: empirical needs a trace")
      ->check(CLI::IsMember({"auto", "empirical", "closed"}))
      ->capture_default_str();
  c->add_option("--basis", o.basis, "What the empirical growth counts")
      ->check(CLI::IsMember({"pairs", "experts"}))
      ->capture_default_str();
  c->add_option("-j,--jobs", o.jobs, "Parallel simulations")->check(CLI::PositiveNumber)->capture_default_str();
  c->add_option("-o,--output", o.out, "Cost curve CSV")->required();
  o.profile.add(c);
}

int run_optimize(const CLI::App& sub, const OptimizeOpts& o) {
  Manifest m("optimize-tau", sub);
  const auto profile = o.profile.resolve(m);
  std::optional<RoutingTrace> trace;
  if (!o.trace.empty()) trace = load_trace(o.trace, m);

  AnalyticalParams params;
  if (trace) {
    const auto budget = o.budget.value_or(trace->shape().gpu_budget);
    const auto kind = o.growth == "closed" ? MissGrowth::Kind::ClosedForm : MissGrowth::Kind::Empirical;
    params = estimate_params(*trace, budget, profile, kind, o.basis == "experts" ? MissBasis::Experts : MissBasis::Pairs);
    if (o.drift) params.drift = *o.drift;
  } else {
    if (o.growth == "empirical") throw UsageError("--growth empirical needs --trace");
    if (!o.drift || !o.block_size || !o.budget)
      throw UsageError("without --trace, --drift, --block-size and --budget are required");
    params.drift = *o.drift;
    params.block_size = *o.block_size;
    params.budget = *o.budget;
    params.c_io = profile.c_io;
    params.c_cpu = profile.c_cpu;
  }
  params.validate();

  TauSearchResult result;
  if (o.mode == "simulated") {
    if (!trace) throw UsageError("--mode simulated needs --trace");
    SimConfig base;
    base.shape = trace->shape();
    if (o.budget) base.shape.gpu_budget = *o.budget;
    base.profile = profile;
    base.blocks = trace->blocks();
    result = optimize_tau(params, TauMode::Simulated, &*trace, &base, o.jobs);
  } else {
    result = optimize_tau(params, TauMode::Analytic);
  }
  m.set("drift", params.drift);
  m.output(o.out, curve_csv(result.curve));
  m.write_beside(o.out);
  std::cout << "tau* = " << result.tau << " (" << o.mode << ", d = " << io::format_double(params.drift) << ")\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate / compare

struct PolicyOpts {
  std::string policy = "tide", cold_start = "oracle", counter = "windowed", refresh = "observed";
  std::optional<std::uint32_t> tau;
  bool carry_counters = false;

  void add(CLI::App* c, bool with_policy) {
    if (with_policy)
      c->add_option("--policy", policy, "Placement policy")
          ->check(CLI::IsMember({"tide", "perstep", "static"}))
          ->capture_default_str();
    c->add_option("--tau", tau, "Refresh interval for tide (default: analytic optimum)");
    c->add_option("--cold-start", cold_start, "Initial GPU set")
        ->check(CLI::IsMember({"first", "oracle"}))
        ->capture_default_str();
    c->add_option("--counter", counter, "Hit counter scope")
        ->check(CLI::IsMember({"windowed", "cumulative"}))
        ->capture_default_str();
    c->add_option("--refresh", refresh, "What a refresh ranks by")
        ->check(CLI::IsMember({"observed", "oracle"}))
        ->capture_default_str();
    c->add_flag("--carry-counters", carry_counters, "Keep hit counters across blocks");
  }

  PolicyConfig build(const std::string& kind, std::uint32_t tau) const {
    PolicyConfig p = kind == "perstep" ? PolicyConfig::per_step()
                     : kind == "static" ? PolicyConfig::fixed()
                                        : PolicyConfig::tide(tau);
    p.cold_start = cold_start == "first" ? ColdStart::FirstB : ColdStart::OracleStep0;
    p.counter_mode = counter == "cumulative" ? CounterMode::Cumulative : CounterMode::Windowed;
    p.refresh_mode = refresh == "oracle" ? RefreshMode::Oracle : RefreshMode::Observed;
    p.carry_counters = carry_counters;
    return p;
  }
};

struct SimulateOpts {
  std::string trace, out;
  std::optional<std::uint32_t> budget, blocks;
  double decode_rate = 0.15;
  bool decisions = false;
  PolicyOpts policy;
  ProfileOpts profile;
};

SimConfig base_config(const RoutingTrace& trace, std::optional<std::uint32_t> budget,
                      std::optional<std::uint32_t> blocks, double decode_rate, const HardwareProfile& profile) {
  SimConfig c;
  c.shape = trace.shape();
  if (budget) c.shape.gpu_budget = *budget;
  c.blocks = blocks.value_or(trace.blocks());
  c.decode_rate = decode_rate;
  c.profile = profile;
  return c;
}

std::uint32_t default_tau(const RoutingTrace& trace, std::uint32_t budget, const HardwareProfile& profile) {
  if (trace.shape().block_size < 2) return 1;
  return optimize_tau(estimate_params(trace, budget, profile), TauMode::Analytic).tau;
}

void add_simulate(CLI::App& app, SimulateOpts& o) {
  auto* c = app.add_subcommand("simulate", "Run one placement policy over a trace");
  add_config_option(c);
  c->add_option("-t,--trace", o.trace, "Trace file")->required();
  c->add_option("--budget", o.budget, "GPU expert slots per layer (default: the trace's)");
  c->add_option("--blocks", o.blocks, "Blocks to simulate (default: all)");
  c->add_option("--decode-rate", o.decode_rate, "Geometric decode schedule rate")->capture_default_str();
  c->add_flag("--decisions", o.decisions, "Also write per-step placement decisions (JSON lines)");
  c->add_option("-o,--output", o.out, "Output prefix")->required();
  o.policy.add(c, true);
  o.profile.add(c);
}

int run_simulate(const CLI::App& sub, const SimulateOpts& o) {
  Manifest m("simulate", sub);
  const auto profile = o.profile.resolve(m);
  const auto trace = load_trace(o.trace, m);
  auto cfg = base_config(trace, o.budget, o.blocks, o.decode_rate, profile);
  const auto tau = o.policy.tau.value_or(o.policy.policy == "tide" ? default_tau(trace, cfg.shape.gpu_budget, profile) : 1);
  cfg.policy = o.policy.build(o.policy.policy, tau);
  cfg.label = o.policy.policy;
  m.set("tau", cfg.policy.interval());
  const auto report = run(cfg, trace);

  const std::string prefix = o.out;
  m.output(prefix + ".steps.csv", steps_csv(report.per_step));
  m.output(prefix + ".json", to_json(report).dump(2) + '\n');
  if (o.decisions) {
    Scheduler sched(cfg.shape, cfg.policy, trace);
    std::string lines;
    for (std::uint32_t t = 0; t < cfg.blocks * cfg.shape.block_size; ++t)
      for (const auto& d : sched.step(trace, t)) lines += to_json_line(d);
    m.output(prefix + ".decisions.jsonl", lines);
  }
  m.write_beside(prefix);
  const auto& a = report.aggregate;
  std::cout << cfg.label << " tau=" << cfg.policy.interval() << " hit_rate=" << io::format_double(a.gpu_hit_rate)
            << " migrations=" << a.migrations << " total_time=" << io::format_double(a.total_time)
            << " throughput=" << io::format_double(a.throughput) << " (FFN-bound)\n";
  return kExitOk;
}

struct CompareOpts {
  std::string trace, out, policies = "tide,perstep,static", budgets;
  std::optional<std::uint32_t> blocks;
  double decode_rate = 0.15;
  unsigned jobs = 1;
  PolicyOpts policy;
  ProfileOpts profile;
};

void add_compare(CLI::App& app, CompareOpts& o) {
  auto* c = app.add_subcommand("compare", "Compare policies (and budgets) on one trace");
  add_config_option(c);
  c->add_option("-t,--trace", o.trace, "Trace file")->required();
  c->add_option("--policies", o.policies, "Comma-separated policies; the first is the baseline")
      ->capture_default_str();
  c->add_option("--budgets", o.budgets, "Comma-separated GPU budgets (default: the trace's)");
  c->add_option("--blocks", o.blocks, "Blocks to simulate (default: all)");
  c->add_option("--decode-rate", o.decode_rate, "Geometric decode schedule rate")->capture_default_str();
  c->add_option("-j,--jobs", o.jobs, "Parallel simulations")->check(CLI::PositiveNumber)->capture_default_str();
  c->add_option("-o,--output", o.out, "Output prefix")->required();
  o.policy.add(c, false);
  o.profile.add(c);
}

int run_compare(const CLI::App& sub, const CompareOpts& o) {
  Manifest m("compare", sub);
  const auto profile = o.profile.resolve(m);
  const auto trace = load_trace(o.trace, m);
  const auto kinds = split_list(o.policies);
  if (kinds.empty()) throw UsageError("--policies is empty");
  for (const auto& k : kinds)
    if (k != "tide" && k != "perstep" && k != "static") throw UsageError("--policies: unknown policy '" + k + "'");
  std::vector<std::uint32_t> budgets;
  for (const auto& b : split_list(o.budgets)) {
    try {
      budgets.push_back(static_cast<std::uint32_t>(io::parse_uint(b)));
    } catch (const Error&) {
      throw UsageError("--budgets: not an unsigned integer '" + b + "'");
    }
  }
  if (budgets.empty()) budgets.push_back(trace.shape().gpu_budget);

  // one table per budget, each against its own baseline row
  ComparisonTable all;
  for (std::uint32_t budget : budgets) {
    std::vector<SimConfig> configs;
    for (const auto& k : kinds) {
      auto cfg = base_config(trace, budget, o.blocks, o.decode_rate, profile);
      const auto tau = o.policy.tau.value_or(k == "tide" ? default_tau(trace, budget, profile) : 1);
      cfg.policy = o.policy.build(k, tau);
      cfg.label = k == "tide" ? "tide(tau=" + std::to_string(tau) + ")" : k;
      configs.push_back(std::move(cfg));
    }
    const auto table = compare(configs, trace, 0, o.jobs);
    all.rows.insert(all.rows.end(), table.rows.begin(), table.rows.end());
  }
  const std::string prefix = o.out;
  const auto text = comparison_text(all);
  m.output(prefix + ".csv", comparison_csv(all));
  m.output(prefix + ".txt", text);
  m.write_beside(prefix);
  std::cout << text;
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fit-profile

struct FitOpts {
  std::string measurements, out;
  bool io_overlap = false;
};

void add_fit(CLI::App& app, FitOpts& o) {
  auto* c = app.add_subcommand("fit-profile", "Fit hardware constants from timing measurements");
  add_config_option(c);
  c->add_option("-m,--measurements", o.measurements, "CSV of resource,amount,time (resource: gpu|cpu|io)")
      ->required();
  c->add_flag("--io-overlap", o.io_overlap, "Mark the fitted profile as overlapping migrations");
  c->add_option("-o,--output", o.out, "Profile file")->required();
}

int run_fit(const CLI::App& sub, const FitOpts& o) {
  Manifest m("fit-profile", sub);
  const auto data = io::read_file(o.measurements);
  m.input(o.measurements, data);
  const auto fit = fit_profile(parse_measurements(data), o.io_overlap);
  m.output(o.out, profile_to_text(fit.profile));
  m.write_beside(o.out);
  auto line = [](const char* name, const LinearFit& f) {
    std::cout << name << " slope=" << io::format_double(f.slope) << " intercept=" << io::format_double(f.intercept)
              << " rms=" << io::format_double(f.rms_residual) << " n=" << f.points << '\n';
  };
  line("c_gpu", fit.gpu);
  line("c_cpu", fit.cpu);
  line("c_io ", fit.io);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MoE expert placement simulator for block-diffusion decoding"};
  app.set_version_flag("--version", MOESIM_VERSION);
  app.require_subcommand(1);

  GenTraceOpts gen;
  AnalyzeOpts analyze;
  OptimizeOpts optimize;
  SimulateOpts simulate;
  CompareOpts cmp;
  FitOpts fit;
  add_gen_trace(app, gen);
  add_analyze(app, analyze);
  add_optimize(app, optimize);
  add_simulate(app, simulate);
  add_compare(app, cmp);
  add_fit(app, fit);

  try {
    auto args = expand_config(app, argc, argv);
    std::vector<const char*> ptrs;
    for (const auto& a : args) ptrs.push_back(a.c_str());
    app.parse(static_cast<int>(ptrs.size()), ptrs.data());
  } catch (const UsageError& e) {
    std::cerr << "moesim: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "moesim: " << e.what() << '\n';
    return e.is_io() ? kExitIo : kExitUsage;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    const auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen-trace") return run_gen_trace(*sub, gen);
    if (name == "analyze") return run_analyze(*sub, analyze);
    if (name == "optimize-tau") return run_optimize(*sub, optimize);
    if (name == "simulate") return run_simulate(*sub, simulate);
    if (name == "compare") return run_compare(*sub, cmp);
    if (name == "fit-profile") return run_fit(*sub, fit);
  } catch (const UsageError& e) {
    std::cerr << "moesim: " << e.what() << '\n';
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "moesim: " << e.what() << '\n';
    return e.is_io() ? kExitIo : kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "moesim: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}
