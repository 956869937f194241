// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "moesim/core.hpp"
#include "moesim/costmodel.hpp"
#include "moesim/policy.hpp"
#include "moesim/trace.hpp"

namespace moesim {

struct SimConfig {
  ModelShape shape;  // gpu_budget applies; the rest must match the trace
  PolicyConfig policy;
  HardwareProfile profile;
  // Where run(config) takes its trace from; run(config, trace) ignores it.
  std::variant<std::monostate, GenSpec, std::filesystem::path> trace_source;
  std::uint32_t blocks = 1;
  // Tokens finalized at each step of a block (emulates confidence-threshold
  // decoding). Empty: geometric schedule with `decode_rate`.
  std::vector<std::uint32_t> decode_counts;
  double decode_rate = 0.15;
  bool record_assignments = false;
  std::string label;

  std::vector<std::uint32_t> resolved_decode_counts() const {
    if (!decode_counts.empty()) return decode_counts;
    const auto sched = UnmaskSchedule::geometric(shape.block_size, shape.tokens, decode_rate);
    std::vector<std::uint32_t> out(shape.block_size);
    for (std::uint32_t t = 0; t < shape.block_size; ++t) out[t] = sched.finalized_at(t);
    return out;
  }
};

struct StepReport {
  std::uint32_t block = 0;
  std::uint32_t step = 0;  // global
  std::uint32_t tokens_decoded = 0;
  std::uint32_t active_tokens = 0;
  std::uint64_t gpu_pairs = 0;
  std::uint64_t cpu_pairs = 0;
  std::uint64_t migrations = 0;
  CostBreakdown cost;

  bool operator==(const StepReport&) const = default;
};

struct RoutedPair {
  std::uint32_t step = 0;
  std::uint32_t layer = 0;
  std::uint32_t token = 0;
  ExpertId expert = 0;

  auto operator<=>(const RoutedPair&) const = default;
};

struct SimAggregate {
  double total_time = 0.0;
  CostBreakdown cost;
  std::uint64_t tokens_decoded = 0;
  double throughput = 0.0;  // FFN-bound: decoded tokens per simulated time unit
  double gpu_hit_rate = 0.0;
  std::uint64_t gpu_pairs = 0;
  std::uint64_t cpu_pairs = 0;
  std::uint64_t migrations = 0;
  double mean_drift = 0.0;

  bool operator==(const SimAggregate&) const = default;
};

struct SimReport {
  std::string label;
  std::vector<StepReport> per_step;
  std::vector<std::vector<StepReport>> per_layer;  // [layer][step]
  SimAggregate aggregate;
  std::vector<RoutedPair> assignments;  // sorted; only with record_assignments

  bool operator==(const SimReport&) const = default;
};

inline void check_compatible(const SimConfig& config, const RoutingTrace& trace) {
  config.shape.validate();
  config.profile.validate();
  if (!config.shape.same_layout(trace.shape())) {
    throw Error(ErrorCode::ShapeMismatch, "trace layout differs from the configured shape");
  }
  if (config.blocks < 1) throw Error(ErrorCode::InvalidSpec, "blocks must be >= 1");
  if (config.blocks > trace.blocks()) {
    throw Error(ErrorCode::TraceExhausted, "config asks for " + std::to_string(config.blocks) +
                                               " blocks, trace holds " + std::to_string(trace.blocks()));
  }
  if (!config.decode_counts.empty() && config.decode_counts.size() != config.shape.block_size) {
    throw Error(ErrorCode::InvalidSpec, "decode_counts needs one entry per step");
  }
}

/// Drives the configured policy over the trace, one step at a time: the
/// policy decides (and migrates), tokens are routed to their experts'
/// devices, the step is costed per layer, and the hit counters absorb the
/// step's routing. Layer latencies add up within a step.
inline SimReport run(const SimConfig& config, const RoutingTrace& trace) {
  check_compatible(config, trace);
  const auto& s = config.shape;
  const std::uint32_t T = s.block_size;
  const auto decode = config.resolved_decode_counts();

  Scheduler scheduler(s, config.policy, trace);
  SimReport report;
  report.label = config.label;
  report.per_layer.assign(s.layers, {});
  double drift_sum = 0.0;

  for (std::uint32_t b = 0; b < config.blocks; ++b) {
    if (T >= 2)
      for (std::uint32_t l = 0; l < s.layers; ++l) drift_sum += drift_rate(trace, l, s.gpu_budget, b).mean;
    for (std::uint32_t t = 0; t < T; ++t) {
      const std::uint32_t step = b * T + t;
      const auto decisions = scheduler.step(trace, step);
      StepReport total;
      total.block = b;
      total.step = step;
      total.tokens_decoded = decode[t];
      total.active_tokens = trace.active_tokens(step);
      for (std::uint32_t l = 0; l < s.layers; ++l) {
        const auto routed = route_layer(scheduler.placements()[l], trace, step, l, config.record_assignments);
        StepReport layer = total;
        layer.gpu_pairs = routed.gpu_pairs;
        layer.cpu_pairs = routed.cpu_pairs;
        layer.migrations = decisions[l].promotions.size();
        layer.cost = step_latency(layer.gpu_pairs, layer.cpu_pairs, layer.migrations, config.profile);
        total.gpu_pairs += layer.gpu_pairs;
        total.cpu_pairs += layer.cpu_pairs;
        total.migrations += layer.migrations;
        total.cost += layer.cost;
        report.per_layer[l].push_back(layer);
        for (const auto& a : routed.assignments) report.assignments.push_back({step, l, a.token, a.expert});
      }
      report.per_step.push_back(total);
    }
  }

  auto& agg = report.aggregate;
  for (const auto& st : report.per_step) {
    agg.cost += st.cost;
    agg.tokens_decoded += st.tokens_decoded;
    agg.gpu_pairs += st.gpu_pairs;
    agg.cpu_pairs += st.cpu_pairs;
    agg.migrations += st.migrations;
  }
  agg.total_time = agg.cost.total;
  agg.throughput = agg.total_time > 0.0 ? static_cast<double>(agg.tokens_decoded) / agg.total_time : 0.0;
  const auto pairs = agg.gpu_pairs + agg.cpu_pairs;
  agg.gpu_hit_rate = pairs ? static_cast<double>(agg.gpu_pairs) / static_cast<double>(pairs) : 0.0;
  agg.mean_drift = T >= 2 ? drift_sum / (static_cast<double>(config.blocks) * s.layers) : 0.0;
  std::sort(report.assignments.begin(), report.assignments.end());
  return report;
}

inline RoutingTrace resolve_trace(const SimConfig& config) {
  if (const auto* spec = std::get_if<GenSpec>(&config.trace_source)) return generate(*spec);
  if (const auto* path = std::get_if<std::filesystem::path>(&config.trace_source)) return load(*path);
  throw Error(ErrorCode::InvalidSpec, "no trace source configured");
}

inline SimReport run(const SimConfig& config) { return run(config, resolve_trace(config)); }

inline const std::vector<StepReport>& per_layer_report(const SimReport& report, std::uint32_t layer) {
  if (layer >= report.per_layer.size()) {
    throw Error(ErrorCode::LayerOutOfRange, "layer " + std::to_string(layer) + " >= " +
                                                std::to_string(report.per_layer.size()));
  }
  return report.per_layer[layer];
}

/// Runs independent simulations on up to `jobs` threads; results keep the
/// order of `configs`.
inline std::vector<SimReport> run_many(const std::vector<SimConfig>& configs, const RoutingTrace& trace,
                                       unsigned jobs = 1) {
  std::vector<SimReport> out(configs.size());
  jobs = std::max(1u, std::min<unsigned>(jobs, static_cast<unsigned>(configs.size())));
  if (jobs <= 1) {
    for (std::size_t i = 0; i < configs.size(); ++i) out[i] = run(configs[i], trace);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (unsigned w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < configs.size(); i = next++) {
        try {
          out[i] = run(configs[i], trace);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---------------------------------------------------------------------------
// Comparisons

struct ComparisonRow {
  std::string label;
  PolicyKind policy = PolicyKind::Tide;
  std::uint32_t tau = 1;
  std::uint32_t budget = 0;
  double throughput = 0.0;
  double hit_rate = 0.0;
  std::uint64_t migrations = 0;
  double total_time = 0.0;
  double speedup = 1.0;  // throughput relative to the baseline row
};

struct ComparisonTable {
  std::size_t baseline = 0;
  std::vector<ComparisonRow> rows;
};

inline ComparisonTable compare(const std::vector<SimConfig>& configs, const RoutingTrace& trace,
                               std::size_t baseline = 0, unsigned jobs = 1) {
  if (configs.empty()) throw Error(ErrorCode::IncompatibleConfigs, "nothing to compare");
  if (baseline >= configs.size()) throw Error(ErrorCode::IncompatibleConfigs, "baseline index out of range");
  for (const auto& c : configs) {
    if (!c.shape.same_layout(configs.front().shape) || c.blocks != configs.front().blocks) {
      throw Error(ErrorCode::IncompatibleConfigs, "configs disagree on shape or block count");
    }
  }
  const auto reports = run_many(configs, trace, jobs);
  ComparisonTable table;
  table.baseline = baseline;
  const double base = reports[baseline].aggregate.throughput;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto& a = reports[i].aggregate;
    ComparisonRow row;
    row.label = configs[i].label.empty() ? std::string(to_string(configs[i].policy.kind)) : configs[i].label;
    row.policy = configs[i].policy.kind;
    row.tau = configs[i].policy.interval();
    row.budget = configs[i].shape.gpu_budget;
    row.throughput = a.throughput;
    row.hit_rate = a.gpu_hit_rate;
    row.migrations = a.migrations;
    row.total_time = a.total_time;
    row.speedup = base > 0.0 ? a.throughput / base : 0.0;
    table.rows.push_back(row);
  }
  return table;
}

inline std::string comparison_csv(const ComparisonTable& t) {
  std::ostringstream os;
  os << "label,policy,tau,budget,throughput,hit_rate,migrations,total_time,speedup\n";
  for (const auto& r : t.rows) {
    os << r.label << ',' << to_string(r.policy) << ',' << r.tau << ',' << r.budget << ','
       << io::format_double(r.throughput) << ',' << io::format_double(r.hit_rate) << ',' << r.migrations << ','
       << io::format_double(r.total_time) << ',' << io::format_double(r.speedup) << '\n';
  }
  return os.str();
}

inline std::string comparison_text(const ComparisonTable& t) {
  std::ostringstream os;
  os << std::left << std::setw(22) << "policy" << std::right << std::setw(6) << "tau" << std::setw(8) << "budget"
     << std::setw(16) << "throughput" << std::setw(10) << "hit_rate" << std::setw(12) << "migrations"
     << std::setw(10) << "speedup" << '\n';
  os << std::fixed;
  for (const auto& r : t.rows) {
    os << std::left << std::setw(22) << r.label << std::right << std::setw(6) << r.tau << std::setw(8) << r.budget
       << std::setw(16) << std::setprecision(8) << r.throughput << std::setw(10) << std::setprecision(4)
       << r.hit_rate << std::setw(12) << r.migrations << std::setw(10) << std::setprecision(2) << r.speedup
       << '\n';
  }
  os << "(throughput is FFN-bound: decoded tokens per simulated time unit)\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Report exports

inline std::string steps_csv(const std::vector<StepReport>& steps) {
  std::ostringstream os;
  os << "t,gpu_pairs,cpu_pairs,migrations,gpu_time,cpu_time,io_time,total\n";
  for (const auto& s : steps) {
    os << s.step << ',' << s.gpu_pairs << ',' << s.cpu_pairs << ',' << s.migrations << ','
       << io::format_double(s.cost.gpu_time) << ',' << io::format_double(s.cost.cpu_time) << ','
       << io::format_double(s.cost.io_time) << ',' << io::format_double(s.cost.total) << '\n';
  }
  return os.str();
}

inline nlohmann::json to_json(const CostBreakdown& c) {
  return {{"gpu_time", c.gpu_time}, {"cpu_time", c.cpu_time}, {"io_time", c.io_time}, {"total", c.total}};
}

inline nlohmann::json to_json(const StepReport& s) {
  return {{"block", s.block},           {"t", s.step},
          {"tokens_decoded", s.tokens_decoded}, {"active_tokens", s.active_tokens},
          {"gpu_pairs", s.gpu_pairs},   {"cpu_pairs", s.cpu_pairs},
          {"migrations", s.migrations}, {"cost", to_json(s.cost)}};
}

inline nlohmann::json to_json(const SimReport& r) {
  nlohmann::json j;
  j["label"] = r.label;
  const auto& a = r.aggregate;
  j["aggregate"] = {{"total_time", a.total_time},
                    {"cost", to_json(a.cost)},
                    {"tokens_decoded", a.tokens_decoded},
                    {"throughput", a.throughput},
                    {"throughput_kind", "ffn_bound"},
                    {"gpu_hit_rate", a.gpu_hit_rate},
                    {"gpu_pairs", a.gpu_pairs},
                    {"cpu_pairs", a.cpu_pairs},
                    {"migrations", a.migrations},
                    {"mean_drift", a.mean_drift}};
  auto& steps = j["per_step"] = nlohmann::json::array();
  for (const auto& s : r.per_step) steps.push_back(to_json(s));
  auto& layers = j["per_layer"] = nlohmann::json::array();
  for (const auto& layer : r.per_layer) {
    auto arr = nlohmann::json::array();
    for (const auto& s : layer) arr.push_back(to_json(s));
    layers.push_back(std::move(arr));
  }
  return j;
}

// ---------------------------------------------------------------------------
// Refresh interval search by simulation

/// Simulates Tide at every tau in [1, T-1] and picks the cheapest total
/// time (smallest tau on ties). Curve costs are simulated times.
inline TauSearchResult optimize_tau_simulated(const SimConfig& base, const RoutingTrace& trace, unsigned jobs = 1) {
  const std::uint32_t T = base.shape.block_size;
  if (T < 2) throw Error(ErrorCode::InvalidShape, "block_size must be >= 2 to choose an interval");
  std::vector<SimConfig> configs;
  for (std::uint32_t tau = 1; tau < T; ++tau) {
    SimConfig c = base;
    c.policy.kind = PolicyKind::Tide;
    c.policy.tau = tau;
    c.record_assignments = false;
    configs.push_back(std::move(c));
  }
  const auto reports = run_many(configs, trace, jobs);
  TauSearchResult r;
  for (std::uint32_t i = 0; i < reports.size(); ++i) {
    const auto& a = reports[i].aggregate;
    r.curve.push_back({i + 1, a.cost.io_time, a.cost.cpu_time, a.total_time});
  }
  r.tau = argmin_tau(r.curve);
  return r;
}

}  // namespace moesim
