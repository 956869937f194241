// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moesim/core.hpp"
#include "moesim/io_util.hpp"
#include "moesim/trace.hpp"

namespace moesim {

struct CostBreakdown {
  double gpu_time = 0.0;
  double cpu_time = 0.0;
  double io_time = 0.0;
  double total = 0.0;

  CostBreakdown& operator+=(const CostBreakdown& o) {
    gpu_time += o.gpu_time;
    cpu_time += o.cpu_time;
    io_time += o.io_time;
    total += o.total;
    return *this;
  }

  bool operator==(const CostBreakdown&) const = default;
};

/// Latency of one FFN layer for one step. GPU and CPU experts run
/// concurrently; migrations either serialize after them or overlap with
/// them, per the profile.
inline CostBreakdown step_latency(std::uint64_t gpu_pairs, std::uint64_t cpu_pairs,
                                  std::uint64_t migrations, const HardwareProfile& profile) {
  CostBreakdown c;
  c.gpu_time = profile.c_gpu * static_cast<double>(gpu_pairs);
  c.cpu_time = profile.c_cpu * static_cast<double>(cpu_pairs);
  c.io_time = profile.c_io * static_cast<double>(migrations);
  const double compute = std::max(c.gpu_time, c.cpu_time);
  c.total = profile.io_overlap ? std::max(compute, c.io_time) : compute + c.io_time;
  return c;
}

// ---------------------------------------------------------------------------
// Analytical interval model

/// Growth of the GPU miss cost with the refresh interval. The closed form is
/// the mean drifted fraction of a placement over its lifetime,
/// (1/tau) * sum_{j<tau} (1 - (1-d)^j). The empirical form is a table
/// indexed by tau - 1, typically measured from a trace.
struct MissGrowth {
  enum class Kind { ClosedForm, Empirical };
  Kind kind = Kind::ClosedForm;
  std::vector<double> table;

  static MissGrowth closed_form() { return {}; }
  static MissGrowth empirical(std::vector<double> by_tau) { return {Kind::Empirical, std::move(by_tau)}; }
};

struct AnalyticalParams {
  double drift = 0.0;  // mean drift rate d
  std::uint32_t budget = 1;
  std::uint32_t block_size = 2;
  double c_io = 1.0;
  double c_cpu = 1.0;
  MissGrowth f;

  void validate() const {
    if (!(drift >= 0.0 && drift <= 1.0)) throw Error(ErrorCode::InvalidSpec, "drift must lie in [0,1]");
    if (budget < 1) throw Error(ErrorCode::InvalidShape, "budget must be >= 1");
    if (block_size < 1) throw Error(ErrorCode::InvalidShape, "block_size must be >= 1");
    if (!(c_io >= 0.0) || !(c_cpu >= 0.0)) throw Error(ErrorCode::InvalidProfile, "cost constants must be >= 0");
    if (f.kind == MissGrowth::Kind::Empirical) {
      for (std::size_t i = 1; i < f.table.size(); ++i) {
        if (f.table[i] < f.table[i - 1]) throw Error(ErrorCode::InvalidSpec, "miss growth table must be non-decreasing");
      }
      if (!f.table.empty() && f.table[0] < 0.0) throw Error(ErrorCode::InvalidSpec, "miss growth must be >= 0");
    }
  }
};

namespace detail {
inline void check_tau(std::uint32_t tau) {
  if (tau < 1) throw Error(ErrorCode::InvalidTau, "tau must be >= 1");
}
}  // namespace detail

inline double miss_growth(std::uint32_t tau, const AnalyticalParams& p) {
  detail::check_tau(tau);
  if (p.f.kind == MissGrowth::Kind::Empirical) {
    if (tau > p.f.table.size()) {
      throw Error(ErrorCode::EmpiricalTableMissingTau, "no miss growth entry for tau=" + std::to_string(tau));
    }
    return p.f.table[tau - 1];
  }
  const double keep = 1.0 - p.drift;
  double sum = 0.0;
  double survive = 1.0;  // (1-d)^j
  for (std::uint32_t j = 0; j < tau; ++j) {
    sum += 1.0 - survive;
    survive *= keep;
  }
  return sum / tau;
}

/// Expected migration time over a block: c_io * (B*T/tau) * (1 - (1-d)^tau).
inline double migration_cost(std::uint32_t tau, const AnalyticalParams& p) {
  detail::check_tau(tau);
  if (!(p.drift >= 0.0 && p.drift <= 1.0)) throw Error(ErrorCode::InvalidSpec, "drift must lie in [0,1]");
  const double refreshes = static_cast<double>(p.budget) * p.block_size / tau;
  return p.c_io * refreshes * (1.0 - std::pow(1.0 - p.drift, static_cast<double>(tau)));
}

/// Expected extra CPU time over a block: c_cpu * T * B * f(tau).
inline double cpu_cost(std::uint32_t tau, const AnalyticalParams& p) {
  return p.c_cpu * p.block_size * p.budget * miss_growth(tau, p);
}

inline double total_cost(std::uint32_t tau, const AnalyticalParams& p) {
  if (tau < 1 || tau + 1 > p.block_size) {
    throw Error(ErrorCode::InvalidTau, "tau must lie in [1, block_size-1], got " + std::to_string(tau));
  }
  return migration_cost(tau, p) + cpu_cost(tau, p);
}

struct CurvePoint {
  std::uint32_t tau = 0;
  double io_cost = 0.0;
  double cpu_cost = 0.0;
  double total = 0.0;
};

struct TauSearchResult {
  std::uint32_t tau = 1;
  std::vector<CurvePoint> curve;  // one point per candidate tau, ascending
};

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os << "tau,io_cost,cpu_cost,total\n";
  for (const auto& pt : curve) {
    os << pt.tau << ',' << io::format_double(pt.io_cost) << ',' << io::format_double(pt.cpu_cost) << ','
       << io::format_double(pt.total) << '\n';
  }
  return os.str();
}

// Smallest tau among the minima of the curve.
inline std::uint32_t argmin_tau(const std::vector<CurvePoint>& curve) {
  auto best = std::min_element(curve.begin(), curve.end(),
                               [](const CurvePoint& a, const CurvePoint& b) { return a.total < b.total; });
  return best->tau;
}

/// Exhaustive scan of total_cost over tau in [1, T-1].
inline TauSearchResult optimize_tau_analytic(const AnalyticalParams& p) {
  p.validate();
  if (p.block_size < 2) throw Error(ErrorCode::InvalidShape, "block_size must be >= 2 to choose an interval");
  TauSearchResult r;
  for (std::uint32_t tau = 1; tau < p.block_size; ++tau) {
    const double io = migration_cost(tau, p);
    const double cpu = cpu_cost(tau, p);
    r.curve.push_back({tau, io, cpu, io + cpu});
  }
  r.tau = argmin_tau(r.curve);
  return r;
}

/// Local descent from `start`: moves to the cheaper neighbour until neither
/// improves. Agrees with the exhaustive scan on unimodal curves.
inline std::uint32_t hill_climb_tau(const AnalyticalParams& p, std::uint32_t start = 1) {
  p.validate();
  if (p.block_size < 2) throw Error(ErrorCode::InvalidShape, "block_size must be >= 2 to choose an interval");
  std::uint32_t tau = std::clamp<std::uint32_t>(start, 1, p.block_size - 1);
  double cost = total_cost(tau, p);
  for (;;) {
    std::uint32_t next = tau;
    double next_cost = cost;
    if (tau > 1 && total_cost(tau - 1, p) <= next_cost) {
      next = tau - 1;
      next_cost = total_cost(tau - 1, p);
    }
    if (tau + 1 < p.block_size && total_cost(tau + 1, p) < next_cost) {
      next = tau + 1;
      next_cost = total_cost(tau + 1, p);
    }
    if (next == tau) return tau;
    tau = next;
    cost = next_cost;
  }
}

// ---------------------------------------------------------------------------
// Calibrating the model from a trace

// What the empirical miss growth measures.
enum class MissBasis {
  Pairs,    // (token, expert) pairs served by the CPU
  Experts,  // distinct active experts not resident on the GPU
};

/// Mean miss fraction of a placement built from one step's top-B, applied
/// `age` + 1 steps later; index = age, for ages 0 .. T-2. Averaged over every
/// layer and block.
inline std::vector<double> aged_miss_fraction(const RoutingTrace& trace, std::uint32_t budget,
                                              MissBasis basis = MissBasis::Pairs) {
  const auto& s = trace.shape();
  const std::uint32_t T = s.block_size;
  if (T < 2) return {};
  std::vector<double> sum(T - 1, 0.0);
  std::vector<std::uint64_t> n(T - 1, 0);
  for (std::uint32_t b = 0; b < trace.blocks(); ++b) {
    for (std::uint32_t l = 0; l < s.layers; ++l) {
      std::vector<std::vector<std::uint64_t>> counts(T);
      std::vector<Placement> best(T);
      for (std::uint32_t t = 0; t < T; ++t) {
        counts[t] = step_counts(trace, b * T + t, l);
        best[t] = Placement::from_gpu_set(s.experts, top_b(counts[t], budget));
      }
      for (std::uint32_t t = 1; t < T; ++t) {
        for (std::uint32_t src = 0; src < t; ++src) {
          double hit = 0.0, all = 0.0;
          for (ExpertId e = 0; e < s.experts; ++e) {
            if (counts[t][e] == 0) continue;
            const double w = basis == MissBasis::Pairs ? static_cast<double>(counts[t][e]) : 1.0;
            all += w;
            if (best[src].on_gpu(e)) hit += w;
          }
          if (all == 0.0) continue;
          const std::uint32_t age = t - src - 1;
          sum[age] += 1.0 - hit / all;
          ++n[age];
        }
      }
    }
  }
  std::vector<double> out(T - 1, 0.0);
  for (std::uint32_t a = 0; a + 1 < T; ++a) out[a] = n[a] ? sum[a] / n[a] : 0.0;
  return out;
}

/// Miss growth table measured from a trace: the lifetime-averaged miss
/// fraction of an aging placement, relative to a fresh one, scaled to the
/// per-step quantity that the cost model multiplies by T*B.
inline MissGrowth empirical_miss_growth(const RoutingTrace& trace, std::uint32_t budget,
                                        MissBasis basis = MissBasis::Pairs) {
  auto aged = aged_miss_fraction(trace, budget, basis);
  // The expected miss fraction of an aging placement cannot fall; sampling
  // noise can make the raw estimate dip, so take the running maximum.
  for (std::size_t a = 1; a < aged.size(); ++a) aged[a] = std::max(aged[a], aged[a - 1]);

  const auto& s = trace.shape();
  double per_step = 0.0;  // mean pairs (or distinct experts) per layer-step
  for (std::uint32_t t = 0; t < trace.total_steps(); ++t) {
    for (std::uint32_t l = 0; l < s.layers; ++l) {
      const auto c = step_counts(trace, t, l);
      for (auto x : c) per_step += basis == MissBasis::Pairs ? static_cast<double>(x) : (x > 0 ? 1.0 : 0.0);
    }
  }
  per_step /= static_cast<double>(trace.total_steps()) * s.layers;
  const double scale = per_step / budget;

  std::vector<double> table(aged.size(), 0.0);
  double running = 0.0;
  for (std::size_t i = 0; i < aged.size(); ++i) {
    running += aged[i];
    table[i] = scale * (running / static_cast<double>(i + 1) - aged[0]);
  }
  return MissGrowth::empirical(std::move(table));
}

/// Analytical parameters for `trace` under `budget` and `profile`: the mean
/// measured drift plus either the closed-form or a measured miss growth.
inline AnalyticalParams estimate_params(const RoutingTrace& trace, std::uint32_t budget,
                                        const HardwareProfile& profile,
                                        MissGrowth::Kind kind = MissGrowth::Kind::Empirical,
                                        MissBasis basis = MissBasis::Pairs) {
  AnalyticalParams p;
  p.drift = mean_drift(trace, budget);
  p.budget = budget;
  p.block_size = trace.shape().block_size;
  p.c_io = profile.c_io;
  p.c_cpu = profile.c_cpu;
  p.f = kind == MissGrowth::Kind::Empirical ? empirical_miss_growth(trace, budget, basis)
                                            : MissGrowth::closed_form();
  return p;
}

// ---------------------------------------------------------------------------
// Hardware profiling

enum class Resource { GpuCompute, CpuCompute, Migration };

inline std::string_view to_string(Resource r) {
  switch (r) {
    case Resource::GpuCompute: return "gpu";
    case Resource::CpuCompute: return "cpu";
    case Resource::Migration: return "io";
  }
  return "?";
}

/// One timed run: `amount` (token-expert pairs, or experts migrated) of a
/// single resource took `time`.
struct Measurement {
  Resource resource = Resource::GpuCompute;
  double amount = 0.0;
  double time = 0.0;
};

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double rms_residual = 0.0;
  std::size_t points = 0;
};

struct ProfileFit {
  HardwareProfile profile;
  LinearFit gpu, cpu, io;
};

namespace detail {

inline LinearFit least_squares(const std::vector<Measurement>& ms, Resource r) {
  std::vector<std::pair<double, double>> pts;
  for (const auto& m : ms)
    if (m.resource == r) pts.emplace_back(m.amount, m.time);
  if (pts.size() < 2) {
    throw Error(ErrorCode::InsufficientMeasurements, "need >= 2 measurements for " + std::string(to_string(r)) +
                                                         ", got " + std::to_string(pts.size()));
  }
  double mx = 0.0, my = 0.0;
  for (auto [x, y] : pts) {
    mx += x;
    my += y;
  }
  mx /= pts.size();
  my /= pts.size();
  double sxx = 0.0, sxy = 0.0;
  for (auto [x, y] : pts) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
  }
  if (!(sxx > 1e-12 * std::max(1.0, mx * mx) * pts.size())) {
    throw Error(ErrorCode::DegenerateFit, "measurements for " + std::string(to_string(r)) + " do not span distinct amounts");
  }
  LinearFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.points = pts.size();
  double ss = 0.0;
  for (auto [x, y] : pts) {
    const double e = y - (f.slope * x + f.intercept);
    ss += e * e;
  }
  f.rms_residual = std::sqrt(ss / pts.size());
  return f;
}

}  // namespace detail

/// Per-resource affine least squares, time = c * amount + overhead; the
/// slopes become the profile constants.
inline ProfileFit fit_profile(const std::vector<Measurement>& measurements, bool io_overlap = false) {
  ProfileFit fit;
  fit.gpu = detail::least_squares(measurements, Resource::GpuCompute);
  fit.cpu = detail::least_squares(measurements, Resource::CpuCompute);
  fit.io = detail::least_squares(measurements, Resource::Migration);
  fit.profile = {fit.io.slope, fit.cpu.slope, fit.gpu.slope, io_overlap};
  fit.profile.validate();
  return fit;
}

/// Parses "resource,amount,time" rows (header optional).
inline std::vector<Measurement> parse_measurements(std::string_view csv) {
  std::vector<Measurement> out;
  std::istringstream in{std::string(csv)};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (lineno == 1 && line.rfind("resource", 0) == 0) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 3) throw Error(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": expected 3 fields");
    Measurement m;
    if (f[0] == "gpu") m.resource = Resource::GpuCompute;
    else if (f[0] == "cpu") m.resource = Resource::CpuCompute;
    else if (f[0] == "io") m.resource = Resource::Migration;
    else throw Error(ErrorCode::ParseError, "line " + std::to_string(lineno) + ": unknown resource '" + f[0] + "'");
    m.amount = io::parse_double(f[1]);
    m.time = io::parse_double(f[2]);
    out.push_back(m);
  }
  return out;
}

/// Hardware constants paired with calibrated_spec(): CPU compute 20x slower
/// than GPU, one migration priced at 300 GPU pair-computations.
inline HardwareProfile calibrated_profile() { return HardwareProfile{300.0, 20.0, 1.0, false}; }

// ---------------------------------------------------------------------------
// Profile files: one "key=value" per line, keys c_io, c_cpu, c_gpu, io_overlap.

inline std::string profile_to_text(const HardwareProfile& p) {
  std::ostringstream os;
  os << "c_io=" << io::format_double(p.c_io) << '\n'
     << "c_cpu=" << io::format_double(p.c_cpu) << '\n'
     << "c_gpu=" << io::format_double(p.c_gpu) << '\n'
     << "io_overlap=" << (p.io_overlap ? "true" : "false") << '\n';
  return os.str();
}

inline HardwareProfile profile_from_text(std::string_view text) {
  std::map<std::string, std::string> kv;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // commas are accepted as separators too: "c_io=1, c_cpu=2, ..."
    std::stringstream items(line);
    std::string item;
    while (std::getline(items, item, ',')) {
      auto b = item.find_first_not_of(" \t");
      if (b == std::string::npos || item[b] == '#') continue;
      auto e = item.find_last_not_of(" \t");
      item = item.substr(b, e - b + 1);
      auto eq = item.find('=');
      if (eq == std::string::npos) throw Error(ErrorCode::ParseError, "profile entry without '=': " + item);
      kv[item.substr(0, eq)] = item.substr(eq + 1);
    }
  }
  HardwareProfile p;
  auto num = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw Error(ErrorCode::ParseError, std::string("profile missing ") + key);
    return io::parse_double(it->second);
  };
  p.c_io = num("c_io");
  p.c_cpu = num("c_cpu");
  p.c_gpu = num("c_gpu");
  if (auto it = kv.find("io_overlap"); it != kv.end()) {
    if (it->second == "true") p.io_overlap = true;
    else if (it->second == "false") p.io_overlap = false;
    else throw Error(ErrorCode::ParseError, "io_overlap must be true or false");
  }
  for (const auto& [k, v] : kv) {
    if (k != "c_io" && k != "c_cpu" && k != "c_gpu" && k != "io_overlap") {
      throw Error(ErrorCode::ParseError, "unknown profile key '" + k + "'");
    }
  }
  p.validate();
  return p;
}

}  // namespace moesim
