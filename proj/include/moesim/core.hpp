// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "moesim/error.hpp"

#ifndef MOESIM_DEBUG_CHECKS
#ifdef NDEBUG
#define MOESIM_DEBUG_CHECKS 0
#else
#define MOESIM_DEBUG_CHECKS 1
#endif
#endif

namespace moesim {

using ExpertId = std::uint32_t;

struct ModelShape {
  std::uint32_t layers = 1;
  std::uint32_t experts = 1;
  std::uint32_t top_k = 1;
  std::uint32_t gpu_budget = 1;
  std::uint32_t block_size = 1;  // denoising steps per block
  std::uint32_t tokens = 1;      // tokens per block

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvalidShape, msg); };
    if (layers < 1) fail("layers must be >= 1");
    if (experts < 1) fail("experts must be >= 1");
    if (top_k < 1 || top_k > experts) fail("top_k must lie in [1, experts]");
    if (gpu_budget < 1 || gpu_budget > experts) fail("gpu_budget must lie in [1, experts]");
    if (block_size < 1) fail("block_size must be >= 1");
    if (tokens < 1) fail("tokens must be >= 1");
  }

  // Equal in everything that determines the layout of a trace; the budget
  // is a deployment knob and may differ between a trace and a run.
  bool same_layout(const ModelShape& o) const {
    return layers == o.layers && experts == o.experts && top_k == o.top_k &&
           block_size == o.block_size && tokens == o.tokens;
  }

  bool operator==(const ModelShape&) const = default;
};

/// Router output for every (step, layer, token) of one or more consecutive
/// blocks. Steps are numbered globally; step s belongs to block
/// s / block_size. Tokens that were dropped from routing (already decoded,
/// in drop mode) keep their last selection in storage but are flagged
/// inactive.
class RoutingTrace {
 public:
  RoutingTrace() = default;

  RoutingTrace(const ModelShape& shape, std::uint32_t blocks)
      : shape_(shape),
        blocks_(blocks),
        experts_(static_cast<std::size_t>(blocks) * shape.block_size * shape.layers *
                 shape.tokens * shape.top_k),
        active_(static_cast<std::size_t>(blocks) * shape.block_size * shape.tokens, 1) {}

  const ModelShape& shape() const { return shape_; }
  std::uint32_t blocks() const { return blocks_; }
  std::uint32_t total_steps() const { return blocks_ * shape_.block_size; }

  std::span<const ExpertId> selection(std::uint32_t step, std::uint32_t layer,
                                      std::uint32_t token) const {
    return {experts_.data() + offset(step, layer, token), shape_.top_k};
  }
  std::span<ExpertId> selection(std::uint32_t step, std::uint32_t layer, std::uint32_t token) {
    return {experts_.data() + offset(step, layer, token), shape_.top_k};
  }

  bool active(std::uint32_t step, std::uint32_t token) const {
    return active_[static_cast<std::size_t>(step) * shape_.tokens + token] != 0;
  }
  void set_active(std::uint32_t step, std::uint32_t token, bool on) {
    active_[static_cast<std::size_t>(step) * shape_.tokens + token] = on ? 1 : 0;
  }

  std::uint32_t active_tokens(std::uint32_t step) const {
    std::uint32_t n = 0;
    for (std::uint32_t i = 0; i < shape_.tokens; ++i) n += active(step, i) ? 1 : 0;
    return n;
  }

  // Raw storage; exposed for serialization and dimension checks.
  const std::vector<ExpertId>& raw_experts() const { return experts_; }
  std::vector<ExpertId>& raw_experts() { return experts_; }
  const std::vector<std::uint8_t>& raw_active() const { return active_; }
  std::vector<std::uint8_t>& raw_active() { return active_; }

  bool operator==(const RoutingTrace&) const = default;

 private:
  std::size_t offset(std::uint32_t step, std::uint32_t layer, std::uint32_t token) const {
    return ((static_cast<std::size_t>(step) * shape_.layers + layer) * shape_.tokens + token) *
           shape_.top_k;
  }

  ModelShape shape_{};
  std::uint32_t blocks_ = 0;
  std::vector<ExpertId> experts_;
  std::vector<std::uint8_t> active_;
};

struct TraceViolation {
  ErrorCode code;
  std::uint32_t step = 0;
  std::uint32_t layer = 0;
  std::uint32_t token = 0;

  std::string describe() const {
    return std::string(to_string(code)) + " at (t=" + std::to_string(step) +
           ",l=" + std::to_string(layer) + ",n=" + std::to_string(token) + ")";
  }
};

/// First invariant violation of the trace in (step, layer, token) order, or
/// nullopt when the trace is well formed.
inline std::optional<TraceViolation> check(const RoutingTrace& trace) {
  const auto& s = trace.shape();
  try {
    s.validate();
  } catch (const Error&) {
    return TraceViolation{ErrorCode::DimensionMismatch};
  }
  const std::size_t steps = static_cast<std::size_t>(trace.blocks()) * s.block_size;
  if (trace.blocks() < 1 ||
      trace.raw_experts().size() != steps * s.layers * s.tokens * s.top_k ||
      trace.raw_active().size() != steps * s.tokens) {
    return TraceViolation{ErrorCode::DimensionMismatch};
  }
  std::vector<std::uint32_t> seen(s.experts, 0);
  std::uint32_t stamp = 0;
  for (std::uint32_t t = 0; t < trace.total_steps(); ++t) {
    for (std::uint32_t l = 0; l < s.layers; ++l) {
      for (std::uint32_t n = 0; n < s.tokens; ++n) {
        ++stamp;
        for (ExpertId e : trace.selection(t, l, n)) {
          if (e >= s.experts) return TraceViolation{ErrorCode::ExpertIdOutOfRange, t, l, n};
          if (seen[e] == stamp) return TraceViolation{ErrorCode::DuplicateExpertInSelection, t, l, n};
          seen[e] = stamp;
        }
      }
    }
  }
  return std::nullopt;
}

inline void validate(const RoutingTrace& trace) {
  if (auto v = check(trace)) throw Error(v->code, v->describe());
}

/// GPU/CPU partition of one layer's experts. Every expert is on exactly one
/// device, so the partition invariant holds by construction; the budget is
/// checked separately because it belongs to the deployment.
class Placement {
 public:
  Placement() = default;
  explicit Placement(std::uint32_t experts) : on_gpu_(experts, 0) {}

  static Placement from_gpu_set(std::uint32_t experts, std::span<const ExpertId> gpu) {
    Placement p(experts);
    for (ExpertId e : gpu) {
      if (e >= experts) {
        throw Error(ErrorCode::ProvidedPlacementInvalid,
                    "expert " + std::to_string(e) + " out of range");
      }
      if (p.on_gpu(e)) {
        throw Error(ErrorCode::ProvidedPlacementInvalid,
                    "expert " + std::to_string(e) + " listed twice");
      }
      p.promote(e);
    }
    return p;
  }

  static Placement first_b(std::uint32_t experts, std::uint32_t budget) {
    Placement p(experts);
    for (ExpertId e = 0; e < std::min(budget, experts); ++e) p.promote(e);
    return p;
  }

  std::uint32_t experts() const { return static_cast<std::uint32_t>(on_gpu_.size()); }
  std::uint32_t gpu_count() const { return gpu_count_; }
  bool on_gpu(ExpertId e) const { return on_gpu_[e] != 0; }

  void promote(ExpertId e) {
    if (!on_gpu_[e]) {
      on_gpu_[e] = 1;
      ++gpu_count_;
    }
  }
  void evict(ExpertId e) {
    if (on_gpu_[e]) {
      on_gpu_[e] = 0;
      --gpu_count_;
    }
  }

  std::vector<ExpertId> gpu_set() const { return members(1); }
  std::vector<ExpertId> cpu_set() const { return members(0); }

  bool operator==(const Placement&) const = default;

 private:
  std::vector<ExpertId> members(std::uint8_t flag) const {
    std::vector<ExpertId> out;
    for (ExpertId e = 0; e < on_gpu_.size(); ++e)
      if (on_gpu_[e] == flag) out.push_back(e);
    return out;
  }

  std::vector<std::uint8_t> on_gpu_;
  std::uint32_t gpu_count_ = 0;
};

inline void check_placement(const Placement& p, std::uint32_t experts, std::uint32_t budget) {
  if (p.experts() != experts) {
    throw Error(ErrorCode::InvariantViolation, "placement covers " +
                                                   std::to_string(p.experts()) + " experts, expected " +
                                                   std::to_string(experts));
  }
  if (p.gpu_count() > budget) {
    throw Error(ErrorCode::InvariantViolation, "gpu set holds " + std::to_string(p.gpu_count()) +
                                                   " experts, budget is " + std::to_string(budget));
  }
}

#if MOESIM_DEBUG_CHECKS
#define MOESIM_CHECK_PLACEMENT(p, e, b) ::moesim::check_placement((p), (e), (b))
#else
#define MOESIM_CHECK_PLACEMENT(p, e, b) ((void)0)
#endif

/// Per-expert routing hits since window_start.
class HitCounter {
 public:
  HitCounter() = default;
  explicit HitCounter(std::uint32_t experts) : counts_(experts, 0) {}

  void add(std::span<const ExpertId> selection) {
    for (ExpertId e : selection) ++counts_[e];
  }
  void close_step() { ++steps_counted_; }

  void reset(std::uint32_t step) {
    std::fill(counts_.begin(), counts_.end(), 0);
    window_start_ = step;
    steps_counted_ = 0;
  }

  std::span<const std::uint64_t> counts() const { return counts_; }
  std::uint64_t count(ExpertId e) const { return counts_[e]; }
  std::uint32_t window_start() const { return window_start_; }
  std::uint32_t steps_counted() const { return steps_counted_; }
  bool empty() const { return steps_counted_ == 0; }

  std::uint64_t total() const {
    std::uint64_t sum = 0;
    for (auto c : counts_) sum += c;
    return sum;
  }

 private:
  std::vector<std::uint64_t> counts_;
  std::uint32_t window_start_ = 0;
  std::uint32_t steps_counted_ = 0;
};

struct HardwareProfile {
  double c_io = 1.0;   // per expert migration, one direction
  double c_cpu = 1.0;  // per (token, expert) pair computed on the CPU
  double c_gpu = 1.0;  // per (token, expert) pair computed on the GPU
  bool io_overlap = false;

  void validate() const {
    if (!(c_io > 0.0) || !(c_cpu > 0.0) || !(c_gpu > 0.0)) {
      throw Error(ErrorCode::InvalidProfile, "cost constants must be strictly positive");
    }
    if (c_cpu < c_gpu) throw Error(ErrorCode::InvalidProfile, "c_cpu must be >= c_gpu");
  }

  bool operator==(const HardwareProfile&) const = default;
};

/// The `budget` experts with the highest counts; equal counts go to the lower
/// expert ID. Returned in ascending ID order.
inline std::vector<ExpertId> top_b(std::span<const std::uint64_t> counts, std::uint32_t budget) {
  if (budget > counts.size()) {
    throw Error(ErrorCode::BudgetExceedsExperts, "budget " + std::to_string(budget) +
                                                     " exceeds " + std::to_string(counts.size()) +
                                                     " experts");
  }
  std::vector<ExpertId> ids(counts.size());
  for (ExpertId e = 0; e < ids.size(); ++e) ids[e] = e;
  std::partial_sort(ids.begin(), ids.begin() + budget, ids.end(), [&](ExpertId a, ExpertId b) {
    return counts[a] != counts[b] ? counts[a] > counts[b] : a < b;
  });
  ids.resize(budget);
  std::sort(ids.begin(), ids.end());
  return ids;
}

enum class PolicyKind { Tide, PerStepRefresh, Static };
enum class ColdStart { FirstB, OracleStep0, Provided };

// Windowed: counts cover the steps since the previous refresh.
// Cumulative: counts cover the steps since block start.
enum class CounterMode { Windowed, Cumulative };

// Observed: a refresh at step t sees routing of steps < t only.
// Oracle: a refresh at step t sees the routing of the interval it serves.
enum class RefreshMode { Observed, Oracle };

struct PolicyConfig {
  PolicyKind kind = PolicyKind::Tide;
  std::uint32_t tau = 1;
  ColdStart cold_start = ColdStart::OracleStep0;
  std::vector<Placement> provided;  // one per layer, for ColdStart::Provided
  CounterMode counter_mode = CounterMode::Windowed;
  RefreshMode refresh_mode = RefreshMode::Observed;
  bool carry_counters = false;  // keep the hit counter across block boundaries

  static PolicyConfig tide(std::uint32_t tau) {
    PolicyConfig c;
    c.kind = PolicyKind::Tide;
    c.tau = tau;
    return c;
  }
  static PolicyConfig per_step() {
    PolicyConfig c;
    c.kind = PolicyKind::PerStepRefresh;
    return c;
  }
  static PolicyConfig fixed() {
    PolicyConfig c;
    c.kind = PolicyKind::Static;
    return c;
  }

  // Refresh period actually in force.
  std::uint32_t interval() const { return kind == PolicyKind::PerStepRefresh ? 1 : tau; }

  void validate(const ModelShape& shape) const {
    if (kind == PolicyKind::Tide && (tau < 1 || tau > shape.block_size)) {
      throw Error(ErrorCode::InvalidTau, "tau must lie in [1, block_size], got " + std::to_string(tau));
    }
  }
};

inline std::string_view to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::Tide: return "tide";
    case PolicyKind::PerStepRefresh: return "perstep";
    case PolicyKind::Static: return "static";
  }
  return "?";
}

}  // namespace moesim
