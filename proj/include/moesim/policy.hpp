// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <iterator>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "moesim/core.hpp"
#include "moesim/trace.hpp"

namespace moesim {

struct StepDecision {
  std::uint32_t step = 0;  // global step index
  std::uint32_t layer = 0;
  bool refreshed = false;
  std::vector<ExpertId> promotions;  // CPU -> GPU, ascending
  std::vector<ExpertId> evictions;   // GPU -> CPU, ascending
  Placement placement_after;

  bool operator==(const StepDecision&) const = default;
};

inline std::vector<ExpertId> select_top_b(const HitCounter& counter, std::uint32_t budget) {
  return top_b(counter.counts(), budget);
}

/// Initial GPU set of every layer.
inline std::vector<Placement> init_placement(const ModelShape& shape, const PolicyConfig& config,
                                             const RoutingTrace& trace) {
  std::vector<Placement> out;
  out.reserve(shape.layers);
  switch (config.cold_start) {
    case ColdStart::FirstB:
      for (std::uint32_t l = 0; l < shape.layers; ++l)
        out.push_back(Placement::first_b(shape.experts, shape.gpu_budget));
      break;
    case ColdStart::OracleStep0:
      for (std::uint32_t l = 0; l < shape.layers; ++l) {
        const auto gpu = top_b(step_counts(trace, 0, l), shape.gpu_budget);
        out.push_back(Placement::from_gpu_set(shape.experts, gpu));
      }
      break;
    case ColdStart::Provided:
      if (config.provided.size() != shape.layers) {
        throw Error(ErrorCode::ProvidedPlacementInvalid,
                    "expected " + std::to_string(shape.layers) + " placements, got " +
                        std::to_string(config.provided.size()));
      }
      for (const auto& p : config.provided) {
        if (p.experts() != shape.experts) {
          throw Error(ErrorCode::ProvidedPlacementInvalid, "placement covers the wrong number of experts");
        }
        if (p.gpu_count() > shape.gpu_budget) {
          throw Error(ErrorCode::ProvidedPlacementInvalid,
                      "gpu set of " + std::to_string(p.gpu_count()) + " exceeds budget " +
                          std::to_string(shape.gpu_budget));
        }
        out.push_back(p);
      }
      break;
  }
  return out;
}

/// Per-layer placement state driven one step at a time. Step indices are
/// global; refresh cadence is relative to the start of each block.
class Scheduler {
 public:
  Scheduler(const ModelShape& shape, PolicyConfig config, const RoutingTrace& trace)
      : shape_(shape), config_(std::move(config)) {
    shape_.validate();
    config_.validate(shape_);
    if (!shape_.same_layout(trace.shape())) {
      throw Error(ErrorCode::ShapeMismatch, "trace layout differs from the configured shape");
    }
    placements_ = init_placement(shape_, config_, trace);
    counters_.assign(shape_.layers, HitCounter(shape_.experts));
  }

  const std::vector<Placement>& placements() const { return placements_; }
  const std::vector<HitCounter>& counters() const { return counters_; }
  const PolicyConfig& config() const { return config_; }

  bool is_refresh_step(std::uint32_t step) const {
    if (config_.kind == PolicyKind::Static) return false;
    return (step % shape_.block_size) % config_.interval() == 0;
  }

  /// Applies the policy at `step` and records the step's routing into the
  /// hit counters. Steps must be fed in increasing order.
  std::vector<StepDecision> step(const RoutingTrace& trace, std::uint32_t step) {
    if (step >= trace.total_steps()) {
      throw Error(ErrorCode::TraceExhausted, "step " + std::to_string(step) + " beyond trace");
    }
    const std::uint32_t T = shape_.block_size;
    const std::uint32_t t = step % T;
    const bool refresh = is_refresh_step(step);
    std::vector<StepDecision> out(shape_.layers);
    for (std::uint32_t l = 0; l < shape_.layers; ++l) {
      auto& counter = counters_[l];
      auto& placement = placements_[l];
      if (t == 0 && step > 0 && !config_.carry_counters) counter.reset(step);

      StepDecision& d = out[l];
      d.step = step;
      d.layer = l;
      d.refreshed = refresh;
      if (refresh) {
        std::vector<ExpertId> target;
        bool have_target = false;
        if (config_.refresh_mode == RefreshMode::Oracle) {
          const std::uint32_t end = std::min(step - t + T, step + config_.interval());
          std::vector<std::uint64_t> future(shape_.experts, 0);
          for (std::uint32_t s = step; s < end; ++s) {
            const auto c = step_counts(trace, s, l);
            for (std::uint32_t e = 0; e < shape_.experts; ++e) future[e] += c[e];
          }
          target = top_b(future, shape_.gpu_budget);
          have_target = true;
        } else if (!counter.empty()) {
          // An empty window (start of the run, or a block boundary with
          // counters reset) carries no evidence; keep the current placement.
          target = select_top_b(counter, shape_.gpu_budget);
          have_target = true;
        }
        if (have_target) apply(placement, target, d);
        if (config_.counter_mode == CounterMode::Windowed) counter.reset(step);
      }
      for (std::uint32_t n = 0; n < shape_.tokens; ++n) {
        if (trace.active(step, n)) counter.add(trace.selection(step, l, n));
      }
      counter.close_step();
      MOESIM_CHECK_PLACEMENT(placement, shape_.experts, shape_.gpu_budget);
      d.placement_after = placement;
    }
    return out;
  }

 private:
  static void apply(Placement& placement, const std::vector<ExpertId>& target, StepDecision& d) {
    const auto old = placement.gpu_set();
    std::set_difference(target.begin(), target.end(), old.begin(), old.end(),
                        std::back_inserter(d.promotions));
    std::set_difference(old.begin(), old.end(), target.begin(), target.end(),
                        std::back_inserter(d.evictions));
    for (ExpertId e : d.evictions) placement.evict(e);
    for (ExpertId e : d.promotions) placement.promote(e);
  }

  ModelShape shape_;
  PolicyConfig config_;
  std::vector<Placement> placements_;
  std::vector<HitCounter> counters_;
};

enum class Device : std::uint8_t { Gpu, Cpu };

struct Assignment {
  std::uint32_t token = 0;
  ExpertId expert = 0;
  Device device = Device::Gpu;

  bool operator==(const Assignment&) const = default;
};

struct LayerRouting {
  std::uint64_t gpu_pairs = 0;
  std::uint64_t cpu_pairs = 0;
  std::vector<Assignment> assignments;
};

/// Sends every active (token, expert) pair of one layer at `step` to the
/// device that currently hosts the expert.
inline LayerRouting route_layer(const Placement& placement, const RoutingTrace& trace,
                                std::uint32_t step, std::uint32_t layer, bool with_assignments = true) {
  LayerRouting r;
  const auto& s = trace.shape();
  if (with_assignments) r.assignments.reserve(static_cast<std::size_t>(s.tokens) * s.top_k);
  for (std::uint32_t n = 0; n < s.tokens; ++n) {
    if (!trace.active(step, n)) continue;
    for (ExpertId e : trace.selection(step, layer, n)) {
      const bool gpu = placement.on_gpu(e);
      (gpu ? r.gpu_pairs : r.cpu_pairs) += 1;
      if (with_assignments) r.assignments.push_back({n, e, gpu ? Device::Gpu : Device::Cpu});
    }
  }
  return r;
}

inline std::vector<LayerRouting> route_tokens(const std::vector<Placement>& placements,
                                              const RoutingTrace& trace, std::uint32_t step,
                                              bool with_assignments = true) {
  std::vector<LayerRouting> out;
  out.reserve(placements.size());
  for (std::uint32_t l = 0; l < placements.size(); ++l)
    out.push_back(route_layer(placements[l], trace, step, l, with_assignments));
  return out;
}

inline std::string to_json_line(const StepDecision& d) {
  nlohmann::json j = {{"t", d.step}, {"layer", d.layer}, {"promotions", d.promotions}, {"evictions", d.evictions}};
  return j.dump() + '\n';
}

}  // namespace moesim
