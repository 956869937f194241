// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moesim/costmodel.hpp"
#include "moesim/simulator.hpp"

namespace moesim {

enum class TauMode { Analytic, Simulated };

/// Chooses the refresh interval either from the analytical model or by
/// simulating every candidate on `trace` starting from `base`.
inline TauSearchResult optimize_tau(const AnalyticalParams& params, TauMode mode,
                                    const RoutingTrace* trace = nullptr, const SimConfig* base = nullptr,
                                    unsigned jobs = 1) {
  if (params.block_size < 2) throw Error(ErrorCode::InvalidShape, "block_size must be >= 2 to choose an interval");
  if (mode == TauMode::Analytic) return optimize_tau_analytic(params);
  if (trace == nullptr || base == nullptr) {
    throw Error(ErrorCode::TraceRequiredForSimulatedMode, "simulated mode needs a trace and a base configuration");
  }
  return optimize_tau_simulated(*base, *trace, jobs);
}

}  // namespace moesim
