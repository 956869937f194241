// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "moesim/core.hpp"

namespace moesim::testing {

// sel[t][l][n] -> k expert IDs; one block of sel.size() steps.
inline RoutingTrace make_trace(const ModelShape& shape,
                               const std::vector<std::vector<std::vector<std::vector<ExpertId>>>>& sel) {
  const auto blocks = static_cast<std::uint32_t>(sel.size() / shape.block_size);
  RoutingTrace tr(shape, blocks);
  for (std::uint32_t t = 0; t < sel.size(); ++t)
    for (std::uint32_t l = 0; l < shape.layers; ++l)
      for (std::uint32_t n = 0; n < shape.tokens; ++n) {
        auto out = tr.selection(t, l, n);
        for (std::uint32_t j = 0; j < shape.top_k; ++j) out[j] = sel[t][l][n][j];
      }
  return tr;
}

// Single layer, sel[t][n] -> k expert IDs.
inline RoutingTrace make_trace1(const ModelShape& shape, const std::vector<std::vector<std::vector<ExpertId>>>& sel) {
  std::vector<std::vector<std::vector<std::vector<ExpertId>>>> full;
  for (const auto& step : sel) full.push_back({step});
  return make_trace(shape, full);
}

}  // namespace moesim::testing
