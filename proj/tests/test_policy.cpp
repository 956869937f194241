// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "moesim/policy.hpp"

using namespace moesim;
using moesim::testing::make_trace1;

namespace {

GenSpec spec(double p, std::uint64_t seed, std::uint32_t blocks = 1) {
  GenSpec g;
  g.shape = ModelShape{2, 24, 3, 6, 8, 5};
  g.blocks = blocks;
  g.persistence = p;
  g.popularity_skew = 0.8;
  g.content_shift = 1.0;
  g.seed = seed;
  return g;
}

std::vector<std::vector<StepDecision>> run_policy(const RoutingTrace& tr, const PolicyConfig& cfg,
                                                  std::uint32_t budget) {
  auto shape = tr.shape();
  shape.gpu_budget = budget;
  Scheduler sched(shape, cfg, tr);
  std::vector<std::vector<StepDecision>> out;
  for (std::uint32_t t = 0; t < tr.total_steps(); ++t) out.push_back(sched.step(tr, t));
  return out;
}

std::vector<PolicyConfig> policy_grid(std::uint32_t T) {
  std::vector<PolicyConfig> out{PolicyConfig::per_step(), PolicyConfig::fixed()};
  for (std::uint32_t tau = 1; tau <= T; ++tau) out.push_back(PolicyConfig::tide(tau));
  auto cum = PolicyConfig::tide(3);
  cum.counter_mode = CounterMode::Cumulative;
  out.push_back(cum);
  auto oracle = PolicyConfig::tide(2);
  oracle.refresh_mode = RefreshMode::Oracle;
  out.push_back(oracle);
  auto first = PolicyConfig::tide(2);
  first.cold_start = ColdStart::FirstB;
  out.push_back(first);
  auto carry = PolicyConfig::tide(3);
  carry.carry_counters = true;
  out.push_back(carry);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// init_placement / select_top_b

TEST(InitPlacement, FirstB) {
  ModelShape s{1, 8, 1, 3, 2, 1};
  auto tr = make_trace1(s, {{{5}}, {{6}}});
  auto cfg = PolicyConfig::tide(1);
  cfg.cold_start = ColdStart::FirstB;
  auto p = init_placement(s, cfg, tr);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0].gpu_set(), (std::vector<ExpertId>{0, 1, 2}));
}

TEST(InitPlacement, OracleStep0TieGoesToLowerId) {
  // step-0 hits: e2 x5, e0 x4, e7 x4, e1 x1
  ModelShape s{1, 8, 1, 2, 1, 14};
  std::vector<std::vector<ExpertId>> step0;
  for (int i = 0; i < 5; ++i) step0.push_back({2});
  for (int i = 0; i < 4; ++i) step0.push_back({0});
  for (int i = 0; i < 4; ++i) step0.push_back({7});
  step0.push_back({1});
  auto tr = make_trace1(s, {step0});
  auto p = init_placement(s, PolicyConfig::tide(1), tr);
  EXPECT_EQ(p[0].gpu_set(), (std::vector<ExpertId>{0, 2}));
}

TEST(InitPlacement, ProvidedOverBudgetRejected) {
  ModelShape s{1, 8, 1, 2, 1, 1};
  auto tr = make_trace1(s, {{{0}}});
  auto cfg = PolicyConfig::tide(1);
  cfg.cold_start = ColdStart::Provided;
  const std::vector<ExpertId> three{0, 1, 2};
  cfg.provided = {Placement::from_gpu_set(8, three)};
  try {
    init_placement(s, cfg, tr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ProvidedPlacementInvalid);
  }
  cfg.provided = {};
  EXPECT_THROW(init_placement(s, cfg, tr), Error);
  const std::vector<ExpertId> two{3, 4};
  cfg.provided = {Placement::from_gpu_set(8, two)};
  EXPECT_EQ(init_placement(s, cfg, tr)[0].gpu_set(), two);
}

TEST(SelectTopB, Examples) {
  HitCounter h(4);
  for (int i = 0; i < 5; ++i) h.add(std::vector<ExpertId>{0});
  for (int i = 0; i < 3; ++i) h.add(std::vector<ExpertId>{1, 2});
  h.add(std::vector<ExpertId>{3});
  EXPECT_EQ(select_top_b(h, 2), (std::vector<ExpertId>{0, 1}));
  EXPECT_EQ(select_top_b(HitCounter(4), 2), (std::vector<ExpertId>{0, 1}));
  HitCounter g(3);
  g.add(std::vector<ExpertId>{0, 1, 2});
  g.add(std::vector<ExpertId>{1, 2});
  g.add(std::vector<ExpertId>{2});
  EXPECT_EQ(select_top_b(g, 3), (std::vector<ExpertId>{0, 1, 2}));
  try {
    select_top_b(g, 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::BudgetExceedsExperts);
  }
}

// ---------------------------------------------------------------------------
// step

TEST(Step, RefreshCadence) {
  GenSpec g = spec(0.8, 1);
  g.shape.block_size = 4;
  auto tr4 = generate(g);
  auto ds = run_policy(tr4, PolicyConfig::tide(2), 6);
  std::vector<bool> flags;
  for (const auto& d : ds) flags.push_back(d[0].refreshed);
  EXPECT_EQ(flags, (std::vector<bool>{true, false, true, false}));
}

TEST(Step, CadenceRestartsEachBlock) {
  auto tr = generate(spec(0.8, 1, 3));
  auto ds = run_policy(tr, PolicyConfig::tide(3), 6);
  for (std::uint32_t step = 0; step < tr.total_steps(); ++step) EXPECT_EQ(ds[step][0].refreshed, (step % 8) % 3 == 0);
}

TEST(Step, PromotionsAndEvictionsAreSetDifferences) {
  // placement {0,1}; steps 0-1 hit {1,2}; the refresh at step 2 swaps 0 for 2
  ModelShape s{1, 4, 2, 2, 4, 1};
  auto tr = make_trace1(s, {{{1, 2}}, {{1, 2}}, {{1, 2}}, {{1, 2}}});
  auto cfg = PolicyConfig::tide(2);
  cfg.cold_start = ColdStart::Provided;
  const std::vector<ExpertId> start{0, 1};
  cfg.provided = {Placement::from_gpu_set(4, start)};
  Scheduler sched(s, cfg, tr);
  auto d0 = sched.step(tr, 0);
  EXPECT_TRUE(d0[0].refreshed);
  EXPECT_TRUE(d0[0].promotions.empty());  // empty window keeps the placement
  sched.step(tr, 1);
  auto d2 = sched.step(tr, 2);
  EXPECT_TRUE(d2[0].refreshed);
  EXPECT_EQ(d2[0].promotions, (std::vector<ExpertId>{2}));
  EXPECT_EQ(d2[0].evictions, (std::vector<ExpertId>{0}));
  EXPECT_EQ(d2[0].placement_after.gpu_set(), (std::vector<ExpertId>{1, 2}));
}

TEST(Step, TideOneEqualsPerStep) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto tr = generate(spec(0.7, seed, 2));
    EXPECT_EQ(run_policy(tr, PolicyConfig::tide(1), 6), run_policy(tr, PolicyConfig::per_step(), 6));
  }
}

TEST(Step, StaticNeverMigrates) {
  auto tr = generate(spec(0.3, 4, 2));
  for (const auto& step : run_policy(tr, PolicyConfig::fixed(), 6))
    for (const auto& d : step) {
      EXPECT_FALSE(d.refreshed);
      EXPECT_TRUE(d.promotions.empty());
      EXPECT_TRUE(d.evictions.empty());
    }
}

TEST(Step, RejectsStepBeyondTrace) {
  auto tr = generate(spec(0.7, 1));
  Scheduler sched(tr.shape(), PolicyConfig::tide(2), tr);
  try {
    sched.step(tr, 8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TraceExhausted);
  }
}

TEST(Step, RejectsMismatchedShapeAndTau) {
  auto tr = generate(spec(0.7, 1));
  auto s = tr.shape();
  s.experts = 30;
  EXPECT_THROW(Scheduler(s, PolicyConfig::tide(2), tr), Error);
  EXPECT_THROW(Scheduler(tr.shape(), PolicyConfig::tide(9), tr), Error);
}

// Invariants over a grid of policies, budgets and traces.
TEST(Step, DecisionInvariants) {
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    auto tr = generate(spec(0.2 + 0.15 * seed, seed, 2));
    for (std::uint32_t B : {1u, 4u, 6u, 24u}) {
      for (const auto& cfg : policy_grid(8)) {
        auto shape = tr.shape();
        shape.gpu_budget = B;
        Scheduler sched(shape, cfg, tr);
        auto prev = sched.placements();
        for (std::uint32_t t = 0; t < tr.total_steps(); ++t) {
          auto ds = sched.step(tr, t);
          for (std::uint32_t l = 0; l < shape.layers; ++l) {
            const auto& d = ds[l];
            const auto old = prev[l].gpu_set();
            ASSERT_LE(d.placement_after.gpu_count(), B);
            ASSERT_LE(d.promotions.size(), B);
            std::vector<ExpertId> both;
            std::set_intersection(d.promotions.begin(), d.promotions.end(), d.evictions.begin(),
                                  d.evictions.end(), std::back_inserter(both));
            ASSERT_TRUE(both.empty());
            if (!d.refreshed) {
              ASSERT_TRUE(d.promotions.empty() && d.evictions.empty());
              ASSERT_EQ(d.placement_after, prev[l]);
            }
            if (old.size() == B) {
              ASSERT_EQ(d.promotions.size(), d.evictions.size());
            }
            std::vector<ExpertId> fresh;
            const auto now = d.placement_after.gpu_set();
            std::set_difference(now.begin(), now.end(), old.begin(), old.end(), std::back_inserter(fresh));
            ASSERT_EQ(fresh, d.promotions);
          }
          prev = sched.placements();
        }
      }
    }
  }
}

TEST(Step, CounterHoldsActivePairsSinceRefresh) {
  auto g = spec(0.6, 3);
  g.unmask = UnmaskSchedule::linear(8, 5);
  g.decoded_mode = DecodedMode::Drop;
  auto tr = generate(g);
  Scheduler sched(tr.shape(), PolicyConfig::tide(3), tr);
  std::uint64_t expected = 0;
  for (std::uint32_t t = 0; t < 8; ++t) {
    if (t % 3 == 0) expected = 0;
    sched.step(tr, t);
    expected += static_cast<std::uint64_t>(tr.active_tokens(t)) * g.shape.top_k;
    for (const auto& c : sched.counters()) EXPECT_EQ(c.total(), expected);
  }
}

TEST(Step, CumulativeCounterSpansBlock) {
  auto tr = generate(spec(0.6, 3));
  auto cfg = PolicyConfig::tide(3);
  cfg.counter_mode = CounterMode::Cumulative;
  Scheduler sched(tr.shape(), cfg, tr);
  for (std::uint32_t t = 0; t < 8; ++t) {
    sched.step(tr, t);
    EXPECT_EQ(sched.counters()[0].total(), static_cast<std::uint64_t>(t + 1) * 5 * 3);
  }
}

TEST(Step, FrozenTraceNeverMigrates) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto tr = generate(spec(1.0, seed));
    std::uint32_t unique = 0;
    for (std::uint32_t l = 0; l < 2; ++l) {
      auto u = unique_experts_per_step(tr, l);
      unique = std::max(unique, *std::max_element(u.begin(), u.end()));
    }
    for (std::uint32_t tau = 1; tau <= 8; ++tau) {
      auto shape = tr.shape();
      shape.gpu_budget = unique;
      Scheduler sched(shape, PolicyConfig::tide(tau), tr);
      for (std::uint32_t t = 0; t < tr.total_steps(); ++t) {
        auto ds = sched.step(tr, t);
        for (std::uint32_t l = 0; l < 2; ++l) {
          EXPECT_TRUE(ds[l].promotions.empty());
          EXPECT_EQ(route_layer(sched.placements()[l], tr, t, l).cpu_pairs, 0u);
        }
      }
    }
  }
}

TEST(Step, JsonLine) {
  StepDecision d;
  d.step = 3;
  d.layer = 1;
  d.promotions = {2, 5};
  d.evictions = {0, 1};
  EXPECT_EQ(to_json_line(d), "{\"evictions\":[0,1],\"layer\":1,\"promotions\":[2,5],\"t\":3}\n");
}

// ---------------------------------------------------------------------------
// route_tokens

TEST(Route, AllOnGpu) {
  ModelShape s{1, 4, 2, 3, 1, 2};
  auto tr = make_trace1(s, {{{0, 1}, {1, 2}}});
  const std::vector<ExpertId> gpu{0, 1, 2};
  auto r = route_layer(Placement::from_gpu_set(4, gpu), tr, 0, 0);
  EXPECT_EQ(r.cpu_pairs, 0u);
  EXPECT_EQ(r.gpu_pairs, 4u);
}

TEST(Route, DisjointGpuSet) {
  ModelShape s{1, 6, 2, 2, 1, 2};
  auto tr = make_trace1(s, {{{0, 1}, {1, 2}}});
  const std::vector<ExpertId> gpu{4, 5};
  auto r = route_layer(Placement::from_gpu_set(6, gpu), tr, 0, 0);
  EXPECT_EQ(r.gpu_pairs, 0u);
  EXPECT_EQ(r.cpu_pairs, 4u);
}

TEST(Route, MixedCounts) {
  ModelShape s{1, 4, 2, 1, 1, 2};
  auto tr = make_trace1(s, {{{0, 1}, {1, 2}}});
  const std::vector<ExpertId> gpu{1};
  auto r = route_layer(Placement::from_gpu_set(4, gpu), tr, 0, 0);
  EXPECT_EQ(r.gpu_pairs, 2u);
  EXPECT_EQ(r.cpu_pairs, 2u);
  ASSERT_EQ(r.assignments.size(), 4u);
  EXPECT_EQ(r.assignments[1].expert, 1u);
  EXPECT_EQ(r.assignments[1].device, Device::Gpu);
  EXPECT_EQ(r.assignments[2].token, 1u);
}

TEST(Route, LosslessAcrossPolicies) {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    auto g = spec(0.5, seed, 2);
    g.unmask = UnmaskSchedule::geometric(8, 5, 0.2);
    g.decoded_mode = seed % 2 ? DecodedMode::Drop : DecodedMode::Freeze;
    auto tr = generate(g);
    std::multiset<std::tuple<std::uint32_t, std::uint32_t, std::uint32_t, ExpertId>> want;
    for (std::uint32_t t = 0; t < tr.total_steps(); ++t)
      for (std::uint32_t l = 0; l < 2; ++l)
        for (std::uint32_t n = 0; n < 5; ++n)
          if (tr.active(t, n))
            for (ExpertId e : tr.selection(t, l, n)) want.insert({t, l, n, e});
    for (const auto& cfg : policy_grid(8)) {
      Scheduler sched(tr.shape(), cfg, tr);
      std::multiset<std::tuple<std::uint32_t, std::uint32_t, std::uint32_t, ExpertId>> got;
      for (std::uint32_t t = 0; t < tr.total_steps(); ++t) {
        sched.step(tr, t);
        auto routed = route_tokens(sched.placements(), tr, t);
        for (std::uint32_t l = 0; l < 2; ++l) {
          EXPECT_EQ(routed[l].gpu_pairs + routed[l].cpu_pairs,
                    static_cast<std::uint64_t>(tr.active_tokens(t)) * 3);
          for (const auto& a : routed[l].assignments) {
            got.insert({t, l, a.token, a.expert});
            EXPECT_EQ(a.device == Device::Gpu, sched.placements()[l].on_gpu(a.expert));
          }
        }
      }
      EXPECT_EQ(got, want);
    }
  }
}
