// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <numeric>

#include "helpers.hpp"
#include "moesim/core.hpp"
#include "moesim/rng.hpp"

using namespace moesim;
using moesim::testing::make_trace1;

namespace {

ModelShape tiny() { return ModelShape{1, 4, 2, 2, 2, 1}; }

}  // namespace

TEST(ModelShape, AcceptsValidShape) { EXPECT_NO_THROW((ModelShape{2, 256, 8, 64, 32, 32}.validate())); }

TEST(ModelShape, RejectsOutOfRangeFields) {
  auto bad = [](ModelShape s) {
    try {
      s.validate();
    } catch (const Error& e) {
      return e.code() == ErrorCode::InvalidShape;
    }
    return false;
  };
  EXPECT_TRUE(bad({0, 4, 2, 2, 2, 1}));
  EXPECT_TRUE(bad({1, 0, 1, 1, 2, 1}));
  EXPECT_TRUE(bad({1, 4, 5, 2, 2, 1}));
  EXPECT_TRUE(bad({1, 4, 0, 2, 2, 1}));
  EXPECT_TRUE(bad({1, 4, 2, 0, 2, 1}));
  EXPECT_TRUE(bad({1, 4, 2, 5, 2, 1}));
  EXPECT_TRUE(bad({1, 4, 2, 2, 0, 1}));
  EXPECT_TRUE(bad({1, 4, 2, 2, 2, 0}));
}

TEST(ModelShape, LayoutIgnoresBudget) {
  ModelShape a{1, 8, 2, 2, 4, 3};
  ModelShape b = a;
  b.gpu_budget = 5;
  EXPECT_TRUE(a.same_layout(b));
  b.tokens = 4;
  EXPECT_FALSE(a.same_layout(b));
}

TEST(Validate, WellFormedTraceIsOk) {
  auto tr = make_trace1(tiny(), {{{0, 1}}, {{1, 2}}});
  EXPECT_FALSE(check(tr).has_value());
  EXPECT_NO_THROW(validate(tr));
}

TEST(Validate, DuplicateExpertNamesFirstViolation) {
  auto tr = make_trace1(tiny(), {{{0, 0}}, {{1, 2}}});
  auto v = check(tr);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->code, ErrorCode::DuplicateExpertInSelection);
  EXPECT_EQ(v->step, 0u);
  EXPECT_EQ(v->layer, 0u);
  EXPECT_EQ(v->token, 0u);
  try {
    validate(tr);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::DuplicateExpertInSelection);
    EXPECT_NE(std::string(e.what()).find("t=0,l=0,n=0"), std::string::npos);
  }
}

TEST(Validate, ExpertOutOfRange) {
  auto tr = make_trace1(tiny(), {{{0, 7}}, {{1, 2}}});
  auto v = check(tr);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->code, ErrorCode::ExpertIdOutOfRange);
}

TEST(Validate, ReportsLaterViolationPosition) {
  ModelShape s{2, 4, 2, 2, 2, 2};
  auto tr = RoutingTrace(s, 1);
  for (std::uint32_t t = 0; t < 2; ++t)
    for (std::uint32_t l = 0; l < 2; ++l)
      for (std::uint32_t n = 0; n < 2; ++n) {
        tr.selection(t, l, n)[0] = 0;
        tr.selection(t, l, n)[1] = 1;
      }
  tr.selection(1, 1, 0)[1] = 0;
  auto v = check(tr);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->step, 1u);
  EXPECT_EQ(v->layer, 1u);
  EXPECT_EQ(v->token, 0u);
}

TEST(Validate, DimensionMismatch) {
  auto tr = make_trace1(tiny(), {{{0, 1}}, {{1, 2}}});
  tr.raw_experts().pop_back();
  auto v = check(tr);
  ASSERT_TRUE(v.has_value());
  EXPECT_EQ(v->code, ErrorCode::DimensionMismatch);
}

TEST(Placement, FirstBAndPartition) {
  auto p = Placement::first_b(8, 3);
  EXPECT_EQ(p.gpu_set(), (std::vector<ExpertId>{0, 1, 2}));
  EXPECT_EQ(p.cpu_set(), (std::vector<ExpertId>{3, 4, 5, 6, 7}));
  EXPECT_EQ(p.gpu_count(), 3u);
}

TEST(Placement, RejectsBadProvidedSets) {
  const std::vector<ExpertId> out_of_range{1, 9};
  const std::vector<ExpertId> twice{1, 1};
  EXPECT_THROW(Placement::from_gpu_set(8, out_of_range), Error);
  EXPECT_THROW(Placement::from_gpu_set(8, twice), Error);
}

TEST(Placement, PartitionPropertyUnderRandomMoves) {
  Xoshiro256 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto E = static_cast<std::uint32_t>(1 + rng.below(40));
    Placement p(E);
    for (int op = 0; op < 100; ++op) {
      const auto e = static_cast<ExpertId>(rng.below(E));
      if (rng.bernoulli(0.5)) p.promote(e);
      else p.evict(e);
      auto g = p.gpu_set();
      auto c = p.cpu_set();
      ASSERT_EQ(g.size() + c.size(), E);
      ASSERT_EQ(g.size(), p.gpu_count());
      std::vector<ExpertId> all;
      std::merge(g.begin(), g.end(), c.begin(), c.end(), std::back_inserter(all));
      std::vector<ExpertId> want(E);
      std::iota(want.begin(), want.end(), 0u);
      ASSERT_EQ(all, want);
    }
  }
}

TEST(Placement, BudgetCheck) {
  auto p = Placement::first_b(8, 4);
  EXPECT_NO_THROW(check_placement(p, 8, 4));
  EXPECT_THROW(check_placement(p, 8, 3), Error);
  EXPECT_THROW(check_placement(p, 9, 4), Error);
}

TEST(HitCounter, TotalsAndReset) {
  HitCounter h(6);
  EXPECT_TRUE(h.empty());
  const std::vector<ExpertId> a{0, 1}, b{1, 5};
  h.add(a);
  h.add(b);
  h.close_step();
  EXPECT_EQ(h.total(), 4u);
  EXPECT_EQ(h.count(1), 2u);
  EXPECT_FALSE(h.empty());
  h.reset(7);
  EXPECT_EQ(h.total(), 0u);
  EXPECT_EQ(h.window_start(), 7u);
  EXPECT_TRUE(h.empty());
}

TEST(TopB, IndexTieBreak) {
  const std::vector<std::uint64_t> c{5, 3, 3, 1};
  EXPECT_EQ(top_b(c, 2), (std::vector<ExpertId>{0, 1}));
  const std::vector<std::uint64_t> zero(4, 0);
  EXPECT_EQ(top_b(zero, 2), (std::vector<ExpertId>{0, 1}));
  const std::vector<std::uint64_t> full{1, 2, 3};
  EXPECT_EQ(top_b(full, 3), (std::vector<ExpertId>{0, 1, 2}));
  EXPECT_THROW(top_b(full, 4), Error);
}

TEST(TopB, MatchesStableSortOracle) {
  Xoshiro256 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    const auto E = static_cast<std::uint32_t>(1 + rng.below(50));
    const auto B = static_cast<std::uint32_t>(1 + rng.below(E));
    std::vector<std::uint64_t> c(E);
    for (auto& x : c) x = rng.below(5);
    std::vector<ExpertId> ids(E);
    std::iota(ids.begin(), ids.end(), 0u);
    std::stable_sort(ids.begin(), ids.end(), [&](ExpertId a, ExpertId b) { return c[a] > c[b]; });
    ids.resize(B);
    std::sort(ids.begin(), ids.end());
    ASSERT_EQ(top_b(c, B), ids);
  }
}

TEST(HardwareProfile, Validation) {
  EXPECT_NO_THROW((HardwareProfile{1, 2, 1, false}.validate()));
  EXPECT_THROW((HardwareProfile{0, 2, 1, false}.validate()), Error);
  EXPECT_THROW((HardwareProfile{1, 0.5, 1, false}.validate()), Error);
  EXPECT_THROW((HardwareProfile{1, 2, -1, false}.validate()), Error);
}

TEST(PolicyConfig, TauRange) {
  ModelShape s{1, 8, 2, 2, 4, 2};
  EXPECT_NO_THROW(PolicyConfig::tide(1).validate(s));
  EXPECT_NO_THROW(PolicyConfig::tide(4).validate(s));
  EXPECT_THROW(PolicyConfig::tide(0).validate(s), Error);
  EXPECT_THROW(PolicyConfig::tide(5).validate(s), Error);
  EXPECT_EQ(PolicyConfig::per_step().interval(), 1u);
}

TEST(Rng, KnownStreamAndBounds) {
  // Reference outputs from tests/oracles/oracle.py.
  Xoshiro256 a(0);
  EXPECT_EQ(a.next(), 0x99ec5f36cb75f2b4ULL);
  EXPECT_EQ(a.next(), 0xbf6e1f784956452aULL);
  EXPECT_EQ(a.next(), 0x1a5f849d4933e6e0ULL);
  Xoshiro256 c(42);
  EXPECT_EQ(c.next(), 0x15780b2e0c2ec716ULL);
  EXPECT_EQ(c.next(), 0x6104d9866d113a7eULL);
  EXPECT_EQ(c.next(), 0xae17533239e499a1ULL);
  Xoshiro256 r(42);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    ASSERT_LT(r.below(7), 7u);
  }
}
