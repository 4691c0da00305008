#include <gtest/gtest.h>

#include <algorithm>

#include "helpers.hpp"
#include "hysparse/config.hpp"
#include "hysparse/selection.hpp"

using namespace hysparse;

namespace {

BlockScores one_row(std::vector<double> v, int B = 1, std::int64_t first = -1) {
  BlockScores s;
  s.block_size = B;
  const std::size_t n = v.size();
  s.first_position = first >= 0 ? first : static_cast<std::int64_t>(n) * B - 1;
  s.values = Tensor({1, 1, n}, std::move(v));
  return s;
}

std::vector<std::int32_t> row(const BlockIndexSet& s, std::size_t r = 0, std::size_t g = 0) {
  const auto x = s.at(r, g);
  return {x.begin(), x.end()};
}

}  // namespace

TEST(TopK, PicksHighest) {
  EXPECT_EQ(row(topk_blocks(one_row({0.1, 0.5, 0.2, 0.7}), 2)), (std::vector<std::int32_t>{1, 3}));
}

TEST(TopK, TiesGoToLowerIndex) {
  EXPECT_EQ(row(topk_blocks(one_row({0.5, 0.5, 0.1}), 1)), (std::vector<std::int32_t>{0}));
}

TEST(TopK, TableGeometry) {
  ModelConfig c;
  c.block_size = 64;
  c.topk_tokens = 1024;
  EXPECT_EQ(c.k_blocks(), 16);
}

TEST(TopK, ClampsToCausalBlocks) {
  // Row at position 5 with B=4 sees blocks 0 and 1 only, whatever the later scores say.
  BlockScores s = one_row({0.1, 0.2, 0.9, 0.9}, 4, 5);
  EXPECT_EQ(row(topk_blocks(s, 3)), (std::vector<std::int32_t>{0, 1}));
}

TEST(TopK, MatchesSortOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t groups = 1 + rng.below(3), rows = 1 + rng.below(12);
    const int B = 1 + static_cast<int>(rng.below(5)), k = 1 + static_cast<int>(rng.below(6));
    const std::int64_t first = static_cast<std::int64_t>(rng.below(30));
    const std::size_t nb = (static_cast<std::size_t>(first) + rows + B - 1) / B;
    BlockScores s;
    s.block_size = B;
    s.first_position = first;
    s.values = Tensor({groups, rows, nb});
    for (auto& x : s.values.data()) x = static_cast<double>(rng.below(4)) / 3.0;
    const BlockIndexSet got = topk_blocks(s, k);
    got.validate();
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t avail = (static_cast<std::size_t>(first) + r) / B + 1;
        std::vector<std::pair<double, int>> keyed;
        for (std::size_t j = 0; j < avail; ++j) keyed.push_back({-s.at(g, r, j), static_cast<int>(j)});
        std::sort(keyed.begin(), keyed.end());
        std::vector<std::int32_t> want;
        for (std::size_t i = 0; i < std::min<std::size_t>(avail, k); ++i) want.push_back(keyed[i].second);
        std::sort(want.begin(), want.end());
        ASSERT_EQ(row(got, r, g), want) << "trial " << trial;
      }
  }
}

TEST(TopK, ScaleInvariantPerRow) {
  Rng rng(2);
  BlockScores s;
  s.block_size = 2;
  s.values = testutil::randn(rng, {1, 20, 10});
  for (auto& x : s.values.data()) x = std::abs(x);
  const BlockIndexSet a = topk_blocks(s, 3);
  for (std::size_t r = 0; r < 20; ++r) {
    const double f = 0.1 + rng.uniform() * 10;
    for (std::size_t j = 0; j < 10; ++j) s.values.data()[r * 10 + j] *= f;
  }
  EXPECT_EQ(topk_blocks(s, 3), a);
}

TEST(TopK, EarlyRowsSelectEverything) {
  Rng rng(3);
  BlockScores s;
  s.block_size = 4;
  s.values = testutil::randn(rng, {2, 16, 4});
  const BlockIndexSet sel = topk_blocks(s, 2);
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t g = 0; g < 2; ++g) EXPECT_EQ(sel.at(r, g).size(), r / 4 + 1);
}

TEST(GroupAggregate, IdentityAndElementwiseMax) {
  Rng rng(4);
  BlockScores s;
  s.block_size = 1;
  s.values = testutil::randn(rng, {3, 4, 4});
  EXPECT_EQ(testutil::max_abs_diff(group_aggregate(s, 1).values.data(), s.values.data()), 0.0);

  BlockScores two;
  two.block_size = 1;
  two.values = Tensor({2, 1, 2}, std::vector<double>{0.1, 0.9, 0.8, 0.2});
  EXPECT_EQ(testutil::max_abs_diff(group_aggregate(two, 2).values.data(), std::vector<double>{0.8, 0.9}), 0.0);
}

TEST(GroupAggregate, MatchesBruteForce) {
  Rng rng(5);
  BlockScores s;
  s.block_size = 3;
  s.values = testutil::randn(rng, {8, 7, 5});
  const BlockScores g = group_aggregate(s, 4);
  ASSERT_EQ(g.heads(), 2u);
  for (std::size_t gi = 0; gi < 2; ++gi)
    for (std::size_t r = 0; r < 7; ++r)
      for (std::size_t j = 0; j < 5; ++j) {
        double m = -1e300;
        for (std::size_t h = 0; h < 4; ++h) m = std::max(m, s.at(gi * 4 + h, r, j));
        EXPECT_EQ(g.at(gi, r, j), m);
      }
}

TEST(GroupAggregate, RejectsIndivisibleGroups) {
  BlockScores s;
  s.block_size = 1;
  s.values = Tensor({3, 1, 1});
  EXPECT_THROW(group_aggregate(s, 2), ShapeError);
}

TEST(Recall, HandCounts) {
  const std::vector<std::int32_t> a = {1, 3}, b = {3, 5}, none = {}, other = {7};
  EXPECT_EQ(selection_recall(a, a), 1.0);
  EXPECT_EQ(selection_recall(a, other), 0.0);
  EXPECT_EQ(selection_recall(a, b), 0.5);
  EXPECT_EQ(selection_recall(none, b), 1.0);
}

TEST(IndexSetJson, RoundTripAndLayout) {
  Rng rng(6);
  BlockScores s;
  s.block_size = 2;
  s.first_position = 3;
  s.values = testutil::randn(rng, {2, 5, 4});
  const BlockIndexSet sel = topk_blocks(s, 2);
  const auto j = to_json(sel);
  EXPECT_EQ(j.at("rows").size(), 5u);
  EXPECT_EQ(j.at("rows")[0].at("position"), 3);
  EXPECT_EQ(j.at("rows")[0].at("groups").size(), 2u);
  EXPECT_EQ(index_set_from_json(j), sel);
}
