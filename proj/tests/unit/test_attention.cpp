#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "helpers.hpp"
#include "hysparse/attention.hpp"
#include "hysparse/ops.hpp"
#include "hysparse/selection.hpp"

using namespace hysparse;
using testutil::fd_relative_error;
using testutil::max_abs_diff;
using testutil::randn;

namespace {

// Direct softmax attention with an arbitrary visibility rule over absolute
// positions; keys at positions 0..tk-1, queries at tk-tq..tk-1.
struct Direct {
  std::vector<double> out;
  std::vector<double> probs;  // [h x tq x tk]
};

Direct direct_attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                        const std::optional<Tensor>& sink,
                        const std::function<bool(std::size_t, std::size_t, std::size_t, std::size_t)>& visible) {
  const std::size_t tq = q.dim(0), h = q.dim(1), d = q.dim(2), tk = k.dim(0), hkv = k.dim(1);
  Direct r;
  r.out.assign(tq * h * d, 0.0);
  r.probs.assign(h * tq * tk, 0.0);
  for (std::size_t hi = 0; hi < h; ++hi) {
    const std::size_t g = hi / (h / hkv);
    for (std::size_t i = 0; i < tq; ++i) {
      const std::size_t pos = tk - tq + i;
      std::vector<double> logit(tk, -INFINITY);
      double m = sink ? sink->data()[hi] : -INFINITY;
      for (std::size_t j = 0; j < tk; ++j) {
        if (j > pos || !visible(hi, g, pos, j)) continue;
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += q.data()[(i * h + hi) * d + c] * k.data()[(j * hkv + g) * d + c];
        logit[j] = s * scale;
        m = std::max(m, logit[j]);
      }
      double den = sink ? std::exp(sink->data()[hi] - m) : 0.0;
      for (double l : logit) den += std::isinf(l) ? 0.0 : std::exp(l - m);
      for (std::size_t j = 0; j < tk; ++j) {
        if (std::isinf(logit[j])) continue;
        const double p = std::exp(logit[j] - m) / den;
        r.probs[(hi * tq + i) * tk + j] = p;
        for (std::size_t c = 0; c < d; ++c) r.out[(i * h + hi) * d + c] += p * v.data()[(j * hkv + g) * d + c];
      }
    }
  }
  return r;
}

auto causal = [](std::size_t, std::size_t, std::size_t, std::size_t) { return true; };

AttnConfig config(int d, int B, int tile_rows, bool sink, int window = 128) {
  AttnConfig c;
  c.head_dim = d;
  c.block_size = c.tile_cols = B;
  c.tile_rows = tile_rows;
  c.sink_enabled = sink;
  c.window = window;
  return c;
}

struct Inputs {
  Tensor q, k, v;
  std::optional<Tensor> sink;
};

Inputs random_inputs(Rng& rng, std::size_t t, std::size_t h, std::size_t hkv, std::size_t d, bool sink,
                     bool grad = false) {
  Inputs in{randn(rng, {t, h, d}, 1, grad), randn(rng, {t, hkv, d}, 1, grad), randn(rng, {t, hkv, d}, 1, grad),
            std::nullopt};
  if (sink) in.sink = randn(rng, {h}, 1, grad);
  return in;
}

std::vector<double> block_max(const Direct& r, std::size_t h, std::size_t t, std::size_t B) {
  const std::size_t nb = (t + B - 1) / B;
  std::vector<double> s(h * t * nb, 0.0);
  for (std::size_t hi = 0; hi < h; ++hi)
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = 0; j < t; ++j) {
        double& cell = s[(hi * t + i) * nb + j / B];
        cell = std::max(cell, r.probs[(hi * t + i) * t + j]);
      }
  return s;
}

}  // namespace

TEST(ReferenceAttention, SingleToken) {
  Rng rng(1);
  const Inputs in = random_inputs(rng, 1, 2, 1, 4, false);
  const AttnResult r = reference_full_attention(in.q, in.k, in.v, config(4, 4, 4, false));
  for (int hi = 0; hi < 2; ++hi)
    for (int c = 0; c < 4; ++c) EXPECT_DOUBLE_EQ(r.out.data()[hi * 4 + c], in.v.data()[c]);
  EXPECT_EQ(r.scores.values.data()[0], 1.0);
}

TEST(ReferenceAttention, UniformLogits) {
  Rng rng(2);
  const Tensor q({2, 1, 4}, 0.0);
  const Tensor k = randn(rng, {2, 1, 4}), v = randn(rng, {2, 1, 4});
  const AttnResult r = reference_full_attention(q, k, v, config(4, 1, 1, false));
  EXPECT_DOUBLE_EQ(r.scores.at(0, 1, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.scores.at(0, 1, 1), 0.5);
}

TEST(ReferenceAttention, MatchesDirectFormula) {
  Rng rng(3);
  for (bool sink : {false, true}) {
    const Inputs in = random_inputs(rng, 37, 4, 2, 16, sink);
    const AttnConfig c = config(16, 8, 8, sink);
    const AttnResult r = reference_full_attention(in.q, in.k, in.v, c, in.sink);
    const Direct want = direct_attention(in.q, in.k, in.v, c.scale(), in.sink, causal);
    EXPECT_LT(max_abs_diff(r.out.data(), want.out), 1e-12);
    EXPECT_LT(max_abs_diff(r.scores.values.data(), block_max(want, 4, 37, 8)), 1e-12);
  }
}

TEST(ReferenceAttention, RejectsBadGrouping) {
  Rng rng(4);
  const Inputs in = random_inputs(rng, 3, 3, 2, 4, false);
  EXPECT_THROW(reference_full_attention(in.q, in.k, in.v, config(4, 4, 4, false)), ShapeError);
}

TEST(TiledAttention, SingleTileIsExact) {
  Rng rng(5);
  const Inputs in = random_inputs(rng, 12, 2, 2, 8, true);
  const AttnConfig c = config(8, 16, 16, true);
  const AttnResult a = reference_full_attention(in.q, in.k, in.v, c, in.sink);
  const AttnResult b = tiled_attention_with_scores(in.q, in.k, in.v, c, in.sink);
  EXPECT_LT(max_abs_diff(a.out.data(), b.out.data()), 1e-12);
  EXPECT_LT(max_abs_diff(a.scores.values.data(), b.scores.values.data()), 1e-12);
}

TEST(TiledAttention, RaggedTilesMatchDirect) {
  Rng rng(6);
  const Inputs in = random_inputs(rng, 130, 2, 1, 8, false);
  const AttnConfig c = config(8, 64, 64, false);
  const AttnResult b = tiled_attention_with_scores(in.q, in.k, in.v, c);
  const Direct want = direct_attention(in.q, in.k, in.v, c.scale(), std::nullopt, causal);
  EXPECT_LT(max_abs_diff(b.out.data(), want.out), 1e-10);
  EXPECT_LT(max_abs_diff(b.scores.values.data(), block_max(want, 2, 130, 64)), 1e-10);
}

TEST(TiledAttention, ShiftInvariance) {
  Rng rng(7);
  const std::size_t t = 50, d = 6;
  const Inputs in = random_inputs(rng, t, 1, 1, d, false);
  // Two extra channels add 500 to every logit.
  Tensor q2({t, 1, d + 2}), k2({t, 1, d + 2}), v2({t, 1, d + 2});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      q2.data()[i * (d + 2) + c] = in.q.data()[i * d + c];
      k2.data()[i * (d + 2) + c] = in.k.data()[i * d + c];
      v2.data()[i * (d + 2) + c] = in.v.data()[i * d + c];
    }
    q2.data()[i * (d + 2) + d] = 500.0;
    k2.data()[i * (d + 2) + d] = 1.0;
  }
  AttnConfig c = config(static_cast<int>(d), 8, 8, false);
  c.softmax_scale = 1.0;
  const AttnResult a = tiled_attention_with_scores(in.q, in.k, in.v, c);
  c.head_dim = static_cast<int>(d + 2);
  const AttnResult b = tiled_attention_with_scores(q2, k2, v2, c);
  std::vector<double> head(t * d);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t x = 0; x < d; ++x) head[i * d + x] = b.out.data()[i * (d + 2) + x];
  EXPECT_LT(max_abs_diff(a.out.data(), head), 1e-10);
  EXPECT_LT(max_abs_diff(a.scores.values.data(), b.scores.values.data()), 1e-10);
}

TEST(TiledAttention, ScoreInvariants) {
  Rng rng(8);
  const std::size_t t = 45, B = 7;
  const Inputs in = random_inputs(rng, t, 4, 2, 8, false);
  const AttnResult r = tiled_attention_with_scores(in.q, in.k, in.v, config(8, B, 5, false));
  for (std::size_t hi = 0; hi < 4; ++hi)
    for (std::size_t i = 0; i < t; ++i) {
      double best = 0;
      for (std::size_t j = 0; j < r.scores.blocks(); ++j) {
        const double s = r.scores.at(hi, i, j);
        EXPECT_GE(s, 0.0);
        EXPECT_LE(s, 1.0);
        if (j * B > i) {
          EXPECT_EQ(s, 0.0);
        }
        best = std::max(best, s);
      }
      EXPECT_GE(best, 1.0 / static_cast<double>(i + 1) - 1e-15);
    }
}

TEST(TiledAttention, DecodeRowMatchesPrefillRow) {
  Rng rng(9);
  const Inputs in = random_inputs(rng, 23, 2, 1, 4, true);
  const AttnConfig c = config(4, 4, 3, true);
  const AttnResult full = tiled_attention_with_scores(in.q, in.k, in.v, c, in.sink);
  Tensor last({1, 2, 4});
  for (int x = 0; x < 8; ++x) last.data()[x] = in.q.data()[22 * 8 + x];
  const AttnResult one = tiled_attention_with_scores(last, in.k, in.v, c, in.sink);
  EXPECT_LT(max_abs_diff(one.out.data(), full.out.data().subspan(22 * 8, 8)), 1e-12);
  EXPECT_EQ(one.scores.first_position, 22);
  for (std::size_t hi = 0; hi < 2; ++hi)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(one.scores.at(hi, 0, j), full.scores.at(hi, 22, j), 1e-12);
}

TEST(TiledAttention, SinkRescalesRowsUniformly) {
  Rng rng(10);
  const Inputs in = random_inputs(rng, 40, 3, 3, 4, true);
  const AttnConfig with = config(4, 4, 4, true), without = config(4, 4, 4, false);
  const AttnResult a = tiled_attention_with_scores(in.q, in.k, in.v, with, in.sink);
  const AttnResult b = tiled_attention_with_scores(in.q, in.k, in.v, without);
  EXPECT_EQ(topk_blocks(a.scores, 3), topk_blocks(b.scores, 3));
}

TEST(AttentionMass, SumsToOneMinusSinkMass) {
  Rng rng(11);
  Inputs in = random_inputs(rng, 20, 2, 1, 4, true);
  in.v = Tensor({20, 1, 4}, 1.0);
  const AttnConfig c = config(4, 4, 4, true);
  const Tensor o = tiled_attention_with_scores(in.q, in.k, in.v, c, in.sink).out;
  const Direct want = direct_attention(in.q, in.k, in.v, c.scale(), in.sink, causal);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t hi = 0; hi < 2; ++hi) {
      double mass = 0;
      for (std::size_t j = 0; j < 20; ++j) mass += want.probs[(hi * 20 + i) * 20 + j];
      EXPECT_LT(mass, 1.0);
      EXPECT_NEAR(o.data()[(i * 2 + hi) * 4], mass, 1e-12);
    }
  in.sink.reset();
  const Tensor plain = tiled_attention_with_scores(in.q, in.k, in.v, config(4, 4, 4, false)).out;
  for (double x : plain.data()) EXPECT_NEAR(x, 1.0, 1e-12);
}

TEST(SlidingWindow, WideWindowEqualsFull) {
  Rng rng(12);
  const Inputs in = random_inputs(rng, 30, 4, 2, 4, true);
  const AttnConfig c = config(4, 4, 4, true, 30);
  EXPECT_LT(max_abs_diff(sliding_window_attention(in.q, in.k, in.v, c, in.sink).data(),
                         reference_full_attention(in.q, in.k, in.v, c, in.sink).out.data()),
            1e-12);
}

TEST(SlidingWindow, SelfOnlyWindow) {
  Rng rng(13);
  const Inputs in = random_inputs(rng, 9, 2, 2, 4, false);
  const Tensor o = sliding_window_attention(in.q, in.k, in.v, config(4, 4, 4, false, 1));
  EXPECT_EQ(max_abs_diff(o.data(), in.v.data()), 0.0);
}

TEST(SlidingWindow, ClampedWindowAndMaskOracle) {
  Rng rng(14);
  const Inputs in = random_inputs(rng, 100, 2, 1, 4, true);
  const Tensor a = sliding_window_attention(in.q, in.k, in.v, config(4, 4, 4, true, 128), in.sink);
  const Tensor b = sliding_window_attention(in.q, in.k, in.v, config(4, 4, 4, true, 100), in.sink);
  EXPECT_EQ(max_abs_diff(a.data(), b.data()), 0.0);
  const AttnConfig c = config(4, 4, 4, true, 9);
  const Direct want = direct_attention(in.q, in.k, in.v, c.scale(), in.sink,
                                       [](std::size_t, std::size_t, std::size_t pos, std::size_t j) { return pos - j < 9; });
  EXPECT_LT(max_abs_diff(sliding_window_attention(in.q, in.k, in.v, c, in.sink).data(), want.out), 1e-12);
}

TEST(SlidingWindow, SuffixKeysWithOffset) {
  Rng rng(15);
  const Inputs in = random_inputs(rng, 30, 2, 1, 4, false);
  const AttnConfig c = config(4, 4, 4, false, 6);
  const Tensor full = sliding_window_attention(in.q, in.k, in.v, c);
  // Last query against the last six keys only.
  Tensor q1({1, 2, 4}), k6({6, 1, 4}), v6({6, 1, 4});
  for (int x = 0; x < 8; ++x) q1.data()[x] = in.q.data()[29 * 8 + x];
  for (int x = 0; x < 24; ++x) {
    k6.data()[x] = in.k.data()[24 * 4 + x];
    v6.data()[x] = in.v.data()[24 * 4 + x];
  }
  EXPECT_LT(max_abs_diff(sliding_window_attention(q1, k6, v6, c, std::nullopt, 24).data(),
                         full.data().subspan(29 * 8, 8)),
            1e-14);
  // Four keys starting at 26 leave positions 24 and 25 of the window missing.
  Tensor k4({4, 1, 4}), v4({4, 1, 4});
  for (int x = 0; x < 16; ++x) k4.data()[x] = v4.data()[x] = in.k.data()[26 * 4 + x];
  EXPECT_THROW(sliding_window_attention(q1, k4, v4, c, std::nullopt, 26), ShapeError);
}

namespace {
BlockIndexSet cover_all(std::size_t t, std::size_t groups, int B) {
  BlockIndexSet s(t, groups, static_cast<int>((t + B - 1) / B), B, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t j = 0; j <= r / static_cast<std::size_t>(B); ++j) s.mutable_at(r, g).push_back(static_cast<std::int32_t>(j));
  return s;
}
}  // namespace

TEST(BlockSparse, FullCoverEqualsFull) {
  Rng rng(16);
  const Inputs in = random_inputs(rng, 33, 4, 2, 4, true);
  const AttnConfig c = config(4, 5, 5, true);
  EXPECT_LT(max_abs_diff(block_sparse_attention(in.q, in.k, in.v, cover_all(33, 2, 5), c, in.sink).data(),
                         reference_full_attention(in.q, in.k, in.v, c, in.sink).out.data()),
            1e-10);
}

TEST(BlockSparse, SingleBlockCover) {
  Rng rng(17);
  const Inputs in = random_inputs(rng, 10, 2, 1, 4, false);
  const AttnConfig c = config(4, 16, 16, false);
  BlockIndexSet s(10, 1, 1, 16, 0);
  for (std::size_t r = 0; r < 10; ++r) s.mutable_at(r, 0) = {0};
  EXPECT_LT(max_abs_diff(block_sparse_attention(in.q, in.k, in.v, s, c).data(),
                         reference_full_attention(in.q, in.k, in.v, c).out.data()),
            1e-12);
}

TEST(BlockSparse, MatchesMaskOracle) {
  Rng rng(18);
  const std::size_t t = 256, hkv = 2;
  const int B = 64;
  const Inputs in = random_inputs(rng, t, 4, hkv, 8, true);
  const AttnConfig c = config(8, B, 64, true);
  BlockIndexSet s(t, hkv, 4, B, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t g = 0; g < hkv; ++g) {
      std::vector<std::int32_t> avail;
      for (std::size_t j = 0; j <= r / B; ++j)
        if (rng.below(3) != 0) avail.push_back(static_cast<std::int32_t>(j));
      if (avail.empty()) avail.push_back(static_cast<std::int32_t>(r / B));
      s.mutable_at(r, g) = avail;
    }
  const Direct want = direct_attention(in.q, in.k, in.v, c.scale(), in.sink,
                                       [&](std::size_t, std::size_t g, std::size_t pos, std::size_t j) {
                                         const auto sel = s.at(pos, g);
                                         return std::find(sel.begin(), sel.end(), static_cast<std::int32_t>(j / B)) != sel.end();
                                       });
  EXPECT_LT(max_abs_diff(block_sparse_attention(in.q, in.k, in.v, s, c, in.sink).data(), want.out), 1e-10);
}

TEST(BlockSparse, RejectsFutureBlocksAndEmptySetsWithoutSink) {
  Rng rng(19);
  const Inputs in = random_inputs(rng, 8, 2, 1, 4, false);
  const AttnConfig c = config(4, 4, 4, false);
  BlockIndexSet future = cover_all(8, 1, 4);
  future.mutable_at(1, 0) = {0, 1};
  EXPECT_THROW(block_sparse_attention(in.q, in.k, in.v, future, c), SelectionError);
  BlockIndexSet empty = cover_all(8, 1, 4);
  empty.mutable_at(5, 0).clear();
  EXPECT_THROW(block_sparse_attention(in.q, in.k, in.v, empty, c), SelectionError);
  // With a sink an empty row is defined: it attends only to the sink.
  const Tensor sink({2}, 0.0);
  const Tensor o = block_sparse_attention(in.q, in.k, in.v, empty, config(4, 4, 4, true), sink);
  for (std::size_t x = 5 * 8; x < 6 * 8; ++x) EXPECT_EQ(o.data()[x], 0.0);
}

class KernelGradient : public ::testing::TestWithParam<int> {};

TEST_P(KernelGradient, MatchesFiniteDifferences) {
  Rng rng(100 + GetParam());
  const std::size_t t = 11;
  Inputs in = random_inputs(rng, t, 4, 2, 4, true, true);
  const Tensor w = randn(rng, {t, 4, 4});
  const AttnConfig c = config(4, 3, 2, true, 4);
  BlockIndexSet sel(t, 2, 2, 3, 0);
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t g = 0; g < 2; ++g) {
      const auto last = static_cast<std::int32_t>(r / 3);
      sel.mutable_at(r, g) = last > 1 ? std::vector<std::int32_t>{static_cast<std::int32_t>(g), last}
                                      : std::vector<std::int32_t>{last};
    }
  std::function<Tensor()> loss;
  switch (GetParam()) {
    case 0: loss = [&] { return sum(mul(reference_full_attention(in.q, in.k, in.v, c, in.sink).out, w)); }; break;
    case 1: loss = [&] { return sum(mul(tiled_attention_with_scores(in.q, in.k, in.v, c, in.sink).out, w)); }; break;
    case 2: loss = [&] { return sum(mul(sliding_window_attention(in.q, in.k, in.v, c, in.sink), w)); }; break;
    default: loss = [&] { return sum(mul(block_sparse_attention(in.q, in.k, in.v, sel, c, in.sink), w)); }; break;
  }
  for (Tensor* x : {&in.q, &in.k, &in.v, &*in.sink}) EXPECT_LT(fd_relative_error(loss, *x), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(AllKernels, KernelGradient, ::testing::Values(0, 1, 2, 3));
