#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "helpers.hpp"
#include "hysparse/gradcheck.hpp"
#include "hysparse/model.hpp"
#include "hysparse/ops.hpp"
#include "hysparse/serialize.hpp"

using namespace hysparse;
using testutil::max_abs_diff;

namespace {

// Plain-loop forward pass written from the architecture description alone,
// sharing nothing with the library beyond reading parameter values.
using Mat = std::vector<double>;

Mat mm(const Mat& a, std::size_t m, std::size_t k, const Tensor& w) {
  const std::size_t n = w.dim(1);
  Mat out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += a[i * k + p] * w.data()[p * n + j];
  return out;
}

Mat norm(const Mat& x, std::size_t m, std::size_t n, const Tensor& gain) {
  Mat out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += x[i * n + j] * x[i * n + j];
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(n) + 1e-12);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] * r * gain.data()[j];
  }
  return out;
}

// Rotates consecutive pairs (2i, 2i+1) by pos * base^(-2i/d).
void rope(Mat& x, std::size_t t, std::size_t heads, std::size_t d, double base) {
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < d / 2; ++i) {
        const double a = static_cast<double>(r) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
        double& x0 = x[(r * heads + h) * d + 2 * i];
        double& x1 = x[(r * heads + h) * d + 2 * i + 1];
        const double u = x0, v = x1;
        x0 = u * std::cos(a) - v * std::sin(a);
        x1 = u * std::sin(a) + v * std::cos(a);
      }
}

struct Attn {
  Mat out;    // [t x h x d]
  Mat probs;  // [h x t x t]
};

Attn attend(const Mat& q, const Mat& k, const Mat& v, std::size_t t, std::size_t h, std::size_t hkv, std::size_t d,
            const Tensor* sink, const std::function<bool(std::size_t g, std::size_t i, std::size_t j)>& visible) {
  Attn r{Mat(t * h * d, 0.0), Mat(h * t * t, 0.0)};
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t hi = 0; hi < h; ++hi) {
    const std::size_t g = hi / (h / hkv);
    for (std::size_t i = 0; i < t; ++i) {
      std::vector<double> e(t, 0.0);
      std::vector<bool> on(t, false);
      double m = sink ? sink->data()[hi] : -INFINITY;
      for (std::size_t j = 0; j <= i; ++j) {
        if (!visible(g, i, j)) continue;
        double s = 0;
        for (std::size_t c = 0; c < d; ++c) s += q[(i * h + hi) * d + c] * k[(j * hkv + g) * d + c];
        e[j] = s * scale;
        on[j] = true;
        m = std::max(m, e[j]);
      }
      double den = sink ? std::exp(sink->data()[hi] - m) : 0.0;
      for (std::size_t j = 0; j < t; ++j)
        if (on[j]) den += std::exp(e[j] - m);
      for (std::size_t j = 0; j < t; ++j) {
        if (!on[j]) continue;
        const double p = std::exp(e[j] - m) / den;
        r.probs[(hi * t + i) * t + j] = p;
        for (std::size_t c = 0; c < d; ++c) r.out[(i * h + hi) * d + c] += p * v[(j * hkv + g) * d + c];
      }
    }
  }
  return r;
}

double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Mat oracle_logits(const Model& model, const std::vector<std::int32_t>& tokens, SparseBranch mode,
                  bool sparse_reads_own_kv = false) {
  const ModelConfig& c = model.config();
  const std::size_t t = tokens.size(), H = static_cast<std::size_t>(c.hidden), h = static_cast<std::size_t>(c.n_q_heads),
                    hkv = static_cast<std::size_t>(c.n_kv_heads), d = static_cast<std::size_t>(c.head_dim),
                    B = static_cast<std::size_t>(c.block_size), K = static_cast<std::size_t>(c.k_blocks()),
                    w = static_cast<std::size_t>(c.window), hpg = h / hkv;
  Mat x(t * H);
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < H; ++j) x[i * H + j] = model.embedding_table().data()[tokens[i] * H + j];

  Mat shared_k, shared_v;
  std::vector<std::vector<std::size_t>> chosen;  // [i * hkv + g] -> selected blocks
  for (std::size_t L = 0; L < model.num_layers(); ++L) {
    const LayerParams& p = model.layer(L);
    const Mat xn = norm(x, t, H, p.attn_norm);
    Mat q = mm(xn, t, H, p.wq), k = mm(xn, t, H, p.wk);
    const Mat v = mm(xn, t, H, p.wv);
    rope(q, t, h, d, c.rope_base);
    rope(k, t, hkv, d, c.rope_base);
    const Tensor* sink = c.sink_enabled ? &p.sink : nullptr;
    Mat mixed(t * h * d, 0.0);
    if (p.role == LayerRole::Full) {
      const Attn a = attend(q, k, v, t, h, hkv, d, sink, [](auto, auto, auto) { return true; });
      mixed = a.out;
      shared_k = k;
      shared_v = v;
      chosen.assign(t * hkv, {});
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t g = 0; g < hkv; ++g) {
          std::vector<std::pair<double, std::size_t>> ranked;
          for (std::size_t b = 0; b <= i / B; ++b) {
            double s = 0;
            for (std::size_t hi = g * hpg; hi < (g + 1) * hpg; ++hi)
              for (std::size_t j = b * B; j < std::min(t, (b + 1) * B); ++j) s = std::max(s, a.probs[(hi * t + i) * t + j]);
            ranked.push_back({-s, b});
          }
          std::sort(ranked.begin(), ranked.end());
          auto& sel = chosen[i * hkv + g];
          for (std::size_t r = 0; r < std::min(K, ranked.size()); ++r) sel.push_back(ranked[r].second);
        }
    } else {
      const Tensor* wsink = c.sink_enabled ? &p.window_sink : nullptr;
      const Attn win = attend(q, k, v, t, h, hkv, d, wsink, [&](auto, std::size_t i, std::size_t j) { return j + w > i; });
      const Mat gl = mm(xn, t, H, p.gate_w);
      Attn sp;
      if (mode != SparseBranch::Disabled) {
        auto in_sel = [&](std::size_t g, std::size_t i, std::size_t j) {
          const auto& sel = chosen[i * hkv + g];
          return std::find(sel.begin(), sel.end(), j / B) != sel.end();
        };
        sp = sparse_reads_own_kv ? attend(q, k, v, t, h, hkv, d, sink, in_sel)
                                 : attend(q, shared_k, shared_v, t, h, hkv, d, sink, in_sel);
      }
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t hi = 0; hi < h; ++hi) {
          const double gs = mode == SparseBranch::Enabled ? sigm(gl[i * 2 * h + hi] + p.gate_b.data()[hi]) : 0.0;
          const double gw = sigm(gl[i * 2 * h + h + hi] + p.gate_b.data()[h + hi]);
          for (std::size_t cc = 0; cc < d; ++cc) {
            const std::size_t o = (i * h + hi) * d + cc;
            mixed[o] = gw * win.out[o] + (mode == SparseBranch::Disabled ? 0.0 : gs * sp.out[o]);
          }
        }
    }
    const Mat proj = mm(mixed, t, h * d, p.wo);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += proj[i];

    const std::size_t F = static_cast<std::size_t>(c.ffn_hidden);
    const Mat fn = norm(x, t, H, p.ffn.norm);
    Mat a = mm(fn, t, H, p.ffn.gate);
    const Mat b = mm(fn, t, H, p.ffn.up);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = a[i] * sigm(a[i]) * b[i];
    const Mat down = mm(a, t, F, p.ffn.down);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += down[i];
  }
  return mm(norm(x, t, H, model.final_norm()), t, H, model.unembedding());
}

ModelConfig small(int layers, int ratio, int heads, int kv_heads, bool sink) {
  ModelConfig c;
  c.n_layers = layers;
  c.hybrid_ratio = ratio;
  c.n_q_heads = heads;
  c.n_kv_heads = kv_heads;
  c.head_dim = 4;
  c.hidden = 12;
  c.ffn_hidden = 16;
  c.window = 5;
  c.block_size = 3;
  c.topk_tokens = 6;
  c.vocab = 13;
  c.sink_enabled = sink;
  return c;
}

// Gives sinks and gate biases non-default values so those paths matter.
void perturb(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = 0; i < m.num_layers(); ++i) {
    LayerParams& p = m.layer(i);
    for (auto& x : p.sink.data()) x = rng.normal();
    if (p.role == LayerRole::Sparse) {
      for (auto& x : p.window_sink.data()) x = rng.normal();
      for (auto& x : p.gate_b.data()) x = rng.normal();
    }
    for (auto& x : p.attn_norm.data()) x = 1.0 + 0.2 * rng.normal();
  }
}

std::vector<std::int32_t> tokens_for(const ModelConfig& c, std::size_t t, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> out(t);
  for (auto& x : out) x = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(c.vocab)));
  return out;
}

}  // namespace

struct OracleCase {
  int layers, ratio, heads, kv_heads;
  bool sink;
  SparseBranch mode;
};

class ModelOracle : public ::testing::TestWithParam<OracleCase> {};

TEST_P(ModelOracle, LogitsMatchPlainLoops) {
  const OracleCase oc = GetParam();
  const ModelConfig c = small(oc.layers, oc.ratio, oc.heads, oc.kv_heads, oc.sink);
  Model m(c, 3);
  perturb(m, 4);
  for (std::size_t t : {1u, 4u, 11u, 17u}) {
    const auto tokens = tokens_for(c, t, t);
    ForwardOptions o;
    o.sparse_branch = oc.mode;
    const Tensor got = m.forward(tokens, o);
    EXPECT_LT(max_abs_diff(got.data(), oracle_logits(m, tokens, oc.mode)), 1e-10) << "t=" << t;
  }
}

INSTANTIATE_TEST_SUITE_P(
    Stacks, ModelOracle,
    ::testing::Values(OracleCase{3, 0, 2, 1, true, SparseBranch::Enabled},    // plain transformer
                      OracleCase{3, 1, 2, 2, true, SparseBranch::Enabled},    // FSF
                      OracleCase{4, 2, 4, 2, true, SparseBranch::Enabled},    // FSSF, GQA 2
                      OracleCase{4, 2, 4, 1, false, SparseBranch::Enabled},   // no sinks, GQA 4
                      OracleCase{4, 2, 4, 2, true, SparseBranch::Disabled},   // window branch only
                      OracleCase{6, 2, 4, 2, true, SparseBranch::ForcedZeroGate}));

TEST(Model, ForcedZeroGateEqualsDisabled) {
  const ModelConfig c = small(4, 2, 4, 2, true);
  Model m(c, 5);
  perturb(m, 6);
  const auto tokens = tokens_for(c, 14, 7);
  ForwardOptions zero, off;
  zero.sparse_branch = SparseBranch::ForcedZeroGate;
  off.sparse_branch = SparseBranch::Disabled;
  EXPECT_EQ(max_abs_diff(m.forward(tokens, zero).data(), m.forward(tokens, off).data()), 0.0);
}

TEST(Model, SparseBranchOverOwnKvHarness) {
  const ModelConfig c = small(4, 2, 4, 2, true);
  Model m(c, 8);
  perturb(m, 9);
  const auto tokens = tokens_for(c, 13, 10);
  ForwardOptions o;
  o.sparse_reads_own_kv = true;
  EXPECT_LT(max_abs_diff(m.forward(tokens, o).data(), oracle_logits(m, tokens, SparseBranch::Enabled, true)), 1e-10);
}

TEST(Model, TraceExposesSelectionAndGates) {
  const ModelConfig c = small(4, 2, 4, 2, true);
  Model m(c, 11);
  const auto tokens = tokens_for(c, 15, 12);
  ForwardTrace trace;
  ForwardOptions o;
  o.trace = &trace;
  m.forward(tokens, o);
  ASSERT_TRUE(trace.layers[0].indices.has_value());
  trace.layers[0].indices->validate();
  EXPECT_EQ(trace.layers[1].gates.dim(1), 8u);
  for (double g : trace.layers[1].gates.data()) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
  const Tensor& q = trace.layers[1].query;
  EXPECT_EQ(q.dim(0), 15u);
  EXPECT_EQ(trace.layers[1].sparse_out.shape(), q.shape());
  EXPECT_EQ(trace.layers[2].window_out.shape(), q.shape());
}

TEST(Model, ZeroGatePreactivationsAverageTheBranches) {
  const ModelConfig c = small(3, 1, 2, 1, true);
  Model m(c, 21);
  for (auto& x : m.layer(1).gate_w.data()) x = 0.0;
  const auto tokens = tokens_for(c, 9, 22);
  ForwardTrace trace;
  ForwardOptions o;
  o.trace = &trace;
  m.forward(tokens, o);
  for (double g : trace.layers[1].gates.data()) EXPECT_EQ(g, 0.5);
}

TEST(Model, InitialisationRules) {
  const ModelConfig c = small(4, 2, 4, 2, true);
  const Model m(c, 13);
  for (std::size_t i = 0; i < m.num_layers(); ++i) {
    const LayerParams& p = m.layer(i);
    for (double x : p.sink.data()) EXPECT_EQ(x, 0.0);
    for (double x : p.attn_norm.data()) EXPECT_EQ(x, 1.0);
    if (p.role == LayerRole::Sparse) {
      for (double x : p.gate_b.data()) EXPECT_EQ(x, 0.0);
      for (double x : p.window_sink.data()) EXPECT_EQ(x, 0.0);
    }
  }
  const Model again(c, 13), other(c, 14);
  EXPECT_EQ(max_abs_diff(m.layer(1).wq.data(), again.layer(1).wq.data()), 0.0);
  EXPECT_GT(max_abs_diff(m.layer(1).wq.data(), other.layer(1).wq.data()), 0.0);
}

TEST(Model, ParameterNames) {
  const Model m(small(3, 1, 2, 1, true), 1);
  std::vector<std::string> names;
  for (const auto& [n, t] : m.named_parameters()) names.push_back(n);
  auto has = [&](const std::string& n) { return std::find(names.begin(), names.end(), n) != names.end(); };
  EXPECT_TRUE(has("layers.1.gate_w"));
  EXPECT_TRUE(has("layers.1.window_sink"));
  EXPECT_FALSE(has("layers.0.gate_w"));
  EXPECT_TRUE(has("layers.2.sink"));
  EXPECT_EQ(names.front(), "embed");
  EXPECT_EQ(names.back(), "unembed");

  const Model bare(small(3, 1, 2, 1, false), 1);
  for (const auto& [n, t] : bare.named_parameters()) EXPECT_EQ(n.find("sink"), std::string::npos);
}

TEST(Model, RejectsBadConfigs) {
  ModelConfig c = small(3, 1, 3, 2, true);
  EXPECT_THROW(Model(c, 0), ConfigError);
  c = small(3, 1, 2, 1, true);
  c.topk_tokens = 5;  // not a multiple of the block size
  EXPECT_THROW(Model(c, 0), ConfigError);
}

TEST(Model, GradientsOfTwoBlockStack) {
  const ModelConfig c = small(3, 1, 2, 1, true);
  Model m(c, 15);
  perturb(m, 16);
  const auto tokens = tokens_for(c, 9, 17);
  std::vector<std::int32_t> targets(tokens.begin() + 1, tokens.end());
  targets.push_back(-1);
  auto loss = [&] { return cross_entropy(m.forward(tokens), targets); };
  for (const auto& e : check_gradients(loss, m.named_parameters(), 1e-5, 6)) EXPECT_LT(e.rel_error, 1e-5) << e.name;
}

TEST(Serialize, RoundTripIsExact) {
  const ModelConfig c = small(4, 2, 4, 2, true);
  Model m(c, 18);
  perturb(m, 19);
  std::stringstream buf;
  save_weights(m, buf);
  const Model back = load_weights(buf);
  const auto tokens = tokens_for(c, 10, 20);
  EXPECT_EQ(max_abs_diff(m.forward(tokens).data(), back.forward(tokens).data()), 0.0);

  std::stringstream again;
  save_weights(back, again);
  std::stringstream first;
  save_weights(m, first);
  EXPECT_EQ(first.str(), again.str());
}

TEST(Serialize, RejectsCorruptContainers) {
  std::stringstream junk("not a weights file");
  EXPECT_THROW(load_weights(junk), ConfigError);

  Model m(small(3, 1, 2, 1, true), 1);
  std::stringstream buf;
  save_weights(m, buf);
  std::string s = buf.str();
  s.resize(s.size() - 8);
  std::stringstream cut(s);
  EXPECT_THROW(load_weights(cut), ConfigError);
}
