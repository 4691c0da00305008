#include "verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "hysparse/gradcheck.hpp"
#include "hysparse/ops.hpp"
#include "hysparse/runtime.hpp"
#include "hysparse/selection.hpp"

namespace hysparse::cli {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double sd = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, sd);
  return Tensor(std::move(shape), std::move(v));
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct Accum {
  CheckResult r;
  Accum(std::string suite, std::string check, double tol) {
    r.suite = std::move(suite);
    r.check = std::move(check);
    r.tolerance = tol;
  }
  void add(double err) {
    ++r.cases;
    r.max_error = std::max(r.max_error, err);
    if (!(err <= r.tolerance)) r.passed = false;
  }
  void flag(bool ok) { add(ok ? 0.0 : INFINITY); }
};

struct KernelCase {
  Tensor q, k, v;
  AttnConfig cfg;
  std::optional<Tensor> sink;
};

KernelCase random_kernel_case(Rng& rng) {
  static const int group_sizes[] = {1, 4, 8};
  const std::size_t hpg = static_cast<std::size_t>(group_sizes[rng.below(3)]);
  const std::size_t hkv = 1 + rng.below(2);
  const std::size_t t = 1 + rng.below(130);
  const std::size_t d = 2 * (1 + rng.below(4));
  KernelCase c;
  c.cfg.head_dim = static_cast<int>(d);
  c.cfg.block_size = c.cfg.tile_cols = 1 + static_cast<int>(rng.below(20));
  c.cfg.tile_rows = 1 + static_cast<int>(rng.below(20));
  c.cfg.window = 1 + static_cast<int>(rng.below(40));
  c.cfg.sink_enabled = rng.below(2) == 1;
  c.q = random_tensor(rng, {t, hkv * hpg, d});
  c.k = random_tensor(rng, {t, hkv, d});
  c.v = random_tensor(rng, {t, hkv, d});
  if (c.cfg.sink_enabled) c.sink = random_tensor(rng, {hkv * hpg});
  return c;
}

// Block maxima of the exact probability matrix, built by direct materialization.
std::vector<double> brute_block_scores(const KernelCase& c) {
  const std::size_t t = c.q.dim(0), h = c.q.dim(1), hkv = c.k.dim(1), d = c.q.dim(2);
  const std::size_t B = static_cast<std::size_t>(c.cfg.block_size), nb = ceil_div(t, B);
  const double scale = c.cfg.scale();
  std::vector<double> s(h * t * nb, 0.0);
  for (std::size_t hi = 0; hi < h; ++hi) {
    const std::size_t g = hi / (h / hkv);
    for (std::size_t r = 0; r < t; ++r) {
      std::vector<double> logit(r + 1);
      double m = c.sink ? c.sink->data()[hi] : -INFINITY;
      for (std::size_t j = 0; j <= r; ++j) {
        double dot = 0.0;
        for (std::size_t x = 0; x < d; ++x) dot += c.q.data()[(r * h + hi) * d + x] * c.k.data()[(j * hkv + g) * d + x];
        logit[j] = dot * scale;
        m = std::max(m, logit[j]);
      }
      double den = c.sink ? std::exp(c.sink->data()[hi] - m) : 0.0;
      for (double l : logit) den += std::exp(l - m);
      for (std::size_t j = 0; j <= r; ++j) {
        double& cell = s[(hi * t + r) * nb + j / B];
        cell = std::max(cell, std::exp(logit[j] - m) / den);
      }
    }
  }
  return s;
}

std::vector<CheckResult> kernels(std::uint64_t seed) {
  Rng rng = Rng(seed).fork(11);
  Accum out("kernels", "tiled O vs reference", 1e-10);
  Accum scores("kernels", "tiled S vs reference", 1e-10);
  Accum brute("kernels", "S vs materialized block max", 1e-10);
  Accum swa("kernels", "window >= t equals full", 1e-10);
  Accum sparse("kernels", "full block cover equals full", 1e-10);
  for (int i = 0; i < 60; ++i) {
    const KernelCase c = random_kernel_case(rng);
    const AttnResult ref = reference_full_attention(c.q, c.k, c.v, c.cfg, c.sink);
    const AttnResult til = tiled_attention_with_scores(c.q, c.k, c.v, c.cfg, c.sink);
    out.add(max_abs_diff(ref.out.data(), til.out.data()));
    scores.add(max_abs_diff(ref.scores.values.data(), til.scores.values.data()));
    brute.add(max_abs_diff(brute_block_scores(c), til.scores.values.data()));

    AttnConfig wide = c.cfg;
    wide.window = static_cast<int>(c.q.dim(0)) + static_cast<int>(rng.below(5));
    swa.add(max_abs_diff(sliding_window_attention(c.q, c.k, c.v, wide, c.sink).data(), ref.out.data()));

    const std::size_t t = c.q.dim(0), nb = ceil_div(t, static_cast<std::size_t>(c.cfg.block_size));
    BlockIndexSet all(t, c.k.dim(1), static_cast<int>(nb), c.cfg.block_size, 0);
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t g = 0; g < c.k.dim(1); ++g)
        for (std::size_t j = 0; j <= r / static_cast<std::size_t>(c.cfg.block_size); ++j)
          all.mutable_at(r, g).push_back(static_cast<std::int32_t>(j));
    sparse.add(max_abs_diff(block_sparse_attention(c.q, c.k, c.v, all, c.cfg, c.sink).data(), ref.out.data()));
  }
  return {out.r, scores.r, brute.r, swa.r, sparse.r};
}

std::vector<CheckResult> selection(std::uint64_t seed) {
  Rng rng = Rng(seed).fork(12);
  Accum topk("selection", "top-k vs sort oracle", 0.0);
  Accum group("selection", "group max vs brute force", 0.0);
  Accum json("selection", "index set JSON round trip", 0.0);
  for (int i = 0; i < 300; ++i) {
    const std::size_t groups = 1 + rng.below(3), rows = 1 + rng.below(30);
    const int B = 1 + static_cast<int>(rng.below(6)), k = 1 + static_cast<int>(rng.below(5));
    const std::int64_t first = static_cast<std::int64_t>(rng.below(20));
    const std::size_t nb = ceil_div(static_cast<std::size_t>(first) + rows, static_cast<std::size_t>(B));
    BlockScores s;
    s.block_size = B;
    s.first_position = first;
    s.values = Tensor({groups, rows, nb});
    for (auto& x : s.values.data()) x = static_cast<double>(rng.below(5)) / 4.0;  // coarse levels force ties
    const BlockIndexSet got = topk_blocks(s, k);
    bool ok = true;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t avail = (static_cast<std::size_t>(first) + r) / static_cast<std::size_t>(B) + 1;
        std::vector<std::int32_t> order(avail);
        for (std::size_t j = 0; j < avail; ++j) order[j] = static_cast<std::int32_t>(j);
        std::stable_sort(order.begin(), order.end(),
                         [&](std::int32_t a, std::int32_t b) { return s.at(g, r, a) > s.at(g, r, b); });
        order.resize(std::min<std::size_t>(avail, static_cast<std::size_t>(k)));
        std::sort(order.begin(), order.end());
        const auto sel = got.at(r, g);
        ok = ok && std::equal(order.begin(), order.end(), sel.begin(), sel.end());
      }
    topk.flag(ok);
    json.flag(index_set_from_json(to_json(got)) == got);

    const std::size_t hpg = 1 + rng.below(4);
    BlockScores heads;
    heads.block_size = B;
    heads.values = random_tensor(rng, {groups * hpg, rows, nb});
    const BlockScores agg = group_aggregate(heads, hpg);
    double err = 0.0;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < nb; ++j) {
          double m = -INFINITY;
          for (std::size_t x = 0; x < hpg; ++x) m = std::max(m, heads.at(g * hpg + x, r, j));
          err = std::max(err, std::abs(m - agg.at(g, r, j)));
        }
    group.add(err);
  }
  return {topk.r, group.r, json.r};
}

std::vector<CheckResult> cache(std::uint64_t seed) {
  Rng rng = Rng(seed).fork(13);
  Accum gather("cache", "gather vs index oracle", 0.0);
  Accum ring("cache", "ring buffer vs slice oracle", 0.0);
  Accum bytes("cache", "measured bytes equal analytic", 0.0);
  Accum owner("cache", "cross-owner writes rejected", 0.0);
  for (int i = 0; i < 40; ++i) {
    const int n_layers = 2 + static_cast<int>(rng.below(8)), ratio = static_cast<int>(rng.below(4));
    const HybridStack stack = build_hybrid_stack(n_layers, ratio);
    const std::size_t hkv = 1 + rng.below(2), d = 2;
    const int w = 1 + static_cast<int>(rng.below(10));
    KvArena arena(stack, hkv, d, w);
    std::vector<std::vector<double>> history(stack.layers.size());
    const int appends = 1 + static_cast<int>(rng.below(6));
    for (int a = 0; a < appends; ++a) {
      const std::size_t n = 1 + rng.below(7);
      for (std::size_t l = 0; l < stack.layers.size(); ++l) {
        std::vector<double> rows(n * hkv * d);
        for (auto& x : rows) x = rng.normal();
        if (stack.layers[l].role == LayerRole::Full)
          arena.append_full(static_cast<LayerId>(l), stack.layers[l].block, rows, rows);
        else
          arena.window_append(static_cast<LayerId>(l), static_cast<LayerId>(l), rows, rows);
        history[l].insert(history[l].end(), rows.begin(), rows.end());
      }
    }
    const std::size_t width = hkv * d;
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
      const auto& hist = history[l];
      const std::size_t total = hist.size() / width;
      if (stack.layers[l].role == LayerRole::Sparse) {
        const std::size_t keep = std::min<std::size_t>(total, static_cast<std::size_t>(w));
        const WindowContents wc = arena.window_contents(static_cast<LayerId>(l));
        const std::span<const double> tail(hist.data() + (total - keep) * width, keep * width);
        ring.flag(max_abs_diff(wc.keys.data(), tail) == 0.0 &&
                  wc.first_position == static_cast<std::int64_t>(total - keep));
        continue;
      }
      const int B = 1 + static_cast<int>(rng.below(5));
      const std::size_t nb = ceil_div(total, static_cast<std::size_t>(B));
      std::vector<std::int32_t> pick;
      for (std::size_t j = 0; j < nb; ++j)
        if (rng.below(2)) pick.push_back(static_cast<std::int32_t>(j));
      const GatheredKv g = arena.handle(stack.layers[l].block).gather_blocks(pick, B);
      std::vector<std::int64_t> expect;
      std::vector<double> rows;
      for (std::int32_t j : pick)
        for (std::size_t p = static_cast<std::size_t>(j) * B; p < std::min(total, (j + 1) * static_cast<std::size_t>(B)); ++p) {
          expect.push_back(static_cast<std::int64_t>(p));
          rows.insert(rows.end(), hist.begin() + static_cast<std::ptrdiff_t>(p * width),
                      hist.begin() + static_cast<std::ptrdiff_t>((p + 1) * width));
        }
      gather.flag(g.positions == expect && max_abs_diff(g.keys.data(), rows) == 0.0);
    }
    const MemoryReport m = arena.measured_report();
    const MemoryReport a = memory_report(stack, static_cast<std::int64_t>(hkv), static_cast<std::int64_t>(d), w,
                                         static_cast<std::int64_t>(arena.tokens()), 8);
    bytes.add(static_cast<double>(std::abs(m.total_bytes - a.total_bytes) + std::abs(m.total_bytes - arena.resident_bytes())));

    bool rejected = true;
    const std::vector<double> row(width, 0.0);
    for (std::size_t l = 0; l < stack.layers.size(); ++l) {
      const auto caller = static_cast<LayerId>(l);
      for (int blk = 0; blk < stack.num_blocks; ++blk) {
        if (stack.layers[l].role == LayerRole::Full && stack.layers[l].block == blk) continue;
        try {
          arena.append_full(caller, blk, row, row);
          rejected = false;
        } catch (const OwnershipError&) {
        }
      }
      for (std::size_t target = 0; target < stack.layers.size(); ++target) {
        if (target == l && stack.layers[l].role == LayerRole::Sparse) continue;
        try {
          arena.window_append(caller, static_cast<LayerId>(target), row, row);
          rejected = false;
        } catch (const OwnershipError&) {
        }
      }
    }
    owner.flag(rejected);
  }
  return {gather.r, ring.r, bytes.r, owner.r};
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 4;
  c.hybrid_ratio = 2;
  c.n_q_heads = 4;
  c.n_kv_heads = 2;
  c.head_dim = 4;
  c.hidden = 8;
  c.ffn_hidden = 12;
  c.window = 5;
  c.block_size = 3;
  c.topk_tokens = 6;
  c.vocab = 11;
  return c;
}

std::vector<CheckResult> parity(std::uint64_t seed) {
  Rng rng = Rng(seed).fork(14);
  std::vector<CheckResult> out;
  for (Regime regime : {Regime::FullAttn, Regime::HybridSWA, Regime::HySparse}) {
    Accum logits("parity", std::string(regime_name(regime)) + ": decode vs prefill logits", 1e-10);
    Accum select("parity", std::string(regime_name(regime)) + ": decode vs prefill selection", 0.0);
    for (int trial = 0; trial < 3; ++trial) {
      const RegimeSpec spec{regime, tiny_config()};
      const Model model(spec.model_config(), rng.next_u64());
      const std::size_t t = 20 + rng.below(30);
      std::vector<std::int32_t> tokens(t);
      for (auto& x : tokens) x = static_cast<std::int32_t>(rng.below(11));
      NoGradGuard guard;
      ForwardTrace pre_trace;
      ForwardOptions opts = spec.forward_options();
      opts.trace = &pre_trace;
      const PrefillResult pre = prefill(model, tokens, opts);
      KvArena arena = model.make_arena();
      const std::size_t vocab = 11;
      double err = 0.0;
      bool same = true;
      for (std::size_t i = 0; i < t; ++i) {
        ForwardTrace step_trace;
        opts.trace = &step_trace;
        const Tensor l = decode_step(model, arena, tokens[i], opts);
        err = std::max(err, max_abs_diff(l.data(), pre.logits.data().subspan(i * vocab, vocab)));
        for (std::size_t layer = 0; layer < model.num_layers(); ++layer) {
          const auto& a = pre_trace.layers[layer].indices;
          const auto& b = step_trace.layers[layer].indices;
          if (!a) continue;
          for (std::size_t g = 0; g < a->groups(); ++g) {
            const auto x = a->at(i, g), y = b->at(0, g);
            same = same && std::equal(x.begin(), x.end(), y.begin(), y.end());
          }
        }
      }
      logits.add(err);
      select.flag(same);
    }
    out.push_back(logits.r);
    out.push_back(select.r);
  }
  return out;
}

std::vector<CheckResult> grads(std::uint64_t seed) {
  Rng rng = Rng(seed).fork(15);
  const Model model(tiny_config(), rng.next_u64());
  // Perturb the zero-initialized sinks and gate biases so their gradients are generic.
  for (auto& [name, t] : model.named_parameters())
    if (name.find("sink") != std::string::npos || name.find("gate_b") != std::string::npos)
      for (auto& x : t.data()) x = rng.normal(0.0, 0.5);
  std::vector<std::int32_t> tokens(14);
  for (auto& x : tokens) x = static_cast<std::int32_t>(rng.below(11));
  const Tensor weights = random_tensor(rng, {tokens.size(), 11});
  auto loss = [&] { return sum(mul(model.forward(tokens), weights)); };
  std::map<std::string, Accum> classes;
  for (const auto& e : check_gradients(loss, model.named_parameters())) {
    const std::string cls = e.name.substr(e.name.rfind('.') + 1);
    auto it = classes.try_emplace(cls, "grads", "finite differences: " + cls, 1e-5).first;
    it->second.add(e.rel_error);
  }
  std::vector<CheckResult> out;
  for (auto& [k, a] : classes) out.push_back(a.r);
  return out;
}

using Suite = std::function<std::vector<CheckResult>(std::uint64_t)>;

const std::vector<std::pair<std::string, Suite>>& suites() {
  static const std::vector<std::pair<std::string, Suite>> s = {
      {"kernels", kernels}, {"selection", selection}, {"cache", cache}, {"parity", parity}, {"grads", grads}};
  return s;
}

}  // namespace

const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : suites()) n.push_back(name);
    n.push_back("all");
    return n;
  }();
  return names;
}

std::vector<CheckResult> run_suite(const std::string& name, std::uint64_t seed) {
  std::vector<CheckResult> out;
  bool found = false;
  for (const auto& [n, fn] : suites()) {
    if (name != "all" && name != n) continue;
    found = true;
    try {
      auto r = fn(seed);
      out.insert(out.end(), r.begin(), r.end());
    } catch (const std::exception& e) {
      CheckResult r;
      r.suite = n;
      r.check = "suite raised";
      r.passed = false;
      r.note = e.what();
      out.push_back(r);
    }
  }
  if (!found) throw std::invalid_argument("unknown suite '" + name + "'");
  return out;
}

std::string render_table(const std::vector<CheckResult>& results) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s %-44s %6s %12s %10s  %s\n", "suite", "check", "cases", "max_error", "tol",
                "status");
  os << line;
  int failed = 0;
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-10s %-44s %6d %12.3e %10.1e  %s%s%s\n", r.suite.c_str(), r.check.c_str(),
                  r.cases, r.max_error, r.tolerance, r.passed ? "PASS" : "FAIL", r.note.empty() ? "" : "  ",
                  r.note.c_str());
    os << line;
    failed += !r.passed;
  }
  os << results.size() - static_cast<std::size_t>(failed) << " passed, " << failed << " failed\n";
  return os.str();
}

}  // namespace hysparse::cli
