#include "hysparse/model.hpp"

#include <cmath>
#include <numeric>

#include "hysparse/ops.hpp"
#include "hysparse/rng.hpp"
#include "hysparse/selection.hpp"

namespace hysparse {

namespace {

constexpr double kNormEps = 1e-12;

std::vector<std::int64_t> positions_from(std::int64_t start, std::size_t n) {
  std::vector<std::int64_t> p(n);
  std::iota(p.begin(), p.end(), start);
  return p;
}

Tensor normal_init(Rng rng, Shape shape, double stddev) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad();
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape), value);
  t.set_requires_grad();
  return t;
}

// Heads [first, first + count) of a [t x h x d] tensor, no gradient.
Tensor head_slice(const Tensor& x, std::size_t first, std::size_t count) {
  const std::size_t t = x.dim(0), h = x.dim(1), d = x.dim(2);
  std::vector<double> out(t * count * d);
  const auto v = x.data();
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t c = 0; c < d; ++c) out[(r * count + i) * d + c] = v[(r * h + first + i) * d + c];
  return Tensor({t, count, d}, std::move(out));
}

std::optional<Tensor> sink_or_none(const ModelConfig& cfg, const Tensor& sink) {
  if (!cfg.sink_enabled) return std::nullopt;
  return sink;
}

// Block-sparse branch for one decode row, reading the shared store through
// the arena's gather path rather than the prefill kernel.
Tensor sparse_branch_from_arena(const ModelConfig& cfg, const KvArena& arena, LayerId layer, const Tensor& q,
                                const BlockIndexSet& indices, const std::optional<Tensor>& sink) {
  if (q.dim(0) != 1) throw ShapeError("sparse layer: cached decode handles one token at a time");
  const std::size_t h = static_cast<std::size_t>(cfg.n_q_heads);
  const std::size_t hpg = static_cast<std::size_t>(cfg.heads_per_group());
  const std::size_t d = static_cast<std::size_t>(cfg.head_dim);
  const KvHandle handle = arena.shared_for(layer);
  AttnConfig acfg = cfg.attention();
  std::vector<double> out(h * d);
  for (std::size_t g = 0; g < static_cast<std::size_t>(cfg.n_kv_heads); ++g) {
    const GatheredKv kv = handle.gather_blocks(indices.at(0, g), cfg.block_size);
    if (kv.positions.empty() && !sink) throw SelectionError("sparse layer: empty selection without sink");
    if (!kv.positions.empty() && kv.positions.back() > indices.first_position())
      throw SelectionError("sparse layer: gathered keys beyond the query position");
    const Tensor kg = head_slice(kv.keys, g, 1);
    const Tensor vg = head_slice(kv.values, g, 1);
    const Tensor qg = head_slice(q, g * hpg, hpg);
    std::optional<Tensor> sg;
    if (sink) sg = Tensor({hpg}, std::vector<double>(sink->data().begin() + static_cast<std::ptrdiff_t>(g * hpg),
                                                     sink->data().begin() + static_cast<std::ptrdiff_t>((g + 1) * hpg)));
    acfg.tile_cols = acfg.block_size;
    const Tensor og = reference_full_attention(qg, kg, vg, acfg, sg).out;
    for (std::size_t i = 0; i < hpg; ++i)
      for (std::size_t c = 0; c < d; ++c) out[(g * hpg + i) * d + c] = og.data()[i * d + c];
  }
  return Tensor({1, h, d}, std::move(out));
}

}  // namespace

Tensor ffn_forward(const FfnParams& ffn, const Tensor& x) {
  return matmul(mul(silu(matmul(x, ffn.gate)), matmul(x, ffn.up)), ffn.down);
}

FullLayerOutput full_layer_forward(const Model& model, LayerId layer, const Tensor& x, KvArena* arena,
                                   LayerTrace* trace) {
  const ModelConfig& cfg = model.config();
  const LayerSpec& spec = model.stack().layers.at(static_cast<std::size_t>(layer));
  if (spec.role != LayerRole::Full) throw ConfigError("full_layer_forward: layer is not full");
  const LayerParams& p = model.layer(static_cast<std::size_t>(layer));
  const std::size_t t = x.dim(0);
  const std::size_t h = static_cast<std::size_t>(cfg.n_q_heads);
  const std::size_t hkv = static_cast<std::size_t>(cfg.n_kv_heads);
  const std::size_t d = static_cast<std::size_t>(cfg.head_dim);
  const std::int64_t p0 = arena ? static_cast<std::int64_t>(arena->full_length(spec.block)) : 0;
  const auto pos = positions_from(p0, t);

  const Tensor xn = rmsnorm(x, p.attn_norm, kNormEps);
  const Tensor q = apply_rope(reshape(matmul(xn, p.wq), {t, h, d}), pos, cfg.rope_base);
  const Tensor k = apply_rope(reshape(matmul(xn, p.wk), {t, hkv, d}), pos, cfg.rope_base);
  const Tensor v = reshape(matmul(xn, p.wv), {t, hkv, d});

  SharedKv kv{k, v};
  if (arena) {
    const KvHandle handle = arena->append_full(layer, spec.block, k.data(), v.data());
    if (p0 > 0) kv = {handle.keys(), handle.values()};
  }
  AttnResult attn = tiled_attention_with_scores(q, kv.keys, kv.values, cfg.attention(), sink_or_none(cfg, p.sink));
  Tensor y = add(x, matmul(reshape(attn.out, {t, h * d}), p.wo));

  BlockIndexSet indices =
      topk_blocks(group_aggregate(attn.scores, static_cast<std::size_t>(cfg.heads_per_group())), cfg.k_blocks());
  if (trace) {
    trace->role = LayerRole::Full;
    trace->scores = attn.scores;
    trace->indices = indices;
    trace->query = q;
  }
  return {std::move(y), std::move(attn.scores), std::move(indices), std::move(kv)};
}

Tensor sparse_layer_forward(const Model& model, LayerId layer, const Tensor& x, const SharedKv& shared,
                            const BlockIndexSet& indices, KvArena* arena, const ForwardOptions& options,
                            LayerTrace* trace) {
  const ModelConfig& cfg = model.config();
  const LayerSpec& spec = model.stack().layers.at(static_cast<std::size_t>(layer));
  if (spec.role != LayerRole::Sparse) throw ConfigError("sparse_layer_forward: layer is not sparse");
  const LayerParams& p = model.layer(static_cast<std::size_t>(layer));
  const std::size_t t = x.dim(0);
  const std::size_t h = static_cast<std::size_t>(cfg.n_q_heads);
  const std::size_t hkv = static_cast<std::size_t>(cfg.n_kv_heads);
  const std::size_t d = static_cast<std::size_t>(cfg.head_dim);
  const AttnConfig acfg = cfg.attention();
  const std::int64_t p0 = arena ? arena->window_total(layer) : 0;
  const auto pos = positions_from(p0, t);

  const Tensor xn = rmsnorm(x, p.attn_norm, kNormEps);
  const Tensor q = apply_rope(reshape(matmul(xn, p.wq), {t, h, d}), pos, cfg.rope_base);
  const Tensor k = apply_rope(reshape(matmul(xn, p.wk), {t, hkv, d}), pos, cfg.rope_base);
  const Tensor v = reshape(matmul(xn, p.wv), {t, hkv, d});
  if (arena) arena->window_append(layer, layer, k.data(), v.data());

  Tensor window_out;
  if (arena && p0 > 0) {
    const WindowContents wc = arena->window_contents(layer);
    window_out = sliding_window_attention(q, wc.keys, wc.values, acfg, sink_or_none(cfg, p.window_sink),
                                          wc.first_position);
  } else {
    window_out = sliding_window_attention(q, k, v, acfg, sink_or_none(cfg, p.window_sink));
  }

  Tensor sparse_out;
  if (options.sparse_branch != SparseBranch::Disabled) {
    if (options.sparse_reads_own_kv) {
      if (p0 > 0) throw ConfigError("sparse_reads_own_kv is a prefill-only harness mode");
      sparse_out = block_sparse_attention(q, k, v, indices, acfg, sink_or_none(cfg, p.sink));
    } else if (arena && p0 > 0) {
      sparse_out = sparse_branch_from_arena(cfg, *arena, layer, q, indices, sink_or_none(cfg, p.sink));
    } else {
      if (!shared.keys.defined()) throw ConfigError("sparse layer: no shared KV from the block's full layer");
      sparse_out = block_sparse_attention(q, shared.keys, shared.values, indices, acfg, sink_or_none(cfg, p.sink));
    }
  }

  const Tensor gates = sigmoid(add_row_bias(matmul(xn, p.gate_w), p.gate_b));
  const Tensor window_gate = columns(gates, h, 2 * h);
  Tensor mixed;
  switch (options.sparse_branch) {
    case SparseBranch::Enabled:
      mixed = add(scale_heads(sparse_out, columns(gates, 0, h)), scale_heads(window_out, window_gate));
      break;
    case SparseBranch::ForcedZeroGate:
      mixed = add(scale_heads(sparse_out, Tensor::zeros({t, h})), scale_heads(window_out, window_gate));
      break;
    case SparseBranch::Disabled:
      mixed = scale_heads(window_out, window_gate);
      break;
  }
  if (trace) {
    trace->role = LayerRole::Sparse;
    trace->query = q;
    trace->gates = gates;
    trace->sparse_out = sparse_out;
    trace->window_out = window_out;
  }
  return add(x, matmul(reshape(mixed, {t, h * d}), p.wo));
}

Model::Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  stack_ = build_hybrid_stack(cfg_);
  const std::size_t hidden = static_cast<std::size_t>(cfg_.hidden);
  const std::size_t ffn = static_cast<std::size_t>(cfg_.ffn_hidden);
  const std::size_t h = static_cast<std::size_t>(cfg_.n_q_heads);
  const std::size_t hkv = static_cast<std::size_t>(cfg_.n_kv_heads);
  const std::size_t d = static_cast<std::size_t>(cfg_.head_dim);
  const Rng root(seed);
  std::uint64_t stream = 0;
  auto weight = [&](std::size_t fan_in, std::size_t fan_out) {
    return normal_init(root.fork(stream++), {fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  };

  embed_ = normal_init(root.fork(stream++), {static_cast<std::size_t>(cfg_.vocab), hidden}, 1.0);
  for (const auto& spec : stack_.layers) {
    LayerParams p;
    p.role = spec.role;
    p.attn_norm = filled({hidden}, 1.0);
    p.wq = weight(hidden, h * d);
    p.wk = weight(hidden, hkv * d);
    p.wv = weight(hidden, hkv * d);
    p.wo = weight(h * d, hidden);
    p.sink = filled({h}, 0.0);
    if (spec.role == LayerRole::Sparse) {
      p.window_sink = filled({h}, 0.0);
      p.gate_w = weight(hidden, 2 * h);
      p.gate_b = filled({2 * h}, 0.0);
    }
    p.ffn.norm = filled({hidden}, 1.0);
    p.ffn.gate = weight(hidden, ffn);
    p.ffn.up = weight(hidden, ffn);
    p.ffn.down = weight(ffn, hidden);
    layers_.push_back(std::move(p));
  }
  final_norm_ = filled({hidden}, 1.0);
  unembed_ = weight(hidden, static_cast<std::size_t>(cfg_.vocab));
}

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed", embed_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& p = layers_[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.emplace_back(pre + "attn_norm", p.attn_norm);
    out.emplace_back(pre + "wq", p.wq);
    out.emplace_back(pre + "wk", p.wk);
    out.emplace_back(pre + "wv", p.wv);
    out.emplace_back(pre + "wo", p.wo);
    if (cfg_.sink_enabled) out.emplace_back(pre + "sink", p.sink);
    if (p.role == LayerRole::Sparse) {
      if (cfg_.sink_enabled) out.emplace_back(pre + "window_sink", p.window_sink);
      out.emplace_back(pre + "gate_w", p.gate_w);
      out.emplace_back(pre + "gate_b", p.gate_b);
    }
    out.emplace_back(pre + "ffn.norm", p.ffn.norm);
    out.emplace_back(pre + "ffn.gate", p.ffn.gate);
    out.emplace_back(pre + "ffn.up", p.ffn.up);
    out.emplace_back(pre + "ffn.down", p.ffn.down);
  }
  out.emplace_back("final_norm", final_norm_);
  out.emplace_back("unembed", unembed_);
  return out;
}

Tensor Model::embed(std::span<const std::int32_t> tokens) const { return embedding(embed_, tokens); }

Tensor Model::unembed(const Tensor& state) const {
  return matmul(rmsnorm(state, final_norm_, kNormEps), unembed_);
}

namespace {

Tensor run_stack(const Model& model, std::span<const std::int32_t> tokens, const ForwardOptions& options,
                 KvArena* arena) {
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  Tensor x = model.embed(tokens);
  SharedKv shared;
  BlockIndexSet indices;
  if (options.trace) options.trace->layers.assign(model.num_layers(), LayerTrace{});
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const LayerId id = static_cast<LayerId>(i);
    LayerTrace* trace = options.trace ? &options.trace->layers[i] : nullptr;
    if (model.stack().layers[i].role == LayerRole::Full) {
      FullLayerOutput out = full_layer_forward(model, id, x, arena, trace);
      x = std::move(out.y);
      shared = std::move(out.kv);
      indices = std::move(out.indices);
    } else {
      x = sparse_layer_forward(model, id, x, shared, indices, arena, options, trace);
    }
    const auto& ffn = model.layer(i).ffn;
    x = add(x, ffn_forward(ffn, rmsnorm(x, ffn.norm, kNormEps)));
  }
  return model.unembed(x);
}

}  // namespace

Tensor Model::forward(std::span<const std::int32_t> tokens, const ForwardOptions& options, KvArena* arena) const {
  if (arena && arena->tokens() != 0) throw ConfigError("forward: prefill needs an empty arena");
  return run_stack(*this, tokens, options, arena);
}

Tensor Model::decode_step(KvArena& arena, std::int32_t token, const ForwardOptions& options) const {
  const std::int32_t one[1] = {token};
  return run_stack(*this, one, options, &arena);
}

KvArena Model::make_arena() const {
  return KvArena(stack_, static_cast<std::size_t>(cfg_.n_kv_heads), static_cast<std::size_t>(cfg_.head_dim),
                 cfg_.window);
}

}  // namespace hysparse
