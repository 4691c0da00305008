#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hysparse/attention.hpp"
#include "hysparse/config.hpp"
#include "hysparse/kvcache.hpp"
#include "hysparse/tensor.hpp"

namespace hysparse {

/// How sparse layers treat their block-sparse branch.
enum class SparseBranch {
  Enabled,
  /// Branch skipped; output is the gated window branch alone.
  Disabled,
  /// Branch computed but its gate replaced by exactly 0.
  ForcedZeroGate,
};

struct FfnParams {
  Tensor norm;  // [hidden]
  Tensor gate;  // [hidden x ffn]
  Tensor up;    // [hidden x ffn]
  Tensor down;  // [ffn x hidden]
};

struct LayerParams {
  LayerRole role = LayerRole::Full;
  Tensor attn_norm;  // [hidden]
  Tensor wq;         // [hidden x h*d]
  Tensor wk;         // [hidden x h_kv*d]
  Tensor wv;         // [hidden x h_kv*d]
  Tensor wo;         // [h*d x hidden]
  /// Full layers: attention sink. Sparse layers: sink of the block-sparse branch.
  Tensor sink;  // [h]
  // Sparse layers only.
  Tensor window_sink;  // [h]
  Tensor gate_w;       // [hidden x 2h]: columns [0,h) gate the sparse branch, [h,2h) the window branch
  Tensor gate_b;       // [2h]
  FfnParams ffn;
};

/// Keys/values a full layer publishes to its block (post-RoPE).
struct SharedKv {
  Tensor keys;    // [t x h_kv x d]
  Tensor values;  // [t x h_kv x d]
};

/// Optional per-layer capture of internals, filled when passed to forward().
struct LayerTrace {
  LayerRole role = LayerRole::Full;
  std::optional<BlockScores> scores;
  std::optional<BlockIndexSet> indices;
  Tensor query;       // post-RoPE query [t x h x d]
  Tensor gates;       // sparse layers: [t x 2h] after sigmoid
  Tensor sparse_out;  // sparse layers: block-sparse branch [t x h x d]
  Tensor window_out;  // sparse layers: window branch [t x h x d]
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
};

struct ForwardOptions {
  SparseBranch sparse_branch = SparseBranch::Enabled;
  /// Test harness: the block-sparse branch attends over the sparse layer's
  /// own k', v' instead of the block's shared store. Prefill only.
  bool sparse_reads_own_kv = false;
  ForwardTrace* trace = nullptr;
};

struct FullLayerOutput {
  Tensor y;
  BlockScores scores;
  BlockIndexSet indices;
  SharedKv kv;
};

class Model;

/// Attention sublayer of a full layer: y = x + out_proj(attention(rmsnorm(x))).
/// Rows of x sit at positions arena.full_length(block) onward (0 without an
/// arena). With a non-empty arena the new keys are appended and attention
/// reads the whole store; otherwise it reads the fresh keys directly.
FullLayerOutput full_layer_forward(const Model& model, LayerId layer, const Tensor& x, KvArena* arena,
                                   LayerTrace* trace = nullptr);

/// Attention sublayer of a sparse layer: window attention over its own
/// k', v' and block-sparse attention over the block's shared keys, both from
/// the same q', fused by per-head sigmoid gates.
Tensor sparse_layer_forward(const Model& model, LayerId layer, const Tensor& x, const SharedKv& shared,
                            const BlockIndexSet& indices, KvArena* arena, const ForwardOptions& options,
                            LayerTrace* trace = nullptr);

/// SwiGLU feed-forward: down(silu(x gate) * (x up)). No residual.
Tensor ffn_forward(const FfnParams& ffn, const Tensor& x);

class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  const HybridStack& stack() const { return stack_; }
  LayerParams& layer(std::size_t i) { return layers_.at(i); }
  const LayerParams& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t num_layers() const { return layers_.size(); }

  Tensor& embedding_table() { return embed_; }
  const Tensor& embedding_table() const { return embed_; }
  Tensor& final_norm() { return final_norm_; }
  const Tensor& final_norm() const { return final_norm_; }
  Tensor& unembedding() { return unembed_; }
  const Tensor& unembedding() const { return unembed_; }

  /// Every learnable tensor with a stable dotted name, in a fixed order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;

  Tensor embed(std::span<const std::int32_t> tokens) const;
  /// Final norm and projection to vocabulary logits.
  Tensor unembed(const Tensor& state) const;

  /// Logits [t x vocab] for every position. With an arena (which must be
  /// empty) all caches are populated for later decode steps.
  Tensor forward(std::span<const std::int32_t> tokens, const ForwardOptions& options = {},
                 KvArena* arena = nullptr) const;

  /// Logits [1 x vocab] for `token` appended at position arena.tokens().
  Tensor decode_step(KvArena& arena, std::int32_t token, const ForwardOptions& options = {}) const;

  KvArena make_arena() const;

 private:
  ModelConfig cfg_;
  HybridStack stack_;
  Tensor embed_;
  std::vector<LayerParams> layers_;
  Tensor final_norm_;
  Tensor unembed_;
};

}  // namespace hysparse
