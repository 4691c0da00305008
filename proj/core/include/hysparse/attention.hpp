#pragma once

#include <cstdint>
#include <optional>

#include "hysparse/blocks.hpp"
#include "hysparse/tensor.hpp"

namespace hysparse {

struct AttnConfig {
  int head_dim = 0;
  /// Logit multiplier; 0 selects 1/sqrt(head_dim).
  double softmax_scale = 0.0;
  int block_size = 64;
  int tile_rows = 64;
  int tile_cols = 64;
  int window = 128;
  bool sink_enabled = false;

  double scale() const;
  /// Throws ConfigError. block_size must equal tile_cols.
  void validate() const;
};

struct AttnResult {
  Tensor out;
  BlockScores scores;
};

// Layout shared by all kernels: q is [tq x h x d], k and v are [tk x h_kv x d]
// with h % h_kv == 0; query head i reads kv head i / (h / h_kv). Key row j
// sits at absolute position key_offset + j and query row i at
// key_offset + tk - tq + i, so prefill passes tq == tk and a decode step
// passes the single newest query against the cached keys. Masking is causal
// everywhere. When cfg.sink_enabled, `sink` is a [h] tensor of logits that
// joins each row's softmax denominator as a key without a value.
//
// Outputs are differentiable in q, k, v and sink. Block scores carry no
// gradient.

/// Direct evaluation: materializes each head's full logit matrix.
AttnResult reference_full_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttnConfig& cfg,
                                    const std::optional<Tensor>& sink = std::nullopt);

/// Tiled online-softmax attention that also emits block max scores without
/// materializing the logit matrix. Backward recomputes tiles from the saved
/// row statistics.
AttnResult tiled_attention_with_scores(const Tensor& q, const Tensor& k, const Tensor& v,
                                       const AttnConfig& cfg,
                                       const std::optional<Tensor>& sink = std::nullopt);

/// Each query attends to the last cfg.window positions up to and including
/// itself. k/v may hold only a suffix of the history (see key_offset).
Tensor sliding_window_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                const AttnConfig& cfg,
                                const std::optional<Tensor>& sink = std::nullopt,
                                std::int64_t key_offset = 0);

/// Attention restricted to the key blocks selected for each row's group.
/// Throws SelectionError for a block starting after the row, or an empty set
/// with no sink.
Tensor block_sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const BlockIndexSet& indices, const AttnConfig& cfg,
                              const std::optional<Tensor>& sink = std::nullopt);

}  // namespace hysparse
