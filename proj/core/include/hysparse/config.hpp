#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hysparse/attention.hpp"

namespace hysparse {

struct ModelConfig {
  int n_layers = 5;
  int n_q_heads = 4;
  int n_kv_heads = 2;
  int head_dim = 16;
  int hidden = 64;
  int ffn_hidden = 128;
  /// Sparse layers per full layer; 0 gives an all-full stack.
  int hybrid_ratio = 1;
  int window = 8;
  int block_size = 4;
  int topk_tokens = 8;
  double rope_base = 10000.0;
  int vocab = 32;
  bool sink_enabled = true;
  /// Query tile height of the full-attention kernel; 0 means block_size.
  int tile_rows = 0;

  int k_blocks() const { return topk_tokens / block_size; }
  int heads_per_group() const { return n_q_heads / n_kv_heads; }
  AttnConfig attention() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class LayerRole { Full, Sparse };

const char* role_name(LayerRole role);

struct LayerSpec {
  LayerRole role = LayerRole::Full;
  /// Hybrid block this layer belongs to.
  int block = 0;
  /// Index of the block's full layer (itself for full layers).
  int full_layer = 0;
};

struct HybridStack {
  std::vector<LayerSpec> layers;
  int num_blocks = 0;

  int count(LayerRole role) const;
  /// One letter per layer, e.g. "FSSF".
  std::string pattern() const;
  /// Throws ConfigError unless layer 0 and the last layer are full and every
  /// sparse layer follows its block's full layer.
  void validate() const;
};

/// Repeats [Full, Sparse x ratio] while ratio + 1 layers remain; a remainder
/// r becomes [Full] (r == 1) or [Full, Sparse x (r - 1)]; the last layer is
/// always Full.
HybridStack build_hybrid_stack(int n_layers, int ratio);
HybridStack build_hybrid_stack(const ModelConfig& cfg);

}  // namespace hysparse
