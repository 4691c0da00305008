#include "hysparse/config.hpp"

namespace hysparse {

AttnConfig ModelConfig::attention() const {
  AttnConfig a;
  a.head_dim = head_dim;
  a.block_size = block_size;
  a.tile_cols = block_size;
  a.tile_rows = tile_rows > 0 ? tile_rows : block_size;
  a.window = window;
  a.sink_enabled = sink_enabled;
  return a;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
  if (n_layers < 2) fail("n_layers must be >= 2");
  if (n_q_heads < 1 || n_kv_heads < 1 || n_q_heads % n_kv_heads != 0)
    fail("n_q_heads must be a positive multiple of n_kv_heads");
  if (head_dim < 2 || head_dim % 2 != 0) fail("head_dim must be even");
  if (hidden < 1 || ffn_hidden < 1 || vocab < 2) fail("hidden, ffn_hidden and vocab must be positive");
  if (hybrid_ratio < 0) fail("hybrid_ratio must be >= 0");
  if (window < 1 || block_size < 1) fail("window and block_size must be >= 1");
  if (topk_tokens < block_size || topk_tokens % block_size != 0)
    fail("topk_tokens must be a positive multiple of block_size");
  if (tile_rows < 0) fail("tile_rows must be >= 0");
  if (rope_base <= 0.0) fail("rope_base must be positive");
}

nlohmann::json to_json(const ModelConfig& c) {
  // nlohmann::json objects iterate keys in sorted order, which keeps dumps canonical.
  return {{"block_size", c.block_size}, {"ffn_hidden", c.ffn_hidden},   {"head_dim", c.head_dim},
          {"hidden", c.hidden},         {"hybrid_ratio", c.hybrid_ratio}, {"n_kv_heads", c.n_kv_heads},
          {"n_layers", c.n_layers},     {"n_q_heads", c.n_q_heads},     {"rope_base", c.rope_base},
          {"sink_enabled", c.sink_enabled}, {"tile_rows", c.tile_rows}, {"topk_tokens", c.topk_tokens},
          {"vocab", c.vocab},           {"window", c.window}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_q_heads = j.at("n_q_heads").get<int>();
    c.n_kv_heads = j.at("n_kv_heads").get<int>();
    c.head_dim = j.at("head_dim").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.ffn_hidden = j.at("ffn_hidden").get<int>();
    c.hybrid_ratio = j.at("hybrid_ratio").get<int>();
    c.window = j.at("window").get<int>();
    c.block_size = j.at("block_size").get<int>();
    c.topk_tokens = j.at("topk_tokens").get<int>();
    c.rope_base = j.at("rope_base").get<double>();
    c.vocab = j.at("vocab").get<int>();
    c.sink_enabled = j.at("sink_enabled").get<bool>();
    c.tile_rows = j.value("tile_rows", 0);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

const char* role_name(LayerRole role) { return role == LayerRole::Full ? "full" : "sparse"; }

int HybridStack::count(LayerRole role) const {
  int n = 0;
  for (const auto& l : layers) n += l.role == role;
  return n;
}

std::string HybridStack::pattern() const {
  std::string s;
  for (const auto& l : layers) s += l.role == LayerRole::Full ? 'F' : 'S';
  return s;
}

void HybridStack::validate() const {
  if (layers.empty()) throw ConfigError("hybrid stack: empty");
  if (layers.front().role != LayerRole::Full) throw ConfigError("hybrid stack: first layer must be full");
  if (layers.back().role != LayerRole::Full) throw ConfigError("hybrid stack: last layer must be full");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.full_layer < 0 || static_cast<std::size_t>(l.full_layer) > i)
      throw ConfigError("hybrid stack: layer " + std::to_string(i) + " references a later full layer");
    const auto& owner = layers[static_cast<std::size_t>(l.full_layer)];
    if (owner.role != LayerRole::Full || owner.block != l.block)
      throw ConfigError("hybrid stack: layer " + std::to_string(i) + " has no full layer in its block");
    if (l.role == LayerRole::Full && l.full_layer != static_cast<int>(i))
      throw ConfigError("hybrid stack: full layer " + std::to_string(i) + " must own itself");
  }
}

HybridStack build_hybrid_stack(int n_layers, int ratio) {
  if (n_layers < 2) throw ConfigError("hybrid stack: n_layers must be >= 2");
  if (ratio < 0) throw ConfigError("hybrid stack: ratio must be >= 0");
  std::vector<LayerRole> roles;
  int remaining = n_layers;
  while (remaining >= ratio + 1) {
    roles.push_back(LayerRole::Full);
    roles.insert(roles.end(), static_cast<std::size_t>(ratio), LayerRole::Sparse);
    remaining -= ratio + 1;
  }
  if (remaining > 0) {
    roles.push_back(LayerRole::Full);
    roles.insert(roles.end(), static_cast<std::size_t>(remaining - 1), LayerRole::Sparse);
  }
  roles.back() = LayerRole::Full;

  HybridStack stack;
  int block = -1;
  int owner = 0;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    if (roles[i] == LayerRole::Full) {
      ++block;
      owner = static_cast<int>(i);
    }
    stack.layers.push_back({roles[i], block, owner});
  }
  stack.num_blocks = block + 1;
  stack.validate();
  return stack;
}

HybridStack build_hybrid_stack(const ModelConfig& cfg) {
  return build_hybrid_stack(cfg.n_layers, cfg.hybrid_ratio);
}

}  // namespace hysparse
