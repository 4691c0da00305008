#include "hysparse/kvcache.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "hysparse/blocks.hpp"

namespace hysparse {

KvArena::KvArena(HybridStack stack, std::size_t n_kv_heads, std::size_t head_dim, int window)
    : stack_(std::move(stack)), n_kv_heads_(n_kv_heads), head_dim_(head_dim), window_(window) {
  stack_.validate();
  if (n_kv_heads_ == 0 || head_dim_ == 0 || window_ < 1) throw ConfigError("KvArena: bad geometry");
  stores_.resize(static_cast<std::size_t>(stack_.num_blocks));
  rings_.resize(stack_.layers.size());
  for (std::size_t i = 0; i < stack_.layers.size(); ++i) {
    const auto& l = stack_.layers[i];
    if (l.role == LayerRole::Full) {
      stores_[static_cast<std::size_t>(l.block)].owner = static_cast<LayerId>(i);
    } else {
      rings_[i].owner = static_cast<LayerId>(i);
    }
  }
}

KvHandle KvArena::append_full(LayerId caller, int block, std::span<const double> keys,
                              std::span<const double> values) {
  if (block < 0 || static_cast<std::size_t>(block) >= stores_.size())
    throw OwnershipError("append_full: no block " + std::to_string(block));
  Store& s = stores_[static_cast<std::size_t>(block)];
  if (caller != s.owner)
    throw OwnershipError("append_full: layer " + std::to_string(caller) + " does not own block " +
                         std::to_string(block) + " (owner is layer " + std::to_string(s.owner) + ")");
  if (keys.size() != values.size() || keys.size() % row_width() != 0)
    throw ShapeError("append_full: rows must be [n x h_kv x d]");
  s.keys.insert(s.keys.end(), keys.begin(), keys.end());
  s.values.insert(s.values.end(), values.begin(), values.end());
  return KvHandle(this, block);
}

void KvArena::window_append(LayerId caller, LayerId layer, std::span<const double> keys,
                            std::span<const double> values) {
  if (layer < 0 || static_cast<std::size_t>(layer) >= rings_.size() ||
      rings_[static_cast<std::size_t>(layer)].owner < 0)
    throw OwnershipError("window_append: layer " + std::to_string(layer) + " has no window cache");
  Ring& r = rings_[static_cast<std::size_t>(layer)];
  if (caller != r.owner)
    throw OwnershipError("window_append: layer " + std::to_string(caller) + " may not write layer " +
                         std::to_string(layer) + "'s window cache");
  const std::size_t w = row_width();
  if (keys.size() != values.size() || keys.size() % w != 0)
    throw ShapeError("window_append: rows must be [n x h_kv x d]");
  const std::size_t cap = static_cast<std::size_t>(window_);
  for (std::size_t row = 0; row < keys.size() / w; ++row) {
    const auto k = keys.subspan(row * w, w);
    const auto v = values.subspan(row * w, w);
    if (r.keys.size() < cap * w) {
      r.keys.insert(r.keys.end(), k.begin(), k.end());
      r.values.insert(r.values.end(), v.begin(), v.end());
    } else {
      std::copy(k.begin(), k.end(), r.keys.begin() + static_cast<std::ptrdiff_t>(r.next * w));
      std::copy(v.begin(), v.end(), r.values.begin() + static_cast<std::ptrdiff_t>(r.next * w));
      r.next = (r.next + 1) % cap;
    }
    ++r.total;
  }
}

KvHandle KvArena::handle(int block) const {
  if (block < 0 || static_cast<std::size_t>(block) >= stores_.size())
    throw OwnershipError("handle: no block " + std::to_string(block));
  return KvHandle(this, block);
}

KvHandle KvArena::shared_for(LayerId sparse_layer) const {
  if (sparse_layer < 0 || static_cast<std::size_t>(sparse_layer) >= stack_.layers.size() ||
      stack_.layers[static_cast<std::size_t>(sparse_layer)].role != LayerRole::Sparse)
    throw OwnershipError("shared_for: layer " + std::to_string(sparse_layer) + " is not a sparse layer");
  return handle(stack_.layers[static_cast<std::size_t>(sparse_layer)].block);
}

const KvArena::Ring& KvArena::ring(LayerId layer) const {
  if (layer < 0 || static_cast<std::size_t>(layer) >= rings_.size() ||
      rings_[static_cast<std::size_t>(layer)].owner < 0)
    throw OwnershipError("layer " + std::to_string(layer) + " has no window cache");
  return rings_[static_cast<std::size_t>(layer)];
}

WindowContents KvArena::window_contents(LayerId layer) const {
  const Ring& r = ring(layer);
  const std::size_t w = row_width();
  const std::size_t n = r.keys.size() / w;
  const std::size_t start = n == static_cast<std::size_t>(window_) ? r.next : 0;
  std::vector<double> k(n * w), v(n * w);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t slot = (start + i) % n;
    std::copy_n(r.keys.begin() + static_cast<std::ptrdiff_t>(slot * w), w, k.begin() + static_cast<std::ptrdiff_t>(i * w));
    std::copy_n(r.values.begin() + static_cast<std::ptrdiff_t>(slot * w), w, v.begin() + static_cast<std::ptrdiff_t>(i * w));
  }
  WindowContents out;
  out.keys = Tensor({n, n_kv_heads_, head_dim_}, std::move(k));
  out.values = Tensor({n, n_kv_heads_, head_dim_}, std::move(v));
  out.first_position = r.total - static_cast<std::int64_t>(n);
  return out;
}

std::size_t KvArena::full_length(int block) const {
  return stores_.at(static_cast<std::size_t>(block)).keys.size() / row_width();
}

std::size_t KvArena::window_length(LayerId layer) const { return ring(layer).keys.size() / row_width(); }

std::int64_t KvArena::window_total(LayerId layer) const { return ring(layer).total; }

std::int64_t KvArena::resident_bytes() const {
  std::int64_t bytes = 0;
  for (const auto& s : stores_) bytes += static_cast<std::int64_t>((s.keys.size() + s.values.size()) * sizeof(double));
  for (const auto& r : rings_) bytes += static_cast<std::int64_t>((r.keys.size() + r.values.size()) * sizeof(double));
  return bytes;
}

MemoryReport KvArena::measured_report() const {
  MemoryReport rep;
  rep.element_bytes = static_cast<int>(sizeof(double));
  rep.context_len = static_cast<std::int64_t>(tokens());
  const std::int64_t per_token = static_cast<std::int64_t>(2 * row_width() * sizeof(double));
  for (std::size_t i = 0; i < stack_.layers.size(); ++i) {
    const auto& l = stack_.layers[i];
    MemoryEntry e;
    e.layer = static_cast<int>(i);
    e.role = l.role;
    if (l.role == LayerRole::Full) {
      const auto& s = stores_[static_cast<std::size_t>(l.block)];
      e.cached_tokens = static_cast<std::int64_t>(s.keys.size() / row_width());
      e.bytes = static_cast<std::int64_t>((s.keys.size() + s.values.size()) * sizeof(double));
    } else {
      const auto& r = rings_[i];
      e.cached_tokens = static_cast<std::int64_t>(r.keys.size() / row_width());
      e.bytes = static_cast<std::int64_t>((r.keys.size() + r.values.size()) * sizeof(double));
    }
    rep.total_bytes += e.bytes;
    rep.entries.push_back(e);
  }
  rep.baseline_bytes = static_cast<std::int64_t>(stack_.layers.size()) * rep.context_len * per_token;
  rep.reduction_ratio = rep.total_bytes > 0 ? static_cast<double>(rep.baseline_bytes) / static_cast<double>(rep.total_bytes) : 1.0;
  return rep;
}

std::size_t KvHandle::length() const { return arena_->full_length(block_); }

Tensor KvHandle::keys() const {
  const auto& s = arena_->stores_[static_cast<std::size_t>(block_)];
  return Tensor({length(), arena_->n_kv_heads_, arena_->head_dim_}, s.keys);
}

Tensor KvHandle::values() const {
  const auto& s = arena_->stores_[static_cast<std::size_t>(block_)];
  return Tensor({length(), arena_->n_kv_heads_, arena_->head_dim_}, s.values);
}

GatheredKv KvHandle::gather_blocks(std::span<const std::int32_t> blocks, int block_size) const {
  if (block_size < 1) throw ConfigError("gather_blocks: block_size must be >= 1");
  const auto& s = arena_->stores_[static_cast<std::size_t>(block_)];
  const std::size_t w = arena_->row_width();
  const std::size_t t = length();
  const std::size_t nb = ceil_div(t, static_cast<std::size_t>(block_size));
  GatheredKv out;
  std::vector<double> k, v;
  std::int64_t prev = -1;
  for (std::int32_t b : blocks) {
    if (b < 0 || static_cast<std::size_t>(b) >= nb)
      throw SelectionError("gather_blocks: block " + std::to_string(b) + " outside [0, " + std::to_string(nb) + ")");
    if (b <= prev) throw SelectionError("gather_blocks: blocks must be strictly ascending");
    prev = b;
    const std::size_t start = static_cast<std::size_t>(b) * static_cast<std::size_t>(block_size);
    const std::size_t end = std::min(t, start + static_cast<std::size_t>(block_size));
    k.insert(k.end(), s.keys.begin() + static_cast<std::ptrdiff_t>(start * w), s.keys.begin() + static_cast<std::ptrdiff_t>(end * w));
    v.insert(v.end(), s.values.begin() + static_cast<std::ptrdiff_t>(start * w), s.values.begin() + static_cast<std::ptrdiff_t>(end * w));
    for (std::size_t p = start; p < end; ++p) out.positions.push_back(static_cast<std::int64_t>(p));
  }
  const std::size_t n = out.positions.size();
  out.keys = Tensor({n, arena_->n_kv_heads_, arena_->head_dim_}, std::move(k));
  out.values = Tensor({n, arena_->n_kv_heads_, arena_->head_dim_}, std::move(v));
  return out;
}

int MemoryReport::full_layers() const {
  return static_cast<int>(std::count_if(entries.begin(), entries.end(), [](const MemoryEntry& e) { return e.role == LayerRole::Full; }));
}

int MemoryReport::sparse_layers() const { return static_cast<int>(entries.size()) - full_layers(); }

nlohmann::json MemoryReport::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& e : entries)
    layers.push_back({{"bytes", e.bytes}, {"cached_tokens", e.cached_tokens}, {"layer", e.layer}, {"role", role_name(e.role)}});
  return {{"baseline_bytes", baseline_bytes}, {"context_len", context_len}, {"element_bytes", element_bytes},
          {"full_layers", full_layers()},     {"layers", std::move(layers)},  {"reduction_ratio", reduction_ratio},
          {"sparse_layers", sparse_layers()}, {"total_bytes", total_bytes}};
}

std::string MemoryReport::to_table() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-6s %-7s %14s %18s\n", "layer", "role", "cached_tokens", "bytes");
  os << line;
  for (const auto& e : entries) {
    std::snprintf(line, sizeof line, "%-6d %-7s %14lld %18lld\n", e.layer, role_name(e.role),
                  static_cast<long long>(e.cached_tokens), static_cast<long long>(e.bytes));
    os << line;
  }
  std::snprintf(line, sizeof line, "full layers: %d  sparse layers: %d  context: %lld  element bytes: %d\n",
                full_layers(), sparse_layers(), static_cast<long long>(context_len), element_bytes);
  os << line;
  std::snprintf(line, sizeof line, "total bytes: %lld  all-full baseline: %lld  reduction: %.4fx\n",
                static_cast<long long>(total_bytes), static_cast<long long>(baseline_bytes), reduction_ratio);
  os << line;
  return os.str();
}

MemoryReport memory_report(const HybridStack& stack, std::int64_t n_kv_heads, std::int64_t head_dim,
                           int window, std::int64_t context_len, int element_bytes) {
  stack.validate();
  if (context_len < 0 || element_bytes < 1 || window < 1 || n_kv_heads < 1 || head_dim < 1)
    throw ConfigError("memory_report: illegal geometry");
  const std::int64_t per_token = n_kv_heads * head_dim * 2 * element_bytes;
  MemoryReport rep;
  rep.context_len = context_len;
  rep.element_bytes = element_bytes;
  for (std::size_t i = 0; i < stack.layers.size(); ++i) {
    MemoryEntry e;
    e.layer = static_cast<int>(i);
    e.role = stack.layers[i].role;
    e.cached_tokens = e.role == LayerRole::Full ? context_len : std::min<std::int64_t>(context_len, window);
    e.bytes = e.cached_tokens * per_token;
    rep.total_bytes += e.bytes;
    rep.entries.push_back(e);
  }
  rep.baseline_bytes = static_cast<std::int64_t>(stack.layers.size()) * context_len * per_token;
  rep.reduction_ratio = rep.total_bytes > 0 ? static_cast<double>(rep.baseline_bytes) / static_cast<double>(rep.total_bytes) : 1.0;
  return rep;
}

MemoryReport memory_report(const ModelConfig& cfg, std::int64_t context_len, int element_bytes) {
  return memory_report(build_hybrid_stack(cfg), cfg.n_kv_heads, cfg.head_dim, cfg.window, context_len, element_bytes);
}

}  // namespace hysparse
