#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hysparse/config.hpp"
#include "hysparse/tensor.hpp"

namespace hysparse {

using LayerId = int;

/// Raised when a layer writes cache memory it does not own.
class OwnershipError : public Error {
 public:
  using Error::Error;
};

class KvArena;

struct GatheredKv {
  Tensor keys;    // [n x h_kv x d]
  Tensor values;  // [n x h_kv x d]
  std::vector<std::int64_t> positions;
};

/// Read-only view of one hybrid block's shared store.
class KvHandle {
 public:
  KvHandle() = default;

  int block() const { return block_; }
  std::size_t length() const;
  /// Copies of the whole store, [t x h_kv x d].
  Tensor keys() const;
  Tensor values() const;
  /// Concatenation of the listed blocks in ascending order; the last block is
  /// clipped at the current length. Throws SelectionError when a block is out
  /// of range.
  GatheredKv gather_blocks(std::span<const std::int32_t> blocks, int block_size) const;

 private:
  friend class KvArena;
  KvHandle(const KvArena* arena, int block) : arena_(arena), block_(block) {}
  const KvArena* arena_ = nullptr;
  int block_ = -1;
};

/// Contents of a sliding-window ring buffer, oldest first.
struct WindowContents {
  Tensor keys;    // [n x h_kv x d]
  Tensor values;
  std::int64_t first_position = 0;
};

struct MemoryEntry {
  int layer = 0;
  LayerRole role = LayerRole::Full;
  std::int64_t cached_tokens = 0;
  std::int64_t bytes = 0;
};

struct MemoryReport {
  std::vector<MemoryEntry> entries;
  std::int64_t context_len = 0;
  int element_bytes = 0;
  std::int64_t total_bytes = 0;
  /// Same geometry with every layer full.
  std::int64_t baseline_bytes = 0;
  double reduction_ratio = 1.0;

  int full_layers() const;
  int sparse_layers() const;
  nlohmann::json to_json() const;
  /// Aligned per-layer table plus totals.
  std::string to_table() const;
};

/// Owns every KV cache of one sequence: a growable store per hybrid block
/// written only by that block's full layer, and a ring buffer of capacity
/// `window` per sparse layer written only by that layer. Storage is float64.
class KvArena {
 public:
  KvArena(HybridStack stack, std::size_t n_kv_heads, std::size_t head_dim, int window);

  const HybridStack& stack() const { return stack_; }
  std::size_t n_kv_heads() const { return n_kv_heads_; }
  std::size_t head_dim() const { return head_dim_; }
  int window() const { return window_; }

  /// Appends rows ([n x h_kv x d], flattened) to block `block`'s store.
  KvHandle append_full(LayerId caller, int block, std::span<const double> keys,
                       std::span<const double> values);
  /// Appends rows to `layer`'s ring buffer, keeping the last `window` rows.
  void window_append(LayerId caller, LayerId layer, std::span<const double> keys,
                     std::span<const double> values);

  KvHandle handle(int block) const;
  /// The shared store a sparse layer reads: its own block's.
  KvHandle shared_for(LayerId sparse_layer) const;
  WindowContents window_contents(LayerId layer) const;

  std::size_t full_length(int block) const;
  std::size_t window_length(LayerId layer) const;
  /// Tokens written to the first block, i.e. sequence length so far.
  std::size_t tokens() const { return full_length(0); }
  /// Positions seen by a ring buffer (not capped at the window).
  std::int64_t window_total(LayerId layer) const;

  /// Bytes of float64 cache data currently resident.
  std::int64_t resident_bytes() const;
  /// Per-layer accounting of what is resident, at 8 bytes per element.
  MemoryReport measured_report() const;

 private:
  friend class KvHandle;
  struct Store {
    LayerId owner = -1;
    std::vector<double> keys, values;
  };
  struct Ring {
    LayerId owner = -1;
    std::vector<double> keys, values;  // up to `window` rows
    std::size_t next = 0;              // slot of the next write once full
    std::int64_t total = 0;
  };
  std::size_t row_width() const { return n_kv_heads_ * head_dim_; }
  const Ring& ring(LayerId layer) const;

  HybridStack stack_;
  std::size_t n_kv_heads_;
  std::size_t head_dim_;
  int window_;
  std::vector<Store> stores_;       // per block
  std::vector<Ring> rings_;         // per layer; unused for full layers
};

/// Analytic cache footprint for `cfg`'s stack at `context_len` tokens with
/// `element_bytes` per scalar. Full layers cache every token, sparse layers
/// min(context_len, window).
MemoryReport memory_report(const ModelConfig& cfg, std::int64_t context_len, int element_bytes);
MemoryReport memory_report(const HybridStack& stack, std::int64_t n_kv_heads, std::int64_t head_dim,
                           int window, std::int64_t context_len, int element_bytes);

}  // namespace hysparse
