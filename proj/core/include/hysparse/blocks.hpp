#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hysparse/tensor.hpp"

namespace hysparse {

/// Per-row, per-key-block maximum softmax probability.
///
/// `values` has shape [heads x rows x blocks]. Row r corresponds to absolute
/// sequence position first_position + r; block j covers key positions
/// [j*block_size, (j+1)*block_size).
struct BlockScores {
  Tensor values;
  int block_size = 0;
  std::int64_t first_position = 0;

  std::size_t heads() const { return values.dim(0); }
  std::size_t rows() const { return values.dim(1); }
  std::size_t blocks() const { return values.dim(2); }
  double at(std::size_t h, std::size_t r, std::size_t j) const {
    return values.data()[(h * rows() + r) * blocks() + j];
  }
};

/// Selected key blocks per query row and GQA group, ascending.
class BlockIndexSet {
 public:
  BlockIndexSet() = default;
  BlockIndexSet(std::size_t rows, std::size_t groups, int k_blocks, int block_size,
                std::int64_t first_position);

  std::size_t rows() const { return rows_; }
  std::size_t groups() const { return groups_; }
  int k_blocks() const { return k_blocks_; }
  int block_size() const { return block_size_; }
  std::int64_t first_position() const { return first_position_; }

  std::span<const std::int32_t> at(std::size_t row, std::size_t group) const {
    return sets_[row * groups_ + group];
  }
  std::vector<std::int32_t>& mutable_at(std::size_t row, std::size_t group) {
    return sets_[row * groups_ + group];
  }

  /// Checks ordering, causality and the per-row size bound; throws on violation.
  void validate() const;

  bool operator==(const BlockIndexSet&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t groups_ = 0;
  int k_blocks_ = 0;
  int block_size_ = 0;
  std::int64_t first_position_ = 0;
  std::vector<std::vector<std::int32_t>> sets_;
};

/// Raised when an index set refers to blocks the query row may not see.
class SelectionError : public Error {
 public:
  using Error::Error;
};

inline std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

}  // namespace hysparse
