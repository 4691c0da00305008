#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "hysparse/tensor.hpp"

namespace hysparse {

// Differentiable primitives. Every op validates shapes, rejects non-finite
// results and registers its gradient rule when any input tracks gradients.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// Adds a length-n bias to every row of an [m x n] tensor.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);
Tensor sum(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
/// Columns [begin, end) of an [m x n] tensor.
Tensor columns(const Tensor& a, std::size_t begin, std::size_t end);

/// Row softmax over the last axis. `keep` is either one flag per element or
/// one row of n flags broadcast to all rows; rows with no kept entry yield 0.
Tensor softmax_rows(const Tensor& x, std::optional<std::span<const std::uint8_t>> keep = std::nullopt);

/// x / rms(x) * gain per row of an [m x n] tensor.
Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = 0.0);

/// Rotates consecutive pairs (2i, 2i+1) of every head vector in [t x h x d]
/// by position * base^(-2i/d).
Tensor apply_rope(const Tensor& x, std::span<const std::int64_t> positions, double base);

/// out[t,h,:] = x[t,h,:] * g[t,h] for x [t x h x d], g [t x h].
Tensor scale_heads(const Tensor& x, const Tensor& g);

/// Rows of `table` [V x n] selected by ids.
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids);

/// Mean next-token cross entropy over positions whose target is >= 0.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace hysparse
