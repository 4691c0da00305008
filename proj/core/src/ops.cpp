#include "hysparse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hysparse {

namespace {

using detail::Node;

void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

Tensor finish(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
              std::function<void(Node&)> fn, const char* name) {
  check_finite(values, name);
  return Tensor::make_result(std::move(shape), std::move(values), std::move(parents), std::move(fn));
}

// c[m x n] += a[m x k] * b[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul: operands must be matrices");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: inner extents differ: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  return finish({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* dc = self.grad.data();
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      // dA = dC * B^T
      auto& ga = pa.grad_buffer();
      const double* bd = pb.data.data();
      std::vector<double> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = bd[p * n + j];
      gemm_acc(dc, bt.data(), ga.data(), m, n, k);
    }
    if (pb.requires_grad) {
      // dB = A^T * dC
      auto& gb = pb.grad_buffer();
      const double* ad = pa.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* dci = dc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double av = ad[i * k + p];
          if (av == 0.0) continue;
          double* gbp = gb.data() + p * n;
          for (std::size_t j = 0; j < n; ++j) gbp[j] += av * dci[j];
        }
      }
    }
  }, "matmul");
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      Node& in = parent(self, p);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  }, "add");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                                      shape_str(b.shape()));
  std::vector<double> out(a.size());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish(a.shape(), std::move(out), {a, b}, [](Node& self) {
    Node& pa = parent(self, 0);
    Node& pb = parent(self, 1);
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.data[i];
    }
  }, "mul");
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= s;
  return finish(a.shape(), std::move(out), {a}, [s](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
  }, "scale");
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require(x.rank() == 2 && bias.rank() == 1 && bias.dim(0) == x.dim(1),
          "add_row_bias: expected [m x n] and [n]");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += b[j];
  return finish(x.shape(), std::move(out), {x, bias}, [m, n](Node& self) {
    Node& px = parent(self, 0);
    Node& pb = parent(self, 1);
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) g[j] += self.grad[i * n + j];
    }
  }, "add_row_bias");
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish({}, {s}, {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  }, "sum");
}

Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
  return finish(a.shape(), std::move(out), {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double y = self.data[i];
      g[i] += self.grad[i] * y * (1.0 - y);
    }
  }, "sigmoid");
}

Tensor silu(const Tensor& a) {
  std::vector<double> out(a.size());
  const auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / (1.0 + std::exp(-x[i]));
  return finish(a.shape(), std::move(out), {a}, [](Node& self) {
    Node& in = parent(self, 0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double x = in.data[i];
      const double s = 1.0 / (1.0 + std::exp(-x));
      g[i] += self.grad[i] * s * (1.0 + x * (1.0 - s));
    }
  }, "silu");
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.size(), "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  return finish(std::move(shape), std::move(out), {a}, [](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  }, "reshape");
}

Tensor columns(const Tensor& a, std::size_t begin, std::size_t end) {
  require(a.rank() == 2 && begin <= end && end <= a.dim(1), "columns: bad range");
  const std::size_t m = a.dim(0), n = a.dim(1), w = end - begin;
  std::vector<double> out(m * w);
  const auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(i * n + begin), w, out.begin() + static_cast<std::ptrdiff_t>(i * w));
  return finish({m, w}, std::move(out), {a}, [m, n, w, begin](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) g[i * n + begin + j] += self.grad[i * w + j];
  }, "columns");
}

Tensor softmax_rows(const Tensor& x, std::optional<std::span<const std::uint8_t>> keep) {
  require(x.rank() >= 1, "softmax_rows: rank 0 input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = n ? x.size() / n : 0;
  if (keep) {
    require(keep->size() == n || keep->size() == x.size(), "softmax_rows: mask size mismatch");
  }
  std::vector<std::uint8_t> mask;
  if (keep) {
    mask.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) mask[i] = (*keep)[keep->size() == n ? i % n : i];
  }
  std::vector<double> out(x.size(), 0.0);
  const auto v = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (mask.empty() || mask[r * n + j]) m = std::max(m, v[r * n + j]);
    if (m == -std::numeric_limits<double>::infinity()) continue;  // fully masked row
    double l = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (!mask.empty() && !mask[r * n + j]) continue;
      out[r * n + j] = std::exp(v[r * n + j] - m);
      l += out[r * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= l;
  }
  return finish(x.shape(), std::move(out), {x}, [rows, n](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = self.data.data() + r * n;
      const double* dp = self.grad.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += p[j] * dp[j];
      for (std::size_t j = 0; j < n; ++j) g[r * n + j] += p[j] * (dp[j] - dot);
    }
  }, "softmax_rows");
}

Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  require(x.rank() == 2 && gain.rank() == 1 && gain.dim(0) == x.dim(1),
          "rmsnorm: expected [m x n] input and [n] gain");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  std::vector<double> inv_rms(m);
  const auto v = x.data();
  const auto gv = gain.data();
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += v[i * n + j] * v[i * n + j];
    const double ms = ss / static_cast<double>(n) + eps;
    if (ms <= 0.0) throw NumericError("rmsnorm: zero row");
    inv_rms[i] = 1.0 / std::sqrt(ms);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = v[i * n + j] * inv_rms[i] * gv[j];
  }
  return finish(x.shape(), std::move(out), {x, gain},
                [m, n, inv_rms = std::move(inv_rms)](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    const double* dy = self.grad.data();
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gg[j] += dy[i * n + j] * px.data[i * n + j] * inv_rms[i];
    }
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        const double r = inv_rms[i];
        double dot = 0.0;  // sum_j dy_j g_j x_j
        for (std::size_t j = 0; j < n; ++j) dot += dy[i * n + j] * pg.data[j] * px.data[i * n + j];
        const double c = dot * r * r * r / static_cast<double>(n);
        for (std::size_t j = 0; j < n; ++j)
          gx[i * n + j] += dy[i * n + j] * pg.data[j] * r - c * px.data[i * n + j];
      }
    }
  }, "rmsnorm");
}

Tensor apply_rope(const Tensor& x, std::span<const std::int64_t> positions, double base) {
  require(x.rank() == 3, "apply_rope: expected [t x h x d]");
  const std::size_t t = x.dim(0), h = x.dim(1), d = x.dim(2);
  if (d % 2 != 0) throw ShapeError("apply_rope: head dimension must be even, got " + std::to_string(d));
  require(positions.size() == t, "apply_rope: one position per row required");
  const std::size_t half = d / 2;
  std::vector<double> cosv(t * half), sinv(t * half);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(positions[r]) * freq;
      cosv[r * half + i] = std::cos(angle);
      sinv[r * half + i] = std::sin(angle);
    }
  }
  std::vector<double> out(x.size());
  const auto v = x.data();
  for (std::size_t r = 0; r < t; ++r)
    for (std::size_t hh = 0; hh < h; ++hh) {
      const std::size_t off = (r * h + hh) * d;
      for (std::size_t i = 0; i < half; ++i) {
        const double c = cosv[r * half + i], s = sinv[r * half + i];
        const double a = v[off + 2 * i], b = v[off + 2 * i + 1];
        out[off + 2 * i] = a * c - b * s;
        out[off + 2 * i + 1] = a * s + b * c;
      }
    }
  return finish(x.shape(), std::move(out), {x},
                [t, h, d, half, cosv = std::move(cosv), sinv = std::move(sinv)](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < t; ++r)
      for (std::size_t hh = 0; hh < h; ++hh) {
        const std::size_t off = (r * h + hh) * d;
        for (std::size_t i = 0; i < half; ++i) {
          const double c = cosv[r * half + i], s = sinv[r * half + i];
          const double ga = self.grad[off + 2 * i], gb = self.grad[off + 2 * i + 1];
          g[off + 2 * i] += ga * c + gb * s;
          g[off + 2 * i + 1] += -ga * s + gb * c;
        }
      }
  }, "apply_rope");
}

Tensor scale_heads(const Tensor& x, const Tensor& g) {
  require(x.rank() == 3 && g.rank() == 2 && g.dim(0) == x.dim(0) && g.dim(1) == x.dim(1),
          "scale_heads: expected [t x h x d] and [t x h]");
  const std::size_t rows = x.dim(0) * x.dim(1), d = x.dim(2);
  std::vector<double> out(x.size());
  const auto xv = x.data();
  const auto gv = g.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = xv[r * d + j] * gv[r];
  return finish(x.shape(), std::move(out), {x, g}, [rows, d](Node& self) {
    Node& px = parent(self, 0);
    Node& pg = parent(self, 1);
    if (px.requires_grad) {
      auto& gx = px.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += self.grad[r * d + j] * pg.data[r];
    }
    if (pg.requires_grad) {
      auto& gg = pg.grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += self.grad[r * d + j] * px.data[r * d + j];
        gg[r] += acc;
      }
    }
  }, "scale_heads");
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids) {
  require(table.rank() == 2, "embedding: table must be [V x n]");
  const std::size_t vocab = table.dim(0), n = table.dim(1), t = ids.size();
  std::vector<double> out(t * n);
  const auto tv = table.data();
  for (std::size_t r = 0; r < t; ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab)
      throw ShapeError("embedding: token id " + std::to_string(ids[r]) + " outside vocab");
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[r]) * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return finish({t, n}, std::move(out), {table}, [n, saved = std::move(saved)](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    for (std::size_t r = 0; r < saved.size(); ++r)
      for (std::size_t j = 0; j < n; ++j)
        g[static_cast<std::size_t>(saved[r]) * n + j] += self.grad[r * n + j];
  }, "embedding");
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  require(logits.rank() == 2 && logits.dim(0) == targets.size(),
          "cross_entropy: expected [t x V] logits and t targets");
  const std::size_t t = logits.dim(0), vocab = logits.dim(1);
  std::vector<double> probs(t * vocab, 0.0);
  const auto lv = logits.data();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < t; ++r) {
    if (targets[r] < 0) continue;
    if (static_cast<std::size_t>(targets[r]) >= vocab) throw ShapeError("cross_entropy: target outside vocab");
    const double* row = lv.data() + r * vocab;
    const double m = *std::max_element(row, row + vocab);
    double l = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) l += std::exp(row[j] - m);
    for (std::size_t j = 0; j < vocab; ++j) probs[r * vocab + j] = std::exp(row[j] - m) / l;
    total += m + std::log(l) - row[targets[r]];
    ++counted;
  }
  if (counted == 0) throw Error("cross_entropy: no target positions");
  const double inv = 1.0 / static_cast<double>(counted);
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return finish({}, {total * inv}, {logits},
                [vocab, inv, probs = std::move(probs), saved = std::move(saved)](Node& self) {
    auto& g = parent(self, 0).grad_buffer();
    const double up = self.grad[0] * inv;
    for (std::size_t r = 0; r < saved.size(); ++r) {
      if (saved[r] < 0) continue;
      for (std::size_t j = 0; j < vocab; ++j) g[r * vocab + j] += up * probs[r * vocab + j];
      g[r * vocab + static_cast<std::size_t>(saved[r])] -= up;
    }
  }, "cross_entropy");
}

}  // namespace hysparse
