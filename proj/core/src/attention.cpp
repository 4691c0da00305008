#include "hysparse/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace hysparse {

namespace {

using detail::Node;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Geometry {
  std::size_t tq = 0, tk = 0, h = 0, hkv = 0, d = 0, group = 1;
  std::int64_t key_offset = 0;
  double scale = 1.0;
  bool sink = false;

  std::int64_t qpos(std::size_t i) const {
    return key_offset + static_cast<std::int64_t>(tk) - static_cast<std::int64_t>(tq) +
           static_cast<std::int64_t>(i);
  }
  // Last visible key row for query row i.
  std::size_t last_key(std::size_t i) const { return tk - tq + i; }
  std::size_t kv_head(std::size_t head) const { return head / group; }
  std::size_t q_index(std::size_t i, std::size_t head) const { return (i * h + head) * d; }
  std::size_t kv_index(std::size_t j, std::size_t g) const { return (j * hkv + g) * d; }
};

Geometry make_geometry(const char* who, const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttnConfig& cfg, const std::optional<Tensor>& sink,
                       std::int64_t key_offset) {
  cfg.validate();
  auto fail = [who](const std::string& msg) { throw ShapeError(std::string(who) + ": " + msg); };
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3) fail("q, k, v must be rank 3");
  if (k.shape() != v.shape()) fail("k and v shapes differ");
  Geometry g;
  g.tq = q.dim(0);
  g.h = q.dim(1);
  g.d = q.dim(2);
  g.tk = k.dim(0);
  g.hkv = k.dim(1);
  if (g.d != static_cast<std::size_t>(cfg.head_dim) || k.dim(2) != g.d)
    fail("head dimension does not match config");
  if (g.hkv == 0 || g.h % g.hkv != 0)
    fail("query heads (" + std::to_string(g.h) + ") not divisible by kv heads (" +
         std::to_string(g.hkv) + ")");
  if (g.tq == 0 || g.tq > g.tk) fail("need 1 <= query rows <= key rows");
  if (key_offset < 0) fail("negative key offset");
  g.group = g.h / g.hkv;
  g.key_offset = key_offset;
  g.scale = cfg.scale();
  g.sink = cfg.sink_enabled;
  if (g.sink) {
    if (!sink || !sink->defined()) fail("sink enabled but no sink logits given");
    if (sink->rank() != 1 || sink->dim(0) != g.h) fail("sink must be [heads]");
  }
  return g;
}

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

std::vector<Tensor> parents_of(const Tensor& q, const Tensor& k, const Tensor& v,
                               const Geometry& g, const std::optional<Tensor>& sink) {
  std::vector<Tensor> p{q, k, v};
  if (g.sink) p.push_back(*sink);
  return p;
}

// Softmax attention for one query row over an explicit ascending key list.
// Returns (m, l): the running max (including the sink logit) and the
// denominator, so p_j = exp(a_j - m) / l.
std::pair<double, double> attend_row(const Geometry& g, const double* qrow, const double* k,
                                     const double* v, std::size_t kvh,
                                     std::span<const std::int32_t> keys, const double* sink_logit,
                                     double* out, std::vector<double>& logits) {
  logits.resize(keys.size());
  double m = sink_logit ? *sink_logit : kNegInf;
  for (std::size_t n = 0; n < keys.size(); ++n) {
    logits[n] = g.scale * dot(qrow, k + g.kv_index(static_cast<std::size_t>(keys[n]), kvh), g.d);
    m = std::max(m, logits[n]);
  }
  std::fill(out, out + g.d, 0.0);
  if (m == kNegInf) return {m, 0.0};
  double l = sink_logit ? std::exp(*sink_logit - m) : 0.0;
  for (std::size_t n = 0; n < keys.size(); ++n) {
    const double e = std::exp(logits[n] - m);
    logits[n] = e;
    l += e;
    const double* vr = v + g.kv_index(static_cast<std::size_t>(keys[n]), kvh);
    for (std::size_t c = 0; c < g.d; ++c) out[c] += e * vr[c];
  }
  for (std::size_t c = 0; c < g.d; ++c) out[c] /= l;
  return {m, l};
}

struct Grads {
  double* dq = nullptr;
  double* dk = nullptr;
  double* dv = nullptr;
  double* dsink = nullptr;
};

Grads grads_for(Node& self, const Geometry& g) {
  Grads gr;
  Node& q = *self.parents[0];
  Node& k = *self.parents[1];
  Node& v = *self.parents[2];
  if (q.requires_grad) gr.dq = q.grad_buffer().data();
  if (k.requires_grad) gr.dk = k.grad_buffer().data();
  if (v.requires_grad) gr.dv = v.grad_buffer().data();
  if (g.sink && self.parents[3]->requires_grad) gr.dsink = self.parents[3]->grad_buffer().data();
  return gr;
}

// Gradient of one row of attend_row. With p_j the probabilities,
// dp_j = dO.v_j, D = dO.O: da_j = p_j (dp_j - D), dsink = -p_sink * D.
void attend_row_backward(const Geometry& g, std::size_t row, std::size_t head,
                         std::span<const std::int32_t> keys, Node& self, const Grads& gr,
                         std::vector<double>& scratch) {
  const double* q = self.parents[0]->data.data();
  const double* k = self.parents[1]->data.data();
  const double* v = self.parents[2]->data.data();
  const double* sink = g.sink ? self.parents[3]->data.data() + head : nullptr;
  const std::size_t kvh = g.kv_head(head);
  const double* qrow = q + g.q_index(row, head);
  const double* orow = self.data.data() + g.q_index(row, head);
  const double* dorow = self.grad.data() + g.q_index(row, head);

  std::vector<double> recomputed(g.d);
  auto [m, l] = attend_row(g, qrow, k, v, kvh, keys, sink, recomputed.data(), scratch);
  if (m == kNegInf) return;
  const double big_d = dot(dorow, orow, g.d);
  for (std::size_t n = 0; n < keys.size(); ++n) {
    const std::size_t j = static_cast<std::size_t>(keys[n]);
    const double p = scratch[n] / l;
    const double* kr = k + g.kv_index(j, kvh);
    const double* vr = v + g.kv_index(j, kvh);
    const double da = p * (dot(dorow, vr, g.d) - big_d) * g.scale;
    if (gr.dq) {
      double* dq = gr.dq + g.q_index(row, head);
      for (std::size_t c = 0; c < g.d; ++c) dq[c] += da * kr[c];
    }
    if (gr.dk) {
      double* dk = gr.dk + g.kv_index(j, kvh);
      for (std::size_t c = 0; c < g.d; ++c) dk[c] += da * qrow[c];
    }
    if (gr.dv) {
      double* dv = gr.dv + g.kv_index(j, kvh);
      for (std::size_t c = 0; c < g.d; ++c) dv[c] += p * dorow[c];
    }
  }
  if (gr.dsink) gr.dsink[head] += -(std::exp(*sink - m) / l) * big_d;
}

std::vector<std::int32_t> causal_keys(const Geometry& g, std::size_t row) {
  std::vector<std::int32_t> keys(g.last_key(row) + 1);
  for (std::size_t j = 0; j < keys.size(); ++j) keys[j] = static_cast<std::int32_t>(j);
  return keys;
}

std::vector<std::int32_t> window_keys(const Geometry& g, std::size_t row, int window) {
  const std::int64_t last = static_cast<std::int64_t>(g.last_key(row));
  const std::int64_t first = std::max<std::int64_t>(0, last - window + 1);
  std::vector<std::int32_t> keys;
  keys.reserve(static_cast<std::size_t>(last - first + 1));
  for (std::int64_t j = first; j <= last; ++j) keys.push_back(static_cast<std::int32_t>(j));
  return keys;
}

BlockScores empty_scores(const Geometry& g, int block_size) {
  BlockScores s;
  s.block_size = block_size;
  s.first_position = g.qpos(0);
  s.values = Tensor::zeros({g.h, g.tq, ceil_div(g.tk, static_cast<std::size_t>(block_size))});
  return s;
}

}  // namespace

double AttnConfig::scale() const {
  return softmax_scale != 0.0 ? softmax_scale : 1.0 / std::sqrt(static_cast<double>(head_dim));
}

void AttnConfig::validate() const {
  if (head_dim <= 0 || head_dim % 2 != 0) throw ConfigError("attention: head_dim must be positive and even");
  if (block_size < 1 || tile_rows < 1 || tile_cols < 1 || window < 1)
    throw ConfigError("attention: block size, tiles and window must be >= 1");
  if (block_size != tile_cols) throw ConfigError("attention: block_size must equal tile_cols");
}

AttnResult reference_full_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttnConfig& cfg, const std::optional<Tensor>& sink) {
  const Geometry g = make_geometry("reference_full_attention", q, k, v, cfg, sink, 0);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();
  const std::size_t nb = ceil_div(g.tk, static_cast<std::size_t>(cfg.block_size));
  std::vector<double> out(q.size(), 0.0);
  BlockScores scores = empty_scores(g, cfg.block_size);
  auto sv = scores.values.data();

  std::vector<double> probs(g.tq * g.tk);
  for (std::size_t head = 0; head < g.h; ++head) {
    const std::size_t kvh = g.kv_head(head);
    // Full logit matrix for this head, -inf above the causal diagonal.
    for (std::size_t i = 0; i < g.tq; ++i)
      for (std::size_t j = 0; j < g.tk; ++j)
        probs[i * g.tk + j] = j <= g.last_key(i)
                                  ? g.scale * dot(qd + g.q_index(i, head), kd + g.kv_index(j, kvh), g.d)
                                  : kNegInf;
    for (std::size_t i = 0; i < g.tq; ++i) {
      double* row = probs.data() + i * g.tk;
      double m = *std::max_element(row, row + g.tk);
      if (g.sink) m = std::max(m, sink->data()[head]);
      double l = g.sink ? std::exp(sink->data()[head] - m) : 0.0;
      for (std::size_t j = 0; j < g.tk; ++j) {
        row[j] = std::exp(row[j] - m);
        l += row[j];
      }
      double* o = out.data() + g.q_index(i, head);
      for (std::size_t j = 0; j < g.tk; ++j) {
        row[j] /= l;
        const double* vr = vd + g.kv_index(j, kvh);
        for (std::size_t c = 0; c < g.d; ++c) o[c] += row[j] * vr[c];
        double& s = sv[(head * g.tq + i) * nb + j / static_cast<std::size_t>(cfg.block_size)];
        s = std::max(s, row[j]);
      }
    }
  }
  check_finite(out, "reference_full_attention");

  auto backward = [g](Node& self) {
    const Grads gr = grads_for(self, g);
    std::vector<double> scratch;
    for (std::size_t i = 0; i < g.tq; ++i) {
      const auto keys = causal_keys(g, i);
      for (std::size_t head = 0; head < g.h; ++head)
        attend_row_backward(g, i, head, keys, self, gr, scratch);
    }
  };
  Tensor o = Tensor::make_result(q.shape(), std::move(out), parents_of(q, k, v, g, sink), backward);
  return {std::move(o), std::move(scores)};
}

AttnResult tiled_attention_with_scores(const Tensor& q, const Tensor& k, const Tensor& v,
                                       const AttnConfig& cfg, const std::optional<Tensor>& sink) {
  const Geometry g = make_geometry("tiled_attention_with_scores", q, k, v, cfg, sink, 0);
  const std::size_t bm = static_cast<std::size_t>(cfg.tile_rows);
  const std::size_t bn = static_cast<std::size_t>(cfg.tile_cols);
  const std::size_t row_tiles = ceil_div(g.tq, bm);
  const std::size_t col_tiles = ceil_div(g.tk, bn);
  const double* qd = q.data().data();
  const double* kd = k.data().data();
  const double* vd = v.data().data();

  std::vector<double> out(q.size(), 0.0);
  std::vector<double> row_max(g.h * g.tq), row_sum(g.h * g.tq);
  BlockScores scores = empty_scores(g, cfg.block_size);
  auto sv = scores.values.data();

  std::vector<double> tile(bm * bn);
  std::vector<double> m(bm), l(bm), acc(bm * g.d);
  std::vector<double> tile_max(bm * col_tiles);
  for (std::size_t head = 0; head < g.h; ++head) {
    const std::size_t kvh = g.kv_head(head);
    const double s_logit = g.sink ? sink->data()[head] : kNegInf;
    for (std::size_t it = 0; it < row_tiles; ++it) {
      const std::size_t r0 = it * bm;
      const std::size_t rows = std::min(bm, g.tq - r0);
      std::fill(m.begin(), m.end(), s_logit);
      std::fill(l.begin(), l.end(), g.sink ? 1.0 : 0.0);
      std::fill(acc.begin(), acc.end(), 0.0);
      std::fill(tile_max.begin(), tile_max.end(), kNegInf);
      const std::size_t last_visible = g.last_key(r0 + rows - 1);
      for (std::size_t jt = 0; jt < col_tiles; ++jt) {
        const std::size_t c0 = jt * bn;
        if (c0 > last_visible) break;  // tile entirely in the masked future
        const std::size_t cols = std::min(bn, g.tk - c0);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t i = r0 + r;
          const double* qrow = qd + g.q_index(i, head);
          double tmax = kNegInf;
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t j = c0 + c;
            double a = kNegInf;
            if (j <= g.last_key(i)) a = g.scale * dot(qrow, kd + g.kv_index(j, kvh), g.d);
            tile[r * bn + c] = a;
            tmax = std::max(tmax, a);
          }
          tile_max[r * col_tiles + jt] = tmax;
          const double m_new = std::max(m[r], tmax);
          if (m_new == kNegInf) continue;
          const double correction = std::exp(m[r] - m_new);
          l[r] *= correction;
          double* ar = acc.data() + r * g.d;
          for (std::size_t c = 0; c < g.d; ++c) ar[c] *= correction;
          for (std::size_t c = 0; c < cols; ++c) {
            const double e = std::exp(tile[r * bn + c] - m_new);
            if (e == 0.0) continue;
            l[r] += e;
            const double* vr = vd + g.kv_index(c0 + c, kvh);
            for (std::size_t x = 0; x < g.d; ++x) ar[x] += e * vr[x];
          }
          m[r] = m_new;
        }
      }
      // Epilogue: normalize outputs and convert stored raw tile maxima to
      // probability scale, exp(tile_max - m) / l.
      for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t i = r0 + r;
        double* o = out.data() + g.q_index(i, head);
        for (std::size_t c = 0; c < g.d; ++c) o[c] = acc[r * g.d + c] / l[r];
        row_max[head * g.tq + i] = m[r];
        row_sum[head * g.tq + i] = l[r];
        for (std::size_t jt = 0; jt < col_tiles; ++jt) {
          const double tm = tile_max[r * col_tiles + jt];
          sv[(head * g.tq + i) * col_tiles + jt] = tm == kNegInf ? 0.0 : std::exp(tm - m[r]) / l[r];
        }
      }
    }
  }
  check_finite(out, "tiled_attention_with_scores");

  auto backward = [g, bm, bn, row_max = std::move(row_max), row_sum = std::move(row_sum)](Node& self) {
    const Grads gr = grads_for(self, g);
    const double* qd = self.parents[0]->data.data();
    const double* kd = self.parents[1]->data.data();
    const double* vd = self.parents[2]->data.data();
    const double* od = self.data.data();
    const double* dod = self.grad.data();
    const std::size_t row_tiles = ceil_div(g.tq, bm);
    const std::size_t col_tiles = ceil_div(g.tk, bn);
    std::vector<double> big_d(bm);
    for (std::size_t head = 0; head < g.h; ++head) {
      const std::size_t kvh = g.kv_head(head);
      for (std::size_t it = 0; it < row_tiles; ++it) {
        const std::size_t r0 = it * bm;
        const std::size_t rows = std::min(bm, g.tq - r0);
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t i = r0 + r;
          big_d[r] = dot(dod + g.q_index(i, head), od + g.q_index(i, head), g.d);
          if (gr.dsink) {
            const std::size_t s = head * g.tq + i;
            gr.dsink[head] -= std::exp(self.parents[3]->data[head] - row_max[s]) / row_sum[s] * big_d[r];
          }
        }
        const std::size_t last_visible = g.last_key(r0 + rows - 1);
        for (std::size_t jt = 0; jt < col_tiles; ++jt) {
          const std::size_t c0 = jt * bn;
          if (c0 > last_visible) break;
          const std::size_t cols = std::min(bn, g.tk - c0);
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t i = r0 + r;
            const std::size_t s = head * g.tq + i;
            const double* qrow = qd + g.q_index(i, head);
            const double* dorow = dod + g.q_index(i, head);
            for (std::size_t c = 0; c < cols; ++c) {
              const std::size_t j = c0 + c;
              if (j > g.last_key(i)) break;
              const double* kr = kd + g.kv_index(j, kvh);
              const double* vr = vd + g.kv_index(j, kvh);
              const double p = std::exp(g.scale * dot(qrow, kr, g.d) - row_max[s]) / row_sum[s];
              const double da = p * (dot(dorow, vr, g.d) - big_d[r]) * g.scale;
              if (gr.dq) {
                double* dq = gr.dq + g.q_index(i, head);
                for (std::size_t x = 0; x < g.d; ++x) dq[x] += da * kr[x];
              }
              if (gr.dk) {
                double* dk = gr.dk + g.kv_index(j, kvh);
                for (std::size_t x = 0; x < g.d; ++x) dk[x] += da * qrow[x];
              }
              if (gr.dv) {
                double* dv = gr.dv + g.kv_index(j, kvh);
                for (std::size_t x = 0; x < g.d; ++x) dv[x] += p * dorow[x];
              }
            }
          }
        }
      }
    }
  };
  Tensor o = Tensor::make_result(q.shape(), std::move(out), parents_of(q, k, v, g, sink), std::move(backward));
  return {std::move(o), std::move(scores)};
}

Tensor sliding_window_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                const AttnConfig& cfg, const std::optional<Tensor>& sink,
                                std::int64_t key_offset) {
  const Geometry g = make_geometry("sliding_window_attention", q, k, v, cfg, sink, key_offset);
  const int window = cfg.window;
  // A suffix cache must reach back far enough for the earliest query row.
  if (key_offset > std::max<std::int64_t>(0, g.qpos(0) - window + 1))
    throw ShapeError("sliding_window_attention: cached keys do not cover the window");
  std::vector<double> out(q.size());
  std::vector<double> scratch;
  for (std::size_t i = 0; i < g.tq; ++i) {
    const auto keys = window_keys(g, i, window);
    for (std::size_t head = 0; head < g.h; ++head) {
      const double* s = g.sink ? sink->data().data() + head : nullptr;
      attend_row(g, q.data().data() + g.q_index(i, head), k.data().data(), v.data().data(),
                 g.kv_head(head), keys, s, out.data() + g.q_index(i, head), scratch);
    }
  }
  check_finite(out, "sliding_window_attention");
  auto backward = [g, window](Node& self) {
    const Grads gr = grads_for(self, g);
    std::vector<double> scratch;
    for (std::size_t i = 0; i < g.tq; ++i) {
      const auto keys = window_keys(g, i, window);
      for (std::size_t head = 0; head < g.h; ++head)
        attend_row_backward(g, i, head, keys, self, gr, scratch);
    }
  };
  return Tensor::make_result(q.shape(), std::move(out), parents_of(q, k, v, g, sink), std::move(backward));
}

namespace {

// Key rows visible to query row i of `group` under `indices`.
std::vector<std::int32_t> gathered_keys(const Geometry& g, const BlockIndexSet& indices,
                                        std::size_t i, std::size_t group) {
  const std::int64_t pos = g.qpos(i);
  const std::int64_t bs = indices.block_size();
  const std::int64_t nblocks = static_cast<std::int64_t>(ceil_div(g.tk, static_cast<std::size_t>(bs)));
  std::vector<std::int32_t> keys;
  std::int64_t prev = -1;
  for (std::int32_t b : indices.at(i, group)) {
    if (b <= prev) throw SelectionError("block_sparse_attention: indices not strictly ascending");
    prev = b;
    if (b < 0 || b >= nblocks) throw SelectionError("block_sparse_attention: block " + std::to_string(b) + " out of range");
    const std::int64_t start = b * bs;
    if (start > pos)
      throw SelectionError("block_sparse_attention: block " + std::to_string(b) +
                           " starts after query position " + std::to_string(pos));
    const std::int64_t end = std::min<std::int64_t>((b + 1) * bs - 1, pos);
    for (std::int64_t j = start; j <= end; ++j) keys.push_back(static_cast<std::int32_t>(j));
  }
  return keys;
}

}  // namespace

Tensor block_sparse_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                              const BlockIndexSet& indices, const AttnConfig& cfg,
                              const std::optional<Tensor>& sink) {
  const Geometry g = make_geometry("block_sparse_attention", q, k, v, cfg, sink, 0);
  if (indices.rows() != g.tq || indices.groups() != g.hkv)
    throw ShapeError("block_sparse_attention: index set is " + std::to_string(indices.rows()) + " rows x " +
                     std::to_string(indices.groups()) + " groups, expected " + std::to_string(g.tq) +
                     " x " + std::to_string(g.hkv));
  if (indices.block_size() != cfg.block_size)
    throw ShapeError("block_sparse_attention: index block size differs from config");
  if (indices.first_position() != g.qpos(0))
    throw ShapeError("block_sparse_attention: index rows start at a different position");

  std::vector<std::vector<std::int32_t>> keys(g.tq * g.hkv);
  for (std::size_t i = 0; i < g.tq; ++i)
    for (std::size_t grp = 0; grp < g.hkv; ++grp) {
      keys[i * g.hkv + grp] = gathered_keys(g, indices, i, grp);
      if (keys[i * g.hkv + grp].empty() && !g.sink)
        throw SelectionError("block_sparse_attention: row " + std::to_string(g.qpos(i)) +
                             " has no selected keys and no sink");
    }

  std::vector<double> out(q.size());
  std::vector<double> scratch;
  for (std::size_t i = 0; i < g.tq; ++i)
    for (std::size_t head = 0; head < g.h; ++head) {
      const double* s = g.sink ? sink->data().data() + head : nullptr;
      attend_row(g, q.data().data() + g.q_index(i, head), k.data().data(), v.data().data(),
                 g.kv_head(head), keys[i * g.hkv + g.kv_head(head)], s,
                 out.data() + g.q_index(i, head), scratch);
    }
  check_finite(out, "block_sparse_attention");
  auto backward = [g, keys = std::move(keys)](Node& self) {
    const Grads gr = grads_for(self, g);
    std::vector<double> scratch;
    for (std::size_t i = 0; i < g.tq; ++i)
      for (std::size_t head = 0; head < g.h; ++head)
        attend_row_backward(g, i, head, keys[i * g.hkv + g.kv_head(head)], self, gr, scratch);
  };
  return Tensor::make_result(q.shape(), std::move(out), parents_of(q, k, v, g, sink), std::move(backward));
}

}  // namespace hysparse
