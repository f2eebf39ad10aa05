#pragma once

#include <algorithm>
#include <memory>
#include <utility>

#include "utnet/ops.hpp"

namespace utnet {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

enum class KvProjection { bilinear, maxpool };

inline const char* to_string(KvProjection p) {
  return p == KvProjection::bilinear ? "bilinear" : "maxpool";
}

struct AttentionConfig {
  int heads = 4;
  int model_channels = 0;
  int reduced_size = 8;  // target per-axis size of the key/value maps
  KvProjection projection = KvProjection::bilinear;
  bool use_relpos = true;

  int head_dim() const {
    if (heads < 1) throw ConfigError("attention: heads must be >= 1");
    if (model_channels % heads != 0)
      throw ConfigError("attention: model_channels " +
                        std::to_string(model_channels) +
                        " not divisible by heads " + std::to_string(heads));
    return model_channels / heads;
  }

  void validate(int channels) const {
    if (channels != model_channels)
      throw ConfigError("attention: input has " + std::to_string(channels) +
                        " channels, config expects " +
                        std::to_string(model_channels));
    if (reduced_size < 1) throw ConfigError("attention: reduced_size must be >= 1");
    (void)head_dim();
  }

  // Key/value spatial size for a given input map (clamped so the reduced
  // grid never exceeds the input grid).
  int clamped(int extent) const { return std::min(reduced_size, extent); }
};

// Learnable per-head relative-offset embeddings, one table per axis. Offsets
// -(reduced_size-1) .. +(reduced_size-1) index rows 0 .. 2*reduced_size-2.
// Zero-initialized tables contribute nothing, which makes the
// position-augmented variant collapse to the plain efficient one exactly.
struct RelativePositionTable {
  Tensor r_h;  // [heads x (2*reduced_size - 1) x d]
  Tensor r_w;  // same shape
};

struct AttentionWeights {
  Tensor wq, bq;      // [D x C x 1 x 1], [D]  with D = heads * d
  Tensor wk, bk;
  Tensor wv, bv;
  Tensor wout, bout;  // [C x D x 1 x 1], [C]
  RelativePositionTable rel;

  template <typename Fn>
  void visit(Fn&& fn) {
    fn("q_w", wq);
    fn("q_b", bq);
    fn("k_w", wk);
    fn("k_b", bk);
    fn("v_w", wv);
    fn("v_b", bv);
    fn("out_w", wout);
    fn("out_b", bout);
    if (rel.r_h.defined()) {
      fn("rel_h", rel.r_h);
      fn("rel_w", rel.r_w);
    }
  }
};

// He fan-in init for the projections, zero bias, zero relpos tables.
inline AttentionWeights init_attention_weights(const AttentionConfig& cfg,
                                               SplitMix64& rng) {
  const int C = cfg.model_channels;
  const int D = cfg.heads * cfg.head_dim();
  AttentionWeights w;
  w.wq = Tensor::randn({D, C, 1, 1}, rng, std::sqrt(2.0 / C));
  w.bq = Tensor::zeros({D});
  w.wk = Tensor::randn({D, C, 1, 1}, rng, std::sqrt(2.0 / C));
  w.bk = Tensor::zeros({D});
  w.wv = Tensor::randn({D, C, 1, 1}, rng, std::sqrt(2.0 / C));
  w.bv = Tensor::zeros({D});
  w.wout = Tensor::randn({C, D, 1, 1}, rng, std::sqrt(2.0 / D));
  w.bout = Tensor::zeros({C});
  if (cfg.use_relpos) {
    const int rows = 2 * cfg.reduced_size - 1;
    w.rel.r_h = Tensor::zeros({cfg.heads, rows, cfg.head_dim()});
    w.rel.r_w = Tensor::zeros({cfg.heads, rows, cfg.head_dim()});
  }
  return w;
}

// ---------------------------------------------------------------------------
// instrumented similarity-buffer accounting
// ---------------------------------------------------------------------------

// The complexity claim under test is about the similarity/context matrix
// (n x k for the efficient variants, n x n for the quadratic one). Every
// such matrix is allocated through TrackedBuffer, so the peak byte counter
// equals the closed form heads*n*k*8 exactly; saved activations for the
// backward pass and O(n) scratch are deliberately outside this accounting.
struct AttnBufferStats {
  int64_t live_bytes = 0;
  int64_t peak_bytes = 0;
  int64_t cap_bytes = 0;  // 0 = unlimited

  void reset() { live_bytes = peak_bytes = 0; }
};

inline AttnBufferStats& attn_buffer_stats() {
  thread_local AttnBufferStats stats;
  return stats;
}

// Refusal when a similarity buffer would exceed the configured cap.
struct BufferLimitError : Error {
  int64_t requested_bytes;
  BufferLimitError(int64_t requested, int64_t cap)
      : Error("attention similarity buffer of " + std::to_string(requested) +
              " bytes exceeds the configured cap of " + std::to_string(cap) +
              " bytes; refusing to materialize it"),
        requested_bytes(requested) {}
};

class TrackedBuffer {
 public:
  explicit TrackedBuffer(int64_t count) : bytes_(count * int64_t(sizeof(double))) {
    auto& st = attn_buffer_stats();
    if (st.cap_bytes > 0 && st.live_bytes + bytes_ > st.cap_bytes)
      throw BufferLimitError(st.live_bytes + bytes_, st.cap_bytes);
    buf_.assign(size_t(count), 0.0);
    st.live_bytes += bytes_;
    st.peak_bytes = std::max(st.peak_bytes, st.live_bytes);
  }
  ~TrackedBuffer() { attn_buffer_stats().live_bytes -= bytes_; }
  TrackedBuffer(const TrackedBuffer&) = delete;
  TrackedBuffer& operator=(const TrackedBuffer&) = delete;

  double* data() { return buf_.data(); }

 private:
  std::vector<double> buf_;
  int64_t bytes_;
};

// ---------------------------------------------------------------------------
// relative-offset indexing (shared by the fused op and relative_logits)
// ---------------------------------------------------------------------------

namespace detail {

// Query coordinate mapped onto the reduced key grid by flooring.
inline int reduced_coord(int i, int q_extent, int k_extent) {
  return int(int64_t(i) * k_extent / q_extent);
}

// Row of the (2*reduced-1)-row table for offset (j - i').
inline int rel_row(int j_coord, int i_reduced, int reduced_size) {
  return j_coord - i_reduced + (reduced_size - 1);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// fused attention context
// ---------------------------------------------------------------------------
//
// Per head: M = (Q K̄ᵀ + S_H + S_W) / sqrt(d), P = row-softmax(M),
// out = P V̄ — with the n x k logits matrix allocated once per batch item
// (all heads at once), scaled and softmaxed in place, and consumed by the
// context product before it is released. Exactly one similarity buffer is
// live at any time, which is what the byte instrumentation asserts.
//
// q:     [B x D x H x W]   (D = heads * d; per-head rows are contiguous)
// kbar:  [B x D x h x w]   keys, already spatially reduced by the caller
// vbar:  [B x D x h x w]
// rel_h, rel_w: [heads x (2*reduced-1) x d] or undefined for no relpos
inline Tensor attention_context(const Tensor& q, const Tensor& kbar,
                                const Tensor& vbar, const Tensor& rel_h,
                                const Tensor& rel_w, int heads,
                                int reduced_size) {
  if (q.ndim() != 4 || kbar.ndim() != 4 || vbar.ndim() != 4)
    throw ShapeError("attention_context: expects 4-d q/k/v");
  if (kbar.shape != vbar.shape)
    throw ShapeError("attention_context: key/value shapes differ, " +
                     shape_str(kbar.shape) + " vs " + shape_str(vbar.shape));
  const int B = q.shape[0], D = q.shape[1], H = q.shape[2], W = q.shape[3];
  const int h = kbar.shape[2], w = kbar.shape[3];
  if (kbar.shape[0] != B || kbar.shape[1] != D)
    throw ShapeError("attention_context: q " + shape_str(q.shape) +
                     " vs k " + shape_str(kbar.shape));
  if (D % heads != 0)
    throw ConfigError("attention_context: channels not divisible by heads");
  const int d = D / heads;
  const int64_t n = int64_t(H) * W;
  const int64_t k = int64_t(h) * w;
  const double scale = 1.0 / std::sqrt(double(d));
  const bool relpos = rel_h.defined();
  if (relpos) {
    const Shape want = {heads, 2 * reduced_size - 1, d};
    if (rel_h.shape != want || rel_w.shape != want)
      throw ShapeError("attention_context: relpos tables must be " +
                       shape_str(want) + ", got " + shape_str(rel_h.shape));
    if (h > reduced_size || w > reduced_size)
      throw ShapeError("attention_context: key grid exceeds relpos table range");
  }
  const int table_rows = relpos ? 2 * reduced_size - 1 : 0;

  // Precomputed query->reduced-grid coordinates.
  std::vector<int> row_of(size_t(n), 0), col_of(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    row_of[size_t(i)] = detail::reduced_coord(int(i) / W, H, h);
    col_of[size_t(i)] = detail::reduced_coord(int(i) % W, W, w);
  }

  Graph* rec = detail::recording_graph({&q, &kbar, &vbar, &rel_h, &rel_w});
  // Saved probabilities for the backward pass (activation storage, not part
  // of the transient-buffer accounting).
  std::shared_ptr<std::vector<double>> probs;
  if (rec) probs = std::make_shared<std::vector<double>>(size_t(B) * heads * n * k);

  Tensor out = Tensor::zeros({B, D, H, W});
  std::vector<double> gather_h, gather_w;  // [n x table_rows] scratch
  if (relpos) {
    gather_h.resize(size_t(n) * table_rows);
    gather_w.resize(size_t(n) * table_rows);
  }
  for (int b = 0; b < B; ++b) {
    TrackedBuffer logits(int64_t(heads) * n * k);
    for (int hd = 0; hd < heads; ++hd) {
      ConstMatMap Mq(q.ptr() + (int64_t(b) * D + int64_t(hd) * d) * n, d, n);
      ConstMatMap Mk(kbar.ptr() + (int64_t(b) * D + int64_t(hd) * d) * k, d, k);
      ConstMatMap Mv(vbar.ptr() + (int64_t(b) * D + int64_t(hd) * d) * k, d, k);
      MatMap L(logits.data() + int64_t(hd) * n * k, n, k);
      L.noalias() = Mq.transpose() * Mk;
      if (relpos) {
        ConstMatMap Rh(rel_h.ptr() + int64_t(hd) * table_rows * d, table_rows, d);
        ConstMatMap Rw(rel_w.ptr() + int64_t(hd) * table_rows * d, table_rows, d);
        MatMap Gh(gather_h.data(), n, table_rows);
        MatMap Gw(gather_w.data(), n, table_rows);
        Gh.noalias() = Mq.transpose() * Rh.transpose();
        Gw.noalias() = Mq.transpose() * Rw.transpose();
        for (int64_t i = 0; i < n; ++i) {
          const double* gh = gather_h.data() + i * table_rows;
          const double* gw = gather_w.data() + i * table_rows;
          double* row = logits.data() + int64_t(hd) * n * k + i * k;
          for (int64_t j = 0; j < k; ++j) {
            const int jy = int(j) / w, jx = int(j) % w;
            row[j] += gh[detail::rel_row(jy, row_of[size_t(i)], reduced_size)] +
                      gw[detail::rel_row(jx, col_of[size_t(i)], reduced_size)];
          }
        }
      }
      // in-place scale + row softmax: the logits buffer becomes P
      for (int64_t i = 0; i < n; ++i) {
        double* row = logits.data() + int64_t(hd) * n * k + i * k;
        double mx = row[0] * scale;
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j] * scale);
        double z = 0.0;
        for (int64_t j = 0; j < k; ++j) {
          row[j] = std::exp(row[j] * scale - mx);
          z += row[j];
        }
        for (int64_t j = 0; j < k; ++j) row[j] /= z;
      }
      ConstMatMap P(logits.data() + int64_t(hd) * n * k, n, k);
      MatMap Out(out.ptr() + (int64_t(b) * D + int64_t(hd) * d) * n, d, n);
      Out.noalias() = Mv * P.transpose();
    }
    if (rec)
      std::copy(logits.data(), logits.data() + int64_t(heads) * n * k,
                probs->data() + int64_t(b) * heads * n * k);
  }

  return record_op(
      "attention_context", {&q, &kbar, &vbar, &rel_h, &rel_w}, std::move(out),
      [probs, dq = q.data, dk = kbar.data, dv = vbar.data, rh = rel_h.data,
       rw = rel_w.data, row_of, col_of, B, D, H, W, heads, d, n, k, scale,
       relpos, table_rows, reduced_size, w](const std::vector<int>& in) {
        return [=](Graph& g, const std::vector<double>& go) {
          std::vector<double> dM(size_t(n) * k);
          std::vector<double> dGh, dGw;
          if (relpos) {
            dGh.resize(size_t(n) * table_rows);
            dGw.resize(size_t(n) * table_rows);
          }
          for (int b = 0; b < B; ++b) {
            for (int hd = 0; hd < heads; ++hd) {
              const int64_t map_off = (int64_t(b) * D + int64_t(hd) * d);
              ConstMatMap Mq(dq->data() + map_off * n, d, n);
              ConstMatMap Mk(dk->data() + map_off * k, d, k);
              ConstMatMap Mv(dv->data() + map_off * k, d, k);
              ConstMatMap Go(go.data() + map_off * n, d, n);
              ConstMatMap P(probs->data() + (int64_t(b) * heads + hd) * n * k, n,
                            k);
              // dP, then the softmax Jacobian in place
              MatMap DM(dM.data(), n, k);
              DM.noalias() = Go.transpose() * Mv;  // dP
              if (in[2] >= 0) {
                MatMap Gv(g.grad_buf(in[2]).data() + map_off * k, d, k);
                Gv.noalias() += Go * P;
              }
              for (int64_t i = 0; i < n; ++i) {
                double* mrow = dM.data() + i * k;
                const double* prow = P.data() + i * k;
                double dot = 0.0;
                for (int64_t j = 0; j < k; ++j) dot += mrow[j] * prow[j];
                for (int64_t j = 0; j < k; ++j)
                  mrow[j] = prow[j] * (mrow[j] - dot) * scale;
              }
              if (in[0] >= 0) {
                MatMap Gq(g.grad_buf(in[0]).data() + map_off * n, d, n);
                Gq.noalias() += Mk * DM.transpose();
              }
              if (in[1] >= 0) {
                MatMap Gk(g.grad_buf(in[1]).data() + map_off * k, d, k);
                Gk.noalias() += Mq * DM;
              }
              if (relpos) {
                // scatter dM back onto the per-offset gathers
                std::fill(dGh.begin(), dGh.end(), 0.0);
                std::fill(dGw.begin(), dGw.end(), 0.0);
                for (int64_t i = 0; i < n; ++i) {
                  const double* mrow = dM.data() + i * k;
                  double* gh = dGh.data() + i * table_rows;
                  double* gw = dGw.data() + i * table_rows;
                  for (int64_t j = 0; j < k; ++j) {
                    const int jy = int(j) / w, jx = int(j) % w;
                    gh[detail::rel_row(jy, row_of[size_t(i)], reduced_size)] +=
                        mrow[j];
                    gw[detail::rel_row(jx, col_of[size_t(i)], reduced_size)] +=
                        mrow[j];
                  }
                }
                MatMap DGh(dGh.data(), n, table_rows);
                MatMap DGw(dGw.data(), n, table_rows);
                if (in[0] >= 0) {
                  ConstMatMap Rh(rh->data() + int64_t(hd) * table_rows * d,
                                 table_rows, d);
                  ConstMatMap Rw(rw->data() + int64_t(hd) * table_rows * d,
                                 table_rows, d);
                  MatMap Gq(g.grad_buf(in[0]).data() + map_off * n, d, n);
                  Gq.noalias() += Rh.transpose() * DGh.transpose();
                  Gq.noalias() += Rw.transpose() * DGw.transpose();
                }
                if (in[3] >= 0) {
                  MatMap Grh(g.grad_buf(in[3]).data() +
                                 int64_t(hd) * table_rows * d,
                             table_rows, d);
                  Grh.noalias() += DGh.transpose() * Mq.transpose();
                }
                if (in[4] >= 0) {
                  MatMap Grw(g.grad_buf(in[4]).data() +
                                 int64_t(hd) * table_rows * d,
                             table_rows, d);
                  Grw.noalias() += DGw.transpose() * Mq.transpose();
                }
              }
            }
          }
        };
      });
}

// ---------------------------------------------------------------------------
// public surface
// ---------------------------------------------------------------------------

// Spatial reduction of key/value maps to the clamped reduced size.
inline std::pair<Tensor, Tensor> project_kv(const Tensor& k, const Tensor& v,
                                            const AttentionConfig& cfg) {
  if (k.ndim() != 4 || v.ndim() != 4 || k.shape != v.shape)
    throw ShapeError("project_kv: expects matching 4-d key/value maps");
  const int h = cfg.clamped(k.shape[2]);
  const int w = cfg.clamped(k.shape[3]);
  if (cfg.projection == KvProjection::bilinear)
    return {bilinear_resize(k, h, w), bilinear_resize(v, h, w)};
  return {block_max_pool(k, h, w), block_max_pool(v, h, w)};
}

// Standalone relative position logits, mainly a verification surface: the
// fused context op computes the same quantities without materializing them.
// q: [heads x n x d] for a query grid qh x qw and key grid kh x kw.
// Returns (S_H, S_W), each [heads x n x k].
inline std::pair<Tensor, Tensor> relative_logits(const Tensor& q,
                                                 const AttentionConfig& cfg,
                                                 const RelativePositionTable& t,
                                                 int qh, int qw, int kh, int kw) {
  if (q.ndim() != 3 || q.shape[0] != cfg.heads)
    throw ShapeError("relative_logits: q must be [heads x n x d]");
  const int heads = cfg.heads, d = q.shape[2];
  const int64_t n = q.shape[1];
  if (n != int64_t(qh) * qw)
    throw ShapeError("relative_logits: n does not match the query grid");
  const int64_t k = int64_t(kh) * kw;
  const int R = cfg.reduced_size;
  const int table_rows = 2 * R - 1;

  auto one_axis = [&](const Tensor& table, bool vertical) {
    if (table.shape != Shape{heads, table_rows, d})
      throw ShapeError("relative_logits: table shape " + shape_str(table.shape) +
                       " does not match config");
    Tensor s = Tensor::zeros({heads, int(n), int(k)});
    for (int hd = 0; hd < heads; ++hd)
      for (int64_t i = 0; i < n; ++i) {
        const int qc = vertical ? int(i) / qw : int(i) % qw;
        const int rc = detail::reduced_coord(qc, vertical ? qh : qw,
                                             vertical ? kh : kw);
        for (int64_t j = 0; j < k; ++j) {
          const int jc = vertical ? int(j) / kw : int(j) % kw;
          const int row = detail::rel_row(jc, rc, R);
          if (row < 0 || row >= table_rows)
            throw Error("relative_logits: offset outside table range");
          double acc = 0.0;
          for (int t2 = 0; t2 < d; ++t2)
            acc += q.at((int64_t(hd) * n + i) * d + t2) *
                   table.at((int64_t(hd) * table_rows + row) * d + t2);
          s.at((int64_t(hd) * n + i) * k + j) = acc;
        }
      }
    return record_op(
        "relative_logits", {&q, &table}, std::move(s),
        [dq = q.data, dt = table.data, heads, n, k, d, qh, qw, kh, kw, R,
         table_rows, vertical](const std::vector<int>& in) {
          return [=](Graph& g, const std::vector<double>& go) {
            for (int hd = 0; hd < heads; ++hd)
              for (int64_t i = 0; i < n; ++i) {
                const int qc = vertical ? int(i) / qw : int(i) % qw;
                const int rc = detail::reduced_coord(qc, vertical ? qh : qw,
                                                     vertical ? kh : kw);
                for (int64_t j = 0; j < k; ++j) {
                  const int jc = vertical ? int(j) / kw : int(j) % kw;
                  const int row = detail::rel_row(jc, rc, R);
                  const double gout = go[size_t((int64_t(hd) * n + i) * k + j)];
                  if (gout == 0.0) continue;
                  for (int t2 = 0; t2 < d; ++t2) {
                    if (in[0] >= 0)
                      g.grad_buf(in[0])[size_t((int64_t(hd) * n + i) * d + t2)] +=
                          gout *
                          (*dt)[size_t((int64_t(hd) * table_rows + row) * d + t2)];
                    if (in[1] >= 0)
                      g.grad_buf(
                          in[1])[size_t((int64_t(hd) * table_rows + row) * d +
                                        t2)] +=
                          gout * (*dq)[size_t((int64_t(hd) * n + i) * d + t2)];
                  }
                }
              }
          };
        });
  };
  return {one_axis(t.r_h, /*vertical=*/true), one_axis(t.r_w, /*vertical=*/false)};
}

namespace detail {

inline Tensor mhsa_impl(const Tensor& q_src, const Tensor& kv_src,
                        const AttentionWeights& w, const AttentionConfig& cfg,
                        bool reduce, bool relpos) {
  cfg.validate(q_src.shape[1]);
  Tensor qm = conv2d(q_src, w.wq, w.bq);
  Tensor km = conv2d(kv_src, w.wk, w.bk);
  Tensor vm = conv2d(kv_src, w.wv, w.bv);
  if (reduce) {
    auto [kr, vr] = project_kv(km, vm, cfg);
    km = kr;
    vm = vr;
  }
  Tensor ctx = relpos ? attention_context(qm, km, vm, w.rel.r_h, w.rel.r_w,
                                          cfg.heads, cfg.reduced_size)
                      : attention_context(qm, km, vm, Tensor(), Tensor(),
                                          cfg.heads, cfg.reduced_size);
  return conv2d(ctx, w.wout, w.bout);
}

}  // namespace detail

// Quadratic-cost baseline: keys/values stay at full resolution, so the
// similarity matrix is n x n.
inline Tensor standard_mhsa(const Tensor& x, const AttentionWeights& w,
                            const AttentionConfig& cfg) {
  return detail::mhsa_impl(x, x, w, cfg, /*reduce=*/false, /*relpos=*/false);
}

// Keys/values spatially reduced to k = h*w elements; similarity is n x k.
inline Tensor efficient_mhsa(const Tensor& x, const AttentionWeights& w,
                             const AttentionConfig& cfg) {
  return detail::mhsa_impl(x, x, w, cfg, /*reduce=*/true, /*relpos=*/false);
}

// Efficient variant with the two relative position logit matrices added to
// the similarity logits before the shared scaling and softmax.
inline Tensor efficient_mhsa_relpos(const Tensor& x, const AttentionWeights& w,
                                    const AttentionConfig& cfg) {
  if (!cfg.use_relpos)
    throw ConfigError("efficient_mhsa_relpos: config has use_relpos=false");
  if (!w.rel.r_h.defined())
    throw ConfigError("efficient_mhsa_relpos: weights carry no relpos tables");
  return detail::mhsa_impl(x, x, w, cfg, /*reduce=*/true, /*relpos=*/true);
}

// Two-input form: queries from the high-resolution skip stream, keys/values
// from the coarser decoder stream. Output matches the query resolution.
inline Tensor decoder_cross_mhsa(const Tensor& hi, const Tensor& lo,
                                 const AttentionWeights& w,
                                 const AttentionConfig& cfg) {
  if (hi.ndim() != 4 || lo.ndim() != 4)
    throw ShapeError("decoder_cross_mhsa: expects 4-d inputs");
  if (lo.shape[2] > hi.shape[2] || lo.shape[3] > hi.shape[3])
    throw ConfigError("decoder_cross_mhsa: second input must not be finer than "
                      "the first (got " +
                      shape_str(lo.shape) + " vs " + shape_str(hi.shape) + ")");
  if (lo.shape[1] != hi.shape[1])
    throw ConfigError("decoder_cross_mhsa: channel mismatch between streams");
  const bool relpos = cfg.use_relpos && w.rel.r_h.defined();
  return detail::mhsa_impl(hi, lo, w, cfg, /*reduce=*/true, relpos);
}

}  // namespace utnet
