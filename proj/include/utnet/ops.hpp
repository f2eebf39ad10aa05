#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "utnet/tensor.hpp"

namespace utnet {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                     " vs " + shape_str(b.shape));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape);
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] + pb[i];
  return record_op("add", {&a, &b}, std::move(out), [](const std::vector<int>& in) {
    return [in](Graph& g, const std::vector<double>& go) {
      accumulate_grad(g, in[0], go);
      accumulate_grad(g, in[1], go);
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("sub", a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) - b.at(i);
  return record_op("sub", {&a, &b}, std::move(out), [](const std::vector<int>& in) {
    return [in](Graph& g, const std::vector<double>& go) {
      accumulate_grad(g, in[0], go);
      if (in[1] >= 0) {
        auto& gb = g.grad_buf(in[1]);
        for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
      }
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * b.at(i);
  return record_op("mul", {&a, &b}, std::move(out),
                   [da = a.data, db = b.data](const std::vector<int>& in) {
    return [in, da, db](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * (*db)[i];
      }
      if (in[1] >= 0) {
        auto& gb = g.grad_buf(in[1]);
        for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * (*da)[i];
      }
    };
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape("div", a, b);
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) / b.at(i);
  return record_op("div", {&a, &b}, std::move(out),
                   [da = a.data, db = b.data](const std::vector<int>& in) {
    return [in, da, db](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / (*db)[i];
      }
      if (in[1] >= 0) {
        auto& gb = g.grad_buf(in[1]);
        for (size_t i = 0; i < go.size(); ++i)
          gb[i] -= go[i] * (*da)[i] / ((*db)[i] * (*db)[i]);
      }
    };
  });
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) * c;
  return record_op("scale", {&a}, std::move(out), [c](const std::vector<int>& in) {
    return [in, c](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
      }
    };
  });
}

inline Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) + c;
  return record_op("add_scalar", {&a}, std::move(out), [](const std::vector<int>& in) {
    return [in](Graph& g, const std::vector<double>& go) {
      accumulate_grad(g, in[0], go);
    };
  });
}

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(i) = a.at(i) > 0.0 ? a.at(i) : 0.0;
  return record_op("relu", {&a}, std::move(out),
                   [da = a.data](const std::vector<int>& in) {
    return [in, da](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i)
          if ((*da)[i] > 0.0) ga[i] += go[i];
      }
    };
  });
}

// Exact gelu, x * Phi(x) with the Gaussian CDF.
inline Tensor gelu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape);
  for (int64_t i = 0; i < a.numel(); ++i) {
    double x = a.at(i);
    out.at(i) = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  return record_op("gelu", {&a}, std::move(out),
                   [da = a.data](const std::vector<int>& in) {
    return [in, da](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i) {
          double x = (*da)[i];
          double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
          double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
          ga[i] += go[i] * (cdf + x * pdf);
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i) s += a.at(i);
  Tensor out = Tensor::from({1}, {s});
  return record_op("sum", {&a}, std::move(out),
                   [n = a.numel()](const std::vector<int>& in) {
    return [in, n](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += go[0];
      }
    };
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / double(a.numel())); }

// Sums over the given axes; the output keeps the remaining dims in order
// (scalar {1} when everything is reduced).
inline Tensor sum_axes(const Tensor& a, const std::vector<int>& axes) {
  std::vector<bool> reduce(a.shape.size(), false);
  for (int ax : axes) {
    if (ax < 0 || ax >= a.ndim())
      throw ShapeError("sum_axes: axis " + std::to_string(ax) + " out of range for " +
                       shape_str(a.shape));
    reduce[size_t(ax)] = true;
  }
  Shape out_shape;
  for (size_t i = 0; i < a.shape.size(); ++i)
    if (!reduce[i]) out_shape.push_back(a.shape[i]);
  if (out_shape.empty()) out_shape = {1};

  // index map: input linear index -> output linear index
  const int nd = a.ndim();
  std::vector<int64_t> in_stride(size_t(nd), 1), out_stride(size_t(nd), 0);
  for (int i = nd - 2; i >= 0; --i)
    in_stride[size_t(i)] = in_stride[size_t(i) + 1] * a.shape[size_t(i) + 1];
  {
    int64_t s = 1;
    for (int i = nd - 1; i >= 0; --i) {
      if (!reduce[size_t(i)]) {
        out_stride[size_t(i)] = s;
        s *= a.shape[size_t(i)];
      }
    }
  }
  auto out_index = [nd, in_stride, out_stride, dims = a.shape](int64_t lin) {
    int64_t o = 0;
    for (int i = 0; i < nd; ++i) {
      int64_t coord = (lin / in_stride[size_t(i)]) % dims[size_t(i)];
      o += coord * out_stride[size_t(i)];
    }
    return o;
  };

  Tensor out = Tensor::zeros(out_shape);
  for (int64_t i = 0; i < a.numel(); ++i) out.at(out_index(i)) += a.at(i);
  return record_op("sum_axes", {&a}, std::move(out),
                   [out_index, n = a.numel()](const std::vector<int>& in) {
    return [in, out_index, n](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (int64_t i = 0; i < n; ++i) ga[size_t(i)] += go[size_t(out_index(i))];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.ndim())
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape));
  const int64_t len = x.shape[size_t(axis)];
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.shape[size_t(i)];
  for (int i = 0; i < axis; ++i) outer *= x.shape[size_t(i)];

  Tensor out = Tensor::zeros(x.shape);
  const double* px = x.ptr();
  double* po = out.ptr();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      const int64_t base = o * len * inner + in;
      double mx = px[base];
      for (int64_t k = 1; k < len; ++k) mx = std::max(mx, px[base + k * inner]);
      double z = 0.0;
      for (int64_t k = 0; k < len; ++k) {
        double e = std::exp(px[base + k * inner] - mx);
        po[base + k * inner] = e;
        z += e;
      }
      for (int64_t k = 0; k < len; ++k) po[base + k * inner] /= z;
    }
  }
  auto p = out.data;  // keep alive for backward before `out` is moved from
  return record_op("softmax", {&x}, std::move(out),
                   [p, len, inner, outer](const std::vector<int>& in) {
    return [in, p, len, inner, outer](Graph& g, const std::vector<double>& go) {
      if (in[0] < 0) return;
      auto& gx = g.grad_buf(in[0]);
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t iN = 0; iN < inner; ++iN) {
          const int64_t base = o * len * inner + iN;
          double dot = 0.0;
          for (int64_t k = 0; k < len; ++k)
            dot += go[size_t(base + k * inner)] * (*p)[size_t(base + k * inner)];
          for (int64_t k = 0; k < len; ++k) {
            const size_t idx = size_t(base + k * inner);
            gx[idx] += (*p)[idx] * (go[idx] - dot);
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw ShapeError("matmul: expects 2-d tensors, got " + shape_str(a.shape) +
                     " and " + shape_str(b.shape));
  const int m = a.shape[0], p = a.shape[1], q = b.shape[1];
  if (b.shape[0] != p)
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape) +
                     " x " + shape_str(b.shape));
  Tensor out = Tensor::zeros({m, q});
  ConstMatMap A(a.ptr(), m, p), B(b.ptr(), p, q);
  MatMap(out.ptr(), m, q).noalias() = A * B;
  return record_op("matmul", {&a, &b}, std::move(out),
                   [da = a.data, db = b.data, m, p, q](const std::vector<int>& in) {
    return [in, da, db, m, p, q](Graph& g, const std::vector<double>& go) {
      ConstMatMap A(da->data(), m, p), B(db->data(), p, q), Go(go.data(), m, q);
      if (in[0] >= 0) {
        MatMap Ga(g.grad_buf(in[0]).data(), m, p);
        Ga.noalias() += Go * B.transpose();
      }
      if (in[1] >= 0) {
        MatMap Gb(g.grad_buf(in[1]).data(), p, q);
        Gb.noalias() += A.transpose() * Go;
      }
    };
  });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, const Shape& s) {
  if (numel(s) != a.numel())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape) + " as " +
                     shape_str(s));
  Tensor out;
  out.shape = s;
  out.data = a.data;  // row-major view, no copy
  return record_op("reshape", {&a}, std::move(out), [](const std::vector<int>& in) {
    return [in](Graph& g, const std::vector<double>& go) {
      accumulate_grad(g, in[0], go);
    };
  });
}

inline Tensor transpose(const Tensor& a, const std::vector<int>& perm) {
  if (int(perm.size()) != a.ndim())
    throw ShapeError("transpose: perm size " + std::to_string(perm.size()) +
                     " does not match rank of " + shape_str(a.shape));
  const int nd = a.ndim();
  Shape out_shape(size_t(nd), 0);
  for (int i = 0; i < nd; ++i) out_shape[size_t(i)] = a.shape[size_t(perm[size_t(i)])];
  std::vector<int64_t> in_stride(size_t(nd), 1);
  for (int i = nd - 2; i >= 0; --i)
    in_stride[size_t(i)] = in_stride[size_t(i) + 1] * a.shape[size_t(i) + 1];
  // out linear index -> in linear index
  std::vector<int64_t> src_stride(size_t(nd), 0);
  for (int i = 0; i < nd; ++i) src_stride[size_t(i)] = in_stride[size_t(perm[size_t(i)])];
  std::vector<int64_t> out_stride(size_t(nd), 1);
  for (int i = nd - 2; i >= 0; --i)
    out_stride[size_t(i)] = out_stride[size_t(i) + 1] * out_shape[size_t(i) + 1];

  auto src_index = [nd, out_stride, out_shape, src_stride](int64_t lin) {
    int64_t s = 0;
    for (int i = 0; i < nd; ++i)
      s += ((lin / out_stride[size_t(i)]) % out_shape[size_t(i)]) * src_stride[size_t(i)];
    return s;
  };
  Tensor out = Tensor::zeros(out_shape);
  for (int64_t i = 0; i < out.numel(); ++i) out.at(i) = a.at(src_index(i));
  return record_op("transpose", {&a}, std::move(out),
                   [src_index](const std::vector<int>& in) {
    return [in, src_index](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& ga = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i)
          ga[size_t(src_index(int64_t(i)))] += go[i];
      }
    };
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0 || axis >= nd)
    throw ShapeError("concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = parts[0].shape;
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != nd)
      throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.shape[size_t(i)] != out_shape[size_t(i)])
        throw ShapeError("concat: shape mismatch " + shape_str(p.shape) + " vs " +
                         shape_str(out_shape));
    total += p.shape[size_t(axis)];
  }
  out_shape[size_t(axis)] = total;

  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= out_shape[size_t(i)];
  for (int i = 0; i < axis; ++i) outer *= out_shape[size_t(i)];

  Tensor out = Tensor::zeros(out_shape);
  std::vector<int64_t> sizes;  // per-part axis extent * inner
  for (const Tensor& p : parts) sizes.push_back(int64_t(p.shape[size_t(axis)]) * inner);
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = o * int64_t(total) * inner;
    for (size_t pi = 0; pi < parts.size(); ++pi) {
      const double* src = parts[pi].ptr() + o * sizes[pi];
      std::memcpy(out.ptr() + off, src, size_t(sizes[pi]) * sizeof(double));
      off += sizes[pi];
    }
  }
  std::vector<const Tensor*> refs;
  for (const Tensor& p : parts) refs.push_back(&p);
  Tensor result;
  {
    detail::nan_scan(out, "concat");
    Graph* g = Graph::current();
    bool rec = false;
    if (g && g->recording())
      for (const Tensor& p : parts)
        if (p.requires_grad || g->on_tape(p)) rec = true;
    if (rec) {
      std::vector<int> ids;
      for (const Tensor& p : parts) ids.push_back(g->input_id(p));
      auto bw = [ids, sizes, outer, total, inner](Graph& gg,
                                                  const std::vector<double>& go) {
        for (int64_t o = 0; o < outer; ++o) {
          int64_t off = o * int64_t(total) * inner;
          for (size_t pi = 0; pi < ids.size(); ++pi) {
            if (ids[pi] >= 0) {
              auto& gp = gg.grad_buf(ids[pi]);
              for (int64_t k = 0; k < sizes[pi]; ++k)
                gp[size_t(o * sizes[pi] + k)] += go[size_t(off + k)];
            }
            off += sizes[pi];
          }
        }
      };
      out.node_id = g->push("concat", ids, out.numel(), std::move(bw));
      out.tape_epoch = g->epoch();
    }
    result = std::move(out);
  }
  return result;
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride,
                   int pad, int OH, int OW, double* col) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* dst = col + ((int64_t(c) * kh + ky) * kw + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + OW, 0.0);
            dst += OW;
            continue;
          }
          const double* src = x + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            *dst++ = (ix >= 0 && ix < W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, int C, int H, int W, int kh, int kw,
                       int stride, int pad, int OH, int OW, double* dx) {
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* src = col + ((int64_t(c) * kh + ky) * kw + kx) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= H) {
            src += OW;
            continue;
          }
          double* dst = dx + (int64_t(c) * H + iy) * W;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < W) dst[ix] += src[ox];
          }
          src += OW;
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation, kernels 1x1 or 3x3, optional bias[O]. 1x1/stride-1/pad-0
// skips im2col and multiplies the input in place.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
                     int stride = 1, int pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw ShapeError("conv2d: expects x[B,C,H,W], w[O,C,kh,kw], got " +
                     shape_str(x.shape) + " and " + shape_str(w.shape));
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int O = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != C)
    throw ShapeError("conv2d: channel mismatch, x " + shape_str(x.shape) + " vs w " +
                     shape_str(w.shape));
  if (!((kh == 1 && kw == 1) || (kh == 3 && kw == 3)))
    throw ShapeError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(w.shape));
  // Output size uses the floor convention so stride-2 3x3 blocks halve even
  // inputs exactly; a window that does not fit at all is a dimension error.
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    throw ShapeError("conv2d: no valid output positions for input " +
                     shape_str(x.shape) + ", kernel " + shape_str(w.shape) +
                     ", stride " + std::to_string(stride) + ", pad " +
                     std::to_string(pad));
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  const bool has_bias = bias.defined();
  if (has_bias && (bias.ndim() != 1 || bias.shape[0] != O))
    throw ShapeError("conv2d: bias must be [O], got " + shape_str(bias.shape));
  const bool pointwise = (kh == 1 && stride == 1 && pad == 0);

  Tensor out = Tensor::zeros({B, O, OH, OW});
  const int K = C * kh * kw;
  const int64_t plane = int64_t(OH) * OW;
  std::vector<double> col;
  if (!pointwise) col.resize(size_t(K) * plane);
  ConstMatMap Wm(w.ptr(), O, K);
  for (int b = 0; b < B; ++b) {
    const double* xb = x.ptr() + int64_t(b) * C * H * W;
    double* ob = out.ptr() + int64_t(b) * O * plane;
    if (pointwise) {
      ConstMatMap Xm(xb, C, plane);
      MatMap(ob, O, plane).noalias() = Wm * Xm;
    } else {
      detail::im2col(xb, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
      ConstMatMap Cm(col.data(), K, plane);
      MatMap(ob, O, plane).noalias() = Wm * Cm;
    }
    if (has_bias)
      for (int o = 0; o < O; ++o) {
        double bv = bias.at(o);
        double* p = ob + int64_t(o) * plane;
        for (int64_t i = 0; i < plane; ++i) p[i] += bv;
      }
  }

  // Undefined bias resolves to id -1 (no gradient path), so the three-input
  // form covers both cases.
  return record_op("conv2d", {&x, &w, &bias}, std::move(out),
                   [dx = x.data, dw = w.data, B, C, H, W, O, kh, kw, stride, pad, OH,
                    OW, K, plane, pointwise, has_bias](const std::vector<int>& in) {
    return [=](Graph& g, const std::vector<double>& go) {
      ConstMatMap Wm(dw->data(), O, K);
      std::vector<double> col, dcol;
      if (!pointwise) col.resize(size_t(K) * plane);
      const bool need_dx = in[0] >= 0;
      const bool need_dw = in[1] >= 0;
      const bool need_db = has_bias && in[2] >= 0;
      if (need_dx && !pointwise) dcol.resize(size_t(K) * plane);
      for (int b = 0; b < B; ++b) {
        ConstMatMap Go(go.data() + int64_t(b) * O * plane, O, plane);
        const double* xb = dx->data() + int64_t(b) * C * H * W;
        if (need_dw) {
          MatMap Gw(g.grad_buf(in[1]).data(), O, K);
          if (pointwise) {
            ConstMatMap Xm(xb, C, plane);
            Gw.noalias() += Go * Xm.transpose();
          } else {
            detail::im2col(xb, C, H, W, kh, kw, stride, pad, OH, OW, col.data());
            ConstMatMap Cm(col.data(), K, plane);
            Gw.noalias() += Go * Cm.transpose();
          }
        }
        if (need_dx) {
          double* gxb = g.grad_buf(in[0]).data() + int64_t(b) * C * H * W;
          if (pointwise) {
            MatMap Gx(gxb, C, plane);
            Gx.noalias() += Wm.transpose() * Go;
          } else {
            MatMap Dc(dcol.data(), K, plane);
            Dc.noalias() = Wm.transpose() * Go;
            detail::col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW, gxb);
          }
        }
        if (need_db) {
          auto& gb = g.grad_buf(in[2]);
          for (int o = 0; o < O; ++o) {
            const double* p = go.data() + (int64_t(b) * O + o) * plane;
            double s = 0.0;
            for (int64_t i = 0; i < plane; ++i) s += p[i];
            gb[size_t(o)] += s;
          }
        }
      }
    };
  });
}

inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride = 1, int pad = 0) {
  return conv2d(x, w, Tensor(), stride, pad);
}

// ---------------------------------------------------------------------------
// bilinear resize
// ---------------------------------------------------------------------------

// Half-pixel-center sampling. Linear in x, so backward is the transpose map.
inline Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  if (x.ndim() != 4)
    throw ShapeError("bilinear_resize: expects [B,C,H,W], got " + shape_str(x.shape));
  if (out_h < 1 || out_w < 1)
    throw ShapeError("bilinear_resize: output size must be >= 1");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];

  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  auto make_taps = [](int in, int out) {
    std::vector<Tap> taps(size_t(out), Tap{});
    const double s = double(in) / double(out);
    for (int o = 0; o < out; ++o) {
      double src = (o + 0.5) * s - 0.5;
      if (src < 0.0) src = 0.0;
      if (src > in - 1) src = in - 1;
      int i0 = int(std::floor(src));
      if (i0 > in - 2) i0 = in - 2;
      if (i0 < 0) i0 = 0;
      double f = src - i0;
      taps[size_t(o)] = {i0, std::min(i0 + 1, in - 1), 1.0 - f, f};
    }
    return taps;
  };
  const auto ty = make_taps(H, out_h);
  const auto tx = make_taps(W, out_w);

  Tensor out = Tensor::zeros({B, C, out_h, out_w});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* src = x.ptr() + (int64_t(b) * C + c) * H * W;
      double* dst = out.ptr() + (int64_t(b) * C + c) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[size_t(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const Tap& t = tx[size_t(ox)];
          *dst++ = a.w0 * (t.w0 * src[a.i0 * W + t.i0] + t.w1 * src[a.i0 * W + t.i1]) +
                   a.w1 * (t.w0 * src[a.i1 * W + t.i0] + t.w1 * src[a.i1 * W + t.i1]);
        }
      }
    }
  return record_op("bilinear_resize", {&x}, std::move(out),
                   [ty, tx, B, C, H, W, out_h, out_w](const std::vector<int>& in) {
    return [=](Graph& g, const std::vector<double>& go) {
      if (in[0] < 0) return;
      auto& gx = g.grad_buf(in[0]);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          double* dst = gx.data() + (int64_t(b) * C + c) * H * W;
          const double* src = go.data() + (int64_t(b) * C + c) * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            const Tap& a = ty[size_t(oy)];
            for (int ox = 0; ox < out_w; ++ox) {
              const Tap& t = tx[size_t(ox)];
              const double v = *src++;
              dst[a.i0 * W + t.i0] += a.w0 * t.w0 * v;
              dst[a.i0 * W + t.i1] += a.w0 * t.w1 * v;
              dst[a.i1 * W + t.i0] += a.w1 * t.w0 * v;
              dst[a.i1 * W + t.i1] += a.w1 * t.w1 * v;
            }
          }
        }
    };
  });
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

inline Tensor max_pool_2d(const Tensor& x) {
  if (x.ndim() != 4)
    throw ShapeError("max_pool_2d: expects [B,C,H,W], got " + shape_str(x.shape));
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (H % 2 != 0 || W % 2 != 0)
    throw ShapeError("max_pool_2d: spatial dims must be even, got " +
                     shape_str(x.shape));
  const int OH = H / 2, OW = W / 2;
  Tensor out = Tensor::zeros({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(size_t(out.numel()));
  const double* px = x.ptr();
  double* po = out.ptr();
  int64_t oi = 0;
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    const double* plane = px + bc * H * W;
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox, ++oi) {
        int64_t best = int64_t(2 * oy) * W + 2 * ox;
        double bv = plane[best];
        const int64_t cand[3] = {best + 1, best + W, best + W + 1};
        for (int64_t idx : cand)
          if (plane[idx] > bv) {
            bv = plane[idx];
            best = idx;
          }
        po[oi] = bv;
        (*argmax)[size_t(oi)] = bc * H * W + best;
      }
  }
  return record_op("max_pool_2d", {&x}, std::move(out),
                   [argmax](const std::vector<int>& in) {
    return [in, argmax](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& gx = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i) gx[size_t((*argmax)[i])] += go[i];
      }
    };
  });
}

// Max over adaptive windows [floor(i*H/oh), floor((i+1)*H/oh)); equals
// repeated 2x2 pooling when the ratio is a power of two.
inline Tensor block_max_pool(const Tensor& x, int out_h, int out_w) {
  if (x.ndim() != 4)
    throw ShapeError("block_max_pool: expects [B,C,H,W], got " + shape_str(x.shape));
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (out_h < 1 || out_h > H || out_w < 1 || out_w > W)
    throw ShapeError("block_max_pool: bad target size");
  Tensor out = Tensor::zeros({B, C, out_h, out_w});
  auto argmax = std::make_shared<std::vector<int64_t>>(size_t(out.numel()));
  int64_t oi = 0;
  for (int64_t bc = 0; bc < int64_t(B) * C; ++bc) {
    const double* plane = x.ptr() + bc * H * W;
    for (int oy = 0; oy < out_h; ++oy) {
      const int y0 = oy * H / out_h, y1 = (oy + 1) * H / out_h;
      for (int ox = 0; ox < out_w; ++ox, ++oi) {
        const int x0 = ox * W / out_w, x1 = (ox + 1) * W / out_w;
        int64_t best = int64_t(y0) * W + x0;
        double bv = plane[best];
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) {
            const int64_t idx = int64_t(y) * W + xx;
            if (plane[idx] > bv) {
              bv = plane[idx];
              best = idx;
            }
          }
        out.at(oi) = bv;
        (*argmax)[size_t(oi)] = bc * H * W + best;
      }
    }
  }
  return record_op("block_max_pool", {&x}, std::move(out),
                   [argmax](const std::vector<int>& in) {
    return [in, argmax](Graph& g, const std::vector<double>& go) {
      if (in[0] >= 0) {
        auto& gx = g.grad_buf(in[0]);
        for (size_t i = 0; i < go.size(); ++i) gx[size_t((*argmax)[i])] += go[i];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

// Per-channel batch norm over (B,H,W). Training mode uses batch statistics
// and updates the running buffers in place (they are layer state, not graph
// values); eval mode normalizes with the running statistics.
inline Tensor batch_norm_2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            Tensor& running_mean, Tensor& running_var, bool training,
                            double momentum = 0.1, double eps = 1e-5) {
  if (x.ndim() != 4)
    throw ShapeError("batch_norm_2d: expects [B,C,H,W], got " + shape_str(x.shape));
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (gamma.numel() != C || beta.numel() != C || running_mean.numel() != C ||
      running_var.numel() != C)
    throw ShapeError("batch_norm_2d: affine/running buffers must have " +
                     std::to_string(C) + " entries");
  const int64_t N = int64_t(B) * H * W;
  const int64_t plane = int64_t(H) * W;

  auto mean_v = std::make_shared<std::vector<double>>(size_t(C), 0.0);
  auto inv_std = std::make_shared<std::vector<double>>(size_t(C), 0.0);
  for (int c = 0; c < C; ++c) {
    double m = 0.0;
    for (int b = 0; b < B; ++b) {
      const double* p = x.ptr() + (int64_t(b) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) m += p[i];
    }
    m /= double(N);
    double var = 0.0;
    if (training) {
      for (int b = 0; b < B; ++b) {
        const double* p = x.ptr() + (int64_t(b) * C + c) * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - m;
          var += d * d;
        }
      }
      var /= double(N);  // biased, used consistently for running stats too
      running_mean.at(c) = (1.0 - momentum) * running_mean.at(c) + momentum * m;
      running_var.at(c) = (1.0 - momentum) * running_var.at(c) + momentum * var;
    } else {
      m = running_mean.at(c);
      var = running_var.at(c);
    }
    (*mean_v)[size_t(c)] = m;
    (*inv_std)[size_t(c)] = 1.0 / std::sqrt(var + eps);
  }

  Tensor out = Tensor::zeros(x.shape);
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double m = (*mean_v)[size_t(c)], is = (*inv_std)[size_t(c)];
      const double gsc = gamma.at(c), bt = beta.at(c);
      const double* p = x.ptr() + (int64_t(b) * C + c) * plane;
      double* q = out.ptr() + (int64_t(b) * C + c) * plane;
      for (int64_t i = 0; i < plane; ++i) q[i] = gsc * (p[i] - m) * is + bt;
    }

  return record_op("batch_norm_2d", {&x, &gamma, &beta}, std::move(out),
                   [dx = x.data, dg = gamma.data, mean_v, inv_std, B, C, plane, N,
                    training](const std::vector<int>& in) {
    return [=](Graph& g, const std::vector<double>& go) {
      for (int c = 0; c < C; ++c) {
        const double m = (*mean_v)[size_t(c)], is = (*inv_std)[size_t(c)];
        const double gsc = (*dg)[size_t(c)];
        // per-channel reductions over (B,H,W)
        double sum_go = 0.0, sum_go_xhat = 0.0;
        for (int b = 0; b < B; ++b) {
          const int64_t off = (int64_t(b) * C + c) * plane;
          const double* xp = dx->data() + off;
          const double* gp = go.data() + off;
          for (int64_t i = 0; i < plane; ++i) {
            sum_go += gp[i];
            sum_go_xhat += gp[i] * (xp[i] - m) * is;
          }
        }
        if (in[1] >= 0) g.grad_buf(in[1])[size_t(c)] += sum_go_xhat;
        if (in[2] >= 0) g.grad_buf(in[2])[size_t(c)] += sum_go;
        if (in[0] >= 0) {
          auto& gx = g.grad_buf(in[0]);
          const double mg = sum_go / double(N);
          const double mgx = sum_go_xhat / double(N);
          for (int b = 0; b < B; ++b) {
            const int64_t off = (int64_t(b) * C + c) * plane;
            const double* xp = dx->data() + off;
            const double* gp = go.data() + off;
            double* gq = gx.data() + off;
            if (training) {
              for (int64_t i = 0; i < plane; ++i) {
                const double xhat = (xp[i] - m) * is;
                gq[i] += gsc * is * (gp[i] - mg - xhat * mgx);
              }
            } else {
              for (int64_t i = 0; i < plane; ++i) gq[i] += gsc * is * gp[i];
            }
          }
        }
      }
    };
  });
}

// Layer norm across the channel axis at each spatial position, affine per
// channel.
inline Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                                  const Tensor& beta, double eps = 1e-5) {
  if (x.ndim() != 4)
    throw ShapeError("layer_norm_channels: expects [B,C,H,W], got " +
                     shape_str(x.shape));
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (gamma.numel() != C || beta.numel() != C)
    throw ShapeError("layer_norm_channels: affine parameters must have " +
                     std::to_string(C) + " entries");
  const int64_t plane = int64_t(H) * W;

  auto inv_std = std::make_shared<std::vector<double>>(size_t(B) * plane);
  auto mean_v = std::make_shared<std::vector<double>>(size_t(B) * plane);
  Tensor out = Tensor::zeros(x.shape);
  for (int b = 0; b < B; ++b) {
    const double* xb = x.ptr() + int64_t(b) * C * plane;
    double* ob = out.ptr() + int64_t(b) * C * plane;
    for (int64_t i = 0; i < plane; ++i) {
      double m = 0.0;
      for (int c = 0; c < C; ++c) m += xb[c * plane + i];
      m /= C;
      double v = 0.0;
      for (int c = 0; c < C; ++c) {
        const double d = xb[c * plane + i] - m;
        v += d * d;
      }
      v /= C;
      const double is = 1.0 / std::sqrt(v + eps);
      (*mean_v)[size_t(b * plane + i)] = m;
      (*inv_std)[size_t(b * plane + i)] = is;
      for (int c = 0; c < C; ++c)
        ob[c * plane + i] = gamma.at(c) * (xb[c * plane + i] - m) * is + beta.at(c);
    }
  }
  return record_op("layer_norm_channels", {&x, &gamma, &beta}, std::move(out),
                   [dx = x.data, dg = gamma.data, mean_v, inv_std, B, C,
                    plane](const std::vector<int>& in) {
    return [=](Graph& g, const std::vector<double>& go) {
      for (int b = 0; b < B; ++b) {
        const double* xb = dx->data() + int64_t(b) * C * plane;
        const double* gb = go.data() + int64_t(b) * C * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const double m = (*mean_v)[size_t(b * plane + i)];
          const double is = (*inv_std)[size_t(b * plane + i)];
          double sum_h = 0.0, sum_hx = 0.0;  // h = gamma .* go, per position
          for (int c = 0; c < C; ++c) {
            const double xhat = (xb[c * plane + i] - m) * is;
            const double h = (*dg)[size_t(c)] * gb[c * plane + i];
            sum_h += h;
            sum_hx += h * xhat;
            if (in[1] >= 0) g.grad_buf(in[1])[size_t(c)] += gb[c * plane + i] * xhat;
            if (in[2] >= 0) g.grad_buf(in[2])[size_t(c)] += gb[c * plane + i];
          }
          if (in[0] >= 0) {
            auto& gx = g.grad_buf(in[0]);
            double* gq = gx.data() + int64_t(b) * C * plane;
            for (int c = 0; c < C; ++c) {
              const double xhat = (xb[c * plane + i] - m) * is;
              const double h = (*dg)[size_t(c)] * gb[c * plane + i];
              gq[c * plane + i] += is * (h - sum_h / C - xhat * sum_hx / C);
            }
          }
        }
      }
    };
  });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Integer class mask; the label side of a SegmentationSample.
struct LabelMask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;
  int64_t size() const { return int64_t(h) * w; }
  uint8_t at(int y, int x) const { return v[size_t(y) * size_t(w) + size_t(x)]; }
  uint8_t& at(int y, int x) { return v[size_t(y) * size_t(w) + size_t(x)]; }
};

// One-hot constant [B,K,H,W] from B stacked masks.
inline Tensor one_hot(const std::vector<LabelMask>& labels, int num_classes) {
  const int B = int(labels.size());
  const int H = labels[0].h, W = labels[0].w;
  Tensor out = Tensor::zeros({B, num_classes, H, W});
  for (int b = 0; b < B; ++b) {
    const LabelMask& m = labels[size_t(b)];
    for (int64_t i = 0; i < m.size(); ++i) {
      if (m.v[size_t(i)] >= num_classes)
        throw DataError("one_hot: label value " + std::to_string(m.v[size_t(i)]) +
                        " out of range for " + std::to_string(num_classes) +
                        " classes");
      out.at(((int64_t(b) * num_classes + m.v[size_t(i)]) * H * W) + i) = 1.0;
    }
  }
  return out;
}

// Mean pixel-wise cross entropy from raw logits [B,K,H,W].
inline Tensor cross_entropy_with_logits(const Tensor& logits,
                                        const std::vector<LabelMask>& labels) {
  if (logits.ndim() != 4)
    throw ShapeError("cross_entropy_with_logits: expects [B,K,H,W], got " +
                     shape_str(logits.shape));
  const int B = logits.shape[0], K = logits.shape[1], H = logits.shape[2],
            W = logits.shape[3];
  if (int(labels.size()) != B || labels[0].h != H || labels[0].w != W)
    throw DataError("cross_entropy_with_logits: label stack does not match logits " +
                    shape_str(logits.shape));
  const int64_t plane = int64_t(H) * W;
  const int64_t npix = int64_t(B) * plane;

  auto probs = std::make_shared<std::vector<double>>(size_t(logits.numel()));
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* lb = logits.ptr() + int64_t(b) * K * plane;
    double* pb = probs->data() + int64_t(b) * K * plane;
    for (int64_t i = 0; i < plane; ++i) {
      const int lab = labels[size_t(b)].v[size_t(i)];
      if (lab >= K)
        throw DataError("cross_entropy_with_logits: label " + std::to_string(lab) +
                        " out of range, num classes " + std::to_string(K));
      double mx = lb[i];
      for (int k = 1; k < K; ++k) mx = std::max(mx, lb[k * plane + i]);
      double z = 0.0;
      for (int k = 0; k < K; ++k) {
        const double e = std::exp(lb[k * plane + i] - mx);
        pb[k * plane + i] = e;
        z += e;
      }
      for (int k = 0; k < K; ++k) pb[k * plane + i] /= z;
      loss -= std::log(std::max(pb[lab * plane + i], 1e-300));
    }
  }
  Tensor out = Tensor::from({1}, {loss / double(npix)});
  auto labs = std::make_shared<std::vector<LabelMask>>(labels);
  return record_op("cross_entropy_with_logits", {&logits}, std::move(out),
                   [probs, labs, B, K, plane, npix](const std::vector<int>& in) {
    return [=](Graph& g, const std::vector<double>& go) {
      if (in[0] < 0) return;
      auto& gx = g.grad_buf(in[0]);
      const double s = go[0] / double(npix);
      for (int b = 0; b < B; ++b) {
        const double* pb = probs->data() + int64_t(b) * K * plane;
        double* gb = gx.data() + int64_t(b) * K * plane;
        for (int64_t i = 0; i < plane; ++i) {
          const int lab = (*labs)[size_t(b)].v[size_t(i)];
          for (int k = 0; k < K; ++k)
            gb[k * plane + i] += s * (pb[k * plane + i] - (k == lab ? 1.0 : 0.0));
        }
      }
    };
  });
}

}  // namespace utnet
