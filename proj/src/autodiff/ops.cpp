#include "fedoap/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

#include "fedoap/error.hpp"

namespace fedoap::ops {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Index = Eigen::Index;

using Grads = std::span<Tensor* const>;

Tape& tape_of(Var a) {
  require(a.tape != nullptr, ErrorCode::DetachedRoot, "variable without a tape");
  return *a.tape;
}

void same_tape(Var a, Var b) {
  require(a.tape == b.tape, ErrorCode::DetachedRoot, "operands live on different tapes");
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, ErrorCode::ShapeMismatch,
          std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_to_string(t.shape()));
}

std::size_t prod(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t p = 1;
  for (std::size_t i = from; i < to; ++i) p *= s[i];
  return p;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b || is_suffix(b, a)) return a;
  if (is_suffix(a, b)) return b;
  fail(ErrorCode::ShapeMismatch,
       std::string(op) + ": cannot broadcast " + shape_to_string(a) + " with " + shape_to_string(b));
}

// Folds an output-shaped gradient into a (possibly broadcast) operand.
void accumulate_broadcast(Tensor& dst, const Tensor& g, double sign) {
  const std::size_t n = dst.numel();
  double* d = dst.data();
  const double* gp = g.data();
  if (n == g.numel()) {
    for (std::size_t i = 0; i < n; ++i) d[i] += sign * gp[i];
    return;
  }
  for (std::size_t i = 0; i < g.numel(); ++i) d[i % n] += sign * gp[i];
}

template <typename F>
Tensor binary_forward(const Tensor& a, const Tensor& b, const char* op, F f) {
  Tensor out(broadcast_shape(a.shape(), b.shape(), op));
  const std::size_t na = a.numel(), nb = b.numel();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = f(a[i % na], b[i % nb]);
  return out;
}

// ---------------------------------------------------------------------------
// Convolution lowering: columns are laid out [C*kh*kw, N*Ho*Wo] so one GEMM
// covers the whole batch.

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, stride, pad, ho, wo;
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * ho * wo; }
};

void im2col(const ConvGeometry& g, const double* x, double* col) {
  const std::size_t plane = g.ho * g.wo;
  const std::size_t ncols = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        double* row = col + ((ci * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t ni = 0; ni < g.n; ++ni) {
          const double* src = x + (ni * g.c + ci) * g.h * g.w;
          double* dst = row + ni * plane;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            double* out_row = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(out_row, out_row + g.wo, 0.0);
              continue;
            }
            const double* in_row = src + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              out_row[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : in_row[ix];
            }
          }
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const double* col, double* dx) {
  const std::size_t plane = g.ho * g.wo;
  const std::size_t ncols = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const double* row = col + ((ci * g.kh + ky) * g.kw + kx) * ncols;
        for (std::size_t ni = 0; ni < g.n; ++ni) {
          double* dst = dx + (ni * g.c + ci) * g.h * g.w;
          const double* src = row + ni * plane;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            double* in_row = dst + static_cast<std::size_t>(iy) * g.w;
            const double* col_row = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) in_row[ix] += col_row[ox];
            }
          }
        }
      }
    }
  }
}

// [N, O, P] <-> [O, N*P]
void batch_major_to_channel_major(const double* src, double* dst, std::size_t n, std::size_t o, std::size_t p) {
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi)
      std::copy_n(src + (ni * o + oi) * p, p, dst + oi * n * p + ni * p);
}

void channel_major_to_batch_major(const double* src, double* dst, std::size_t n, std::size_t o, std::size_t p) {
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t oi = 0; oi < o; ++oi)
      std::copy_n(src + oi * n * p + ni * p, p, dst + (ni * o + oi) * p);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  same_tape(a, b);
  Tensor out = binary_forward(a.value(), b.value(), "add", [](double x, double y) { return x + y; });
  return tape_of(a).record("add", std::move(out), {a, b}, [](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
    if (gi[0]) accumulate_broadcast(*gi[0], g, 1.0);
    if (gi[1]) accumulate_broadcast(*gi[1], g, 1.0);
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  Tensor out = binary_forward(a.value(), b.value(), "sub", [](double x, double y) { return x - y; });
  return tape_of(a).record("sub", std::move(out), {a, b}, [](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
    if (gi[0]) accumulate_broadcast(*gi[0], g, 1.0);
    if (gi[1]) accumulate_broadcast(*gi[1], g, -1.0);
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  Tensor out = binary_forward(a.value(), b.value(), "mul", [](double x, double y) { return x * y; });
  return tape_of(a).record("mul", std::move(out), {a, b},
                           [a, b](const Tape& t, const Tensor&, const Tensor& g, Grads gi) {
                             const Tensor& av = t.value(a);
                             const Tensor& bv = t.value(b);
                             const std::size_t na = av.numel(), nb = bv.numel();
                             if (gi[0]) {
                               double* d = gi[0]->data();
                               for (std::size_t i = 0; i < g.numel(); ++i) d[i % na] += g[i] * bv[i % nb];
                             }
                             if (gi[1]) {
                               double* d = gi[1]->data();
                               for (std::size_t i = 0; i < g.numel(); ++i) d[i % nb] += g[i] * av[i % na];
                             }
                           });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.storage()) v *= factor;
  return tape_of(x).record("scale", std::move(out), {x},
                           [factor](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                             double* d = gi[0]->data();
                             for (std::size_t i = 0; i < g.numel(); ++i) d[i] += factor * g[i];
                           });
}

Var relu(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return tape_of(x).record("relu", std::move(out), {x}, [](const Tape&, const Tensor& y, const Tensor& g, Grads gi) {
    double* d = gi[0]->data();
    for (std::size_t i = 0; i < g.numel(); ++i) {
      if (y[i] > 0.0) d[i] += g[i];
    }
  });
}

Var sigmoid(Var x) {
  Tensor out = x.value();
  for (double& v : out.storage()) v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  return tape_of(x).record("sigmoid", std::move(out), {x},
                           [](const Tape&, const Tensor& y, const Tensor& g, Grads gi) {
                             double* d = gi[0]->data();
                             for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
                           });
}

Var softmax(Var x) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.shape().back();
  const std::size_t rows = xv.numel() / cols;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * cols;
    double* o = out.data() + r * cols;
    const double m = *std::max_element(in, in + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(in[c] - m));
    for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
  }
  return tape_of(x).record("softmax", std::move(out), {x},
                           [rows, cols](const Tape&, const Tensor& y, const Tensor& g, Grads gi) {
                             double* d = gi[0]->data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               const double* yr = y.data() + r * cols;
                               const double* gr = g.data() + r * cols;
                               double dot = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
                               for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += yr[c] * (gr[c] - dot);
                             }
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  require(bv.dim(0) == k, ErrorCode::ShapeMismatch,
          "matmul: " + shape_to_string(av.shape()) + " x " + shape_to_string(bv.shape()));
  Tensor out({m, n});
  MatMap(out.data(), Index(m), Index(n)).noalias() =
      ConstMatMap(av.data(), Index(m), Index(k)) * ConstMatMap(bv.data(), Index(k), Index(n));
  return tape_of(a).record("matmul", std::move(out), {a, b},
                           [a, b, m, k, n](const Tape& t, const Tensor&, const Tensor& g, Grads gi) {
                             ConstMatMap gm(g.data(), Index(m), Index(n));
                             if (gi[0]) {
                               MatMap(gi[0]->data(), Index(m), Index(k)).noalias() +=
                                   gm * ConstMatMap(t.value(b).data(), Index(k), Index(n)).transpose();
                             }
                             if (gi[1]) {
                               MatMap(gi[1]->data(), Index(k), Index(n)).noalias() +=
                                   ConstMatMap(t.value(a).data(), Index(m), Index(k)).transpose() * gm;
                             }
                           });
}

Var transpose(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 2, "transpose");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m});
  MatMap(out.data(), Index(n), Index(m)) = ConstMatMap(xv.data(), Index(m), Index(n)).transpose();
  return tape_of(x).record("transpose", std::move(out), {x},
                           [m, n](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                             MatMap(gi[0]->data(), Index(m), Index(n)) +=
                                 ConstMatMap(g.data(), Index(n), Index(m)).transpose();
                           });
}

// ---------------------------------------------------------------------------
// Convolutions

Var conv2d(Var x, Var weight, std::optional<Var> bias, Conv2dAttrs attrs) {
  same_tape(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank(xv, 4, "conv2d input");
  require_rank(wv, 4, "conv2d weight");
  require(attrs.stride >= 1, ErrorCode::InvalidArgument, "conv2d: stride must be >= 1");
  ConvGeometry geo{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), wv.dim(3),
                   attrs.stride, attrs.padding, 0, 0};
  require(wv.dim(1) == geo.c, ErrorCode::ShapeMismatch,
          "conv2d: weight " + shape_to_string(wv.shape()) + " vs input " + shape_to_string(xv.shape()));
  require(geo.h + 2 * geo.pad >= geo.kh && geo.w + 2 * geo.pad >= geo.kw, ErrorCode::ShapeMismatch,
          "conv2d: kernel larger than padded input");
  geo.ho = (geo.h + 2 * geo.pad - geo.kh) / geo.stride + 1;
  geo.wo = (geo.w + 2 * geo.pad - geo.kw) / geo.stride + 1;
  if (bias) {
    same_tape(x, *bias);
    require(bias->value().shape() == Shape{geo.o}, ErrorCode::ShapeMismatch,
            "conv2d: bias shape " + shape_to_string(bias->value().shape()));
  }

  const std::size_t rows = geo.rows(), cols = geo.cols(), plane = geo.ho * geo.wo;
  Buffer col(rows * cols);
  im2col(geo, xv.data(), col.data());
  Buffer out_cm(geo.o * cols);
  MatMap out_mat(out_cm.data(), Index(geo.o), Index(cols));
  out_mat.noalias() = ConstMatMap(wv.data(), Index(geo.o), Index(rows)) * ConstMatMap(col.data(), Index(rows), Index(cols));
  if (bias) {
    const Tensor& bv = bias->value();
    for (std::size_t oi = 0; oi < geo.o; ++oi) out_mat.row(Index(oi)).array() += bv[oi];
  }
  Tensor out({geo.n, geo.o, geo.ho, geo.wo});
  channel_major_to_batch_major(out_cm.data(), out.data(), geo.n, geo.o, plane);

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape_of(x).record(
      "conv2d", std::move(out), inputs, [x, weight, geo](const Tape& t, const Tensor&, const Tensor& g, Grads gi) {
        const std::size_t rows = geo.rows(), cols = geo.cols(), plane = geo.ho * geo.wo;
        Buffer g_cm(geo.o * cols);
        batch_major_to_channel_major(g.data(), g_cm.data(), geo.n, geo.o, plane);
        ConstMatMap gm(g_cm.data(), Index(geo.o), Index(cols));
        if (gi.size() > 2 && gi[2]) {
          double* db = gi[2]->data();
          for (std::size_t oi = 0; oi < geo.o; ++oi) db[oi] += gm.row(Index(oi)).sum();
        }
        if (gi[1]) {
          Buffer col(rows * cols);
          im2col(geo, t.value(x).data(), col.data());
          MatMap(gi[1]->data(), Index(geo.o), Index(rows)).noalias() +=
              gm * ConstMatMap(col.data(), Index(rows), Index(cols)).transpose();
        }
        if (gi[0]) {
          Buffer dcol(rows * cols);
          MatMap(dcol.data(), Index(rows), Index(cols)).noalias() =
              ConstMatMap(t.value(weight).data(), Index(geo.o), Index(rows)).transpose() * gm;
          col2im(geo, dcol.data(), gi[0]->data());
        }
      });
}

Var conv_transpose2d(Var x, Var weight, std::optional<Var> bias) {
  same_tape(x, weight);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank(xv, 4, "conv_transpose2d input");
  require_rank(wv, 4, "conv_transpose2d weight");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  require(wv.dim(0) == c && wv.dim(2) == 2 && wv.dim(3) == 2, ErrorCode::ShapeMismatch,
          "conv_transpose2d: weight " + shape_to_string(wv.shape()) + " vs input " + shape_to_string(xv.shape()));
  const std::size_t o = wv.dim(1), p = h * w, cols = n * p, taps = o * 4;
  if (bias) {
    same_tape(x, *bias);
    require(bias->value().shape() == Shape{o}, ErrorCode::ShapeMismatch,
            "conv_transpose2d: bias shape " + shape_to_string(bias->value().shape()));
  }

  Buffer x_cm(c * cols);
  batch_major_to_channel_major(xv.data(), x_cm.data(), n, c, p);
  Buffer taps_cm(taps * cols);
  MatMap(taps_cm.data(), Index(taps), Index(cols)).noalias() =
      ConstMatMap(wv.data(), Index(c), Index(taps)).transpose() * ConstMatMap(x_cm.data(), Index(c), Index(cols));

  Tensor out({n, o, 2 * h, 2 * w});
  const std::size_t ow = 2 * w;
  for (std::size_t oi = 0; oi < o; ++oi) {
    const double b = bias ? bias->value()[oi] : 0.0;
    for (std::size_t tap = 0; tap < 4; ++tap) {
      const std::size_t ky = tap / 2, kx = tap % 2;
      const double* src = taps_cm.data() + (oi * 4 + tap) * cols;
      for (std::size_t ni = 0; ni < n; ++ni) {
        double* dst = out.data() + (ni * o + oi) * 4 * p;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xx = 0; xx < w; ++xx) dst[(2 * y + ky) * ow + 2 * xx + kx] = src[ni * p + y * w + xx] + b;
      }
    }
  }

  std::vector<Var> inputs{x, weight};
  if (bias) inputs.push_back(*bias);
  return tape_of(x).record(
      "conv_transpose2d", std::move(out), inputs,
      [x, weight, n, c, h, w, o](const Tape& t, const Tensor&, const Tensor& g, Grads gi) {
        const std::size_t p = h * w, cols = n * p, taps = o * 4, ow = 2 * w;
        Buffer g_taps(taps * cols);
        for (std::size_t oi = 0; oi < o; ++oi)
          for (std::size_t tap = 0; tap < 4; ++tap) {
            const std::size_t ky = tap / 2, kx = tap % 2;
            double* dst = g_taps.data() + (oi * 4 + tap) * cols;
            for (std::size_t ni = 0; ni < n; ++ni) {
              const double* src = g.data() + (ni * o + oi) * 4 * p;
              for (std::size_t y = 0; y < h; ++y)
                for (std::size_t xx = 0; xx < w; ++xx) dst[ni * p + y * w + xx] = src[(2 * y + ky) * ow + 2 * xx + kx];
            }
          }
        ConstMatMap gm(g_taps.data(), Index(taps), Index(cols));
        if (gi.size() > 2 && gi[2]) {
          double* db = gi[2]->data();
          for (std::size_t oi = 0; oi < o; ++oi)
            for (std::size_t tap = 0; tap < 4; ++tap) db[oi] += gm.row(Index(oi * 4 + tap)).sum();
        }
        if (gi[1]) {
          Buffer x_cm(c * cols);
          batch_major_to_channel_major(t.value(x).data(), x_cm.data(), n, c, p);
          MatMap(gi[1]->data(), Index(c), Index(taps)).noalias() +=
              ConstMatMap(x_cm.data(), Index(c), Index(cols)) * gm.transpose();
        }
        if (gi[0]) {
          Buffer dx_cm(c * cols);
          MatMap(dx_cm.data(), Index(c), Index(cols)).noalias() =
              ConstMatMap(t.value(weight).data(), Index(c), Index(taps)) * gm;
          Buffer dx(n * c * p);
          channel_major_to_batch_major(dx_cm.data(), dx.data(), n, c, p);
          double* d = gi[0]->data();
          for (std::size_t i = 0; i < dx.size(); ++i) d[i] += dx[i];
        }
      });
}

Var maxpool2d(Var x) {
  const Tensor& xv = x.value();
  require_rank(xv, 4, "maxpool2d");
  const std::size_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  require(h % 2 == 0 && w % 2 == 0, ErrorCode::ShapeMismatch,
          "maxpool2d: spatial extents must be even, got " + shape_to_string(xv.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out({n, c, ho, wo});
  std::vector<std::size_t> argmax(out.numel());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* src = xv.data() + plane * h * w;
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        std::size_t best = (2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (2 * y + dy) * w + 2 * xx + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = plane * ho * wo + y * wo + xx;
        out[o] = src[best];
        argmax[o] = plane * h * w + best;
      }
  }
  return tape_of(x).record("maxpool2d", std::move(out), {x},
                           [argmax = std::move(argmax)](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                             double* d = gi[0]->data();
                             for (std::size_t i = 0; i < g.numel(); ++i) d[argmax[i]] += g[i];
                           });
}

// ---------------------------------------------------------------------------
// Normalization

Var group_norm(Var x, std::size_t groups, std::optional<Var> gamma, std::optional<Var> beta, double eps) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 2, ErrorCode::ShapeMismatch, "group_norm: input needs [N, C, ...]");
  const std::size_t n = xv.dim(0), c = xv.dim(1), spatial = prod(xv.shape(), 2, xv.rank());
  require(groups >= 1 && c % groups == 0, ErrorCode::ShapeMismatch,
          "group_norm: " + std::to_string(c) + " channels not divisible into " + std::to_string(groups) + " groups");
  require(eps > 0.0, ErrorCode::InvalidArgument, "group_norm: eps must be positive");
  if (gamma) {
    same_tape(x, *gamma);
    require(gamma->value().shape() == Shape{c}, ErrorCode::ShapeMismatch, "group_norm: gamma must be [C]");
  }
  if (beta) {
    same_tape(x, *beta);
    require(beta->value().shape() == Shape{c}, ErrorCode::ShapeMismatch, "group_norm: beta must be [C]");
  }
  const std::size_t per_group = (c / groups) * spatial;

  Tensor normalized(xv.shape());
  Buffer rstd(n * groups);
  for (std::size_t blk = 0; blk < n * groups; ++blk) {
    const double* src = xv.data() + blk * per_group;
    double* dst = normalized.data() + blk * per_group;
    double mean = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) mean += src[i];
    mean /= double(per_group);
    double var = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= double(per_group);
    const double r = 1.0 / std::sqrt(var + eps);
    rstd[blk] = r;
    for (std::size_t i = 0; i < per_group; ++i) dst[i] = (src[i] - mean) * r;
  }

  Tensor out = normalized;
  if (gamma || beta) {
    for (std::size_t ni = 0; ni < n; ++ni)
      for (std::size_t ci = 0; ci < c; ++ci) {
        const double gm = gamma ? gamma->value()[ci] : 1.0;
        const double bt = beta ? beta->value()[ci] : 0.0;
        double* p = out.data() + (ni * c + ci) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) p[s] = p[s] * gm + bt;
      }
  }

  std::vector<Var> inputs{x};
  int gamma_slot = -1, beta_slot = -1;
  if (gamma) {
    gamma_slot = int(inputs.size());
    inputs.push_back(*gamma);
  }
  if (beta) {
    beta_slot = int(inputs.size());
    inputs.push_back(*beta);
  }
  return tape_of(x).record(
      "group_norm", std::move(out), inputs,
      [n, c, spatial, groups, per_group, gamma, gamma_slot, beta_slot, normalized = std::move(normalized),
       rstd = std::move(rstd)](const Tape& t, const Tensor&, const Tensor& g, Grads gi) {
        if (gamma_slot >= 0 && gi[gamma_slot]) {
          double* dg = gi[gamma_slot]->data();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci) {
              const std::size_t off = (ni * c + ci) * spatial;
              for (std::size_t s = 0; s < spatial; ++s) dg[ci] += g[off + s] * normalized[off + s];
            }
        }
        if (beta_slot >= 0 && gi[beta_slot]) {
          double* db = gi[beta_slot]->data();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci) {
              const std::size_t off = (ni * c + ci) * spatial;
              for (std::size_t s = 0; s < spatial; ++s) db[ci] += g[off + s];
            }
        }
        if (!gi[0]) return;
        // Gradient w.r.t. the normalized values, then through the whitening.
        Buffer dxhat(g.storage());
        if (gamma) {
          const Tensor& gv = t.value(*gamma);
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci) {
              double* p = dxhat.data() + (ni * c + ci) * spatial;
              for (std::size_t s = 0; s < spatial; ++s) p[s] *= gv[ci];
            }
        }
        double* dx = gi[0]->data();
        for (std::size_t blk = 0; blk < n * groups; ++blk) {
          const double* dh = dxhat.data() + blk * per_group;
          const double* xh = normalized.data() + blk * per_group;
          double mean_dh = 0.0, mean_dh_xh = 0.0;
          for (std::size_t i = 0; i < per_group; ++i) {
            mean_dh += dh[i];
            mean_dh_xh += dh[i] * xh[i];
          }
          mean_dh /= double(per_group);
          mean_dh_xh /= double(per_group);
          double* d = dx + blk * per_group;
          for (std::size_t i = 0; i < per_group; ++i) d[i] += rstd[blk] * (dh[i] - mean_dh - xh[i] * mean_dh_xh);
        }
      });
}

Var instance_norm(Var x, double eps) {
  require(x.value().rank() >= 2, ErrorCode::ShapeMismatch, "instance_norm: input needs [N, C, ...]");
  return group_norm(x, x.value().dim(1), std::nullopt, std::nullopt, eps);
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions

Var concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "concat: no inputs");
  const Shape& first = parts[0].value().shape();
  require(axis < first.size(), ErrorCode::ShapeMismatch, "concat: axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const Var& p : parts) {
    same_tape(parts[0], p);
    const Shape& s = p.value().shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    require(ok, ErrorCode::ShapeMismatch,
            "concat: " + shape_to_string(s) + " incompatible with " + shape_to_string(first) + " on axis " +
                std::to_string(axis));
    out_shape[axis] += s[axis];
    extents.push_back(s[axis]);
  }
  const std::size_t outer = prod(first, 0, axis), inner = prod(first, axis + 1, first.size());
  Tensor out(out_shape);
  const std::size_t out_row = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    const std::size_t chunk = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(v.data() + o * chunk, chunk, out.data() + o * out_row + offset);
    offset += chunk;
  }
  return tape_of(parts[0]).record(
      "concat", std::move(out), parts,
      [extents = std::move(extents), outer, inner, out_row](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < extents.size(); ++k) {
          const std::size_t chunk = extents[k] * inner;
          if (gi[k]) {
            double* d = gi[k]->data();
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = g.data() + o * out_row + offset;
              for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += src[i];
            }
          }
          offset += chunk;
        }
      });
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Tensor& xv = x.value();
  require(axis < xv.rank(), ErrorCode::ShapeMismatch, "slice: axis out of range");
  require(length > 0 && start + length <= xv.dim(axis), ErrorCode::ShapeMismatch,
          "slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside extent " +
              std::to_string(xv.dim(axis)));
  Shape out_shape = xv.shape();
  out_shape[axis] = length;
  const std::size_t outer = prod(xv.shape(), 0, axis), inner = prod(xv.shape(), axis + 1, xv.rank());
  const std::size_t in_row = xv.dim(axis) * inner, chunk = length * inner, offset = start * inner;
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * in_row + offset, chunk, out.data() + o * chunk);
  return tape_of(x).record("slice", std::move(out), {x},
                           [outer, in_row, chunk, offset](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                             double* d = gi[0]->data();
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t i = 0; i < chunk; ++i) d[o * in_row + offset + i] += g[o * chunk + i];
                           });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return tape_of(x).record("reshape", std::move(out), {x}, [](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
    double* d = gi[0]->data();
    for (std::size_t i = 0; i < g.numel(); ++i) d[i] += g[i];
  });
}

Var sum_reduce(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  return tape_of(x).record("sum", Tensor::scalar(total), {x},
                           [](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                             const double s = g[0];
                             for (double& d : gi[0]->storage()) d += s;
                           });
}

Var mean_reduce(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  const double inv = 1.0 / double(xv.numel());
  return tape_of(x).record("mean", Tensor::scalar(total * inv), {x},
                           [inv](const Tape&, const Tensor&, const Tensor& g, Grads gi) {
                             const double s = g[0] * inv;
                             for (double& d : gi[0]->storage()) d += s;
                           });
}

}  // namespace fedoap::ops
