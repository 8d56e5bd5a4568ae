#pragma once

// Reference implementations written directly from the definitions, used to
// check the fast paths. Nothing here shares code with the library beyond the
// Tensor container.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "fedoap/rng.hpp"
#include "fedoap/tape.hpp"
#include "fedoap/tensor.hpp"

namespace oracle {

using fedoap::Shape;
using fedoap::Tensor;

inline Tensor random_tensor(Shape shape, fedoap::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Nested-loop zero-padded cross-correlation.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t o = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (wd + 2 * pad - kw) / stride + 1;
  Tensor out({n, o, ho, wo});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
          double acc = bias ? (*bias)[oc] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            for (std::size_t di = 0; di < kh; ++di)
              for (std::size_t dj = 0; dj < kw; ++dj) {
                const long yi = long(i * stride + di) - long(pad);
                const long xj = long(j * stride + dj) - long(pad);
                if (yi < 0 || xj < 0 || yi >= long(h) || xj >= long(wd)) continue;
                acc += x[((b * c + ic) * h + std::size_t(yi)) * wd + std::size_t(xj)] *
                       w[((oc * c + ic) * kh + di) * kw + dj];
              }
          out[((b * o + oc) * ho + i) * wo + j] = acc;
        }
  return out;
}

// Kernel-2 stride-2 transposed convolution, scattering each input pixel.
inline Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor* bias) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(1);
  Tensor out({n, o, 2 * h, 2 * wd});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < o; ++oc)
      for (std::size_t i = 0; i < 2 * h; ++i)
        for (std::size_t j = 0; j < 2 * wd; ++j) {
          double acc = bias ? (*bias)[oc] : 0.0;
          for (std::size_t ic = 0; ic < c; ++ic)
            acc += x[((b * c + ic) * h + i / 2) * wd + j / 2] * w[((ic * o + oc) * 2 + i % 2) * 2 + j % 2];
          out[((b * o + oc) * 2 * h + i) * 2 * wd + j] = acc;
        }
  return out;
}

// Multi-head attention over explicitly materialized [n_q, N] score matrices.
inline Tensor attention(const Tensor& q, const Tensor& keys, const Tensor& values, std::size_t heads) {
  const std::size_t n_q = q.dim(0), d = q.dim(1), n_k = keys.dim(0), hd = d / heads;
  Tensor out({n_q, d});
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> scores(n_q * n_k);
    for (std::size_t i = 0; i < n_q; ++i)
      for (std::size_t j = 0; j < n_k; ++j) {
        double s = 0.0;
        for (std::size_t e = 0; e < hd; ++e) s += q[i * d + h * hd + e] * keys[j * d + h * hd + e];
        scores[i * n_k + j] = s / std::sqrt(double(hd));
      }
    for (std::size_t i = 0; i < n_q; ++i) {
      double mx = -INFINITY, z = 0.0;
      for (std::size_t j = 0; j < n_k; ++j) mx = std::max(mx, scores[i * n_k + j]);
      for (std::size_t j = 0; j < n_k; ++j) z += std::exp(scores[i * n_k + j] - mx);
      for (std::size_t e = 0; e < hd; ++e) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n_k; ++j) acc += std::exp(scores[i * n_k + j] - mx) / z * values[j * d + h * hd + e];
        out[i * d + h * hd + e] = acc;
      }
    }
  }
  return out;
}

inline double dice(const Tensor& pred, const Tensor& target) {
  double inter = 0, p = 0, t = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    inter += pred[i] * target[i];
    p += pred[i];
    t += target[i];
  }
  return p + t == 0 ? 1.0 : 2.0 * inter / (p + t);
}

// Row-wise concatenation of 2-D tensors.
inline Tensor stack_rows(const std::vector<const Tensor*>& parts) {
  std::size_t rows = 0;
  const std::size_t d = parts.front()->dim(1);
  for (const Tensor* p : parts) rows += p->dim(0);
  Tensor out({rows, d});
  std::size_t at = 0;
  for (const Tensor* p : parts)
    for (double v : p->values()) out[at++] = v;
  return out;
}

inline Tensor random_mask(Shape shape, fedoap::Rng& rng, double p = 0.4) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(0, 1) < p ? 1.0 : 0.0;
  return t;
}

// Relative error used for gradient checks.
inline double rel_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

// Central difference of a scalar function of one tensor entry.
inline double central_difference(const std::function<double(const Tensor&)>& f, Tensor x, std::size_t index,
                                 double h) {
  const double base = x[index];
  x[index] = base + h;
  const double up = f(x);
  x[index] = base - h;
  const double down = f(x);
  return (up - down) / (2.0 * h);
}

}  // namespace oracle
