#pragma once

#include <cmath>
#include <cstdint>
#include <limits>

#include "pseg/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

// Dense kernels backing the tape ops. Every kernel computes each output
// element with a fixed, serial accumulation order, so results are
// bit-identical whether the outer loop runs on one thread or many.
// kern::ref holds naive serial implementations kept as the reference for
// tests and for the benchmark tool.
namespace pseg::kern {

bool parallel_enabled();
void set_parallel(bool on);

// Loop grain below which going parallel is not worth the fork.
inline constexpr int64_t kGrain = 2048;

inline bool go_parallel(int64_t work) { return parallel_enabled() && work >= kGrain; }

// ---------------------------------------------------------------------------
// Serial reference kernels.
// ---------------------------------------------------------------------------
namespace ref {

// C (m x n) = A (m x k) * B (k x n)
template <class T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
}

// C (m x n) = A (m x k) * B^T, B stored (n x k)
template <class T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[j * k + t];
      c[i * n + j] = acc;
    }
}

// C (m x n) = A^T * B, A stored (k x m), B stored (k x n)
template <class T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[t * m + i] * b[t * n + j];
      c[i * n + j] = acc;
    }
}

// Row-wise max-shifted log-sum-exp, out has one value per row.
template <class T>
void lse_rows(const T* in, T* out, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = in + r * cols;
    T mx = p[0];
    for (int64_t c = 1; c < cols; ++c) mx = p[c] > mx ? p[c] : mx;
    T s = 0;
    for (int64_t c = 0; c < cols; ++c) s += std::exp(p[c] - mx);
    out[r] = mx + std::log(s);
  }
}

// Bilinear upscale of an (h, w, d) grid by integer factor u, half-pixel
// sample positions clamped at the border.
template <class T>
void bilinear_up(const T* in, T* out, int64_t h, int64_t w, int64_t d, int64_t u) {
  const int64_t oh = h * u, ow = w * u;
  for (int64_t i = 0; i < oh; ++i) {
    double sy = (static_cast<double>(i) + 0.5) / static_cast<double>(u) - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(sy));
    T ty = static_cast<T>(sy - static_cast<double>(y0));
    int64_t y0c = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
    int64_t y1c = y0 + 1 < 0 ? 0 : (y0 + 1 >= h ? h - 1 : y0 + 1);
    for (int64_t j = 0; j < ow; ++j) {
      double sx = (static_cast<double>(j) + 0.5) / static_cast<double>(u) - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(sx));
      T tx = static_cast<T>(sx - static_cast<double>(x0));
      int64_t x0c = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
      int64_t x1c = x0 + 1 < 0 ? 0 : (x0 + 1 >= w ? w - 1 : x0 + 1);
      const T w00 = (1 - ty) * (1 - tx), w01 = (1 - ty) * tx;
      const T w10 = ty * (1 - tx), w11 = ty * tx;
      const T* r0a = in + (y0c * w + x0c) * d;
      const T* r0b = in + (y0c * w + x1c) * d;
      const T* r1a = in + (y1c * w + x0c) * d;
      const T* r1b = in + (y1c * w + x1c) * d;
      T* o = out + (i * ow + j) * d;
      for (int64_t t = 0; t < d; ++t)
        o[t] = w00 * r0a[t] + w01 * r0b[t] + w10 * r1a[t] + w11 * r1b[t];
    }
  }
}

}  // namespace ref

// ---------------------------------------------------------------------------
// Production kernels: identical arithmetic, OpenMP over output elements.
// ---------------------------------------------------------------------------

template <class T>
void matmul(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  const bool par = go_parallel(m * n * k);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      c[i * n + j] = acc;
    }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  const bool par = go_parallel(m * n * k);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[i * k + t] * b[j * k + t];
      c[i * n + j] = acc;
    }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  const bool par = go_parallel(m * n * k);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (int64_t t = 0; t < k; ++t) acc += a[t * m + i] * b[t * n + j];
      c[i * n + j] = acc;
    }
}

template <class T>
void lse_rows(const T* in, T* out, int64_t rows, int64_t cols) {
  const bool par = go_parallel(rows * cols);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = in + r * cols;
    T mx = p[0];
    for (int64_t c = 1; c < cols; ++c) mx = p[c] > mx ? p[c] : mx;
    T s = 0;
    for (int64_t c = 0; c < cols; ++c) s += std::exp(p[c] - mx);
    out[r] = mx + std::log(s);
  }
}

template <class T>
void bilinear_up(const T* in, T* out, int64_t h, int64_t w, int64_t d, int64_t u) {
  const int64_t oh = h * u, ow = w * u;
  const bool par = go_parallel(oh * ow * d);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < oh; ++i) {
    double sy = (static_cast<double>(i) + 0.5) / static_cast<double>(u) - 0.5;
    int64_t y0 = static_cast<int64_t>(std::floor(sy));
    T ty = static_cast<T>(sy - static_cast<double>(y0));
    int64_t y0c = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
    int64_t y1c = y0 + 1 < 0 ? 0 : (y0 + 1 >= h ? h - 1 : y0 + 1);
    for (int64_t j = 0; j < ow; ++j) {
      double sx = (static_cast<double>(j) + 0.5) / static_cast<double>(u) - 0.5;
      int64_t x0 = static_cast<int64_t>(std::floor(sx));
      T tx = static_cast<T>(sx - static_cast<double>(x0));
      int64_t x0c = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
      int64_t x1c = x0 + 1 < 0 ? 0 : (x0 + 1 >= w ? w - 1 : x0 + 1);
      const T w00 = (1 - ty) * (1 - tx), w01 = (1 - ty) * tx;
      const T w10 = ty * (1 - tx), w11 = ty * tx;
      const T* r0a = in + (y0c * w + x0c) * d;
      const T* r0b = in + (y0c * w + x1c) * d;
      const T* r1a = in + (y1c * w + x0c) * d;
      const T* r1b = in + (y1c * w + x1c) * d;
      T* o = out + (i * ow + j) * d;
      for (int64_t t = 0; t < d; ++t)
        o[t] = w00 * r0a[t] + w01 * r0b[t] + w10 * r1a[t] + w11 * r1b[t];
    }
  }
}

// Adjoint of bilinear_up. Channels are independent, so the scatter runs in
// parallel over channels with a serial row-major sweep inside each.
template <class T>
void bilinear_up_back(const T* gout, T* gin, int64_t h, int64_t w, int64_t d, int64_t u) {
  const int64_t oh = h * u, ow = w * u;
  for (int64_t i = 0; i < h * w * d; ++i) gin[i] = 0;
  const bool par = go_parallel(oh * ow * d);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t t = 0; t < d; ++t) {
    for (int64_t i = 0; i < oh; ++i) {
      double sy = (static_cast<double>(i) + 0.5) / static_cast<double>(u) - 0.5;
      int64_t y0 = static_cast<int64_t>(std::floor(sy));
      T ty = static_cast<T>(sy - static_cast<double>(y0));
      int64_t y0c = y0 < 0 ? 0 : (y0 >= h ? h - 1 : y0);
      int64_t y1c = y0 + 1 < 0 ? 0 : (y0 + 1 >= h ? h - 1 : y0 + 1);
      for (int64_t j = 0; j < ow; ++j) {
        double sx = (static_cast<double>(j) + 0.5) / static_cast<double>(u) - 0.5;
        int64_t x0 = static_cast<int64_t>(std::floor(sx));
        T tx = static_cast<T>(sx - static_cast<double>(x0));
        int64_t x0c = x0 < 0 ? 0 : (x0 >= w ? w - 1 : x0);
        int64_t x1c = x0 + 1 < 0 ? 0 : (x0 + 1 >= w ? w - 1 : x0 + 1);
        const T g = gout[(i * ow + j) * d + t];
        gin[(y0c * w + x0c) * d + t] += (1 - ty) * (1 - tx) * g;
        gin[(y0c * w + x1c) * d + t] += (1 - ty) * tx * g;
        gin[(y1c * w + x0c) * d + t] += ty * (1 - tx) * g;
        gin[(y1c * w + x1c) * d + t] += ty * tx * g;
      }
    }
  }
}

// out[i] = f(i) for i in [0, n)
template <class F>
void for_each(int64_t n, F f) {
  const bool par = go_parallel(n);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < n; ++i) f(i);
}

template <class T>
bool all_finite(const T* p, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(p[i])) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Broadcast / reduction index plans (numpy alignment rules).
// ---------------------------------------------------------------------------

struct BcastPlan {
  Shape out_shape;
  std::vector<int64_t> a_stride;  // per out dim, 0 where the input broadcasts
  std::vector<int64_t> b_stride;
  int64_t n = 0;
};

inline std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size());
  int64_t acc = 1;
  for (size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

inline BcastPlan make_bcast_plan(const Shape& a, const Shape& b) {
  const size_t ra = a.size(), rb = b.size();
  const size_t r = ra > rb ? ra : rb;
  BcastPlan p;
  p.out_shape.assign(r, 1);
  for (size_t i = 0; i < r; ++i) {
    int64_t ea = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t eb = i < r - rb ? 1 : b[i - (r - rb)];
    if (ea != eb && ea != 1 && eb != 1)
      fail(ErrCode::Shape, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out_shape[i] = ea > eb ? ea : eb;
  }
  auto sa = row_major_strides(a), sb = row_major_strides(b);
  p.a_stride.assign(r, 0);
  p.b_stride.assign(r, 0);
  for (size_t i = 0; i < r; ++i) {
    if (i >= r - ra && a[i - (r - ra)] != 1) p.a_stride[i] = sa[i - (r - ra)];
    if (i >= r - rb && b[i - (r - rb)] != 1) p.b_stride[i] = sb[i - (r - rb)];
  }
  p.n = numel(p.out_shape);
  return p;
}

// out[i] = f(a[ai], b[bi]) with broadcast index mapping.
template <class T, class F>
void broadcast_binary(const BcastPlan& p, const T* a, const T* b, T* out, F f) {
  const size_t r = p.out_shape.size();
  const auto od = row_major_strides(p.out_shape);
  const bool par = go_parallel(p.n);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < p.n; ++i) {
    int64_t ia = 0, ib = 0;
    for (size_t dim = 0; dim < r; ++dim) {
      const int64_t coord = (i / od[dim]) % p.out_shape[dim];
      ia += coord * p.a_stride[dim];
      ib += coord * p.b_stride[dim];
    }
    out[i] = f(a[ia], b[ib]);
  }
}

// Sum src (shape ss) into dst whose aligned shape ds has extent 1 on every
// reduced dim (same rank). Each dst element gathers its addends in row-major
// order of the reduced coordinates, so the result does not depend on the
// thread count.
template <class T>
void reduce_to(const T* src, const Shape& ss, T* dst, const Shape& ds) {
  const size_t r = ss.size();
  const auto s_stride = row_major_strides(ss);
  Shape red;          // extents of reduced dims
  std::vector<int64_t> red_stride;
  Shape kept;         // extents of kept dims
  std::vector<int64_t> kept_stride;
  for (size_t i = 0; i < r; ++i) {
    if (ds[i] == 1 && ss[i] != 1) {
      red.push_back(ss[i]);
      red_stride.push_back(s_stride[i]);
    } else {
      kept.push_back(ss[i]);
      kept_stride.push_back(s_stride[i]);
    }
  }
  const int64_t n_dst = numel(kept);
  const int64_t n_red = numel(red);
  const auto kd = row_major_strides(kept);
  const auto rd = row_major_strides(red);
  const bool par = go_parallel(n_dst * n_red);
#pragma omp parallel for schedule(static) if (par)
  for (int64_t i = 0; i < n_dst; ++i) {
    int64_t base = 0;
    for (size_t dim = 0; dim < kept.size(); ++dim)
      base += ((i / kd[dim]) % kept[dim]) * kept_stride[dim];
    T acc = 0;
    for (int64_t j = 0; j < n_red; ++j) {
      int64_t off = 0;
      for (size_t dim = 0; dim < red.size(); ++dim)
        off += ((j / rd[dim]) % red[dim]) * red_stride[dim];
      acc += src[base + off];
    }
    dst[i] = acc;
  }
}

namespace ref {

template <class T>
void reduce_to(const T* src, const Shape& ss, T* dst, const Shape& ds) {
  // gather per dst element, serial
  const size_t r = ss.size();
  const auto s_stride = row_major_strides(ss);
  Shape red, kept;
  std::vector<int64_t> red_stride, kept_stride;
  for (size_t i = 0; i < r; ++i) {
    if (ds[i] == 1 && ss[i] != 1) {
      red.push_back(ss[i]);
      red_stride.push_back(s_stride[i]);
    } else {
      kept.push_back(ss[i]);
      kept_stride.push_back(s_stride[i]);
    }
  }
  const int64_t n_dst = numel(kept), n_red = numel(red);
  const auto kd = row_major_strides(kept);
  const auto rd = row_major_strides(red);
  for (int64_t i = 0; i < n_dst; ++i) {
    int64_t base = 0;
    for (size_t dim = 0; dim < kept.size(); ++dim)
      base += ((i / kd[dim]) % kept[dim]) * kept_stride[dim];
    T acc = 0;
    for (int64_t j = 0; j < n_red; ++j) {
      int64_t off = 0;
      for (size_t dim = 0; dim < red.size(); ++dim)
        off += ((j / rd[dim]) % red[dim]) * red_stride[dim];
      acc += src[base + off];
    }
    dst[i] = acc;
  }
}

template <class T, class F>
void broadcast_binary(const BcastPlan& p, const T* a, const T* b, T* out, F f) {
  const size_t r = p.out_shape.size();
  const auto od = row_major_strides(p.out_shape);
  for (int64_t i = 0; i < p.n; ++i) {
    int64_t ia = 0, ib = 0;
    for (size_t dim = 0; dim < r; ++dim) {
      const int64_t coord = (i / od[dim]) % p.out_shape[dim];
      ia += coord * p.a_stride[dim];
      ib += coord * p.b_stride[dim];
    }
    out[i] = f(a[ia], b[ib]);
  }
}

}  // namespace ref

}  // namespace pseg::kern
