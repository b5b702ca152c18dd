#include <algorithm>
#include <limits>

#include "defnet/autograd.hpp"
#include "defnet/gemm.hpp"

namespace defnet {

namespace {

constexpr std::size_t kChunkElements = std::size_t{1} << 16;

struct ConvGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_ch * kh * kw; }
  std::size_t plane() const { return out_h * out_w; }
};

std::size_t output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                          std::size_t pad, const char* what) {
  const std::size_t padded = in + 2 * pad;
  if (kernel > padded) {
    throw DimensionError(std::string(what) + ": kernel extent " + std::to_string(kernel) +
                         " exceeds padded input extent " + std::to_string(padded));
  }
  if ((padded - kernel) % stride != 0) {
    throw ConfigError(std::string(what) + ": output size (" + std::to_string(in) +
                      " + 2*" + std::to_string(pad) + " - " + std::to_string(kernel) +
                      ")/" + std::to_string(stride) + " + 1 is not integral");
  }
  return (padded - kernel) / stride + 1;
}

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Tensor& b,
                           std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1) {
    throw DimensionError("conv2d: expected x[B,K,M,N], w[K',K,kh,kw], b[K'], got " +
                         shape_string(x.shape()) + ", " + shape_string(w.shape()) + ", " +
                         shape_string(b.shape()));
  }
  if (x.dtype() != w.dtype() || x.dtype() != b.dtype()) {
    throw DimensionError("conv2d: dtype mismatch");
  }
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.in_ch = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_ch = w.dim(0);
  g.kh = w.dim(2);
  g.kw = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(1) != g.in_ch) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                         " input channels, input has " + std::to_string(g.in_ch));
  }
  if (b.dim(0) != g.out_ch) throw DimensionError("conv2d: bias length mismatch");
  g.out_h = output_extent(g.height, g.kh, stride, pad, "conv2d");
  g.out_w = output_extent(g.width, g.kw, stride, pad, "conv2d");
  return g;
}

// Samples per im2col chunk. Small enough that the column buffer stays in L2.
std::size_t chunk_size(const ConvGeometry& g) {
  const std::size_t per_sample = std::max<std::size_t>(1, g.patch() * g.plane());
  return std::clamp<std::size_t>(kChunkElements / per_sample, 1, g.batch);
}

// Output columns [lo, hi) whose input column ox*stride + k - pad is in range.
struct ValidRange {
  std::size_t lo, hi;
};

ValidRange valid_range(std::size_t out, std::size_t in, std::size_t stride, std::size_t k,
                       std::size_t pad) {
  std::size_t lo = 0;
  if (pad > k) lo = (pad - k + stride - 1) / stride;
  if (in + pad <= k) return {0, 0};
  std::size_t hi = (in + pad - k - 1) / stride + 1;
  hi = std::min(hi, out);
  lo = std::min(lo, hi);
  return {lo, hi};
}

// col[r][s*P + p], r = (c*kh + ky)*kw + kx, for samples [b0, b0+nb).
template <class T>
void im2col(const ConvGeometry& g, const T* x, std::size_t b0, std::size_t nb, T* col) {
  const std::size_t plane = g.plane();
  const std::size_t cols = nb * plane;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const ValidRange ry = valid_range(g.out_h, g.height, g.stride, ky, g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const ValidRange rx = valid_range(g.out_w, g.width, g.stride, kx, g.pad);
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t s = 0; s < nb; ++s) {
          const T* img = x + ((b0 + s) * g.in_ch + c) * g.height * g.width;
          T* dst = row + s * plane;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            T* drow = dst + oy * g.out_w;
            if (oy < ry.lo || oy >= ry.hi) {
              std::fill(drow, drow + g.out_w, T(0));
              continue;
            }
            const T* srow = img + (oy * g.stride + ky - g.pad) * g.width;
            std::fill(drow, drow + rx.lo, T(0));
            if (g.stride == 1) {
              std::copy(srow + rx.lo + kx - g.pad, srow + rx.hi + kx - g.pad, drow + rx.lo);
            } else {
              for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
                drow[ox] = srow[ox * g.stride + kx - g.pad];
            }
            std::fill(drow + rx.hi, drow + g.out_w, T(0));
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const ConvGeometry& g, const T* col, std::size_t b0, std::size_t nb,
                T* dx) {
  const std::size_t plane = g.plane();
  const std::size_t cols = nb * plane;
  for (std::size_t c = 0; c < g.in_ch; ++c) {
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      const ValidRange ry = valid_range(g.out_h, g.height, g.stride, ky, g.pad);
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const ValidRange rx = valid_range(g.out_w, g.width, g.stride, kx, g.pad);
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        for (std::size_t s = 0; s < nb; ++s) {
          T* img = dx + ((b0 + s) * g.in_ch + c) * g.height * g.width;
          const T* src = row + s * plane;
          for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
            T* drow = img + (oy * g.stride + ky - g.pad) * g.width;
            const T* srow = src + oy * g.out_w;
            for (std::size_t ox = rx.lo; ox < rx.hi; ++ox)
              drow[ox * g.stride + kx - g.pad] += srow[ox];
          }
        }
      }
    }
  }
}

template <class T>
Tensor conv_forward(const ConvGeometry& g, const Tensor& x, const Tensor& w,
                    const Tensor& b) {
  Tensor out({g.batch, g.out_ch, g.out_h, g.out_w}, dtype_of<T>());
  const std::size_t plane = g.plane();
  const std::size_t patch = g.patch();
  const std::size_t cb = chunk_size(g);
  std::vector<T> col(patch * cb * plane);
  std::vector<T> tmp(g.out_ch * cb * plane);
  auto xs = x.data<T>();
  auto ws = w.data<T>();
  auto bs = b.data<T>();
  auto os = out.data<T>();
  for (std::size_t b0 = 0; b0 < g.batch; b0 += cb) {
    const std::size_t nb = std::min(cb, g.batch - b0);
    const std::size_t cols = nb * plane;
    im2col(g, xs.data(), b0, nb, col.data());
    gemm(Trans::kNo, Trans::kNo, g.out_ch, cols, patch, T(1), ws.data(), patch, col.data(),
         cols, T(0), tmp.data(), cols);
    for (std::size_t s = 0; s < nb; ++s) {
      for (std::size_t k = 0; k < g.out_ch; ++k) {
        const T* src = tmp.data() + k * cols + s * plane;
        T* dst = os.data() + ((b0 + s) * g.out_ch + k) * plane;
        const T bias = bs[k];
        for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bias;
      }
    }
  }
  return out;
}

template <class T>
void conv_backward(const ConvGeometry& g, BackwardContext& ctx) {
  const Tensor& x = ctx.input(0);
  const Tensor& w = ctx.input(1);
  auto gy = ctx.out_grad().data<T>();
  const std::size_t plane = g.plane();
  const std::size_t patch = g.patch();
  const bool need_x = ctx.needs_grad(0);
  const bool need_w = ctx.needs_grad(1);
  const bool need_b = ctx.needs_grad(2);

  if (need_b) {
    auto db = ctx.input_grad(2).data<T>();
    for (std::size_t s = 0; s < g.batch; ++s)
      for (std::size_t k = 0; k < g.out_ch; ++k) {
        const T* src = gy.data() + (s * g.out_ch + k) * plane;
        T acc = 0;
        for (std::size_t p = 0; p < plane; ++p) acc += src[p];
        db[k] += acc;
      }
  }
  if (!need_x && !need_w) return;

  const std::size_t cb = chunk_size(g);
  std::vector<T> col(patch * cb * plane);
  std::vector<T> dtmp(g.out_ch * cb * plane);
  auto xs = x.data<T>();
  auto ws = w.data<T>();
  T* dw = need_w ? ctx.input_grad(1).data<T>().data() : nullptr;
  T* dx = need_x ? ctx.input_grad(0).data<T>().data() : nullptr;
  for (std::size_t b0 = 0; b0 < g.batch; b0 += cb) {
    const std::size_t nb = std::min(cb, g.batch - b0);
    const std::size_t cols = nb * plane;
    for (std::size_t s = 0; s < nb; ++s)
      for (std::size_t k = 0; k < g.out_ch; ++k)
        std::copy_n(gy.data() + ((b0 + s) * g.out_ch + k) * plane, plane,
                    dtmp.data() + k * cols + s * plane);
    if (need_w) {
      im2col(g, xs.data(), b0, nb, col.data());
      gemm(Trans::kNo, Trans::kYes, g.out_ch, patch, cols, T(1), dtmp.data(), cols,
           col.data(), cols, T(1), dw, patch);
    }
    if (need_x) {
      gemm(Trans::kYes, Trans::kNo, patch, cols, g.out_ch, T(1), ws.data(), patch,
           dtmp.data(), cols, T(0), col.data(), cols);
      col2im_add(g, col.data(), b0, nb, dx);
    }
  }
}

struct PoolGeometry {
  std::size_t batch, channels, height, width, window, stride, out_h, out_w;
};

template <class T>
Tensor pool_forward(const PoolGeometry& g, PoolKind kind, const Tensor& x) {
  Tensor out({g.batch, g.channels, g.out_h, g.out_w}, dtype_of<T>());
  auto xs = x.data<T>();
  auto os = out.data<T>();
  const T inv = T(1) / static_cast<T>(g.window * g.window);
  for (std::size_t bc = 0; bc < g.batch * g.channels; ++bc) {
    const T* img = xs.data() + bc * g.height * g.width;
    T* dst = os.data() + bc * g.out_h * g.out_w;
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T acc = kind == PoolKind::kMax ? -std::numeric_limits<T>::infinity() : T(0);
        for (std::size_t dy = 0; dy < g.window; ++dy)
          for (std::size_t dx = 0; dx < g.window; ++dx) {
            const T v = img[(oy * g.stride + dy) * g.width + ox * g.stride + dx];
            if (kind == PoolKind::kMax) {
              if (v > acc) acc = v;
            } else {
              acc += v;
            }
          }
        dst[oy * g.out_w + ox] = kind == PoolKind::kMax ? acc : acc * inv;
      }
  }
  return out;
}

template <class T>
void pool_backward(const PoolGeometry& g, PoolKind kind, BackwardContext& ctx) {
  auto xs = ctx.input(0).data<T>();
  auto gy = ctx.out_grad().data<T>();
  auto dx = ctx.input_grad(0).data<T>();
  const T inv = T(1) / static_cast<T>(g.window * g.window);
  for (std::size_t bc = 0; bc < g.batch * g.channels; ++bc) {
    const T* img = xs.data() + bc * g.height * g.width;
    T* dimg = dx.data() + bc * g.height * g.width;
    const T* src = gy.data() + bc * g.out_h * g.out_w;
    for (std::size_t oy = 0; oy < g.out_h; ++oy)
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T gv = src[oy * g.out_w + ox];
        if (kind == PoolKind::kAvg) {
          for (std::size_t dy = 0; dy < g.window; ++dy)
            for (std::size_t dxx = 0; dxx < g.window; ++dxx)
              dimg[(oy * g.stride + dy) * g.width + ox * g.stride + dxx] += gv * inv;
          continue;
        }
        // First row-major maximum wins ties.
        std::size_t best = (oy * g.stride) * g.width + ox * g.stride;
        T best_v = img[best];
        for (std::size_t dy = 0; dy < g.window; ++dy)
          for (std::size_t dxx = 0; dxx < g.window; ++dxx) {
            const std::size_t idx = (oy * g.stride + dy) * g.width + ox * g.stride + dxx;
            if (img[idx] > best_v) {
              best_v = img[idx];
              best = idx;
            }
          }
        dimg[best] += gv;
      }
  }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(x.value(), w.value(), b.value(), stride, padding);
  Tensor out = dispatch_float(x.dtype(), [&]<class T>() {
    return conv_forward<T>(g, x.value(), w.value(), b.value());
  });
  return x.tape().record(std::move(out), {x, w, b}, [g](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() { conv_backward<T>(g, ctx); });
  });
}

Var pool2d(Var x, PoolKind kind, std::size_t window, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("pool2d: expected [B,K,M,N] input");
  if (window == 0 || stride == 0) throw ConfigError("pool2d: window and stride must be positive");
  if (window > xv.dim(2) || window > xv.dim(3)) {
    throw DimensionError("pool2d: window " + std::to_string(window) +
                         " exceeds spatial dims " + shape_string(xv.shape()));
  }
  PoolGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), window, stride, 0, 0};
  g.out_h = output_extent(g.height, window, stride, 0, "pool2d");
  g.out_w = output_extent(g.width, window, stride, 0, "pool2d");
  Tensor out = dispatch_float(xv.dtype(), [&]<class T>() { return pool_forward<T>(g, kind, xv); });
  return x.tape().record(std::move(out), {x}, [g, kind](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() { pool_backward<T>(g, kind, ctx); });
  });
}

}  // namespace defnet
