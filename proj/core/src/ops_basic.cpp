#include <algorithm>
#include <cmath>

#include "defnet/autograd.hpp"
#include "defnet/gemm.hpp"

namespace defnet {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  if (a.dtype() != b.dtype()) throw DimensionError(std::string(op) + ": dtype mismatch");
}

template <class T>
void accumulate(Tensor& dst, std::span<const T> src) {
  auto d = dst.data<T>();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

}  // namespace

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out = dispatch_float(xv.dtype(), [&]<class T>() {
    Tensor o(xv.shape(), xv.dtype());
    auto xs = xv.data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = xs[i] > T(0) ? xs[i] : T(0);
    return o;
  });
  return x.tape().record(std::move(out), {x}, [](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto xs = ctx.input(0).data<T>();
      auto gy = ctx.out_grad().data<T>();
      auto dx = ctx.input_grad(0).data<T>();
      for (std::size_t i = 0; i < xs.size(); ++i)
        if (xs[i] > T(0)) dx[i] += gy[i];
    });
  });
}

namespace {

// Reductions over sixteen fixed lanes: vectorizable without reassociation and
// still a fixed summation order.
template <class T, class F>
T lane_reduce(std::size_t n, F term) {
  T lanes[16] = {};
  std::size_t i = 0;
  for (; i + 16 <= n; i += 16)
    for (std::size_t j = 0; j < 16; ++j) lanes[j] += term(i + j);
  T acc = 0;
  for (; i < n; ++i) acc += term(i);
  for (T v : lanes) acc += v;
  return acc;
}

template <class T>
struct BnSaved {
  Tensor xhat;
  std::vector<T> inv_std;
};

Var batch_norm_impl(Var x, Var gamma, Var beta, const BatchNormStats& stats,
                    BatchNormStats* update, double eps) {
  const Mode mode = update ? Mode::kTrain : Mode::kEval;
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("batch_norm: expected [B,K,M,N] input");
  if (!(eps > 0.0)) throw ConfigError("batch_norm: eps must be positive");
  const std::size_t batch = xv.dim(0);
  const std::size_t channels = xv.dim(1);
  const std::size_t plane = xv.dim(2) * xv.dim(3);
  if (gamma.shape() != Shape{channels} || beta.shape() != Shape{channels}) {
    throw DimensionError("batch_norm: gamma/beta must have shape [" +
                         std::to_string(channels) + "]");
  }
  if (mode == Mode::kTrain && batch == 0) {
    throw ConfigError("batch_norm: empty batch in train mode");
  }
  if (update && update->running_mean.empty()) {
    update->running_mean = Tensor({channels}, xv.dtype());
    update->running_var = Tensor({channels}, xv.dtype());
    update->running_var.fill(1.0);
  }
  if (stats.running_mean.shape() != Shape{channels} ||
      stats.running_var.shape() != Shape{channels} ||
      stats.running_mean.dtype() != xv.dtype() || stats.running_var.dtype() != xv.dtype()) {
    throw DimensionError("batch_norm: running statistics do not match input");
  }

  return dispatch_float(xv.dtype(), [&]<class T>() -> Var {
    const std::size_t n = batch * plane;
    auto xs = xv.data<T>();
    auto gs = gamma.value().data<T>();
    auto bs = beta.value().data<T>();
    Tensor out(xv.shape(), xv.dtype());
    auto os = out.data<T>();
    Tensor xhat(xv.shape(), xv.dtype());
    auto hs = xhat.data<T>();
    std::vector<T> inv_std(channels);
    auto rm = stats.running_mean.data<T>();
    auto rv = stats.running_var.data<T>();
    std::span<T> rm_out, rv_out;
    if (update) {
      rm_out = update->running_mean.data<T>();
      rv_out = update->running_var.data<T>();
    }

    for (std::size_t c = 0; c < channels; ++c) {
      T mean, var;
      if (mode == Mode::kTrain) {
        T acc = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* p = xs.data() + (b * channels + c) * plane;
          acc += lane_reduce<T>(plane, [p](std::size_t i) { return p[i]; });
        }
        mean = acc / static_cast<T>(n);
        T sq = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* p = xs.data() + (b * channels + c) * plane;
          sq += lane_reduce<T>(plane, [p, mean](std::size_t i) {
            return (p[i] - mean) * (p[i] - mean);
          });
        }
        var = sq / static_cast<T>(n);
        const T m = static_cast<T>(stats.momentum);
        const T unbiased = n > 1 ? sq / static_cast<T>(n - 1) : var;
        rm_out[c] = (T(1) - m) * rm[c] + m * mean;
        rv_out[c] = (T(1) - m) * rv[c] + m * unbiased;
      } else {
        mean = rm[c];
        var = rv[c];
      }
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv_std[c] = inv;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = (b * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T h = (xs[off + i] - mean) * inv;
          hs[off + i] = h;
          os[off + i] = gs[c] * h + bs[c];
        }
      }
    }

    auto fn = [saved = BnSaved<T>{std::move(xhat), std::move(inv_std)}, mode, batch,
               channels, plane](BackwardContext& ctx) {
      auto gy = ctx.out_grad().data<T>();
      auto hs = saved.xhat.template data<T>();
      auto gs = ctx.input(1).data<T>();
      const T n = static_cast<T>(batch * plane);
      for (std::size_t c = 0; c < channels; ++c) {
        T sum_g = 0, sum_gh = 0;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* g = gy.data() + (b * channels + c) * plane;
          const T* h = hs.data() + (b * channels + c) * plane;
          sum_g += lane_reduce<T>(plane, [g](std::size_t i) { return g[i]; });
          sum_gh += lane_reduce<T>(plane, [g, h](std::size_t i) { return g[i] * h[i]; });
        }
        if (ctx.needs_grad(1)) ctx.input_grad(1).data<T>()[c] += sum_gh;
        if (ctx.needs_grad(2)) ctx.input_grad(2).data<T>()[c] += sum_g;
        if (!ctx.needs_grad(0)) continue;
        auto dx = ctx.input_grad(0).data<T>();
        const T gc = gs[c];
        const T inv = saved.inv_std[c];
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = (b * channels + c) * plane;
          if (mode == Mode::kTrain) {
            const T k = gc * inv / n;
            for (std::size_t i = 0; i < plane; ++i)
              dx[off + i] += k * (n * gy[off + i] - sum_g - hs[off + i] * sum_gh);
          } else {
            for (std::size_t i = 0; i < plane; ++i) dx[off + i] += gc * inv * gy[off + i];
          }
        }
      }
    };
    return x.tape().record(std::move(out), {x, gamma, beta}, std::move(fn));
  });
}

}  // namespace

Var batch_norm_train(Var x, Var gamma, Var beta, BatchNormStats& stats, double eps) {
  return batch_norm_impl(x, gamma, beta, stats, &stats, eps);
}

Var batch_norm_eval(Var x, Var gamma, Var beta, const BatchNormStats& stats, double eps) {
  if (stats.running_mean.empty()) throw ConfigError("batch_norm: no running statistics");
  return batch_norm_impl(x, gamma, beta, stats, nullptr, eps);
}

Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, Mode mode, double eps) {
  return mode == Mode::kTrain ? batch_norm_train(x, gamma, beta, stats, eps)
                              : batch_norm_eval(x, gamma, beta, stats, eps);
}

Var linear(Var x, Var w, Var b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1 || xv.dim(1) != wv.dim(1) ||
      bv.dim(0) != wv.dim(0)) {
    throw DimensionError("linear: incompatible shapes x" + shape_string(xv.shape()) + " w" +
                         shape_string(wv.shape()) + " b" + shape_string(bv.shape()));
  }
  if (xv.dtype() != wv.dtype() || xv.dtype() != bv.dtype()) {
    throw DimensionError("linear: dtype mismatch");
  }
  const std::size_t rows = xv.dim(0), in = xv.dim(1), out_dim = wv.dim(0);
  Tensor out = dispatch_float(xv.dtype(), [&]<class T>() {
    Tensor o({rows, out_dim}, xv.dtype());
    auto os = o.data<T>();
    gemm(Trans::kNo, Trans::kYes, rows, out_dim, in, T(1), xv.data<T>().data(), in,
         wv.data<T>().data(), in, T(0), os.data(), out_dim);
    auto bs = bv.data<T>();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < out_dim; ++c) os[r * out_dim + c] += bs[c];
    return o;
  });
  return x.tape().record(std::move(out), {x, w, b}, [rows, in, out_dim](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      if (ctx.needs_grad(0)) {
        gemm(Trans::kNo, Trans::kNo, rows, in, out_dim, T(1), gy.data(), out_dim,
             ctx.input(1).data<T>().data(), in, T(1), ctx.input_grad(0).data<T>().data(), in);
      }
      if (ctx.needs_grad(1)) {
        gemm(Trans::kYes, Trans::kNo, out_dim, in, rows, T(1), gy.data(), out_dim,
             ctx.input(0).data<T>().data(), in, T(1), ctx.input_grad(1).data<T>().data(), in);
      }
      if (ctx.needs_grad(2)) {
        auto db = ctx.input_grad(2).data<T>();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < out_dim; ++c) db[c] += gy[r * out_dim + c];
      }
    });
  });
}

Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("global_avg_pool: expected [B,K,M,N] input");
  const std::size_t bk = xv.dim(0) * xv.dim(1);
  const std::size_t plane = xv.dim(2) * xv.dim(3);
  Tensor out = dispatch_float(xv.dtype(), [&]<class T>() {
    Tensor o({xv.dim(0), xv.dim(1)}, xv.dtype());
    auto xs = xv.data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < bk; ++i) {
      T acc = 0;
      for (std::size_t p = 0; p < plane; ++p) acc += xs[i * plane + p];
      os[i] = acc / static_cast<T>(plane);
    }
    return o;
  });
  return x.tape().record(std::move(out), {x}, [bk, plane](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      auto dx = ctx.input_grad(0).data<T>();
      const T inv = T(1) / static_cast<T>(plane);
      for (std::size_t i = 0; i < bk; ++i)
        for (std::size_t p = 0; p < plane; ++p) dx[i * plane + p] += gy[i] * inv;
    });
  });
}

Tensor softmax(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("softmax: expected [B,C] logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  return dispatch_float(logits.dtype(), [&]<class T>() {
    Tensor out(logits.shape(), logits.dtype());
    auto ls = logits.data<T>();
    auto os = out.data<T>();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* l = ls.data() + r * cols;
      T* o = os.data() + r * cols;
      const T mx = *std::max_element(l, l + cols);
      T total = 0;
      for (std::size_t c = 0; c < cols; ++c) total += (o[c] = std::exp(l[c] - mx));
      for (std::size_t c = 0; c < cols; ++c) o[c] /= total;
    }
    return out;
  });
}

std::vector<int> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows: expected [B,C] logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    double best_v = logits.item(r * cols);
    for (std::size_t c = 1; c < cols; ++c) {
      const double v = logits.item(r * cols + c);
      if (v > best_v) {
        best_v = v;
        best = c;
      }
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels, Reduction reduction) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw DimensionError("softmax_cross_entropy: expected [B,C] logits");
  const std::size_t rows = lv.dim(0), cols = lv.dim(1);
  if (labels.size() != rows) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(rows) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw DimensionError("softmax_cross_entropy: label " + std::to_string(y) +
                           " out of range [0," + std::to_string(cols) + ")");
    }
  }
  std::vector<int> ys(labels.begin(), labels.end());
  Tensor probs = softmax(lv);
  Tensor out = dispatch_float(lv.dtype(), [&]<class T>() {
    auto ls = lv.data<T>();
    T total = 0;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* l = ls.data() + r * cols;
      const T mx = *std::max_element(l, l + cols);
      T z = 0;
      for (std::size_t c = 0; c < cols; ++c) z += std::exp(l[c] - mx);
      total += std::log(z) + mx - l[ys[r]];
    }
    if (reduction == Reduction::kMean && rows > 0) total /= static_cast<T>(rows);
    return Tensor::from<T>({1}, {total});
  });
  return logits.tape().record(
      std::move(out), {logits},
      [probs = std::move(probs), ys = std::move(ys), reduction, rows,
       cols](BackwardContext& ctx) {
        dispatch_float(ctx.output().dtype(), [&]<class T>() {
          const T g = ctx.out_grad().data<T>()[0];
          const T s = reduction == Reduction::kMean ? g / static_cast<T>(rows) : g;
          auto ps = probs.data<T>();
          auto dl = ctx.input_grad(0).data<T>();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
              const T onehot = static_cast<std::size_t>(ys[r]) == c ? T(1) : T(0);
              dl[r * cols + c] += (ps[r * cols + c] - onehot) * s;
            }
        });
      });
}

Var add(Var a, Var b) {
  require_same(a.value(), b.value(), "add");
  Tensor out = dispatch_float(a.dtype(), [&]<class T>() {
    Tensor o(a.shape(), a.dtype());
    auto as = a.value().data<T>();
    auto bs = b.value().data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] + bs[i];
    return o;
  });
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      if (ctx.needs_grad(0)) accumulate<T>(ctx.input_grad(0), gy);
      if (ctx.needs_grad(1)) accumulate<T>(ctx.input_grad(1), gy);
    });
  });
}

Var sub(Var a, Var b) {
  require_same(a.value(), b.value(), "sub");
  Tensor out = dispatch_float(a.dtype(), [&]<class T>() {
    Tensor o(a.shape(), a.dtype());
    auto as = a.value().data<T>();
    auto bs = b.value().data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] - bs[i];
    return o;
  });
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      if (ctx.needs_grad(0)) accumulate<T>(ctx.input_grad(0), gy);
      if (ctx.needs_grad(1)) {
        auto d = ctx.input_grad(1).data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= gy[i];
      }
    });
  });
}

Var mul(Var a, Var b) {
  require_same(a.value(), b.value(), "mul");
  Tensor out = dispatch_float(a.dtype(), [&]<class T>() {
    Tensor o(a.shape(), a.dtype());
    auto as = a.value().data<T>();
    auto bs = b.value().data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = as[i] * bs[i];
    return o;
  });
  return a.tape().record(std::move(out), {a, b}, [](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      auto as = ctx.input(0).data<T>();
      auto bs = ctx.input(1).data<T>();
      if (ctx.needs_grad(0)) {
        auto d = ctx.input_grad(0).data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * bs[i];
      }
      if (ctx.needs_grad(1)) {
        auto d = ctx.input_grad(1).data<T>();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * as[i];
      }
    });
  });
}

Var scale(Var x, double factor) {
  Tensor out = dispatch_float(x.dtype(), [&]<class T>() {
    Tensor o(x.shape(), x.dtype());
    auto xs = x.value().data<T>();
    auto os = o.data<T>();
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = xs[i] * f;
    return o;
  });
  return x.tape().record(std::move(out), {x}, [factor](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      auto d = ctx.input_grad(0).data<T>();
      const T f = static_cast<T>(factor);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * f;
    });
  });
}

Var add_broadcast(Var x, Var c) {
  const Tensor& xv = x.value();
  const Tensor& cv = c.value();
  if (xv.rank() == 0 || Shape(xv.shape().begin() + 1, xv.shape().end()) != cv.shape()) {
    throw DimensionError("add_broadcast: " + shape_string(cv.shape()) +
                         " does not match per-sample shape of " + shape_string(xv.shape()));
  }
  if (xv.dtype() != cv.dtype()) throw DimensionError("add_broadcast: dtype mismatch");
  const std::size_t inner = cv.numel();
  Tensor out = dispatch_float(xv.dtype(), [&]<class T>() {
    Tensor o(xv.shape(), xv.dtype());
    auto xs = xv.data<T>();
    auto cs = cv.data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = xs[i] + cs[i % inner];
    return o;
  });
  return x.tape().record(std::move(out), {x, c}, [inner](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      auto gy = ctx.out_grad().data<T>();
      if (ctx.needs_grad(0)) accumulate<T>(ctx.input_grad(0), gy);
      if (ctx.needs_grad(1)) {
        auto d = ctx.input_grad(1).data<T>();
        for (std::size_t i = 0; i < gy.size(); ++i) d[i % inner] += gy[i];
      }
    });
  });
}

Var mul_broadcast(Var x, const Tensor& factor) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || Shape(xv.shape().begin() + 1, xv.shape().end()) != factor.shape()) {
    throw DimensionError("mul_broadcast: " + shape_string(factor.shape()) +
                         " does not match per-sample shape of " + shape_string(xv.shape()));
  }
  return dispatch_float(xv.dtype(), [&]<class T>() -> Var {
    std::vector<T> f(factor.numel());
    if (factor.dtype() == DType::kUInt8) {
      auto bits = factor.data<std::uint8_t>();
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = bits[i] ? T(1) : T(0);
    } else {
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = static_cast<T>(factor.item(i));
    }
    const std::size_t inner = f.size();
    Tensor o(xv.shape(), xv.dtype());
    auto xs = xv.data<T>();
    auto os = o.data<T>();
    for (std::size_t i = 0; i < os.size(); ++i) os[i] = xs[i] * f[i % inner];
    return x.tape().record(std::move(o), {x}, [f = std::move(f)](BackwardContext& ctx) {
      auto gy = ctx.out_grad().data<T>();
      auto d = ctx.input_grad(0).data<T>();
      const std::size_t inner = f.size();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += gy[i] * f[i % inner];
    });
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      accumulate<T>(ctx.input_grad(0), ctx.out_grad().data<T>());
    });
  });
}

Var sum(Var x) {
  Tensor out = dispatch_float(x.dtype(), [&]<class T>() {
    T acc = 0;
    for (T v : x.value().data<T>()) acc += v;
    return Tensor::from<T>({1}, {acc});
  });
  return x.tape().record(std::move(out), {x}, [](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      const T g = ctx.out_grad().data<T>()[0];
      for (T& d : ctx.input_grad(0).data<T>()) d += g;
    });
  });
}

Var dot_const(Var x, const Tensor& coeffs) {
  const Tensor& xv = x.value();
  if (coeffs.shape() != xv.shape()) throw DimensionError("dot_const: shape mismatch");
  Tensor c = coeffs.to(xv.dtype());
  Tensor out = dispatch_float(xv.dtype(), [&]<class T>() {
    auto xs = xv.data<T>();
    auto cs = c.data<T>();
    T acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) acc += xs[i] * cs[i];
    return Tensor::from<T>({1}, {acc});
  });
  return x.tape().record(std::move(out), {x}, [c = std::move(c)](BackwardContext& ctx) {
    dispatch_float(ctx.output().dtype(), [&]<class T>() {
      const T g = ctx.out_grad().data<T>()[0];
      auto cs = c.data<T>();
      auto d = ctx.input_grad(0).data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g * cs[i];
    });
  });
}

}  // namespace defnet
