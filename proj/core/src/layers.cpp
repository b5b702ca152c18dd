#include "defnet/layers.hpp"

#include <cmath>
#include <string>

#include "defnet/rng.hpp"

namespace defnet {

const char* to_string(MaskVariant variant) {
  switch (variant) {
    case MaskVariant::kNeuron:
      return "neuron";
    case MaskVariant::kChannel:
      return "channel";
    case MaskVariant::kShared:
      return "shared";
  }
  return "?";
}

MaskVariant parse_mask_variant(std::string_view text) {
  if (text == "neuron") return MaskVariant::kNeuron;
  if (text == "channel" || text == "dc") return MaskVariant::kChannel;
  if (text == "shared" || text == "sm") return MaskVariant::kShared;
  throw ConfigError("unknown mask variant '" + std::string(text) + "'");
}

const char* to_string(DropoutFlavor flavor) {
  switch (flavor) {
    case DropoutFlavor::kElement:
      return "element";
    case DropoutFlavor::kSpatial:
      return "spatial";
    case DropoutFlavor::kDropBlock:
      return "dropblock";
  }
  return "?";
}

DropoutFlavor parse_dropout_flavor(std::string_view text) {
  if (text == "element") return DropoutFlavor::kElement;
  if (text == "spatial") return DropoutFlavor::kSpatial;
  if (text == "dropblock") return DropoutFlavor::kDropBlock;
  throw ConfigError("unknown dropout flavor '" + std::string(text) + "'");
}

DefectiveMask::DefectiveMask(Tensor bits, double keep_prob, std::uint64_t seed,
                             MaskVariant variant)
    : bits_(std::move(bits)), keep_prob_(keep_prob), seed_(seed), variant_(variant) {
  if (bits_.dtype() != DType::kUInt8 || bits_.rank() != 3) {
    throw DimensionError("DefectiveMask: bits must be a uint8 [K,M,N] tensor, got " +
                         std::string(to_string(bits_.dtype())) + " " +
                         shape_string(bits_.shape()));
  }
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("DefectiveMask: keep probability " + std::to_string(keep_prob) +
                      " outside [0,1]");
  }
  auto b = bits_.data<std::uint8_t>();
  for (std::uint8_t v : b) {
    if (v > 1) throw ConfigError("DefectiveMask: bits must be 0 or 1");
  }
  const std::size_t k = bits_.dim(0);
  const std::size_t plane = bits_.dim(1) * bits_.dim(2);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t v = b[c * plane + i];
      if (variant == MaskVariant::kChannel && v != b[c * plane]) {
        throw ConfigError("DefectiveMask: channel variant needs constant channel slices");
      }
      if (variant == MaskVariant::kShared && v != b[i]) {
        throw ConfigError("DefectiveMask: shared variant needs identical channel slices");
      }
    }
  }
}

std::size_t DefectiveMask::kept() const {
  std::size_t n = 0;
  for (std::uint8_t v : bits_.data<std::uint8_t>()) n += v;
  return n;
}

double DefectiveMask::kept_fraction() const {
  return bits_.numel() == 0 ? 0.0
                            : static_cast<double>(kept()) / static_cast<double>(bits_.numel());
}

DefectiveMask sample_defect_mask(const Shape& shape, double keep_prob, std::uint64_t seed,
                                 MaskVariant variant) {
  if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("sample_defect_mask: keep probability " + std::to_string(keep_prob) +
                      " outside [0,1]");
  }
  if (shape.size() != 3 || shape_numel(shape) == 0) {
    throw DimensionError("sample_defect_mask: shape must be a positive [K,M,N], got " +
                         shape_string(shape));
  }
  Rng rng = make_rng(seed);
  auto draw = [&]() -> std::uint8_t { return uniform01(rng) < keep_prob ? 1 : 0; };
  Tensor bits(shape, DType::kUInt8);
  auto b = bits.data<std::uint8_t>();
  const std::size_t k = shape[0];
  const std::size_t plane = shape[1] * shape[2];
  switch (variant) {
    case MaskVariant::kNeuron:
      for (auto& v : b) v = draw();
      break;
    case MaskVariant::kChannel:
      for (std::size_t c = 0; c < k; ++c) {
        const std::uint8_t v = draw();
        for (std::size_t i = 0; i < plane; ++i) b[c * plane + i] = v;
      }
      break;
    case MaskVariant::kShared:
      for (std::size_t i = 0; i < plane; ++i) b[i] = draw();
      for (std::size_t c = 1; c < k; ++c)
        for (std::size_t i = 0; i < plane; ++i) b[c * plane + i] = b[i];
      break;
  }
  return DefectiveMask(std::move(bits), keep_prob, seed, variant);
}

Var apply_mask(Var activations, const DefectiveMask& mask) {
  const Shape& s = activations.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != mask.shape()) {
    throw DimensionError("defective mask " + shape_string(mask.shape()) +
                         " does not match activation shape " + shape_string(s));
  }
  return mul_broadcast(activations, mask.bits());
}

Var conv_bn_relu(Var x, Var w, Var b, Var gamma, Var beta, BatchNormStats& stats, Mode mode,
                 std::size_t stride, std::size_t padding) {
  return relu(batch_norm(conv2d(x, w, b, stride, padding), gamma, beta, stats, mode));
}

Var conv_bn_relu(Var x, Var w, Var b, Var gamma, Var beta, const BatchNormStats& stats,
                 std::size_t stride, std::size_t padding) {
  return relu(batch_norm_eval(conv2d(x, w, b, stride, padding), gamma, beta, stats));
}

Var defective_conv_forward(Var x, Var w, Var b, Var gamma, Var beta, BatchNormStats& stats,
                           const DefectiveMask& mask, Mode mode, std::size_t stride,
                           std::size_t padding) {
  return apply_mask(conv_bn_relu(x, w, b, gamma, beta, stats, mode, stride, padding), mask);
}

Var defective_conv_forward(Var x, Var w, Var b, Var gamma, Var beta,
                           const BatchNormStats& stats, const DefectiveMask& mask,
                           std::size_t stride, std::size_t padding) {
  return apply_mask(conv_bn_relu(x, w, b, gamma, beta, stats, stride, padding), mask);
}

void DropoutConfig::validate() const {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("dropout keep probability must lie in (0,1], got " +
                      std::to_string(keep_prob));
  }
  if (flavor == DropoutFlavor::kDropBlock && (block_size == 0 || block_size % 2 == 0)) {
    throw ConfigError("dropblock block_size must be odd and >= 1");
  }
}

namespace {

// Number of valid centers whose block covers position i along one axis.
// Valid centers lie in [lo, hi]; a center c covers [c-half, c+half].
std::size_t coverage(std::size_t i, std::size_t lo, std::size_t hi, std::size_t half) {
  const std::size_t from = std::max(lo, i >= half ? i - half : 0);
  const std::size_t to = std::min(hi, i + half);
  return to >= from ? to - from + 1 : 0;
}

struct CenterRange {
  std::size_t lo, hi;
};

// Valid interior for centers; the full axis when the block does not fit.
CenterRange center_range(std::size_t extent, std::size_t half) {
  if (extent > 2 * half) return {half, extent - 1 - half};
  return {0, extent - 1};
}

}  // namespace

double dropblock_center_rate(std::size_t height, std::size_t width, std::size_t block_size,
                             double keep_prob) {
  if (keep_prob >= 1.0) return 0.0;
  const std::size_t half = block_size / 2;
  const CenterRange ry = center_range(height, half);
  const CenterRange rx = center_range(width, half);
  std::vector<double> counts;
  counts.reserve(height * width);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      counts.push_back(static_cast<double>(coverage(y, ry.lo, ry.hi, half) *
                                           coverage(x, rx.lo, rx.hi, half)));
  // A position survives iff none of its covering centers fire; the expected
  // kept fraction is decreasing in the rate, so bisect.
  auto kept = [&](double rate) {
    double total = 0.0;
    for (double n : counts) total += std::pow(1.0 - rate, n);
    return total / static_cast<double>(counts.size());
  };
  double lo = 0.0, hi = 1.0;
  if (kept(hi) > keep_prob) return 1.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (kept(mid) > keep_prob ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

Tensor sample_dropout_pattern(const Shape& shape, const DropoutConfig& cfg,
                              std::uint64_t seed) {
  cfg.validate();
  if (shape.size() != 4) throw DimensionError("dropout expects [B,K,M,N] activations");
  Tensor pattern(shape, DType::kUInt8);
  auto p = pattern.data<std::uint8_t>();
  Rng rng = make_rng(seed);
  const std::size_t maps = shape[0] * shape[1];
  const std::size_t h = shape[2], w = shape[3], plane = h * w;
  switch (cfg.flavor) {
    case DropoutFlavor::kElement:
      for (auto& v : p) v = uniform01(rng) < cfg.keep_prob ? 1 : 0;
      break;
    case DropoutFlavor::kSpatial:
      for (std::size_t m = 0; m < maps; ++m) {
        const std::uint8_t v = uniform01(rng) < cfg.keep_prob ? 1 : 0;
        std::fill(p.begin() + m * plane, p.begin() + (m + 1) * plane, v);
      }
      break;
    case DropoutFlavor::kDropBlock: {
      const double rate = dropblock_center_rate(h, w, cfg.block_size, cfg.keep_prob);
      const std::size_t half = cfg.block_size / 2;
      const CenterRange ry = center_range(h, half);
      const CenterRange rx = center_range(w, half);
      std::fill(p.begin(), p.end(), std::uint8_t{1});
      for (std::size_t m = 0; m < maps; ++m) {
        std::uint8_t* map = p.data() + m * plane;
        for (std::size_t cy = ry.lo; cy <= ry.hi; ++cy)
          for (std::size_t cx = rx.lo; cx <= rx.hi; ++cx) {
            if (uniform01(rng) >= rate) continue;
            const std::size_t y0 = cy >= half ? cy - half : 0;
            const std::size_t x0 = cx >= half ? cx - half : 0;
            const std::size_t y1 = std::min(h - 1, cy + half);
            const std::size_t x1 = std::min(w - 1, cx + half);
            for (std::size_t y = y0; y <= y1; ++y)
              for (std::size_t x = x0; x <= x1; ++x) map[y * w + x] = 0;
          }
      }
      break;
    }
  }
  return pattern;
}

Var dropout_forward(Var x, const DropoutConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.mode == Mode::kEval || cfg.keep_prob == 1.0) return x;
  Tensor pattern = sample_dropout_pattern(x.shape(), cfg, seed);
  Tensor factor = dispatch_float(x.dtype(), [&]<class T>() {
    Tensor f(x.shape(), x.dtype());
    auto fs = f.data<T>();
    auto ps = pattern.data<std::uint8_t>();
    const T s = static_cast<T>(1.0 / cfg.keep_prob);
    for (std::size_t i = 0; i < fs.size(); ++i) fs[i] = ps[i] ? s : T(0);
    return f;
  });
  return mul(x, x.tape().constant(std::move(factor)));
}

std::size_t ConvLayerSpec::parameter_count() const {
  return out_channels * in_channels * kernel * kernel + out_channels + 2 * out_channels;
}

ConvLayerSpec widen_spec(const ConvLayerSpec& spec, std::size_t factor) {
  if (factor < 1) throw ConfigError("widen factor must be >= 1");
  if (!spec.mask) throw ConfigError("widen_spec: layer carries no defective mask");
  if (factor == 1) return spec;
  ConvLayerSpec out = spec;
  out.out_channels = spec.out_channels * factor;
  const DefectiveMask& m = *spec.mask;
  out.mask = sample_defect_mask({out.out_channels, spec.out_height, spec.out_width},
                                m.keep_prob(), derive_seed(m.seed(), {factor}), m.variant());
  return out;
}

}  // namespace defnet
