#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

#include "defnet/autograd.hpp"

namespace defnet {

// How defective positions are arranged inside a [K,M,N] activation block.
enum class MaskVariant {
  kNeuron,   // independent Bernoulli(p) per neuron
  kChannel,  // one draw per channel, whole channels kept or dropped
  kShared,   // one [M,N] pattern replicated across every channel
};

const char* to_string(MaskVariant variant);
MaskVariant parse_mask_variant(std::string_view text);

// Fixed binary mask over a layer's output feature maps (1 = keep,
// 0 = defective). Immutable once built, and there is deliberately no mode
// argument anywhere in its use: train and eval see the same bits.
class DefectiveMask {
 public:
  // Validates bits (uint8, rank 3, values in {0,1}) and the variant structure.
  DefectiveMask(Tensor bits, double keep_prob, std::uint64_t seed, MaskVariant variant);

  const Shape& shape() const { return bits_.shape(); }
  const Tensor& bits() const { return bits_; }
  double keep_prob() const { return keep_prob_; }
  std::uint64_t seed() const { return seed_; }
  MaskVariant variant() const { return variant_; }

  std::size_t kept() const;
  double kept_fraction() const;

 private:
  Tensor bits_;
  double keep_prob_;
  std::uint64_t seed_;
  MaskVariant variant_;
};

// Bernoulli(p) keep mask of `shape` [K,M,N]; a pure function of its arguments.
DefectiveMask sample_defect_mask(const Shape& shape, double keep_prob, std::uint64_t seed,
                                 MaskVariant variant);

// z = mask * z' with the mask broadcast over the batch.
Var apply_mask(Var activations, const DefectiveMask& mask);

// conv2d -> batch_norm -> relu.
Var conv_bn_relu(Var x, Var w, Var b, Var gamma, Var beta, BatchNormStats& stats, Mode mode,
                 std::size_t stride, std::size_t padding);
Var conv_bn_relu(Var x, Var w, Var b, Var gamma, Var beta, const BatchNormStats& stats,
                 std::size_t stride, std::size_t padding);

// conv2d -> batch_norm -> relu -> fixed mask; gradients reach only kept
// positions. The eval overload never touches the running statistics.
Var defective_conv_forward(Var x, Var w, Var b, Var gamma, Var beta, BatchNormStats& stats,
                           const DefectiveMask& mask, Mode mode, std::size_t stride,
                           std::size_t padding);
Var defective_conv_forward(Var x, Var w, Var b, Var gamma, Var beta,
                           const BatchNormStats& stats, const DefectiveMask& mask,
                           std::size_t stride, std::size_t padding);

// ---------------------------------------------------------------------------
// Dropout baselines. Unlike DefectiveMask these resample on every call and
// vanish at eval time.

enum class DropoutFlavor { kElement, kSpatial, kDropBlock };

const char* to_string(DropoutFlavor flavor);
DropoutFlavor parse_dropout_flavor(std::string_view text);

struct DropoutConfig {
  double keep_prob = 0.9;
  DropoutFlavor flavor = DropoutFlavor::kElement;
  std::size_t block_size = 3;  // DropBlock only; odd
  Mode mode = Mode::kTrain;

  void validate() const;
};

// Per-position keep/drop pattern (1/0) for a [B,K,M,N] activation.
Tensor sample_dropout_pattern(const Shape& shape, const DropoutConfig& cfg,
                              std::uint64_t seed);

// Rate at which DropBlock centers are drawn (valid interior only) so that the
// expected kept fraction of an M x N map is exactly keep_prob.
double dropblock_center_rate(std::size_t height, std::size_t width, std::size_t block_size,
                             double keep_prob);

// Eval: identity. Train: x * pattern / keep_prob (inverted scaling).
Var dropout_forward(Var x, const DropoutConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------

// One 2-D convolution with its batch norm, plus an optional fixed mask.
struct ConvLayerSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t out_height = 0;
  std::size_t out_width = 0;
  std::optional<DefectiveMask> mask;

  // Conv weight + conv bias + BN gamma/beta. Masks contribute nothing.
  std::size_t parameter_count() const;
};

// Multiplies the output channels of a masked layer by `factor` and samples a
// fresh mask of the widened shape with the same keep probability and variant.
ConvLayerSpec widen_spec(const ConvLayerSpec& spec, std::size_t factor);

}  // namespace defnet
