#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "defnet/autograd.hpp"
#include "defnet/layers.hpp"

namespace defnet {

enum class Architecture { kResnetSmall, kConvnetPlain };

const char* to_string(Architecture arch);
Architecture parse_architecture(std::string_view text);

struct BlockSpec {
  std::size_t channels = 16;
  std::size_t stride = 1;
  std::size_t layers = 1;

  bool operator==(const BlockSpec&) const = default;
};

// Named placements for the 5-block layout: bottom = {0,1,2}, top = {3,4}.
enum class Placement { kNone, kBottom, kTop, kBoth };

std::vector<std::size_t> placement_blocks(Placement placement, std::size_t num_blocks);
// "none", "bottom", "top", "both", or an explicit list such as "0,1,2".
std::vector<std::size_t> parse_placement(std::string_view text, std::size_t num_blocks);
std::string placement_string(const std::vector<std::size_t>& blocks);

// Declarative architecture description. Together with its seeds it fully
// determines the realized network.
struct ModelSpec {
  Architecture architecture = Architecture::kResnetSmall;
  std::vector<BlockSpec> blocks;
  std::vector<std::size_t> mask_blocks;  // sorted, unique
  double keep_prob = 1.0;
  MaskVariant mask_variant = MaskVariant::kNeuron;
  std::size_t widen_factor = 1;
  std::size_t num_classes = 10;
  Shape input_shape{1, 28, 28};
  std::uint64_t master_seed = 0;
  // Masks are drawn from this seed when set, otherwise from master_seed.
  // Lets two models share weights-init while differing only in mask bits.
  std::optional<std::uint64_t> mask_seed;

  void validate() const;
  std::uint64_t effective_mask_seed() const { return mask_seed.value_or(master_seed); }
  bool is_placed(std::size_t block) const;

  bool operator==(const ModelSpec&) const = default;
};

// Block 0 is a single 3x3 conv; blocks 1-4 are residual stages of two convs
// with widths 16/16/32/64/128 and strides 1/1/2/2/2.
ModelSpec resnet_small_spec(Shape input_shape, std::size_t num_classes);
// Same widths and strides, no shortcuts.
ModelSpec convnet_plain_spec(Shape input_shape, std::size_t num_classes);

// Anything that maps a [B,C,H,W] float pixel batch (0-255 scale) to logits.
// Implementations are immutable, so one instance may serve many threads, each
// with its own Tape.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual Var logits(Tape& tape, Var pixels) const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual const Shape& input_shape() const = 0;
  virtual DType dtype() const = 0;
};

struct ConvUnit {
  std::string name;
  ConvLayerSpec spec;
  Tensor weight;  // [out, in, k, k]
  Tensor bias;    // [out]
  Tensor gamma;   // [out]
  Tensor beta;    // [out]
  BatchNormStats bn;
};

struct ModelBlock {
  std::vector<ConvUnit> convs;
  std::vector<ConvUnit> shortcuts;  // one per residual pair; empty name = identity
  bool residual = false;
};

struct ParamRef {
  std::string name;
  Tensor* tensor;
  bool weight_decay;
};

struct BufferRef {
  std::string name;
  const Tensor* tensor;
};

// Masked activations captured during forward(), in layer order.
struct ActivationTaps {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  std::vector<const DefectiveMask*> masks;
};

class Model final : public Classifier {
 public:
  Model() = default;

  const ModelSpec& spec() const { return spec_; }

  // Train mode registers parameters as gradient leaves and updates the BN
  // running statistics; eval mode treats everything as constants.
  Var forward(Tape& tape, Var pixels, Mode mode, ActivationTaps* taps = nullptr);
  Var forward_eval(Tape& tape, Var pixels, ActivationTaps* taps = nullptr) const;

  Var logits(Tape& tape, Var pixels) const override { return forward_eval(tape, pixels); }
  std::size_t num_classes() const override { return spec_.num_classes; }
  const Shape& input_shape() const override { return spec_.input_shape; }
  DType dtype() const override { return dtype_; }

  std::vector<ParamRef> parameters();
  std::vector<BufferRef> buffers() const;  // BN running stats + input mean
  std::vector<std::pair<std::string, const DefectiveMask*>> masks() const;
  std::size_t parameter_count() const;

  // Per-pixel mean subtracted by the input layer, [C,H,W] in pixel units.
  const Tensor& input_mean() const { return input_mean_; }
  void set_input_mean(const Tensor& mean);

  // Deep copy with every float tensor converted (float64 for verification).
  Model to(DType dtype) const;

  std::vector<ModelBlock>& blocks() { return blocks_; }
  const std::vector<ModelBlock>& blocks() const { return blocks_; }
  Tensor& fc_weight() { return fc_weight_; }
  Tensor& fc_bias() { return fc_bias_; }

 private:
  friend Model build_model(const ModelSpec& spec);

  Var run(Tape& tape, Var pixels, Mode mode, Model* mutable_self,
          ActivationTaps* taps) const;

  ModelSpec spec_;
  DType dtype_ = DType::kFloat32;
  std::vector<ModelBlock> blocks_;
  Tensor fc_weight_;
  Tensor fc_bias_;
  Tensor input_mean_;
  Tensor neg_mean_scaled_;
};

// Realizes `spec`: He-initialized weights (fan-in scaled Gaussian) and one
// independently seeded mask per conv inside each placed block.
Model build_model(const ModelSpec& spec);

// Arithmetic mean of member logits. Members are borrowed and must outlive it.
class Ensemble final : public Classifier {
 public:
  explicit Ensemble(std::vector<const Classifier*> members);

  Var logits(Tape& tape, Var pixels) const override;
  std::size_t num_classes() const override { return members_.front()->num_classes(); }
  const Shape& input_shape() const override { return members_.front()->input_shape(); }
  DType dtype() const override { return members_.front()->dtype(); }
  std::size_t size() const { return members_.size(); }

 private:
  std::vector<const Classifier*> members_;
};

Ensemble fuse_ensemble(std::vector<const Classifier*> members);

// uint8 or float pixels -> float tensor of `dtype` (values unchanged).
Tensor to_pixels(const Tensor& images, DType dtype);

// Eval-mode logits for a [B,C,H,W] batch, processed in chunks.
Tensor predict_logits(const Classifier& model, const Tensor& images,
                      std::size_t batch_size = 256);
std::vector<int> predict_labels(const Classifier& model, const Tensor& images,
                                std::size_t batch_size = 256);

}  // namespace defnet
