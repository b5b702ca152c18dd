#include "defnet/models.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <set>
#include <sstream>

#include "defnet/rng.hpp"

namespace defnet {

const char* to_string(Architecture arch) {
  return arch == Architecture::kResnetSmall ? "resnet_small" : "convnet_plain";
}

Architecture parse_architecture(std::string_view text) {
  if (text == "resnet_small") return Architecture::kResnetSmall;
  if (text == "convnet_plain") return Architecture::kConvnetPlain;
  throw ConfigError("unknown architecture '" + std::string(text) + "'");
}

std::vector<std::size_t> placement_blocks(Placement placement, std::size_t num_blocks) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < num_blocks; ++i) {
    const bool bottom = i < 3;
    if ((placement == Placement::kBottom && bottom) || (placement == Placement::kTop && !bottom) ||
        placement == Placement::kBoth) {
      out.push_back(i);
    }
  }
  return out;
}

std::vector<std::size_t> parse_placement(std::string_view text, std::size_t num_blocks) {
  if (text == "none" || text.empty()) return {};
  if (text == "bottom") return placement_blocks(Placement::kBottom, num_blocks);
  if (text == "top") return placement_blocks(Placement::kTop, num_blocks);
  if (text == "both") return placement_blocks(Placement::kBoth, num_blocks);
  std::set<std::size_t> blocks;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t comma = std::min(text.find(',', pos), text.size());
    std::string_view item = text.substr(pos, comma - pos);
    while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
    while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
    std::size_t value = 0;
    auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
      throw ConfigError("bad mask placement '" + std::string(text) + "'");
    }
    if (value >= num_blocks) {
      throw ConfigError("mask placement block " + std::to_string(value) + " out of range");
    }
    blocks.insert(value);
    pos = comma + 1;
  }
  return {blocks.begin(), blocks.end()};
}

std::string placement_string(const std::vector<std::size_t>& blocks) {
  if (blocks.empty()) return "none";
  std::ostringstream os;
  for (std::size_t i = 0; i < blocks.size(); ++i) os << (i ? "," : "") << blocks[i];
  return os.str();
}

bool ModelSpec::is_placed(std::size_t block) const {
  return std::find(mask_blocks.begin(), mask_blocks.end(), block) != mask_blocks.end();
}

void ModelSpec::validate() const {
  if (blocks.empty()) throw ConfigError("model spec has no blocks");
  if (input_shape.size() != 3 || shape_numel(input_shape) == 0) {
    throw ConfigError("model input_shape must be a positive [C,H,W]");
  }
  if (num_classes < 2) throw ConfigError("model needs at least two classes");
  if (widen_factor < 1) throw ConfigError("widen_factor must be >= 1");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const BlockSpec& b = blocks[i];
    if (b.channels == 0 || b.stride == 0 || b.layers == 0) {
      throw ConfigError("block " + std::to_string(i) + " has a zero channel/stride/layer count");
    }
    if (architecture == Architecture::kResnetSmall && i > 0 && b.layers % 2 != 0) {
      throw ConfigError("residual block " + std::to_string(i) + " needs an even layer count");
    }
  }
  for (std::size_t k = 0; k < mask_blocks.size(); ++k) {
    if (mask_blocks[k] >= blocks.size()) {
      throw ConfigError("mask placement block " + std::to_string(mask_blocks[k]) +
                        " out of range");
    }
    if (k > 0 && mask_blocks[k] <= mask_blocks[k - 1]) {
      throw ConfigError("mask placement must be sorted and unique");
    }
  }
  if (!(keep_prob > 0.0 && keep_prob <= 1.0)) {
    throw ConfigError("keep_prob must lie in (0,1]");
  }
}

namespace {

std::vector<BlockSpec> default_blocks() {
  return {{16, 1, 1}, {16, 1, 2}, {32, 2, 2}, {64, 2, 2}, {128, 2, 2}};
}

}  // namespace

ModelSpec resnet_small_spec(Shape input_shape, std::size_t num_classes) {
  ModelSpec s;
  s.architecture = Architecture::kResnetSmall;
  s.blocks = default_blocks();
  s.input_shape = std::move(input_shape);
  s.num_classes = num_classes;
  return s;
}

ModelSpec convnet_plain_spec(Shape input_shape, std::size_t num_classes) {
  ModelSpec s = resnet_small_spec(std::move(input_shape), num_classes);
  s.architecture = Architecture::kConvnetPlain;
  s.blocks = {{16, 1, 1}, {16, 1, 1}, {32, 2, 1}, {64, 2, 1}, {128, 2, 1}};
  return s;
}

namespace {

struct Geometry {
  std::size_t kernel, padding, out;
};

// 3x3/pad 1 convolutions throughout. A stride-2 conv over an even extent uses
// a 4x4 kernel (2x2 for the projection shortcut) so the output size stays
// integral: both variants map an extent e to ceil(e/2).
Geometry conv_geometry(std::size_t extent, std::size_t stride, bool shortcut) {
  Geometry g{};
  if (stride == 1) {
    g = shortcut ? Geometry{1, 0, extent} : Geometry{3, 1, extent};
  } else if (stride == 2) {
    const bool even = extent % 2 == 0;
    if (shortcut) {
      g = even ? Geometry{2, 0, 0} : Geometry{1, 0, 0};
    } else {
      g = even ? Geometry{4, 1, 0} : Geometry{3, 1, 0};
    }
  } else {
    g = shortcut ? Geometry{1, 0, 0} : Geometry{3, 1, 0};
  }
  const std::size_t padded = extent + 2 * g.padding;
  if (padded < g.kernel || (padded - g.kernel) % stride != 0) {
    throw ConfigError("stride " + std::to_string(stride) + " does not divide feature map extent " +
                      std::to_string(extent));
  }
  g.out = (padded - g.kernel) / stride + 1;
  return g;
}

void init_unit(ConvUnit& u, std::uint64_t seed) {
  const ConvLayerSpec& s = u.spec;
  u.weight = Tensor({s.out_channels, s.in_channels, s.kernel, s.kernel});
  Rng rng = make_rng(seed);
  const double stddev = std::sqrt(2.0 / static_cast<double>(s.in_channels * s.kernel * s.kernel));
  for (float& w : u.weight.data<float>()) w = static_cast<float>(stddev * standard_normal(rng));
  u.bias = Tensor({s.out_channels});
  u.gamma = Tensor::full<float>({s.out_channels}, 1.0f);
  u.beta = Tensor({s.out_channels});
  u.bn.running_mean = Tensor({s.out_channels});
  u.bn.running_var = Tensor::full<float>({s.out_channels}, 1.0f);
  for (Tensor* t : {&u.weight, &u.bias, &u.gamma, &u.beta}) t->set_requires_grad(true);
}

class UnitFactory {
 public:
  explicit UnitFactory(const ModelSpec& spec) : spec_(spec) {}

  ConvUnit make(std::string name, std::size_t in_ch, std::size_t out_ch, std::size_t extent_h,
                std::size_t extent_w, std::size_t stride, bool shortcut, bool masked) {
    const Geometry gh = conv_geometry(extent_h, stride, shortcut);
    const Geometry gw = conv_geometry(extent_w, stride, shortcut);
    if (gh.kernel != gw.kernel) {
      throw ConfigError("input height/width parity differs; square kernels cannot fit both");
    }
    const std::size_t index = next_index_++;
    ConvUnit u;
    u.name = std::move(name);
    u.spec.in_channels = in_ch;
    u.spec.out_channels = out_ch;
    u.spec.kernel = gh.kernel;
    u.spec.stride = stride;
    u.spec.padding = gh.padding;
    u.spec.out_height = gh.out;
    u.spec.out_width = gw.out;
    if (masked) {
      u.spec.mask = sample_defect_mask({out_ch, gh.out, gw.out}, spec_.keep_prob,
                                       derive_seed(spec_.effective_mask_seed(), {2, index}),
                                       spec_.mask_variant);
      u.spec = widen_spec(u.spec, spec_.widen_factor);
    }
    init_unit(u, derive_seed(spec_.master_seed, {1, index}));
    return u;
  }

 private:
  const ModelSpec& spec_;
  std::size_t next_index_ = 0;
};

}  // namespace

Model build_model(const ModelSpec& spec) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  UnitFactory factory(spec);
  std::size_t ch = spec.input_shape[0];
  std::size_t h = spec.input_shape[1];
  std::size_t w = spec.input_shape[2];
  for (std::size_t bi = 0; bi < spec.blocks.size(); ++bi) {
    const BlockSpec& bs = spec.blocks[bi];
    const bool placed = spec.is_placed(bi);
    ModelBlock mb;
    mb.residual = spec.architecture == Architecture::kResnetSmall && bi > 0;
    const std::string prefix = "block" + std::to_string(bi) + ".";
    if (!mb.residual) {
      for (std::size_t l = 0; l < bs.layers; ++l) {
        ConvUnit u = factory.make(prefix + "conv" + std::to_string(l), ch, bs.channels, h, w,
                                  l == 0 ? bs.stride : 1, false, placed);
        ch = u.spec.out_channels;
        h = u.spec.out_height;
        w = u.spec.out_width;
        mb.convs.push_back(std::move(u));
      }
    } else {
      for (std::size_t pair = 0; pair < bs.layers / 2; ++pair) {
        const std::size_t stride = pair == 0 ? bs.stride : 1;
        ConvUnit a = factory.make(prefix + "conv" + std::to_string(2 * pair), ch, bs.channels, h,
                                  w, stride, false, placed);
        ConvUnit b = factory.make(prefix + "conv" + std::to_string(2 * pair + 1),
                                  a.spec.out_channels, bs.channels, a.spec.out_height,
                                  a.spec.out_width, 1, false, placed);
        const std::size_t out_ch = b.spec.out_channels;
        ConvUnit sc;
        if (stride != 1 || ch != out_ch) {
          sc = factory.make(prefix + "shortcut" + std::to_string(pair), ch, out_ch, h, w, stride,
                            true, false);
        }
        h = b.spec.out_height;
        w = b.spec.out_width;
        ch = out_ch;
        mb.convs.push_back(std::move(a));
        mb.convs.push_back(std::move(b));
        mb.shortcuts.push_back(std::move(sc));
      }
    }
    m.blocks_.push_back(std::move(mb));
  }
  m.fc_weight_ = Tensor({spec.num_classes, ch});
  Rng rng = make_rng(derive_seed(spec.master_seed, {3}));
  const double stddev = std::sqrt(2.0 / static_cast<double>(ch));
  for (float& v : m.fc_weight_.data<float>()) v = static_cast<float>(stddev * standard_normal(rng));
  m.fc_bias_ = Tensor({spec.num_classes});
  m.fc_weight_.set_requires_grad(true);
  m.fc_bias_.set_requires_grad(true);
  m.set_input_mean(Tensor(spec.input_shape));
  return m;
}

void Model::set_input_mean(const Tensor& mean) {
  if (mean.shape() != spec_.input_shape) {
    throw DimensionError("input mean shape " + shape_string(mean.shape()) +
                         " does not match model input " + shape_string(spec_.input_shape));
  }
  input_mean_ = mean.to(dtype_);
  neg_mean_scaled_ = dispatch_float(dtype_, [&]<class T>() {
    Tensor t(spec_.input_shape, dtype_);
    auto src = input_mean_.data<T>();
    auto dst = t.data<T>();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = -src[i];
    return t;
  });
}

Var Model::forward(Tape& tape, Var pixels, Mode mode, ActivationTaps* taps) {
  return run(tape, pixels, mode, mode == Mode::kTrain ? this : nullptr, taps);
}

Var Model::forward_eval(Tape& tape, Var pixels, ActivationTaps* taps) const {
  return run(tape, pixels, Mode::kEval, nullptr, taps);
}

Var Model::run(Tape& tape, Var pixels, Mode mode, Model* self, ActivationTaps* taps) const {
  const Shape& s = pixels.shape();
  if (s.size() != 4 || Shape(s.begin() + 1, s.end()) != spec_.input_shape) {
    throw DimensionError("model expects [B," + shape_string(spec_.input_shape).substr(1) +
                         " input, got " + shape_string(s));
  }
  if (pixels.dtype() != dtype_) {
    throw DimensionError(std::string("model dtype is ") + to_string(dtype_) + ", input is " +
                         to_string(pixels.dtype()));
  }
  const bool train = mode == Mode::kTrain;
  if (train && !self) throw ConfigError("train-mode forward needs a mutable model");

  auto bind = [&](const Tensor& t, Tensor* mutable_t) {
    return train ? tape.leaf(*mutable_t) : tape.constant_ref(t);
  };
  auto conv_bn = [&](Var x, const ConvUnit& u, ConvUnit* mu) {
    Var y = conv2d(x, bind(u.weight, mu ? &mu->weight : nullptr),
                   bind(u.bias, mu ? &mu->bias : nullptr), u.spec.stride, u.spec.padding);
    Var g = bind(u.gamma, mu ? &mu->gamma : nullptr);
    Var b = bind(u.beta, mu ? &mu->beta : nullptr);
    return train ? batch_norm_train(y, g, b, mu->bn) : batch_norm_eval(y, g, b, u.bn);
  };
  auto masked = [&](Var y, const ConvUnit& u) {
    if (!u.spec.mask) return y;
    Var z = apply_mask(y, *u.spec.mask);
    if (taps) {
      taps->names.push_back(u.name);
      taps->values.push_back(z.value());
      taps->masks.push_back(&*u.spec.mask);
    }
    return z;
  };

  Var h = scale(add_broadcast(pixels, tape.constant_ref(neg_mean_scaled_)), 1.0 / 255.0);
  for (std::size_t bi = 0; bi < blocks_.size(); ++bi) {
    const ModelBlock& blk = blocks_[bi];
    ModelBlock* mblk = self ? &self->blocks_[bi] : nullptr;
    auto unit = [&](const std::vector<ConvUnit>& v, std::vector<ConvUnit>* mv, std::size_t i) {
      return std::pair<const ConvUnit&, ConvUnit*>(v[i], mv ? &(*mv)[i] : nullptr);
    };
    if (!blk.residual) {
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        auto [u, mu] = unit(blk.convs, mblk ? &mblk->convs : nullptr, i);
        h = masked(relu(conv_bn(h, u, mu)), u);
      }
      continue;
    }
    for (std::size_t pair = 0; pair < blk.shortcuts.size(); ++pair) {
      auto [a, ma] = unit(blk.convs, mblk ? &mblk->convs : nullptr, 2 * pair);
      auto [b, mb] = unit(blk.convs, mblk ? &mblk->convs : nullptr, 2 * pair + 1);
      Var y = masked(relu(conv_bn(h, a, ma)), a);
      y = masked(conv_bn(y, b, mb), b);
      auto [sc, msc] = unit(blk.shortcuts, mblk ? &mblk->shortcuts : nullptr, pair);
      Var shortcut = sc.name.empty() ? h : conv_bn(h, sc, msc);
      h = relu(add(y, shortcut));
    }
  }
  Var pooled = global_avg_pool(h);
  return linear(pooled, bind(fc_weight_, self ? &self->fc_weight_ : nullptr),
                bind(fc_bias_, self ? &self->fc_bias_ : nullptr));
}

std::vector<ParamRef> Model::parameters() {
  std::vector<ParamRef> out;
  auto add_unit = [&](ConvUnit& u) {
    if (u.name.empty()) return;
    out.push_back({u.name + ".weight", &u.weight, true});
    out.push_back({u.name + ".bias", &u.bias, true});
    out.push_back({u.name + ".bn.gamma", &u.gamma, false});
    out.push_back({u.name + ".bn.beta", &u.beta, false});
  };
  for (ModelBlock& b : blocks_) {
    for (ConvUnit& u : b.convs) add_unit(u);
    for (ConvUnit& u : b.shortcuts) add_unit(u);
  }
  out.push_back({"fc.weight", &fc_weight_, true});
  out.push_back({"fc.bias", &fc_bias_, true});
  return out;
}

std::vector<BufferRef> Model::buffers() const {
  std::vector<BufferRef> out;
  auto add_unit = [&](const ConvUnit& u) {
    if (u.name.empty()) return;
    out.push_back({u.name + ".bn.running_mean", &u.bn.running_mean});
    out.push_back({u.name + ".bn.running_var", &u.bn.running_var});
  };
  for (const ModelBlock& b : blocks_) {
    for (const ConvUnit& u : b.convs) add_unit(u);
    for (const ConvUnit& u : b.shortcuts) add_unit(u);
  }
  out.push_back({"input.mean", &input_mean_});
  return out;
}

std::vector<std::pair<std::string, const DefectiveMask*>> Model::masks() const {
  std::vector<std::pair<std::string, const DefectiveMask*>> out;
  for (const ModelBlock& b : blocks_)
    for (const ConvUnit& u : b.convs)
      if (u.spec.mask) out.emplace_back(u.name + ".mask", &*u.spec.mask);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const ParamRef& p : const_cast<Model*>(this)->parameters()) n += p.tensor->numel();
  return n;
}

Model Model::to(DType dtype) const {
  if (dtype == DType::kUInt8) throw DimensionError("model dtype must be floating point");
  Model m = *this;
  m.dtype_ = dtype;
  auto convert = [&](Tensor& t, bool param) {
    t = t.to(dtype);
    if (param) t.set_requires_grad(true);
  };
  for (ModelBlock& b : m.blocks_) {
    for (auto* units : {&b.convs, &b.shortcuts}) {
      for (ConvUnit& u : *units) {
        if (u.name.empty()) continue;
        convert(u.weight, true);
        convert(u.bias, true);
        convert(u.gamma, true);
        convert(u.beta, true);
        convert(u.bn.running_mean, false);
        convert(u.bn.running_var, false);
      }
    }
  }
  convert(m.fc_weight_, true);
  convert(m.fc_bias_, true);
  m.set_input_mean(input_mean_);
  return m;
}

Ensemble::Ensemble(std::vector<const Classifier*> members) : members_(std::move(members)) {
  if (members_.empty()) throw ConfigError("ensemble needs at least one member");
  for (const Classifier* c : members_) {
    if (!c) throw ConfigError("ensemble member is null");
    if (c->num_classes() != members_.front()->num_classes()) {
      throw ConfigError("ensemble members disagree on the number of classes");
    }
    if (c->input_shape() != members_.front()->input_shape()) {
      throw ConfigError("ensemble members disagree on the input shape");
    }
    if (c->dtype() != members_.front()->dtype()) {
      throw ConfigError("ensemble members disagree on dtype");
    }
  }
}

Var Ensemble::logits(Tape& tape, Var pixels) const {
  Var acc = members_.front()->logits(tape, pixels);
  for (std::size_t i = 1; i < members_.size(); ++i) acc = add(acc, members_[i]->logits(tape, pixels));
  if (members_.size() == 1) return acc;
  return scale(acc, 1.0 / static_cast<double>(members_.size()));
}

Ensemble fuse_ensemble(std::vector<const Classifier*> members) {
  return Ensemble(std::move(members));
}

Tensor to_pixels(const Tensor& images, DType dtype) {
  if (dtype == DType::kUInt8) throw DimensionError("pixel tensors fed to models are float");
  return images.to(dtype);
}

Tensor predict_logits(const Classifier& model, const Tensor& images, std::size_t batch_size) {
  if (images.rank() != 4) throw DimensionError("predict: expected [B,C,H,W] images");
  const std::size_t n = images.dim(0);
  Tensor out({n, model.num_classes()}, model.dtype());
  const std::size_t c = model.num_classes();
  for (std::size_t b0 = 0; b0 < n; b0 += batch_size) {
    const std::size_t b1 = std::min(n, b0 + batch_size);
    Tape tape(false);
    Var x = tape.constant(to_pixels(images.rows(b0, b1), model.dtype()));
    const Tensor& l = model.logits(tape, x).value();
    dispatch_float(model.dtype(), [&]<class T>() {
      auto src = l.data<T>();
      std::copy(src.begin(), src.end(), out.data<T>().begin() + b0 * c);
    });
  }
  return out;
}

std::vector<int> predict_labels(const Classifier& model, const Tensor& images,
                                std::size_t batch_size) {
  return argmax_rows(predict_logits(model, images, batch_size));
}

}  // namespace defnet
