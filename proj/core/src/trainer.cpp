#include "defnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "defnet/parallel.hpp"

namespace defnet {

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw ConfigError("lr0 must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be positive");
  for (std::size_t i = 1; i < lr_drop_epochs.size(); ++i) {
    if (lr_drop_epochs[i] <= lr_drop_epochs[i - 1]) {
      throw ConfigError("lr drop epochs must be strictly increasing");
    }
  }
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  double lr = cfg.lr0;
  for (std::size_t e : cfg.lr_drop_epochs)
    if (e <= epoch) lr *= cfg.lr_drop_factor;
  return lr;
}

void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
              double weight_decay) {
  if (grad.shape() != param.shape() || velocity.shape() != param.shape() ||
      grad.dtype() != param.dtype() || velocity.dtype() != param.dtype()) {
    throw DimensionError("sgd_step: parameter " + shape_string(param.shape()) + ", grad " +
                         shape_string(grad.shape()) + ", velocity " +
                         shape_string(velocity.shape()));
  }
  dispatch_float(param.dtype(), [&]<class T>() {
    auto w = param.data<T>();
    auto g = grad.data<T>();
    auto v = velocity.data<T>();
    const T tlr = static_cast<T>(lr), mu = static_cast<T>(momentum),
            wd = static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g[i] + wd * w[i];
      v[i] = mu * v[i] + gi;
      w[i] -= tlr * v[i];
    }
  });
}

Sgd::Sgd(std::vector<ParamRef> params, double momentum, double weight_decay)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
  for (const ParamRef& p : params_) velocity_.emplace_back(p.tensor->shape(), p.tensor->dtype());
}

void Sgd::step(double lr) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& w = *params_[i].tensor;
    if (!w.has_grad()) throw TapeError("parameter " + params_[i].name + " has no gradient");
    sgd_step(w, w.grad(), velocity_[i], lr, momentum_, params_[i].weight_decay ? weight_decay_ : 0.0);
  }
}

namespace {

Tensor gather_pixels(const Dataset& ds, const std::vector<std::size_t>& order, std::size_t begin,
                     std::size_t end, DType dtype, const TrainConfig* cfg, std::size_t epoch) {
  const Shape img = ds.image_shape();
  Shape out_img = img;
  if (cfg && cfg->augment) out_img = {img[0], cfg->augmentation.crop_size, cfg->augmentation.crop_size};
  const std::size_t d = shape_numel(out_img);
  Shape shape{end - begin};
  shape.insert(shape.end(), out_img.begin(), out_img.end());
  Tensor out(shape, dtype);
  const std::size_t src_d = shape_numel(img);
  auto src = ds.images.data<std::uint8_t>();
  dispatch_float(dtype, [&]<class T>() {
    auto dst = out.data<T>();
    auto fill = [&](std::size_t k) {
      const std::size_t idx = order[begin + k];
      if (cfg && cfg->augment) {
        Tensor one = Tensor::from<std::uint8_t>(
            img, std::vector<std::uint8_t>(src.begin() + idx * src_d, src.begin() + (idx + 1) * src_d));
        Rng rng = make_rng(derive_seed(cfg->seed, {0xa5, epoch, idx}));
        Tensor aug = augment(one, cfg->augmentation, rng);
        auto a = aug.data<std::uint8_t>();
        for (std::size_t j = 0; j < d; ++j) dst[k * d + j] = static_cast<T>(a[j]);
      } else {
        for (std::size_t j = 0; j < d; ++j) dst[k * d + j] = static_cast<T>(src[idx * src_d + j]);
      }
    };
    parallel_for(end - begin, cfg ? cfg->threads : 1, fill);
  });
  return out;
}

}  // namespace

TrainResult train(Model& model, const Dataset& train, const Dataset* test, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  cfg.validate();
  train.validate();
  if (train.size() == 0) throw ConfigError("training set is empty");
  if (cfg.augment) cfg.augmentation.validate(train.image_shape());
  model.set_input_mean(train.per_pixel_mean.empty() ? per_pixel_mean(train.images)
                                                    : train.per_pixel_mean);
  Sgd opt(model.parameters(), cfg.momentum, cfg.weight_decay);
  TrainResult result;
  const std::size_t n = train.size();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    CurveRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_schedule(epoch, cfg);
    const std::vector<std::size_t> order = random_permutation(n, derive_seed(cfg.seed, {0x5e, epoch}));
    std::size_t correct = 0;
    for (std::size_t b0 = 0, batch = 0; b0 < n; b0 += cfg.batch_size, ++batch) {
      const std::size_t b1 = std::min(n, b0 + cfg.batch_size);
      Tensor pixels = gather_pixels(train, order, b0, b1, model.dtype(), &cfg, epoch);
      std::vector<int> labels;
      for (std::size_t k = b0; k < b1; ++k) labels.push_back(train.labels[order[k]]);
      Tape tape;
      Var logits = model.forward(tape, tape.constant(std::move(pixels)), Mode::kTrain);
      const std::vector<int> pred = argmax_rows(logits.value());
      for (std::size_t k = 0; k < labels.size(); ++k) correct += pred[k] == labels[k];
      Var loss = softmax_cross_entropy(logits, labels, Reduction::kMean);
      const double value = loss.value().item();
      if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "non-finite training loss " << value << " at epoch " << epoch << ", batch " << batch;
        throw NumericError(os.str());
      }
      rec.batch_losses.push_back(value);
      tape.backward(loss);
      opt.step(rec.lr);
    }
    double total = 0.0;
    for (double l : rec.batch_losses) total += l;
    rec.train_loss = total / static_cast<double>(rec.batch_losses.size());
    rec.train_accuracy = 100.0 * static_cast<double>(correct) / static_cast<double>(n);
    if (test) rec.test_accuracy = accuracy(model, *test, cfg.eval_batch);
    result.curve.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (!result.curve.empty()) {
    result.final_test_accuracy = result.curve.back().test_accuracy;
  } else if (test) {
    result.final_test_accuracy = accuracy(model, *test, cfg.eval_batch);
  }
  return result;
}

double accuracy(const Classifier& model, const Dataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw ConfigError("accuracy of an empty dataset");
  const std::vector<int> pred = predict_labels(model, ds.images, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == ds.labels[i];
  return 100.0 * static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace defnet
