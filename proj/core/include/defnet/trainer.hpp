#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "defnet/data.hpp"
#include "defnet/models.hpp"

namespace defnet {

struct TrainConfig {
  double lr0 = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  std::vector<std::size_t> lr_drop_epochs{5, 8};
  double lr_drop_factor = 0.1;
  std::uint64_t seed = 0;
  bool augment = true;
  AugmentConfig augmentation{0, 28, true, 0};
  std::size_t eval_batch = 500;
  std::size_t threads = 1;  // augmentation workers

  void validate() const;
};

// lr0 * factor^(number of drop epochs <= epoch).
double lr_schedule(std::size_t epoch, const TrainConfig& cfg);

// One parameter update:
//   g' = g + wd*w;  v = momentum*v + g';  w = w - lr*v
void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr, double momentum,
              double weight_decay);

// Momentum SGD over a model's parameters. Velocities start at zero; BN gamma
// and beta skip weight decay. Masks and running statistics are not parameters
// and are never touched.
class Sgd {
 public:
  Sgd(std::vector<ParamRef> params, double momentum, double weight_decay);
  // Uses each parameter's grad slot, as filled by Tape::backward.
  void step(double lr);
  const std::vector<Tensor>& velocity() const { return velocity_; }

 private:
  std::vector<ParamRef> params_;
  std::vector<Tensor> velocity_;
  double momentum_;
  double weight_decay_;
};

struct CurveRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;      // mean over the epoch's batches
  double train_accuracy = 0.0;  // percent, on augmented training batches
  double test_accuracy = -1.0;  // percent; -1 without a test set
  std::vector<double> batch_losses;
};

struct TrainResult {
  std::vector<CurveRecord> curve;
  double final_test_accuracy = -1.0;
};

using EpochCallback = std::function<void(const CurveRecord&)>;

// Mini-batch SGD on `train` (shuffled per epoch from cfg.seed). The model's
// input mean is set from train.per_pixel_mean first. A non-finite loss raises
// NumericError naming the epoch and batch.
TrainResult train(Model& model, const Dataset& train, const Dataset* test, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

// Percent of samples whose argmax prediction matches the label.
double accuracy(const Classifier& model, const Dataset& ds, std::size_t batch_size = 500);

}  // namespace defnet
