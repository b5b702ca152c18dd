#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "defnet/attacks.hpp"
#include "defnet/gemm.hpp"
#include "defnet/trainer.hpp"

using namespace defnet;

namespace {

template <class T>
Tensor random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor t(std::move(shape), std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64);
  for (T& v : t.data<T>()) v = static_cast<T>(dist(gen));
  return t;
}

Tensor random_pixels(Shape shape, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  Tensor t(std::move(shape), DType::kUInt8);
  for (auto& v : t.data<std::uint8_t>()) v = static_cast<std::uint8_t>(gen() % 256);
  return t;
}

template <class T>
void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  std::vector<T> a(n * n, T(0.5)), b(n * n, T(0.25)), c(n * n);
  for (auto _ : state) {
    gemm(Trans::kNo, Trans::kNo, n, n, n, T(1), a.data(), n, b.data(), n, T(0), c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 2 * n * n * n));
}
BENCHMARK(BM_Gemm<float>)->Arg(64)->Arg(256);
BENCHMARK(BM_Gemm<double>)->Arg(64)->Arg(256);

// 3x3 conv at the widths used by resnet_small on 28x28 inputs.
template <class T>
void BM_Conv3x3(benchmark::State& state) {
  const auto ch = static_cast<std::size_t>(state.range(0));
  const auto side = static_cast<std::size_t>(state.range(1));
  const Tensor x = random_tensor<T>({32, ch, side, side}, 1);
  const Tensor w = random_tensor<T>({ch, ch, 3, 3}, 2);
  const Tensor b = random_tensor<T>({ch}, 3);
  for (auto _ : state) {
    Tape tape(false);
    Var y = conv2d(tape.constant_ref(x), tape.constant_ref(w), tape.constant_ref(b), 1, 1);
    benchmark::DoNotOptimize(y.value().numel());
  }
}
BENCHMARK(BM_Conv3x3<float>)->Args({16, 28})->Args({32, 14})->Args({64, 7});
BENCHMARK(BM_Conv3x3<double>)->Args({16, 28});

void BM_ConvBackward(benchmark::State& state) {
  Tensor x = random_tensor<float>({32, 16, 28, 28}, 1);
  Tensor w = random_tensor<float>({16, 16, 3, 3}, 2);
  Tensor b = random_tensor<float>({16}, 3);
  for (auto _ : state) {
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), 1, 1)));
    benchmark::DoNotOptimize(w.grad().numel());
  }
}
BENCHMARK(BM_ConvBackward);

Dataset mnist_like(std::size_t n) {
  Dataset ds;
  ds.images = random_pixels({n, 1, 28, 28}, 4);
  ds.num_classes = 10;
  for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(static_cast<int>(i % 10));
  ds.per_pixel_mean = per_pixel_mean(ds.images);
  return ds;
}

// One epoch over 128 images = one SGD step at the default batch size.
void BM_TrainStep(benchmark::State& state) {
  ModelSpec spec = resnet_small_spec({1, 28, 28}, 10);
  if (state.range(0)) {
    spec.mask_blocks = {0, 1, 2};
    spec.keep_prob = 0.3;
  }
  const Dataset ds = mnist_like(128);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.augment = false;
  cfg.lr_drop_epochs = {};
  Model model = build_model(spec);
  for (auto _ : state) train(model, ds, nullptr, cfg);
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 128));
}
BENCHMARK(BM_TrainStep)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

void BM_PgdBatch(benchmark::State& state) {
  Model model = build_model(resnet_small_spec({1, 28, 28}, 10));
  const Dataset ds = mnist_like(100);
  model.set_input_mean(ds.per_pixel_mean.to(DType::kFloat32));
  AttackSpec spec;
  spec.steps = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(run_attack(model, ds.images, ds.labels, spec).size());
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * 100));
}
BENCHMARK(BM_PgdBatch)->Arg(1)->Arg(20)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
