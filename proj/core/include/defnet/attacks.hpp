#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "defnet/models.hpp"
#include "defnet/rng.hpp"

namespace defnet {

enum class AttackFamily { kFgsm, kPgd, kMifgsm, kCw, kBoundary, kGaussian };

const char* to_string(AttackFamily family);
AttackFamily parse_attack_family(std::string_view text);

// Decision-based attack tuning. Step sizes are relative to the current
// distance; both adapt by `adaptation` whenever the success rate over the last
// `window` proposals leaves [target_low, target_high].
struct BoundaryConfig {
  double orthogonal_step = 0.01;
  double source_step = 0.01;
  double adaptation = 1.5;
  std::size_t window = 10;
  double target_low = 0.25;
  double target_high = 0.75;
  std::size_t init_draws = 100;
  std::size_t init_bisection = 25;

  bool operator==(const BoundaryConfig&) const = default;
};

// All distances and step sizes are in 0-255 pixel units.
struct AttackSpec {
  AttackFamily family = AttackFamily::kPgd;
  double epsilon = 1.0;  // per-step size
  double alpha = 16.0;   // l_inf radius for iterative attacks
  std::size_t steps = 20;
  double mu = 1.0;
  double kappa = 0.0;
  std::size_t c_search_steps = 30;
  std::size_t inner_steps = 100;
  double cw_learning_rate = 0.01;
  double c_min = 1e-3;
  double c_max = 1e3;
  double sigma = 0.0;
  std::size_t iterations = 2000;
  std::uint64_t seed = 0;
  std::size_t batch_size = 100;
  BoundaryConfig boundary;

  void validate() const;
  // Short human-readable tag, e.g. "pgd(eps=1,alpha=16,T=20)".
  std::string describe() const;

  bool operator==(const AttackSpec&) const = default;
};

struct AdvResult {
  Tensor image;         // uint8 [K,M,N]
  bool success = false; // source model no longer predicts the true label
  double linf = 0.0;    // to the original, pixel units, on the stored image
  double l2 = 0.0;
  std::size_t queries = 0;  // boundary attack only
};

// x (float [B,...]) -> dJ/dx of the same shape and dtype.
using GradientFn = std::function<Tensor(const Tensor& x)>;

// Gradient of the summed cross-entropy with respect to the input pixels. The
// sum (not the mean) keeps each row the exact per-sample gradient.
Tensor loss_gradient(const Classifier& model, const Tensor& x, std::span<const int> labels);
GradientFn cross_entropy_gradient(const Classifier& model, std::vector<int> labels);

// Continuous-space iterates. x0 is float [B,...] in pixel units; outputs are
// clamped to [0,255]. Non-finite gradients raise NumericError.
Tensor fgsm_iterate(const Tensor& x0, const GradientFn& grad, double epsilon);
Tensor pgd_iterate(const Tensor& x0, const GradientFn& grad, double epsilon, std::size_t steps,
                   double alpha);
// g_{k+1} = mu*g_k + grad/||grad||_1 per sample; a zero gradient norm raises
// NumericError.
Tensor mifgsm_iterate(const Tensor& x0, const GradientFn& grad, double epsilon,
                      std::size_t steps, double alpha, double mu);

// g = max(max_{i != y} z_i - z_y, -kappa).
double cw_loss(std::span<const double> logits, int label, double kappa);
// Geometric ladder of `count` values from c_min to c_max.
std::vector<double> cw_c_ladder(double c_min, double c_max, std::size_t count);
// Minimizes c*max(z_y - max_{i!=y} z_i, -kappa) + ||(x'-x)/255||^2 by gradient descent on w with
// x' = 255*(tanh(w)+1)/2, one c per sample. Returns the continuous x'.
Tensor cw_optimize(const Classifier& model, const Tensor& x0, std::span<const int> labels,
                   std::span<const double> c, double kappa, std::size_t steps, double lr);

// Label-only oracle on one float [K,M,N] image.
using LabelOracle = std::function<int(const Tensor& image)>;
LabelOracle model_oracle(const Classifier& model);

struct BoundaryTrace {
  std::vector<double> accepted_l2;  // continuous distance after every accepted step
  double final_l2 = 0.0;            // continuous, before quantization
  bool initialized = false;
};

AdvResult boundary_attack(const LabelOracle& oracle, const Tensor& image, int label,
                          std::size_t iterations, std::uint64_t seed,
                          const BoundaryConfig& cfg = {}, BoundaryTrace* trace = nullptr);

// Median of ||P||^2 / N over perturbations already scaled to [0,1] pixels.
double boundary_score(std::span<const Tensor> perturbations, std::size_t pixel_count);

// Per-pixel N(0, sigma^2) clipped to [-2 sigma, 2 sigma].
std::vector<double> clipped_gaussian(std::size_t count, double sigma, Rng& rng, bool clip = true);
// x + clipped noise, clamped to [0,255]; float32 result of x's shape.
Tensor gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed);

// Quantized results for a batch. images: uint8 (or float) [n,K,M,N] in pixel
// units. Gradient attacks run in fixed mini-batches of spec.batch_size, which
// are distributed over `threads` workers; per-sample randomness derives from
// (spec.seed, sample id), so results do not depend on the thread count.
std::vector<AdvResult> run_attack(const Classifier& source, const Tensor& images,
                                  std::span<const int> labels, const AttackSpec& spec,
                                  std::size_t threads = 1,
                                  std::span<const std::size_t> sample_ids = {});

// Rounds a continuous adversarial batch and scores it against the source.
std::vector<AdvResult> finalize_batch(const Classifier& source, const Tensor& originals,
                                      const Tensor& adversarial, std::span<const int> labels);

// <dir>/adv_<id>.u8 raw images plus <dir>/manifest.csv
// (sample_id,label,success,linf,l2,queries,shape).
void write_adv_results(const std::filesystem::path& dir, std::span<const AdvResult> results,
                       std::span<const int> labels, std::span<const std::size_t> sample_ids);
struct AdvBatch {
  std::vector<std::size_t> sample_ids;
  std::vector<int> labels;
  std::vector<AdvResult> results;
  Tensor images() const;  // uint8 [n,K,M,N]
};
AdvBatch read_adv_results(const std::filesystem::path& dir);

}  // namespace defnet
