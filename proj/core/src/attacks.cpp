#include "defnet/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "defnet/parallel.hpp"

namespace defnet {

const char* to_string(AttackFamily family) {
  switch (family) {
    case AttackFamily::kFgsm: return "fgsm";
    case AttackFamily::kPgd: return "pgd";
    case AttackFamily::kMifgsm: return "mifgsm";
    case AttackFamily::kCw: return "cw";
    case AttackFamily::kBoundary: return "boundary";
    case AttackFamily::kGaussian: return "gaussian";
  }
  return "?";
}

AttackFamily parse_attack_family(std::string_view text) {
  for (AttackFamily f : {AttackFamily::kFgsm, AttackFamily::kPgd, AttackFamily::kMifgsm,
                         AttackFamily::kCw, AttackFamily::kBoundary, AttackFamily::kGaussian}) {
    if (text == to_string(f)) return f;
  }
  throw ConfigError("unknown attack family '" + std::string(text) + "'");
}

void AttackSpec::validate() const {
  if (!(epsilon >= 0.0) || !(alpha >= 0.0) || !(sigma >= 0.0)) {
    throw ConfigError("attack epsilon, alpha and sigma must be non-negative");
  }
  if (!(mu >= 0.0)) throw ConfigError("attack mu must be non-negative");
  if (!(kappa >= 0.0)) throw ConfigError("attack kappa must be non-negative");
  if (batch_size == 0) throw ConfigError("attack batch_size must be positive");
  switch (family) {
    case AttackFamily::kPgd:
    case AttackFamily::kMifgsm:
      if (steps == 0) throw ConfigError("iterative attacks need steps >= 1");
      break;
    case AttackFamily::kCw:
      if (c_search_steps == 0 || inner_steps == 0) {
        throw ConfigError("cw needs c_search_steps and inner_steps >= 1");
      }
      if (!(c_min > 0.0 && c_max >= c_min)) throw ConfigError("cw needs 0 < c_min <= c_max");
      if (!(cw_learning_rate > 0.0)) throw ConfigError("cw learning rate must be positive");
      break;
    case AttackFamily::kBoundary:
      if (iterations == 0) throw ConfigError("boundary attack needs iterations >= 1");
      if (!(boundary.adaptation > 1.0) || boundary.window == 0 ||
          !(boundary.orthogonal_step > 0.0) || !(boundary.source_step > 0.0 &&
                                                 boundary.source_step < 1.0)) {
        throw ConfigError("invalid boundary attack step configuration");
      }
      break;
    default:
      break;
  }
}

std::string AttackSpec::describe() const {
  std::ostringstream os;
  os << to_string(family) << "(";
  switch (family) {
    case AttackFamily::kFgsm: os << "eps=" << epsilon; break;
    case AttackFamily::kPgd: os << "eps=" << epsilon << ",alpha=" << alpha << ",T=" << steps; break;
    case AttackFamily::kMifgsm:
      os << "eps=" << epsilon << ",alpha=" << alpha << ",T=" << steps << ",mu=" << mu;
      break;
    case AttackFamily::kCw:
      os << "kappa=" << kappa << ",c_steps=" << c_search_steps << ",inner=" << inner_steps;
      break;
    case AttackFamily::kBoundary: os << "iters=" << iterations; break;
    case AttackFamily::kGaussian: os << "sigma=" << sigma; break;
  }
  os << ")";
  return os.str();
}

Tensor loss_gradient(const Classifier& model, const Tensor& x, std::span<const int> labels) {
  Tensor xv = x.to(model.dtype());
  xv.set_requires_grad(true);
  Tape tape;
  Var logits = model.logits(tape, tape.leaf(xv));
  tape.backward(softmax_cross_entropy(logits, labels, Reduction::kSum));
  Tensor g = xv.grad();
  dispatch_float(g.dtype(), [&]<class T>() {
    for (T v : g.data<T>())
      if (!std::isfinite(v)) throw NumericError("non-finite input gradient");
  });
  return g;
}

GradientFn cross_entropy_gradient(const Classifier& model, std::vector<int> labels) {
  return [&model, labels = std::move(labels)](const Tensor& x) {
    return loss_gradient(model, x, labels);
  };
}

namespace {

template <class T>
T sign_of(T v) {
  return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

Tensor checked_grad(const GradientFn& grad, const Tensor& x) {
  Tensor g = grad(x);
  if (g.shape() != x.shape() || g.dtype() != x.dtype()) {
    throw DimensionError("gradient shape/dtype does not match the input");
  }
  dispatch_float(g.dtype(), [&]<class T>() {
    for (T v : g.data<T>())
      if (!std::isfinite(v)) throw NumericError("non-finite input gradient");
  });
  return g;
}

// Shared by fgsm/pgd/mifgsm. `project` enables the l_inf ball around x0.
Tensor sign_iterate(const Tensor& x0, const GradientFn& grad, double epsilon, std::size_t steps,
                    double alpha, bool project, bool momentum, double mu) {
  if (x0.rank() < 1 || !x0.is_float()) throw DimensionError("attack input must be float [B,...]");
  Tensor x = x0;
  Tensor velocity(x0.shape(), x0.dtype());
  const std::size_t batch = x0.dim(0);
  const std::size_t per = batch ? x0.numel() / batch : 0;
  for (std::size_t step = 0; step < steps; ++step) {
    const Tensor g = checked_grad(grad, x);
    dispatch_float(x.dtype(), [&]<class T>() {
      auto xs = x.data<T>();
      auto os = x0.data<T>();
      auto gs = g.data<T>();
      auto vs = velocity.data<T>();
      const T eps = static_cast<T>(epsilon), a = static_cast<T>(alpha);
      for (std::size_t b = 0; b < batch; ++b) {
        T* dir = vs.data() + b * per;
        if (momentum) {
          double l1 = 0.0;
          for (std::size_t i = 0; i < per; ++i) l1 += std::abs(static_cast<double>(gs[b * per + i]));
          if (l1 == 0.0) {
            throw NumericError("mifgsm: zero gradient l1 norm for sample " + std::to_string(b));
          }
          for (std::size_t i = 0; i < per; ++i) {
            dir[i] = static_cast<T>(mu * static_cast<double>(dir[i]) +
                                    static_cast<double>(gs[b * per + i]) / l1);
          }
        }
        for (std::size_t i = 0; i < per; ++i) {
          const std::size_t k = b * per + i;
          T v = xs[k] + eps * sign_of(momentum ? dir[i] : gs[k]);
          if (project) v = std::clamp(v, os[k] - a, os[k] + a);
          xs[k] = std::clamp(v, T(0), T(255));
        }
      }
    });
  }
  return x;
}

}  // namespace

Tensor fgsm_iterate(const Tensor& x0, const GradientFn& grad, double epsilon) {
  return sign_iterate(x0, grad, epsilon, 1, 0.0, false, false, 0.0);
}

Tensor pgd_iterate(const Tensor& x0, const GradientFn& grad, double epsilon, std::size_t steps,
                   double alpha) {
  return sign_iterate(x0, grad, epsilon, steps, alpha, true, false, 0.0);
}

Tensor mifgsm_iterate(const Tensor& x0, const GradientFn& grad, double epsilon,
                      std::size_t steps, double alpha, double mu) {
  return sign_iterate(x0, grad, epsilon, steps, alpha, true, true, mu);
}

double cw_loss(std::span<const double> logits, int label, double kappa) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size() || logits.size() < 2) {
    throw DimensionError("cw_loss: label out of range");
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (static_cast<int>(i) != label) best = std::max(best, logits[i]);
  return std::max(best - logits[static_cast<std::size_t>(label)], -kappa);
}

std::vector<double> cw_c_ladder(double c_min, double c_max, std::size_t count) {
  std::vector<double> out(count);
  if (count == 1) {
    out[0] = c_min;
    return out;
  }
  const double ratio = std::log(c_max / c_min) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) out[i] = c_min * std::exp(ratio * static_cast<double>(i));
  out.back() = c_max;
  return out;
}

namespace {

// max_{i != y} z_i - z_y and its arg, for every row of a [B,C] tensor.
struct Margin {
  double value;
  std::size_t other;
};

std::vector<Margin> margins(const Tensor& logits, std::span<const int> labels) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<Margin> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto y = static_cast<std::size_t>(labels[r]);
    double best = -std::numeric_limits<double>::infinity();
    std::size_t arg = y == 0 ? 1 : 0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (c == y) continue;
      const double v = logits.item(r * cols + c);
      if (v > best) {
        best = v;
        arg = c;
      }
    }
    out[r] = {best - logits.item(r * cols + y), arg};
  }
  return out;
}

}  // namespace

Tensor cw_optimize(const Classifier& model, const Tensor& x0, std::span<const int> labels,
                   std::span<const double> c, double kappa, std::size_t steps, double lr) {
  const std::size_t batch = x0.dim(0);
  if (labels.size() != batch || c.size() != batch) throw DimensionError("cw: batch mismatch");
  const std::size_t classes = model.num_classes();
  std::vector<double> orig(x0.numel()), w(x0.numel());
  for (std::size_t i = 0; i < orig.size(); ++i) {
    orig[i] = x0.item(i);
    const double u = std::clamp(orig[i] / 127.5 - 1.0, -1.0 + 1e-6, 1.0 - 1e-6);
    w[i] = std::atanh(u);
  }
  Tensor xp(x0.shape(), model.dtype());
  auto refresh = [&] {
    dispatch_float(xp.dtype(), [&]<class T>() {
      auto d = xp.data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(127.5 * (std::tanh(w[i]) + 1.0));
    });
  };
  refresh();
  for (std::size_t step = 0; step < steps; ++step) {
    Tensor leaf = xp;
    leaf.set_requires_grad(true);
    Tape tape;
    Var logits = model.logits(tape, tape.leaf(leaf));
    const std::vector<Margin> m = margins(logits.value(), labels);
    Tensor coeff(logits.shape(), logits.dtype());
    dispatch_float(coeff.dtype(), [&]<class T>() {
      auto cs = coeff.data<T>();
      for (std::size_t b = 0; b < batch; ++b) {
        // descends on max(z_y - max_{i!=y} z_i, -kappa)
        if (m[b].value < kappa) {
          cs[b * classes + m[b].other] = static_cast<T>(-c[b]);
          cs[b * classes + static_cast<std::size_t>(labels[b])] = static_cast<T>(c[b]);
        }
      }
    });
    tape.backward(dot_const(logits, coeff));
    const Tensor& gx = leaf.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double xi = xp.item(i);
      const double g = gx.item(i) + 2.0 * (xi - orig[i]) / (255.0 * 255.0);
      if (!std::isfinite(g)) throw NumericError("cw: non-finite gradient");
      const double t = std::tanh(w[i]);
      w[i] -= lr * g * 127.5 * (1.0 - t * t);
    }
    refresh();
  }
  return xp;
}

std::vector<double> clipped_gaussian(std::size_t count, double sigma, Rng& rng, bool clip) {
  std::vector<double> out(count);
  for (double& z : out) {
    z = sigma * standard_normal(rng);
    if (clip) z = std::clamp(z, -2.0 * sigma, 2.0 * sigma);
  }
  return out;
}

Tensor gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("gaussian_noise: sigma must be non-negative");
  Rng rng = make_rng(seed);
  const std::vector<double> noise = clipped_gaussian(x.numel(), sigma, rng);
  Tensor out(x.shape(), DType::kFloat32);
  auto o = out.data<float>();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] = static_cast<float>(std::clamp(x.item(i) + noise[i], 0.0, 255.0));
  }
  return out;
}

std::vector<AdvResult> finalize_batch(const Classifier& source, const Tensor& originals,
                                      const Tensor& adversarial, std::span<const int> labels) {
  if (originals.shape() != adversarial.shape() || originals.rank() != 4) {
    throw DimensionError("finalize_batch: shape mismatch");
  }
  const std::size_t n = originals.dim(0);
  const std::size_t per = originals.numel() / std::max<std::size_t>(1, n);
  Tensor q(adversarial.shape(), DType::kUInt8);
  auto qs = q.data<std::uint8_t>();
  for (std::size_t i = 0; i < qs.size(); ++i) {
    qs[i] = static_cast<std::uint8_t>(std::clamp(std::lround(adversarial.item(i)), 0L, 255L));
  }
  const std::vector<int> pred = predict_labels(source, q);
  std::vector<AdvResult> out(n);
  for (std::size_t b = 0; b < n; ++b) {
    AdvResult& r = out[b];
    r.image = q.slice0(b);
    r.success = pred[b] != labels[b];
    double sq = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double d = static_cast<double>(qs[b * per + i]) - originals.item(b * per + i);
      r.linf = std::max(r.linf, std::abs(d));
      sq += d * d;
    }
    r.l2 = std::sqrt(sq);
  }
  return out;
}

namespace {

std::vector<AdvResult> cw_batch(const Classifier& source, const Tensor& x, std::span<const int> y,
                                const AttackSpec& spec) {
  const std::size_t n = x.dim(0);
  const std::vector<double> ladder = cw_c_ladder(spec.c_min, spec.c_max, spec.c_search_steps);
  std::vector<std::ptrdiff_t> lo(n, 0), hi(n, static_cast<std::ptrdiff_t>(ladder.size()) - 1);
  std::vector<AdvResult> best(n);
  std::vector<bool> found(n, false);
  // Bisection over the ladder: success moves the upper end down, failure the
  // lower end up. Every sample converges in ceil(log2(count)) + 1 rounds.
  while (true) {
    std::vector<std::size_t> active;
    for (std::size_t i = 0; i < n; ++i)
      if (lo[i] <= hi[i]) active.push_back(i);
    if (active.empty()) break;
    Shape shape = x.shape();
    shape[0] = active.size();
    Tensor sub(shape, x.dtype());
    std::vector<int> labels;
    std::vector<double> cs;
    const std::size_t per = x.numel() / n;
    dispatch_float(x.dtype(), [&]<class T>() {
      auto src = x.data<T>();
      auto dst = sub.data<T>();
      for (std::size_t k = 0; k < active.size(); ++k)
        std::copy_n(src.begin() + active[k] * per, per, dst.begin() + k * per);
    });
    std::vector<std::ptrdiff_t> mids;
    for (std::size_t i : active) {
      mids.push_back((lo[i] + hi[i]) / 2);
      labels.push_back(y[i]);
      cs.push_back(ladder[static_cast<std::size_t>(mids.back())]);
    }
    const Tensor adv =
        cw_optimize(source, sub, labels, cs, spec.kappa, spec.inner_steps, spec.cw_learning_rate);
    std::vector<AdvResult> res = finalize_batch(source, sub, adv, labels);
    // Success also demands the confidence margin at the stored (rounded) point.
    std::vector<Tensor> imgs;
    for (const AdvResult& r : res) imgs.push_back(r.image);
    const Tensor q = stack(imgs);
    const std::vector<Margin> m = margins(predict_logits(source, q), labels);
    for (std::size_t k = 0; k < active.size(); ++k) {
      const std::size_t i = active[k];
      const bool ok = res[k].success && m[k].value >= spec.kappa;
      res[k].success = ok;
      if (ok) {
        if (!found[i] || res[k].l2 < best[i].l2) best[i] = res[k];
        found[i] = true;
        hi[i] = mids[k] - 1;
      } else {
        if (!found[i]) best[i] = res[k];
        lo[i] = mids[k] + 1;
      }
    }
  }
  return best;
}

}  // namespace

std::vector<AdvResult> run_attack(const Classifier& source, const Tensor& images,
                                  std::span<const int> labels, const AttackSpec& spec,
                                  std::size_t threads, std::span<const std::size_t> sample_ids) {
  spec.validate();
  if (images.rank() != 4) throw DimensionError("run_attack expects [n,K,M,N] images");
  const std::size_t n = images.dim(0);
  if (labels.size() != n) throw DimensionError("run_attack: label count mismatch");
  std::vector<std::size_t> ids(sample_ids.begin(), sample_ids.end());
  if (ids.empty()) {
    ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  }
  if (ids.size() != n) throw DimensionError("run_attack: sample id count mismatch");
  std::vector<AdvResult> out(n);

  if (spec.family == AttackFamily::kBoundary || spec.family == AttackFamily::kGaussian) {
    const LabelOracle oracle = model_oracle(source);
    parallel_for(n, threads, [&](std::size_t i) {
      const Tensor img = images.slice0(i);
      const std::uint64_t seed = derive_seed(spec.seed, {ids[i]});
      if (spec.family == AttackFamily::kBoundary) {
        out[i] = boundary_attack(oracle, img, labels[i], spec.iterations, seed, spec.boundary);
      } else {
        Shape s{1};
        s.insert(s.end(), img.shape().begin(), img.shape().end());
        const Tensor noisy = gaussian_noise(img, spec.sigma, seed).reshaped(s);
        out[i] = finalize_batch(source, img.reshaped(s).to(DType::kFloat32), noisy,
                                labels.subspan(i, 1))
                     .front();
      }
    });
    return out;
  }

  const std::size_t bs = spec.batch_size;
  const std::size_t batches = (n + bs - 1) / bs;
  parallel_for(batches, threads, [&](std::size_t b) {
    const std::size_t b0 = b * bs, b1 = std::min(n, b0 + bs);
    const Tensor x = to_pixels(images.rows(b0, b1), source.dtype());
    const std::span<const int> y = labels.subspan(b0, b1 - b0);
    const GradientFn grad = cross_entropy_gradient(source, std::vector<int>(y.begin(), y.end()));
    std::vector<AdvResult> res;
    switch (spec.family) {
      case AttackFamily::kFgsm:
        res = finalize_batch(source, x, fgsm_iterate(x, grad, spec.epsilon), y);
        break;
      case AttackFamily::kPgd:
        res = finalize_batch(source, x, pgd_iterate(x, grad, spec.epsilon, spec.steps, spec.alpha), y);
        break;
      case AttackFamily::kMifgsm:
        res = finalize_batch(
            source, x, mifgsm_iterate(x, grad, spec.epsilon, spec.steps, spec.alpha, spec.mu), y);
        break;
      case AttackFamily::kCw:
        res = cw_batch(source, x, y, spec);
        break;
      default:
        break;
    }
    for (std::size_t k = 0; k < res.size(); ++k) out[b0 + k] = std::move(res[k]);
  });
  return out;
}

void write_adv_results(const std::filesystem::path& dir, std::span<const AdvResult> results,
                       std::span<const int> labels, std::span<const std::size_t> sample_ids) {
  if (labels.size() != results.size() || sample_ids.size() != results.size()) {
    throw DimensionError("write_adv_results: length mismatch");
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError(DataError::Kind::kIo, dir.string(), 0, ec.message());
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw DataError(DataError::Kind::kIo, (dir / "manifest.csv").string(), 0, "cannot write");
  manifest << "sample_id,label,success,linf,l2,queries,shape\n";
  for (std::size_t i = 0; i < results.size(); ++i) {
    const AdvResult& r = results[i];
    const std::string file = "adv_" + std::to_string(sample_ids[i]) + ".u8";
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    auto px = r.image.data<std::uint8_t>();
    out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (!out) throw DataError(DataError::Kind::kIo, (dir / file).string(), 0, "write failed");
    std::string shape;
    for (std::size_t d : r.image.shape()) shape += (shape.empty() ? "" : "x") + std::to_string(d);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f,%.6f", r.linf, r.l2);
    manifest << sample_ids[i] << ',' << labels[i] << ',' << (r.success ? 1 : 0) << ',' << buf
             << ',' << r.queries << ',' << shape << '\n';
  }
  if (!manifest) throw DataError(DataError::Kind::kIo, (dir / "manifest.csv").string(), 0, "write failed");
}

Tensor AdvBatch::images() const {
  std::vector<Tensor> imgs;
  for (const AdvResult& r : results) imgs.push_back(r.image);
  return stack(imgs);
}

AdvBatch read_adv_results(const std::filesystem::path& dir) {
  const std::filesystem::path mpath = dir / "manifest.csv";
  std::ifstream in(mpath);
  if (!in) throw DataError(DataError::Kind::kMissingFile, mpath.string(), 0, "no manifest");
  std::string line;
  std::getline(in, line);
  if (line != "sample_id,label,success,linf,l2,queries,shape") {
    throw DataError(DataError::Kind::kBadMagic, mpath.string(), 0, "unexpected manifest header");
  }
  AdvBatch batch;
  std::size_t offset = line.size() + 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string item; std::getline(ss, item, ',');) f.push_back(item);
    if (f.size() != 7) throw DataError(DataError::Kind::kMalformed, mpath.string(), offset, "bad row");
    AdvResult r;
    Shape shape;
    try {
      batch.sample_ids.push_back(std::stoull(f[0]));
      batch.labels.push_back(std::stoi(f[1]));
      r.success = f[2] == "1";
      r.linf = std::stod(f[3]);
      r.l2 = std::stod(f[4]);
      r.queries = std::stoull(f[5]);
      std::stringstream dims(f[6]);
      for (std::string d; std::getline(dims, d, 'x');) shape.push_back(std::stoull(d));
    } catch (const std::exception&) {
      throw DataError(DataError::Kind::kMalformed, mpath.string(), offset, "bad field in row");
    }
    const std::filesystem::path ipath = dir / ("adv_" + f[0] + ".u8");
    std::ifstream img(ipath, std::ios::binary);
    if (!img) throw DataError(DataError::Kind::kMissingFile, ipath.string(), 0, "no image file");
    std::vector<std::uint8_t> px(shape_numel(shape));
    img.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
    if (static_cast<std::size_t>(img.gcount()) != px.size()) {
      throw DataError(DataError::Kind::kTruncated, ipath.string(),
                      static_cast<std::uint64_t>(img.gcount()), "image file too short");
    }
    r.image = Tensor::from<std::uint8_t>(shape, std::move(px));
    batch.results.push_back(std::move(r));
    offset += line.size() + 1;
  }
  return batch;
}

}  // namespace defnet
