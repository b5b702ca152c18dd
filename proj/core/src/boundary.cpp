#include "defnet/attacks.hpp"

#include <algorithm>
#include <cmath>

namespace defnet {

LabelOracle model_oracle(const Classifier& model) {
  return [&model](const Tensor& image) {
    Shape s{1};
    s.insert(s.end(), image.shape().begin(), image.shape().end());
    Tape tape(false);
    Var x = tape.constant(image.to(model.dtype()).reshaped(s));
    return argmax_rows(model.logits(tape, x).value()).front();
  };
}

double boundary_score(std::span<const Tensor> perturbations, std::size_t pixel_count) {
  if (perturbations.empty()) throw ConfigError("boundary_score of an empty list");
  if (pixel_count == 0) throw ConfigError("boundary_score needs a positive pixel count");
  std::vector<double> v;
  v.reserve(perturbations.size());
  for (const Tensor& p : perturbations) {
    double sq = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) sq += p.item(i) * p.item(i);
    v.push_back(sq / static_cast<double>(pixel_count));
  }
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

AdvResult boundary_attack(const LabelOracle& oracle, const Tensor& image, int label,
                          std::size_t iterations, std::uint64_t seed, const BoundaryConfig& cfg,
                          BoundaryTrace* trace) {
  const std::size_t n = image.numel();
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = image.item(i);
  Rng rng = make_rng(seed);
  std::size_t queries = 0;
  Tensor probe(image.shape(), DType::kFloat32);
  auto is_adv = [&](const std::vector<double>& v) {
    auto p = probe.data<float>();
    for (std::size_t i = 0; i < n; ++i) p[i] = static_cast<float>(v[i]);
    ++queries;
    return oracle(probe) != label;
  };
  auto dist = [&](const std::vector<double>& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += (v[i] - x[i]) * (v[i] - x[i]);
    return std::sqrt(s);
  };
  auto quantize = [&](const std::vector<double>& v, bool away) {
    Tensor q(image.shape(), DType::kUInt8);
    auto qs = q.data<std::uint8_t>();
    for (std::size_t i = 0; i < n; ++i) {
      double r = std::round(v[i]);
      if (away) r = v[i] > x[i] ? std::ceil(v[i]) : (v[i] < x[i] ? std::floor(v[i]) : x[i]);
      qs[i] = static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
    }
    return q;
  };
  auto finish = [&](Tensor q) {
    AdvResult r;
    std::vector<double> qv(n);
    for (std::size_t i = 0; i < n; ++i) qv[i] = q.item(i);
    r.success = is_adv(qv);
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = qv[i] - x[i];
      r.linf = std::max(r.linf, std::abs(d));
      sq += d * d;
    }
    r.l2 = std::sqrt(sq);
    r.image = std::move(q);
    r.queries = queries;
    return r;
  };

  std::vector<double> start(n);
  bool found = false;
  for (std::size_t d = 0; d < cfg.init_draws && !found; ++d) {
    for (double& v : start) v = 255.0 * uniform01(rng);
    found = is_adv(start);
  }
  if (trace) *trace = BoundaryTrace{};
  if (!found) {
    AdvResult r = finish(quantize(x, false));
    r.success = false;
    return r;
  }
  double lo = 0.0, hi = 1.0;
  std::vector<double> blend(n);
  for (std::size_t k = 0; k < cfg.init_bisection; ++k) {
    const double mid = 0.5 * (lo + hi);
    for (std::size_t i = 0; i < n; ++i) blend[i] = x[i] + mid * (start[i] - x[i]);
    (is_adv(blend) ? hi : lo) = mid;
  }
  std::vector<double> adv(n);
  for (std::size_t i = 0; i < n; ++i) adv[i] = x[i] + hi * (start[i] - x[i]);
  double d = dist(adv);
  if (trace) {
    trace->initialized = true;
    trace->accepted_l2.push_back(d);
  }

  double orth = cfg.orthogonal_step, src = cfg.source_step;
  std::vector<bool> orth_hist, src_hist;
  std::vector<double> cand(n), eta(n);
  for (std::size_t it = 0; it < iterations && d > 0.0; ++it) {
    double dot = 0.0, eta_norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      eta[i] = standard_normal(rng);
      dot += eta[i] * (adv[i] - x[i]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      eta[i] -= dot / (d * d) * (adv[i] - x[i]);
      eta_norm += eta[i] * eta[i];
    }
    eta_norm = std::sqrt(eta_norm);
    if (eta_norm == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) cand[i] = adv[i] + eta[i] * (orth * d / eta_norm);
    // Back onto the sphere of radius d around the original, then into the box.
    const double cd = dist(cand);
    for (std::size_t i = 0; i < n; ++i) {
      cand[i] = std::clamp(x[i] + (cand[i] - x[i]) * (d / cd), 0.0, 255.0);
    }
    const bool sph = is_adv(cand);
    orth_hist.push_back(sph);
    if (sph) {
      for (std::size_t i = 0; i < n; ++i) cand[i] = x[i] + (cand[i] - x[i]) * (1.0 - src);
      const bool ok = is_adv(cand);
      src_hist.push_back(ok);
      const double nd = dist(cand);
      if (ok && nd <= d) {
        adv = cand;
        d = nd;
        if (trace) trace->accepted_l2.push_back(d);
      }
    }
    auto adapt = [&](std::vector<bool>& hist, double& step, double cap) {
      if (hist.size() < cfg.window) return;
      const double rate =
          static_cast<double>(std::count(hist.begin(), hist.end(), true)) / hist.size();
      if (rate > cfg.target_high) step = std::min(step * cfg.adaptation, cap);
      if (rate < cfg.target_low) step /= cfg.adaptation;
      hist.clear();
    };
    adapt(orth_hist, orth, 1.0);
    adapt(src_hist, src, 0.5);
  }
  if (trace) trace->final_l2 = d;

  Tensor q = quantize(adv, false);
  AdvResult r = finish(q);
  if (!r.success) {
    const std::size_t used = r.queries;
    AdvResult away = finish(quantize(adv, true));
    if (away.success) return away;
    r.queries = std::max(used, away.queries);
  }
  return r;
}

}  // namespace defnet
