#pragma once

// Randomized smoothing: Monte Carlo PREDICT / CERTIFY over any classifier
// handle, plus the l2 certified-radius formulas.
//
// Noise for sample i of input j in phase p is drawn from the counter-based
// stream (seed, j, p) at position i, so tallies do not depend on batch size
// or on how samples are spread over workers.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dsmooth/classifiers.hpp"
#include "dsmooth/errors.hpp"
#include "dsmooth/numerics.hpp"
#include "dsmooth/rng.hpp"

namespace dsmooth::smoothing {

using numerics::ConfidenceLevel;
using numerics::Probability;

struct SmoothingParams {
  double sigma = 0.25;
  std::uint64_t n0 = 100;
  std::uint64_t n = 10000;
  double alpha = 0.001;
  std::uint64_t batch = 1000;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ArgumentError("sigma must be > 0");
    if (n0 < 1) throw ArgumentError("n0 must be >= 1");
    if (n < 1) throw ArgumentError("n must be >= 1");
    (void)ConfidenceLevel(alpha);
    if (batch < 1 || batch > n) throw ArgumentError("batch must be in [1, n]");
  }

  friend bool operator==(const SmoothingParams&, const SmoothingParams&) = default;
};

enum class Phase : std::uint64_t { Selection = 0, Estimation = 1, Prediction = 2 };

/// Identifies one independent noise stream.
struct NoiseStream {
  std::uint64_t seed = 0;
  std::uint64_t input_id = 0;
  Phase phase = Phase::Selection;

  [[nodiscard]] rng::GaussianStream gaussian() const noexcept {
    return rng::GaussianStream(seed, input_id * 4 + static_cast<std::uint64_t>(phase));
  }
};

struct Certificate {
  std::optional<int> predicted;  // nullopt = abstain
  double radius = 0.0;           // l2, pixel units; 0 when abstaining
  double p_lower = 0.0;          // Clopper-Pearson lower bound on p_A
  int selected = 0;              // c_A chosen in the selection phase
  std::vector<std::uint64_t> selection_counts;
  std::vector<std::uint64_t> estimation_counts;
  SmoothingParams params;

  [[nodiscard]] bool abstained() const noexcept { return !predicted.has_value(); }
  friend bool operator==(const Certificate&, const Certificate&) = default;
};

/// sigma/2 * (Phi^{-1}(pA) - Phi^{-1}(pB)).
inline double certified_radius_two_sided(Probability pa, Probability pb, double sigma) {
  if (pa < pb) throw DomainError("certified radius needs pA >= pB");
  if (!(sigma > 0.0)) throw DomainError("sigma must be > 0");
  if (pa.value() <= 0.0 || pa.value() >= 1.0 || pb.value() <= 0.0 || pb.value() >= 1.0) {
    throw DomainError("certified radius needs 0 < pB <= pA < 1");
  }
  if (pa == pb) return 0.0;
  return 0.5 * sigma * (numerics::std_normal_quantile(pa) - numerics::std_normal_quantile(pb));
}

/// sigma * Phi^{-1}(pA_lower): the two-sided radius with pB bounded by 1 - pA_lower.
inline double certified_radius_one_sided(Probability pa_lower, double sigma) {
  if (pa_lower.value() <= 0.5) throw DomainError("one-sided radius needs pA_lower > 1/2");
  if (pa_lower.value() >= 1.0) throw DomainError("one-sided radius needs pA_lower < 1");
  if (!(sigma > 0.0)) throw DomainError("sigma must be > 0");
  return sigma * numerics::std_normal_quantile(pa_lower);
}

/// Index of the largest count; ties break toward the lowest index.
inline int argmax_count(const std::vector<std::uint64_t>& counts) {
  return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

/// Classifies `count` noisy copies x + N(0, sigma^2 I) in batches and returns
/// per-class tallies. Samples [first, first + count) of `stream` are used.
inline std::vector<std::uint64_t> sample_under_noise(const classifiers::Classifier& h, const Tensor& x, double sigma,
                                                     std::uint64_t count, const NoiseStream& stream,
                                                     std::uint64_t batch_size = 1000, std::uint64_t first = 0) {
  if (count < 1) throw ArgumentError("sample_under_noise needs count >= 1");
  if (batch_size < 1) throw ArgumentError("batch size must be >= 1");
  if (x.shape() != h.input_shape()) {
    throw ShapeError("input " + shape_string(x.shape()) + " does not match classifier input " +
                     shape_string(h.input_shape()));
  }
  const std::size_t d = x.size();
  const auto gauss = stream.gaussian();
  std::vector<std::uint64_t> counts(h.num_classes(), 0);
  std::vector<double> noise(d);
  for (std::uint64_t done = 0; done < count;) {
    const std::uint64_t b = std::min(batch_size, count - done);
    Tensor noisy(batched(b, x.shape()));
    for (std::uint64_t s = 0; s < b; ++s) {
      gauss.fill(first + done + s, noise, sigma);
      auto row = noisy.row(s);
      for (std::size_t i = 0; i < d; ++i) row[i] = x[i] + noise[i];
    }
    for (int c : h.classify(noisy)) {
      if (c < 0 || static_cast<std::size_t>(c) >= counts.size()) {
        throw ShapeError("classifier returned class " + std::to_string(c) + " outside [0," +
                         std::to_string(counts.size()) + ")");
      }
      ++counts[static_cast<std::size_t>(c)];
    }
    done += b;
  }
  return counts;
}

/// CERTIFY: select c_A from n0 samples, bound p_A from n fresh samples, and
/// certify radius sigma * Phi^{-1}(p_lower) when p_lower > 1/2.
inline Certificate certify(const classifiers::Classifier& h, const Tensor& x, const SmoothingParams& params,
                           std::uint64_t input_id = 0) {
  params.validate();
  Certificate cert;
  cert.params = params;
  cert.selection_counts =
      sample_under_noise(h, x, params.sigma, params.n0, {params.seed, input_id, Phase::Selection}, params.batch);
  cert.selected = argmax_count(cert.selection_counts);
  cert.estimation_counts =
      sample_under_noise(h, x, params.sigma, params.n, {params.seed, input_id, Phase::Estimation}, params.batch);
  const auto k = cert.estimation_counts[static_cast<std::size_t>(cert.selected)];
  const Probability p_lower = numerics::clopper_pearson_lower(k, params.n, ConfidenceLevel(params.alpha));
  cert.p_lower = p_lower.value();
  if (p_lower.value() > 0.5) {
    cert.predicted = cert.selected;
    cert.radius = certified_radius_one_sided(p_lower, params.sigma);
  }
  return cert;
}

/// PREDICT: top class of n samples if a two-sided binomial test separates it
/// from the runner-up at level alpha; nullopt (abstain) otherwise.
inline std::optional<int> predict(const classifiers::Classifier& h, const Tensor& x, const SmoothingParams& params,
                                  std::uint64_t input_id = 0) {
  params.validate();
  const auto counts =
      sample_under_noise(h, x, params.sigma, params.n, {params.seed, input_id, Phase::Prediction}, params.batch);
  std::vector<std::size_t> order(counts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
  const auto k1 = counts[order[0]];
  const auto k2 = counts[order[1]];
  const auto p = numerics::binomial_two_sided_pvalue(k1, k1 + k2, Probability(0.5));
  if (p.value() <= params.alpha) return static_cast<int>(order[0]);
  return std::nullopt;
}

}  // namespace dsmooth::smoothing
