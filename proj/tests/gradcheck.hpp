#pragma once

// Central finite-difference oracle for Model gradients. Test-only.

#include <algorithm>
#include <cmath>
#include <functional>

#include "dsmooth/nn.hpp"
#include "dsmooth/rng.hpp"

namespace dsmooth::testing {

struct GradCheckReport {
  int probes = 0;
  int skipped_kinks = 0;
  double max_rel_error = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

/// Checks d(sum(r * model(x)))/d(theta) for `probes` random parameter entries
/// and input entries against central differences with step h. Probes whose
/// second difference shows a ReLU kink inside [-h, h] are redrawn.
inline GradCheckReport gradient_check(nn::Model& model, const Tensor& input, int probes, std::uint64_t seed,
                                      double h = 1e-5) {
  rng::Rng gen(seed, 99);
  const Shape out_shape = batched(input.extent(0), model.output_shape());
  Tensor weights(out_shape);
  for (auto& v : weights.data()) v = gen.uniform(-1.0, 1.0);

  auto objective = [&](const Tensor& x) {
    const Tensor y = model.forward(x);
    double acc = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += weights[i] * y[i];
    return acc;
  };

  model.zero_grad();
  nn::Tape tape;
  (void)model.forward(input, tape);
  const Tensor input_grad = model.backward(tape, weights);
  const auto grads = model.grads();

  std::size_t total_params = 0;
  for (const auto& p : model.params()) total_params += p.value.size();

  GradCheckReport report;
  Tensor x = input;
  int attempts = 0;
  while (report.probes < probes && attempts < probes * 20) {
    ++attempts;
    // Mix parameter probes with input probes (about one in four).
    const bool probe_input = total_params == 0 || gen.below(4) == 0;
    double* slot = nullptr;
    double analytic = 0.0;
    if (probe_input) {
      const auto i = gen.below(x.size());
      slot = &x[i];
      analytic = input_grad[i];
    } else {
      auto flat = gen.below(total_params);
      for (std::size_t k = 0; k < model.params().size(); ++k) {
        auto& p = model.params()[k].value;
        if (flat < p.size()) {
          slot = &p[flat];
          analytic = grads[k].value[flat];
          break;
        }
        flat -= p.size();
      }
    }
    const double saved = *slot;
    const double f0 = objective(x);
    *slot = saved + h;
    const double fp = objective(x);
    *slot = saved - h;
    const double fm = objective(x);
    *slot = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    if (std::abs(fp - 2.0 * f0 + fm) > 1e-3 * std::abs(fp - fm) + 1e-11) {
      ++report.skipped_kinks;
      continue;
    }
    report.max_rel_error = std::max(report.max_rel_error, relative_error(analytic, numeric));
    ++report.probes;
  }
  model.zero_grad();
  return report;
}

}  // namespace dsmooth::testing
