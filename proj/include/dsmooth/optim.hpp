#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dsmooth/errors.hpp"
#include "dsmooth/nn.hpp"

namespace dsmooth::nn {

enum class OptimizerKind { Sgd, Adam };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

/// One stretch of a schedule: an optimizer and a learning rate that starts at
/// `lr` on `start_epoch` and is multiplied by `drop_factor` every `drop_every`
/// epochs (0 = constant).
struct OptimizerPhase {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  std::size_t start_epoch = 0;
  std::size_t drop_every = 0;
  double drop_factor = 0.1;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Epoch-scheduled SGD (heavy-ball momentum) / Adam. Moment buffers are
/// reset whenever the schedule switches phase.
class Optimizer {
 public:
  explicit Optimizer(std::vector<OptimizerPhase> schedule) : schedule_(std::move(schedule)) {
    if (schedule_.empty()) throw ArgumentError("optimizer schedule is empty");
    if (schedule_.front().start_epoch != 0) throw ArgumentError("first optimizer phase must start at epoch 0");
    for (std::size_t i = 0; i < schedule_.size(); ++i) {
      if (!(schedule_[i].lr > 0.0)) throw ArgumentError("learning rate must be > 0");
      if (i > 0 && schedule_[i].start_epoch <= schedule_[i - 1].start_epoch) {
        throw ArgumentError("optimizer phases must have increasing start epochs");
      }
    }
  }

  static Optimizer sgd(double lr, double momentum = 0.9, std::size_t drop_every = 0) {
    OptimizerPhase p;
    p.kind = OptimizerKind::Sgd;
    p.lr = lr;
    p.momentum = momentum;
    p.drop_every = drop_every;
    return Optimizer({p});
  }

  static Optimizer adam(double lr) {
    OptimizerPhase p;
    p.lr = lr;
    return Optimizer({p});
  }

  /// Adam for `adam_epochs`, then SGD starting at `sgd_lr` with x0.1 drops.
  static Optimizer adam_then_sgd(double adam_lr, std::size_t adam_epochs, double sgd_lr, std::size_t drop_every) {
    OptimizerPhase adam;
    adam.lr = adam_lr;
    OptimizerPhase sgd;
    sgd.kind = OptimizerKind::Sgd;
    sgd.lr = sgd_lr;
    sgd.start_epoch = adam_epochs;
    sgd.drop_every = drop_every;
    if (adam_epochs == 0) {
      sgd.start_epoch = 0;
      return Optimizer({sgd});
    }
    return Optimizer({adam, sgd});
  }

  [[nodiscard]] const std::vector<OptimizerPhase>& schedule() const noexcept { return schedule_; }

  void set_epoch(std::size_t epoch) {
    epoch_ = epoch;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < schedule_.size(); ++i) {
      if (schedule_[i].start_epoch <= epoch) idx = i;
    }
    if (idx != phase_) {
      phase_ = idx;
      first_moment_.clear();
      second_moment_.clear();
      steps_ = 0;
    }
  }

  [[nodiscard]] OptimizerKind kind() const noexcept { return schedule_[phase_].kind; }
  [[nodiscard]] std::uint64_t steps() const noexcept { return steps_; }

  [[nodiscard]] double learning_rate() const noexcept {
    const auto& p = schedule_[phase_];
    if (p.drop_every == 0) return p.lr;
    const auto drops = (epoch_ - p.start_epoch) / p.drop_every;
    return p.lr * std::pow(p.drop_factor, static_cast<double>(drops));
  }

  /// Applies one update from the model's accumulated gradients, then zeroes them.
  void step(Model& model) {
    auto& params = model.params();
    const auto& grads = model.grads();
    if (first_moment_.size() != params.size()) {
      first_moment_.clear();
      second_moment_.clear();
      for (const auto& p : params) {
        first_moment_.emplace_back(p.value.shape());
        second_moment_.emplace_back(p.value.shape());
      }
    }
    ++steps_;
    const auto& ph = schedule_[phase_];
    const double lr = learning_rate();
    if (ph.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].value.data();
        const auto g = grads[i].value.data();
        auto v = first_moment_[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          v[j] = ph.momentum * v[j] + g[j];
          w[j] -= lr * v[j];
        }
      }
    } else {
      const double t = static_cast<double>(steps_);
      const double c1 = 1.0 - std::pow(ph.beta1, t);
      const double c2 = 1.0 - std::pow(ph.beta2, t);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto w = params[i].value.data();
        const auto g = grads[i].value.data();
        auto m = first_moment_[i].data();
        auto s = second_moment_[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = ph.beta1 * m[j] + (1.0 - ph.beta1) * g[j];
          s[j] = ph.beta2 * s[j] + (1.0 - ph.beta2) * g[j] * g[j];
          const double m_hat = m[j] / c1;
          const double s_hat = s[j] / c2;
          w[j] -= lr * m_hat / (std::sqrt(s_hat) + ph.eps);
        }
      }
    }
    model.zero_grad();
  }

 private:
  std::vector<OptimizerPhase> schedule_;
  std::size_t phase_ = 0;
  std::size_t epoch_ = 0;
  std::uint64_t steps_ = 0;
  std::vector<Tensor> first_moment_;
  std::vector<Tensor> second_moment_;
};

}  // namespace dsmooth::nn
