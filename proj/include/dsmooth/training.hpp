#pragma once

// Denoiser training: MSE reconstruction, stability (cross-entropy against the
// frozen classifier's clean-input labels), classification (against true
// labels), and stability fine-tuning of an MSE checkpoint. Also the plain
// cross-entropy trainer used to build surrogate / target classifiers.
//
// Surrogates are never modified: gradients pass through them into the
// denoiser via LocalClassifier::input_gradient, which is const.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dsmooth/binary_io.hpp"
#include "dsmooth/classifiers.hpp"
#include "dsmooth/dataset.hpp"
#include "dsmooth/errors.hpp"
#include "dsmooth/model_io.hpp"
#include "dsmooth/nn.hpp"
#include "dsmooth/optim.hpp"
#include "dsmooth/rng.hpp"

namespace dsmooth::training {

using classifiers::LocalClassifier;
using Surrogate = std::shared_ptr<const LocalClassifier>;

enum class Objective { Mse, Stab, Clf, StabFromMse };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::Mse: return "mse";
    case Objective::Stab: return "stab";
    case Objective::Clf: return "clf";
    case Objective::StabFromMse: return "stab+mse";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  for (auto o : {Objective::Mse, Objective::Stab, Objective::Clf, Objective::StabFromMse}) {
    if (to_string(o) == s) return o;
  }
  throw ConfigError("unknown objective '" + s + "' (expected mse, stab, clf or stab+mse)");
}

// ---- schedules -----------------------------------------------------------

inline nlohmann::json schedule_to_json(const std::vector<nn::OptimizerPhase>& schedule) {
  auto out = nlohmann::json::array();
  for (const auto& p : schedule) {
    out.push_back({{"optimizer", nn::to_string(p.kind)},
                   {"lr", p.lr},
                   {"start_epoch", p.start_epoch},
                   {"drop_every", p.drop_every},
                   {"drop_factor", p.drop_factor},
                   {"momentum", p.momentum}});
  }
  return out;
}

inline std::vector<nn::OptimizerPhase> schedule_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {"optimizer", "lr", "start_epoch", "drop_every", "drop_factor",
                                                 "momentum"};
  std::vector<nn::OptimizerPhase> out;
  try {
    for (const auto& item : j) {
      for (const auto& [key, _] : item.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
          throw ConfigError("unknown schedule key '" + key + "'");
        }
      }
      nn::OptimizerPhase p;
      const auto kind = item.at("optimizer").get<std::string>();
      if (kind == "sgd") p.kind = nn::OptimizerKind::Sgd;
      else if (kind == "adam") p.kind = nn::OptimizerKind::Adam;
      else throw ConfigError("unknown optimizer '" + kind + "'");
      p.lr = item.at("lr").get<double>();
      p.start_epoch = item.value("start_epoch", std::size_t{0});
      p.drop_every = item.value("drop_every", std::size_t{0});
      p.drop_factor = item.value("drop_factor", 0.1);
      p.momentum = item.value("momentum", 0.9);
      out.push_back(p);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optimizer schedule: ") + e.what());
  }
  return out;
}

/// Desk-scale presets. Stab/Clf from scratch use Adam then SGD: Adam for the
/// first half of the budget, then SGD at 1e-3 with x0.1 drops every third of
/// the budget (200 of 600 epochs, scaled).
inline std::vector<nn::OptimizerPhase> default_schedule(Objective objective, std::size_t epochs) {
  switch (objective) {
    case Objective::Mse: return nn::Optimizer::adam(1e-3).schedule();
    case Objective::StabFromMse: return nn::Optimizer::adam(1e-4).schedule();
    case Objective::Stab:
    case Objective::Clf: {
      const auto adam_epochs = std::max<std::size_t>(1, epochs / 2);
      const auto drop = std::max<std::size_t>(1, (epochs * 200 + 300) / 600);
      return nn::Optimizer::adam_then_sgd(1e-3, adam_epochs, 1e-3, drop).schedule();
    }
  }
  return {};
}

inline std::size_t default_epochs(Objective objective) {
  switch (objective) {
    case Objective::Mse: return 30;
    case Objective::StabFromMse: return 10;
    default: return 60;
  }
}

// ---- plans and checkpoints ----------------------------------------------

struct TrainPlan {
  Objective objective = Objective::Mse;
  double sigma = 0.25;
  std::size_t epochs = 30;
  std::vector<nn::OptimizerPhase> schedule = default_schedule(Objective::Mse, 30);
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::optional<std::string> init_checkpoint;  // required for StabFromMse when loading from disk

  static TrainPlan preset(Objective objective, double sigma, std::uint64_t seed) {
    TrainPlan p;
    p.objective = objective;
    p.sigma = sigma;
    p.epochs = default_epochs(objective);
    p.schedule = default_schedule(objective, p.epochs);
    p.seed = seed;
    return p;
  }

  void validate() const {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ConfigError("training sigma must be > 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    (void)nn::Optimizer(schedule);
  }
};

struct CheckpointMeta {
  Objective objective = Objective::Mse;
  double sigma = 0.0;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> surrogate_hashes;
  std::optional<std::string> parent_checkpoint;
  std::vector<nn::OptimizerPhase> schedule;
  std::vector<double> epoch_loss;

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"objective", to_string(objective)},
            {"sigma", sigma},
            {"epochs", epochs},
            {"seed", seed},
            {"surrogate_hashes", surrogate_hashes},
            {"parent_checkpoint", parent_checkpoint ? nlohmann::json(*parent_checkpoint) : nlohmann::json(nullptr)},
            {"schedule", schedule_to_json(schedule)},
            {"epoch_loss", epoch_loss}};
  }

  static CheckpointMeta from_json(const nlohmann::json& j) {
    CheckpointMeta m;
    try {
      m.objective = parse_objective(j.at("objective").get<std::string>());
      m.sigma = j.at("sigma").get<double>();
      m.epochs = j.at("epochs").get<std::size_t>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.surrogate_hashes = j.at("surrogate_hashes").get<std::vector<std::string>>();
      if (j.contains("parent_checkpoint") && !j["parent_checkpoint"].is_null()) {
        m.parent_checkpoint = j["parent_checkpoint"].get<std::string>();
      }
      if (j.contains("schedule")) m.schedule = schedule_from_json(j["schedule"]);
      if (j.contains("epoch_loss")) m.epoch_loss = j["epoch_loss"].get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
    } catch (const ConfigError& e) {
      throw CheckpointError(std::string("checkpoint metadata: ") + e.what());
    }
    return m;
  }
};

struct Checkpoint {
  nn::Model model;
  CheckpointMeta meta;
};

inline std::string sidecar_path(const std::string& model_path) { return model_path + ".json"; }

inline std::string hex_hash(std::uint64_t h) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  nn::save_model(c.model, path);
  io::write_text(sidecar_path(path), c.meta.to_json().dump(2) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  nn::Model model = nn::load_model(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(sidecar_path(path)));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("checkpoint sidecar for '" + path + "' is not valid JSON: " + e.what());
  }
  return {std::move(model), CheckpointMeta::from_json(j)};
}

// ---- noise and pseudo-labels --------------------------------------------

/// Training noise for example `index` in `epoch`: a fresh draw every epoch,
/// independent of batch order.
inline void training_noise(std::uint64_t seed, std::size_t epoch, std::size_t index, std::span<double> out,
                           double sigma) {
  rng::GaussianStream(rng::mix64(seed ^ 0x7EA1'0000'0000'0000ull), epoch).fill(index, out, sigma);
}

/// Clean-input predictions of each surrogate on each training example,
/// computed once before training.
class PseudoLabelCache {
 public:
  PseudoLabelCache(const data::Dataset& ds, const std::vector<Surrogate>& surrogates, std::size_t chunk = 256) {
    for (const auto& s : surrogates) {
      std::vector<int> out;
      out.reserve(ds.size());
      std::vector<std::size_t> idx;
      for (std::size_t first = 0; first < ds.size(); first += chunk) {
        idx.resize(std::min(chunk, ds.size() - first));
        std::iota(idx.begin(), idx.end(), first);
        for (int c : s->classify(ds.batch(idx))) out.push_back(c);
      }
      labels_.push_back(std::move(out));
    }
  }

  [[nodiscard]] const std::vector<int>& labels(std::size_t surrogate) const { return labels_.at(surrogate); }
  [[nodiscard]] std::size_t surrogates() const noexcept { return labels_.size(); }

 private:
  std::vector<std::vector<int>> labels_;
};

/// Rejects anything that is not a white-box local model.
inline std::vector<Surrogate> as_surrogates(const std::vector<classifiers::ClassifierHandle>& handles) {
  std::vector<Surrogate> out;
  for (const auto& h : handles) {
    auto local = std::dynamic_pointer_cast<const LocalClassifier>(h);
    if (!local) throw ConfigError("surrogate '" + h->describe() + "' has no gradients; use a local model");
    out.push_back(std::move(local));
  }
  return out;
}

// ---- denoiser training --------------------------------------------------

struct StepInfo {
  std::size_t epoch = 0;
  std::size_t step = 0;  // global step index
  std::size_t surrogate = 0;
  double loss = 0.0;
};

using StepHook = std::function<void(const StepInfo&)>;

struct TrainResult {
  nn::Model model;
  CheckpointMeta meta;
  [[nodiscard]] Checkpoint checkpoint() const { return {model, meta}; }
};

namespace detail {

inline TrainResult run_denoiser_training(const data::Dataset& ds, const TrainPlan& plan, nn::Model denoiser,
                                         const std::vector<Surrogate>& surrogates, const StepHook& hook,
                                         std::optional<std::string> parent) {
  plan.validate();
  if (ds.empty()) throw DataError("training dataset is empty");
  if (denoiser.input_shape() != ds.image_shape() || denoiser.output_shape() != ds.image_shape()) {
    throw ShapeError("denoiser shape does not match dataset images " + shape_string(ds.image_shape()));
  }
  const bool needs_classifier = plan.objective != Objective::Mse;
  if (needs_classifier && surrogates.empty()) {
    throw ConfigError(to_string(plan.objective) + " training needs at least one surrogate classifier");
  }
  std::vector<std::uint64_t> hashes_before;
  for (const auto& s : surrogates) {
    if (s->input_shape() != ds.image_shape()) throw ShapeError("surrogate input does not match dataset images");
    hashes_before.push_back(s->model().hash());
  }
  std::optional<PseudoLabelCache> cache;
  if (plan.objective == Objective::Stab || plan.objective == Objective::StabFromMse) cache.emplace(ds, surrogates);

  CheckpointMeta meta;
  meta.objective = plan.objective;
  meta.sigma = plan.sigma;
  meta.epochs = plan.epochs;
  meta.seed = plan.seed;
  meta.schedule = plan.schedule;
  meta.parent_checkpoint = std::move(parent);
  if (needs_classifier) {
    for (auto h : hashes_before) meta.surrogate_hashes.push_back(hex_hash(h));
  }

  nn::Optimizer opt(plan.schedule);
  const std::size_t d = ds.image_size();
  std::vector<std::size_t> order(ds.size());
  std::size_t step = 0;
  nn::Tape dtape;
  nn::Tape ctape;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    opt.set_epoch(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng::Rng shuffler(plan.seed, 0x0DE0'0000ull + epoch);
    rng::shuffle(order, shuffler);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    for (std::size_t first = 0; first < order.size(); first += plan.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + first, std::min(plan.batch_size, order.size() - first));
      const Tensor clean = ds.batch(idx);
      Tensor noisy = clean;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        auto row = noisy.row(k);
        std::vector<double> delta(d);
        training_noise(plan.seed, epoch, idx[k], delta, plan.sigma);
        for (std::size_t i = 0; i < d; ++i) row[i] += delta[i];
      }
      const Tensor denoised = denoiser.forward(noisy, dtape);
      StepInfo info{epoch, step, 0, 0.0};
      if (!needs_classifier) {
        const auto loss = nn::mse_loss(denoised, clean);
        denoiser.backward(dtape, loss.grad);
        info.loss = loss.value;
      } else {
        info.surrogate = step % surrogates.size();
        const auto& f = *surrogates[info.surrogate];
        std::vector<int> targets(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) {
          targets[k] = cache ? cache->labels(info.surrogate)[idx[k]] : ds.label(idx[k]);
        }
        const Tensor logits = f.logits(denoised, ctape);
        const auto loss = nn::cross_entropy_loss(logits, targets);
        denoiser.backward(dtape, f.input_gradient(ctape, loss.grad));
        info.loss = loss.value;
      }
      opt.step(denoiser);
      epoch_loss += info.loss * static_cast<double>(idx.size());
      seen += idx.size();
      if (hook) hook(info);
    }
    meta.epoch_loss.push_back(epoch_loss / static_cast<double>(seen));
  }
  for (std::size_t i = 0; i < surrogates.size(); ++i) {
    if (surrogates[i]->model().hash() != hashes_before[i]) throw StateError("a surrogate classifier was modified");
  }
  return {std::move(denoiser), std::move(meta)};
}

inline nn::Model fresh_denoiser(const data::Dataset& ds, std::uint64_t seed) {
  return nn::Model(nn::dncnn_denoiser(ds.image_shape()), rng::mix64(seed ^ 0xD0));
}

inline void require(const TrainPlan& plan, Objective o) {
  if (plan.objective != o) {
    throw ConfigError("plan objective is " + to_string(plan.objective) + ", expected " + to_string(o));
  }
}

}  // namespace detail

/// Minimizes batch-averaged ||D(x + delta) - x||^2.
inline TrainResult train_mse(const data::Dataset& ds, const TrainPlan& plan, StepHook hook = {},
                             std::optional<nn::Model> init = std::nullopt) {
  detail::require(plan, Objective::Mse);
  nn::Model d = init ? std::move(*init) : detail::fresh_denoiser(ds, plan.seed);
  return detail::run_denoiser_training(ds, plan, std::move(d), {}, hook, std::nullopt);
}

/// Cross-entropy of F(D(x + delta)) against each surrogate's clean prediction
/// f(x); surrogates are used round-robin, one per batch.
inline TrainResult train_stab(const data::Dataset& ds, const TrainPlan& plan, const std::vector<Surrogate>& surrogates,
                              StepHook hook = {}, std::optional<nn::Model> init = std::nullopt) {
  detail::require(plan, Objective::Stab);
  nn::Model d = init ? std::move(*init) : detail::fresh_denoiser(ds, plan.seed);
  return detail::run_denoiser_training(ds, plan, std::move(d), surrogates, hook, std::nullopt);
}

/// As train_stab with the true labels as targets.
inline TrainResult train_clf(const data::Dataset& ds, const TrainPlan& plan, const std::vector<Surrogate>& surrogates,
                             StepHook hook = {}, std::optional<nn::Model> init = std::nullopt) {
  detail::require(plan, Objective::Clf);
  nn::Model d = init ? std::move(*init) : detail::fresh_denoiser(ds, plan.seed);
  return detail::run_denoiser_training(ds, plan, std::move(d), surrogates, hook, std::nullopt);
}

/// Stability fine-tuning that starts from an MSE checkpoint at the same sigma.
inline TrainResult finetune_stab_from_mse(const data::Dataset& ds, const TrainPlan& plan,
                                          const std::vector<Surrogate>& surrogates, const Checkpoint& parent,
                                          StepHook hook = {}, std::optional<std::string> parent_path = std::nullopt) {
  detail::require(plan, Objective::StabFromMse);
  if (parent.meta.objective != Objective::Mse) {
    throw CheckpointError("fine-tuning needs an MSE checkpoint, got " + to_string(parent.meta.objective));
  }
  if (parent.meta.sigma != plan.sigma) {
    std::ostringstream os;
    os << "checkpoint was trained at sigma=" << parent.meta.sigma << " but the plan uses sigma=" << plan.sigma;
    throw CheckpointError(os.str());
  }
  return detail::run_denoiser_training(ds, plan, parent.model, surrogates, hook,
                                       parent_path ? parent_path : std::optional<std::string>("<memory>"));
}

/// Loads plan.init_checkpoint and fine-tunes it.
inline TrainResult finetune_stab_from_mse(const data::Dataset& ds, const TrainPlan& plan,
                                          const std::vector<Surrogate>& surrogates, StepHook hook = {}) {
  if (!plan.init_checkpoint) throw ConfigError("stab+mse needs an initial MSE checkpoint");
  return finetune_stab_from_mse(ds, plan, surrogates, load_checkpoint(*plan.init_checkpoint), std::move(hook),
                                plan.init_checkpoint);
}

/// Dispatches on plan.objective.
inline TrainResult train_denoiser(const data::Dataset& ds, const TrainPlan& plan,
                                  const std::vector<Surrogate>& surrogates, StepHook hook = {}) {
  switch (plan.objective) {
    case Objective::Mse: return train_mse(ds, plan, std::move(hook));
    case Objective::Stab: return train_stab(ds, plan, surrogates, std::move(hook));
    case Objective::Clf: return train_clf(ds, plan, surrogates, std::move(hook));
    case Objective::StabFromMse: return finetune_stab_from_mse(ds, plan, surrogates, std::move(hook));
  }
  throw ConfigError("unknown objective");
}

// ---- classifier training ------------------------------------------------

struct ClassifierPlan {
  std::size_t width1 = 16;
  std::size_t width2 = 32;
  std::size_t epochs = 30;
  std::vector<nn::OptimizerPhase> schedule = nn::Optimizer::adam(3e-3).schedule();
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

/// Fraction of `ds` that `h` labels correctly.
inline double accuracy(const classifiers::Classifier& h, const data::Dataset& ds, std::size_t chunk = 256) {
  if (ds.empty()) throw DataError("accuracy on an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t first = 0; first < ds.size(); first += chunk) {
    idx.resize(std::min(chunk, ds.size() - first));
    std::iota(idx.begin(), idx.end(), first);
    const auto pred = h.classify(ds.batch(idx));
    for (std::size_t k = 0; k < idx.size(); ++k) correct += pred[k] == ds.label(idx[k]) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

/// Standard cross-entropy training on clean images.
inline nn::Model train_classifier(const data::Dataset& ds, const ClassifierPlan& plan, StepHook hook = {}) {
  if (ds.empty()) throw DataError("training dataset is empty");
  nn::Model m(nn::conv_classifier(ds.image_shape(), ds.num_classes(), plan.width1, plan.width2),
              rng::mix64(plan.seed ^ 0xC1));
  nn::Optimizer opt(plan.schedule);
  std::vector<std::size_t> order(ds.size());
  nn::Tape tape;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    opt.set_epoch(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng::Rng shuffler(plan.seed, 0xC1A5'0000ull + epoch);
    rng::shuffle(order, shuffler);
    for (std::size_t first = 0; first < order.size(); first += plan.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + first, std::min(plan.batch_size, order.size() - first));
      std::vector<int> labels(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) labels[k] = ds.label(idx[k]);
      const Tensor logits = m.forward(ds.batch(idx), tape);
      const auto loss = nn::cross_entropy_loss(logits, labels);
      m.backward(tape, loss.grad);
      opt.step(m);
      if (hook) hook({epoch, step, 0, loss.value});
    }
  }
  return m;
}

struct SurrogateSet {
  std::vector<Surrogate> classifiers;
  std::vector<double> clean_accuracy;
};

/// Width variants cycled by build_surrogate_set.
inline const std::vector<std::pair<std::size_t, std::size_t>>& surrogate_variants() {
  static const std::vector<std::pair<std::size_t, std::size_t>> v = {{16, 32}, {12, 24}, {20, 40}, {8, 16}, {24, 24}};
  return v;
}

/// k classifiers with different widths and seeds; accuracies measured on `ds`.
inline SurrogateSet build_surrogate_set(std::size_t k, const data::Dataset& ds, std::uint64_t seed,
                                        ClassifierPlan base = {}, std::size_t variant_offset = 0) {
  if (k < 1) throw ArgumentError("need at least one surrogate");
  if (ds.empty()) throw DataError("training dataset is empty");
  SurrogateSet out;
  for (std::size_t i = 0; i < k; ++i) {
    ClassifierPlan p = base;
    const auto& v = surrogate_variants()[(i + variant_offset) % surrogate_variants().size()];
    p.width1 = v.first;
    p.width2 = v.second;
    p.seed = rng::mix64(seed + 0x5u * (i + variant_offset + 1));
    auto c = std::make_shared<const LocalClassifier>(train_classifier(ds, p));
    out.clean_accuracy.push_back(accuracy(*c, ds));
    out.classifiers.push_back(std::move(c));
  }
  return out;
}

}  // namespace dsmooth::training
