#pragma once

// Uniform view over "something that maps an image batch to class indices":
// a local network, a denoiser stacked in front of another classifier, or a
// remote endpoint (see remote.hpp). Handles are immutable once built and may
// be shared across threads.

#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "dsmooth/errors.hpp"
#include "dsmooth/nn.hpp"

namespace dsmooth::classifiers {

/// Ordered label names <-> class indices, with an optional OTHER class at
/// index size() that absorbs names outside the vocabulary.
class LabelMap {
 public:
  explicit LabelMap(std::vector<std::string> labels, bool other_enabled = true)
      : labels_(std::move(labels)), other_enabled_(other_enabled) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (!index_.emplace(labels_[i], static_cast<int>(i)).second) {
        throw ArgumentError("duplicate label '" + labels_[i] + "'");
      }
    }
    if (labels_.empty()) throw ArgumentError("label map is empty");
  }

  /// "class0" ... "class{n-1}".
  static LabelMap numbered(std::size_t n, bool other_enabled = false) {
    std::vector<std::string> labels;
    for (std::size_t i = 0; i < n; ++i) labels.push_back("class" + std::to_string(i));
    return LabelMap(std::move(labels), other_enabled);
  }

  [[nodiscard]] std::size_t size() const noexcept { return labels_.size(); }
  [[nodiscard]] bool other_enabled() const noexcept { return other_enabled_; }
  [[nodiscard]] std::size_t num_classes() const noexcept { return labels_.size() + (other_enabled_ ? 1 : 0); }
  [[nodiscard]] std::optional<int> other_index() const noexcept {
    if (!other_enabled_) return std::nullopt;
    return static_cast<int>(labels_.size());
  }
  [[nodiscard]] const std::vector<std::string>& labels() const noexcept { return labels_; }

  [[nodiscard]] const std::string& label(int index) const {
    if (index < 0 || static_cast<std::size_t>(index) >= labels_.size()) {
      throw ArgumentError("class index " + std::to_string(index) + " has no label");
    }
    return labels_[static_cast<std::size_t>(index)];
  }

  [[nodiscard]] std::optional<int> find(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Index of `name`, OTHER if unmapped and enabled, MappingError otherwise.
  [[nodiscard]] int map(const std::string& name) const {
    if (const auto i = find(name)) return *i;
    if (other_enabled_) return static_cast<int>(labels_.size());
    throw MappingError("label '" + name + "' is not in the label map");
  }

  [[nodiscard]] nlohmann::json to_json() const { return {{"labels", labels_}, {"other", other_enabled_}}; }

  static LabelMap from_json(const nlohmann::json& j) {
    try {
      return LabelMap(j.at("labels").get<std::vector<std::string>>(), j.value("other", true));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("label map: ") + e.what());
    }
  }

 private:
  std::vector<std::string> labels_;
  bool other_enabled_;
  std::unordered_map<std::string, int> index_;
};

/// Per-channel (x - mean) / std applied inside a local classifier, after any
/// denoiser. Empty vectors mean identity.
struct Preprocessing {
  std::vector<double> mean;
  std::vector<double> stddev;

  [[nodiscard]] bool identity() const noexcept { return mean.empty() && stddev.empty(); }

  void validate(const Shape& input) const {
    if (identity()) return;
    if (input.size() != 3 || mean.size() != input[0] || stddev.size() != input[0]) {
      throw ShapeError("preprocessing needs one mean/std per channel of " + shape_string(input));
    }
    for (double s : stddev) {
      if (!(s > 0.0)) throw ArgumentError("preprocessing std must be > 0");
    }
  }

  [[nodiscard]] Tensor apply(const Tensor& batch) const {
    if (identity()) return batch;
    Tensor out = batch;
    const std::size_t channels = batch.extent(1);
    const std::size_t plane = batch.size() / (batch.extent(0) * channels);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t ch = (i / plane) % channels;
      out[i] = (out[i] - mean[ch]) / stddev[ch];
    }
    return out;
  }

  /// Chain rule through apply(): scales each channel by 1/std.
  [[nodiscard]] Tensor backprop(const Tensor& grad) const {
    if (identity()) return grad;
    Tensor out = grad;
    const std::size_t channels = grad.extent(1);
    const std::size_t plane = grad.size() / (grad.extent(0) * channels);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= stddev[(i / plane) % channels];
    return out;
  }

  [[nodiscard]] nlohmann::json to_json() const { return {{"mean", mean}, {"std", stddev}}; }
};

class Classifier {
 public:
  virtual ~Classifier() = default;

  /// Class index per image of `batch` ([N, ...input_shape]). Deterministic.
  [[nodiscard]] virtual std::vector<int> classify(const Tensor& batch) const = 0;
  [[nodiscard]] virtual std::size_t num_classes() const = 0;
  [[nodiscard]] virtual const Shape& input_shape() const = 0;
  [[nodiscard]] virtual std::string describe() const = 0;

 protected:
  void check_batch(const Tensor& batch) const {
    if (batch.rank() != input_shape().size() + 1 || example_shape(batch) != input_shape()) {
      throw ShapeError(describe() + " expects batches of " + shape_string(input_shape()) + ", got " +
                       shape_string(batch.shape()));
    }
  }
};

using ClassifierHandle = std::shared_ptr<const Classifier>;

/// A network evaluated in-process; argmax of its logits, ties to the lowest index.
class LocalClassifier final : public Classifier {
 public:
  explicit LocalClassifier(nn::Model model, Preprocessing pre = {})
      : model_(std::move(model)), pre_(std::move(pre)) {
    if (model_.output_shape().size() != 1 || model_.output_shape()[0] < 2) {
      throw ShapeError("classifier model must output a vector of >= 2 logits");
    }
    pre_.validate(model_.input_shape());
  }

  [[nodiscard]] std::vector<int> classify(const Tensor& batch) const override {
    return nn::argmax_rows(logits(batch));
  }

  [[nodiscard]] Tensor logits(const Tensor& batch) const {
    check_batch(batch);
    return model_.forward(pre_.apply(batch));
  }

  /// Logits with a recorded tape for backpropagating into the input.
  Tensor logits(const Tensor& batch, nn::Tape& tape) const {
    check_batch(batch);
    return model_.forward(pre_.apply(batch), tape);
  }

  /// d(loss)/d(raw input) given d(loss)/d(logits). Parameters are never touched.
  [[nodiscard]] Tensor input_gradient(const nn::Tape& tape, const Tensor& grad_logits) const {
    return pre_.backprop(model_.input_gradient(tape, grad_logits));
  }

  [[nodiscard]] std::size_t num_classes() const override { return model_.output_shape()[0]; }
  [[nodiscard]] const Shape& input_shape() const override { return model_.input_shape(); }
  [[nodiscard]] std::string describe() const override { return "local classifier"; }
  [[nodiscard]] const nn::Model& model() const noexcept { return model_; }
  [[nodiscard]] const Preprocessing& preprocessing() const noexcept { return pre_; }

 private:
  nn::Model model_;
  Preprocessing pre_;
};

/// f o D: the denoiser runs on raw pixels, then the inner classifier (and
/// whatever preprocessing it owns) sees the denoised batch.
class DenoisedClassifier final : public Classifier {
 public:
  DenoisedClassifier(std::shared_ptr<const nn::Model> denoiser, ClassifierHandle inner)
      : denoiser_(std::move(denoiser)), inner_(std::move(inner)) {
    if (!denoiser_ || !inner_) throw ArgumentError("denoised classifier needs a denoiser and an inner classifier");
    if (denoiser_->input_shape() != denoiser_->output_shape()) {
      throw ShapeError("denoiser must map images to images of the same shape");
    }
    if (denoiser_->input_shape() != inner_->input_shape()) {
      throw ShapeError("denoiser shape " + shape_string(denoiser_->input_shape()) +
                       " does not match classifier input " + shape_string(inner_->input_shape()));
    }
  }

  [[nodiscard]] std::vector<int> classify(const Tensor& batch) const override {
    check_batch(batch);
    return inner_->classify(denoiser_->forward(batch));
  }

  [[nodiscard]] std::size_t num_classes() const override { return inner_->num_classes(); }
  [[nodiscard]] const Shape& input_shape() const override { return denoiser_->input_shape(); }
  [[nodiscard]] std::string describe() const override { return "denoised(" + inner_->describe() + ")"; }
  [[nodiscard]] const nn::Model& denoiser() const noexcept { return *denoiser_; }
  [[nodiscard]] const ClassifierHandle& inner() const noexcept { return inner_; }

 private:
  std::shared_ptr<const nn::Model> denoiser_;
  ClassifierHandle inner_;
};

inline ClassifierHandle make_local(nn::Model model, Preprocessing pre = {}) {
  return std::make_shared<const LocalClassifier>(std::move(model), std::move(pre));
}

inline ClassifierHandle make_denoised(nn::Model denoiser, ClassifierHandle inner) {
  return std::make_shared<const DenoisedClassifier>(std::make_shared<const nn::Model>(std::move(denoiser)),
                                                    std::move(inner));
}

}  // namespace dsmooth::classifiers
