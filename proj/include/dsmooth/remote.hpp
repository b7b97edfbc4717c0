#pragma once

// Black-box classification over HTTP.
//
//   POST /v1/classify
//   request:  {"shape":[C,H,W], "pixels":[row-major floats in [0,1]]}
//   response: {"labels":[{"name":string,"score":float}, ...]}
//
// Responses list every label sorted by descending score; equal scores keep
// class-index order. Errors answer 400 with {"error":"json"|"shape"}.

#include <algorithm>
#include <atomic>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "httplib.h"
#include "json.hpp"

#include "dsmooth/classifiers.hpp"
#include "dsmooth/errors.hpp"
#include "dsmooth/nn.hpp"

namespace dsmooth::classifiers {

inline constexpr const char* kClassifyPath = "/v1/classify";

struct ScoredLabel {
  std::string name;
  double score = 0.0;
};

/// Top-1 of an API-style label list: the highest score, the earliest entry
/// among equal scores, mapped through `labels` (OTHER for unknown names).
inline int top_label(const std::vector<ScoredLabel>& response, const LabelMap& labels) {
  if (response.empty()) throw RemoteError("remote classifier returned an empty label list");
  std::size_t best = 0;
  for (std::size_t i = 1; i < response.size(); ++i) {
    if (response[i].score > response[best].score) best = i;
  }
  return labels.map(response[best].name);
}

inline nlohmann::json encode_request(const Shape& shape, std::span<const double> pixels) {
  return {{"shape", shape}, {"pixels", std::vector<double>(pixels.begin(), pixels.end())}};
}

inline std::vector<ScoredLabel> decode_response(const std::string& body) {
  std::vector<ScoredLabel> out;
  try {
    const auto j = nlohmann::json::parse(body);
    for (const auto& item : j.at("labels")) {
      out.push_back({item.at("name").get<std::string>(), item.at("score").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw RemoteError(std::string("malformed response from remote classifier: ") + e.what());
  }
  return out;
}

struct RemoteConfig {
  std::string endpoint;  // e.g. "http://127.0.0.1:8080"
  double timeout_seconds = 10.0;
  int retries = 0;
};

/// Sends one request per image and reads back the top label. Any transport
/// or protocol failure is a RemoteError; nothing is retried unless asked.
class RemoteClassifier final : public Classifier {
 public:
  RemoteClassifier(RemoteConfig config, LabelMap labels, Shape input_shape)
      : config_(std::move(config)), labels_(std::move(labels)), input_shape_(std::move(input_shape)) {
    if (labels_.num_classes() < 2) throw ArgumentError("remote classifier needs >= 2 classes");
    if (config_.endpoint.empty()) throw ConfigError("remote classifier needs an endpoint URL");
  }

  [[nodiscard]] std::vector<int> classify(const Tensor& batch) const override {
    check_batch(batch);
    httplib::Client client(config_.endpoint);
    const auto secs = static_cast<time_t>(config_.timeout_seconds);
    const auto usecs = static_cast<time_t>((config_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    client.set_keep_alive(true);
    client.set_tcp_nodelay(true);
    std::vector<int> out;
    out.reserve(batch.extent(0));
    for (std::size_t i = 0; i < batch.extent(0); ++i) {
      out.push_back(top_label(query(client, batch.row(i)), labels_));
    }
    return out;
  }

  /// Single-image convenience wrapper.
  [[nodiscard]] int classify_one(const Tensor& image) const {
    return classify(image.reshaped(batched(1, input_shape_)))[0];
  }

  [[nodiscard]] std::size_t num_classes() const override { return labels_.num_classes(); }
  [[nodiscard]] const Shape& input_shape() const override { return input_shape_; }
  [[nodiscard]] std::string describe() const override { return "remote classifier at " + config_.endpoint; }
  [[nodiscard]] const LabelMap& label_map() const noexcept { return labels_; }

 private:
  std::vector<ScoredLabel> query(httplib::Client& client, std::span<const double> pixels) const {
    const std::string body = encode_request(input_shape_, pixels).dump();
    for (int attempt = 0;; ++attempt) {
      auto res = client.Post(kClassifyPath, body, "application/json");
      if (!res) {
        if (attempt < config_.retries) continue;
        throw RemoteError("request to " + config_.endpoint + " failed: " + httplib::to_string(res.error()));
      }
      if (res->status < 200 || res->status >= 300) {
        if (attempt < config_.retries) continue;
        throw RemoteError("remote classifier answered HTTP " + std::to_string(res->status) + ": " + res->body);
      }
      return decode_response(res->body);
    }
  }

  RemoteConfig config_;
  LabelMap labels_;
  Shape input_shape_;
};

/// Serves a local classifier over the wire protocol above.
class ClassifierServer {
 public:
  ClassifierServer(std::shared_ptr<const LocalClassifier> classifier, LabelMap labels)
      : classifier_(std::move(classifier)), labels_(std::move(labels)) {
    if (labels_.size() != classifier_->num_classes()) {
      throw ArgumentError("label map has " + std::to_string(labels_.size()) + " labels but the model has " +
                          std::to_string(classifier_->num_classes()) + " classes");
    }
    server_.set_tcp_nodelay(true);
    // SO_REUSEADDR only: a second server on a busy port must fail, not share it.
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const char*>(&yes), sizeof(yes));
    });
    server_.Post(kClassifyPath, [this](const httplib::Request& req, httplib::Response& res) { handle(req, res); });
  }

  ClassifierServer(const ClassifierServer&) = delete;
  ClassifierServer& operator=(const ClassifierServer&) = delete;
  ~ClassifierServer() { stop(); }

  /// Binds `host:port` (port 0 picks a free one) and returns the bound port.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) throw BindError("could not bind " + host + " on any port");
    } else {
      if (!server_.bind_to_port(host, port)) throw BindError("could not bind " + host + ":" + std::to_string(port));
      port_ = port;
    }
    return port_;
  }

  /// Serves until stop(); blocking.
  void run() { server_.listen_after_bind(); }

  /// Serves on a background thread and waits until it accepts connections.
  void start() {
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  void stop() {
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  [[nodiscard]] int port() const noexcept { return port_; }

  /// Pure request handler (exposed for tests): status code and JSON body.
  [[nodiscard]] std::pair<int, nlohmann::json> respond(const std::string& body) const {
    nlohmann::json req;
    try {
      req = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return {400, {{"error", "json"}, {"message", "request body is not valid JSON"}}};
    }
    Shape shape;
    std::vector<double> pixels;
    try {
      shape = req.at("shape").get<Shape>();
      pixels = req.at("pixels").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
      return {400, {{"error", "json"}, {"message", e.what()}}};
    }
    if (shape != classifier_->input_shape() || pixels.size() != shape_size(classifier_->input_shape())) {
      return {400,
              {{"error", "shape"},
               {"message", "expected shape " + shape_string(classifier_->input_shape()) + " with " +
                               std::to_string(shape_size(classifier_->input_shape())) + " pixels"}}};
    }
    const Tensor batch(batched(1, shape), std::move(pixels));
    const Tensor logits = classifier_->logits(batch);
    const Tensor probs = nn::softmax(logits);
    // Rank by logit (stable), so the first listed entry is exactly the local argmax.
    std::vector<std::size_t> order(logits.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    nlohmann::json labels = nlohmann::json::array();
    for (auto i : order) labels.push_back({{"name", labels_.label(static_cast<int>(i))}, {"score", probs[i]}});
    return {200, {{"labels", labels}}};
  }

 private:
  void handle(const httplib::Request& req, httplib::Response& res) const {
    const auto [status, body] = respond(req.body);
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  std::shared_ptr<const LocalClassifier> classifier_;
  LabelMap labels_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace dsmooth::classifiers
