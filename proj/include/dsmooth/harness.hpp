#pragma once

// Experiment orchestration: config files, certification runs over a dataset
// with a resumable result log, and certified-accuracy curves.
//
// Result log: one JSON object per line, ordered by dataset index,
//   {"index","label","outcome","class","radius","p_lower","counts","seed"}.
// Curve CSV: radius,certified_accuracy,standard_accuracy,n

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "dsmooth/classifiers.hpp"
#include "dsmooth/dataset.hpp"
#include "dsmooth/errors.hpp"
#include "dsmooth/model_io.hpp"
#include "dsmooth/remote.hpp"
#include "dsmooth/smoothing.hpp"
#include "dsmooth/training.hpp"

namespace dsmooth::harness {

using smoothing::Certificate;
using smoothing::SmoothingParams;

enum class Setting { Whitebox, Blackbox, NoDenoiser, RemoteApi };

inline std::string to_string(Setting s) {
  switch (s) {
    case Setting::Whitebox: return "whitebox";
    case Setting::Blackbox: return "blackbox";
    case Setting::NoDenoiser: return "no-denoiser";
    case Setting::RemoteApi: return "remote-api";
  }
  return "?";
}

inline Setting parse_setting(const std::string& s) {
  for (auto v : {Setting::Whitebox, Setting::Blackbox, Setting::NoDenoiser, Setting::RemoteApi}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown setting '" + s + "' (expected whitebox, blackbox, no-denoiser or remote-api)");
}

/// 0, sigma/8, ..., 4 sigma.
inline std::vector<double> default_radius_grid(double sigma) {
  std::vector<double> grid;
  for (int k = 0; k <= 32; ++k) grid.push_back(sigma * k / 8.0);
  return grid;
}

/// The middle entry of the default grid (2 sigma).
inline double mid_grid_radius(double sigma) { return 2.0 * sigma; }

// ---- config --------------------------------------------------------------

struct ExperimentConfig {
  Setting setting = Setting::Whitebox;
  std::optional<std::string> denoiser;    // checkpoint path
  std::optional<std::string> classifier;  // local model path
  std::optional<std::string> endpoint;    // remote classifier URL
  std::vector<std::string> labels;        // label map for remote classifiers
  bool other_class = true;
  double timeout = 10.0;
  classifiers::Preprocessing preprocessing;
  SmoothingParams smoothing;
  std::string dataset;
  std::optional<std::size_t> max_points;
  std::vector<double> radius_grid;
  std::string log;
  std::optional<std::string> curve;
  std::uint64_t seed = 0;

  void validate() const {
    smoothing.validate();
    if (dataset.empty()) throw ConfigError("config needs a dataset path");
    if (log.empty()) throw ConfigError("config needs a log path");
    if (radius_grid.empty()) throw ConfigError("radius grid is empty");
    const bool remote = setting == Setting::Blackbox || setting == Setting::RemoteApi;
    switch (setting) {
      case Setting::Whitebox:
        if (!denoiser) throw ConfigError("whitebox setting needs a denoiser checkpoint");
        break;
      case Setting::Blackbox:
        if (!denoiser) throw ConfigError("blackbox setting needs a denoiser checkpoint");
        break;
      case Setting::NoDenoiser:
        if (denoiser) throw ConfigError("no-denoiser setting forbids a denoiser checkpoint");
        break;
      case Setting::RemoteApi: break;
    }
    if (remote || (setting == Setting::NoDenoiser && endpoint)) {
      if (!endpoint) throw ConfigError(to_string(setting) + " setting needs an endpoint");
      if (labels.empty()) throw ConfigError(to_string(setting) + " setting needs a label map");
      if (classifier) throw ConfigError("give either a classifier path or an endpoint, not both");
    } else if (!classifier) {
      throw ConfigError(to_string(setting) + " setting needs a classifier path");
    }
  }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["setting"] = to_string(setting);
    if (denoiser) j["denoiser"] = *denoiser;
    if (classifier) j["classifier"] = *classifier;
    if (endpoint) j["endpoint"] = *endpoint;
    if (!labels.empty()) j["labels"] = labels;
    j["other_class"] = other_class;
    j["timeout"] = timeout;
    if (!preprocessing.identity()) j["preprocessing"] = preprocessing.to_json();
    j["smoothing"] = {{"sigma", smoothing.sigma}, {"n0", smoothing.n0}, {"n", smoothing.n},
                      {"alpha", smoothing.alpha}, {"batch", smoothing.batch}};
    j["dataset"] = dataset;
    if (max_points) j["max_points"] = *max_points;
    j["radius_grid"] = radius_grid;
    j["log"] = log;
    if (curve) j["curve"] = *curve;
    j["seed"] = seed;
    return j;
  }

  /// Unknown keys are errors. Remote-api runs default to n0=10, n=100.
  static ExperimentConfig from_json(const nlohmann::json& j) {
    static const std::vector<std::string> top = {"setting",       "denoiser", "classifier", "endpoint",
                                                 "labels",        "other_class", "timeout",   "preprocessing",
                                                 "smoothing",     "dataset",  "max_points", "radius_grid",
                                                 "log",           "curve",    "seed"};
    static const std::vector<std::string> smooth_keys = {"sigma", "n0", "n", "alpha", "batch"};
    auto check_keys = [](const nlohmann::json& obj, const std::vector<std::string>& known, const std::string& where) {
      if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
      for (const auto& [key, _] : obj.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
          throw ConfigError("unknown key '" + key + "' in " + where);
        }
      }
    };
    ExperimentConfig c;
    try {
      check_keys(j, top, "config");
      c.setting = parse_setting(j.at("setting").get<std::string>());
      if (j.contains("denoiser")) c.denoiser = j["denoiser"].get<std::string>();
      if (j.contains("classifier")) c.classifier = j["classifier"].get<std::string>();
      if (j.contains("endpoint")) c.endpoint = j["endpoint"].get<std::string>();
      c.labels = j.value("labels", std::vector<std::string>{});
      c.other_class = j.value("other_class", true);
      c.timeout = j.value("timeout", 10.0);
      if (j.contains("preprocessing")) {
        check_keys(j["preprocessing"], {"mean", "std"}, "preprocessing");
        c.preprocessing.mean = j["preprocessing"].at("mean").get<std::vector<double>>();
        c.preprocessing.stddev = j["preprocessing"].at("std").get<std::vector<double>>();
      }
      const bool api = c.setting == Setting::RemoteApi;
      c.smoothing.n0 = api ? 10 : 100;
      c.smoothing.n = api ? 100 : 10000;
      if (j.contains("smoothing")) {
        const auto& s = j["smoothing"];
        check_keys(s, smooth_keys, "smoothing");
        c.smoothing.sigma = s.value("sigma", c.smoothing.sigma);
        c.smoothing.n0 = s.value("n0", c.smoothing.n0);
        c.smoothing.n = s.value("n", c.smoothing.n);
        c.smoothing.alpha = s.value("alpha", c.smoothing.alpha);
        c.smoothing.batch = s.value("batch", std::min<std::uint64_t>(c.smoothing.batch, c.smoothing.n));
      } else {
        c.smoothing.batch = std::min<std::uint64_t>(c.smoothing.batch, c.smoothing.n);
      }
      c.dataset = j.at("dataset").get<std::string>();
      if (j.contains("max_points")) c.max_points = j["max_points"].get<std::size_t>();
      c.radius_grid = j.contains("radius_grid") ? j["radius_grid"].get<std::vector<double>>()
                                                : default_radius_grid(c.smoothing.sigma);
      c.log = j.at("log").get<std::string>();
      if (j.contains("curve")) c.curve = j["curve"].get<std::string>();
      c.seed = j.value("seed", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    c.smoothing.seed = c.seed;
    try {
      c.validate();
    } catch (const ArgumentError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    } catch (const DomainError& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
  }

  static ExperimentConfig load(const std::string& path) {
    try {
      return from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
  }
};

/// The classifier implied by the config's setting.
inline classifiers::ClassifierHandle build_handle(const ExperimentConfig& c, const Shape& image_shape) {
  classifiers::ClassifierHandle base;
  if (c.endpoint) {
    base = std::make_shared<const classifiers::RemoteClassifier>(
        classifiers::RemoteConfig{*c.endpoint, c.timeout, 0}, classifiers::LabelMap(c.labels, c.other_class),
        image_shape);
  } else {
    base = classifiers::make_local(nn::load_model(*c.classifier), c.preprocessing);
  }
  if (base->input_shape() != image_shape) {
    throw ShapeError("classifier input " + shape_string(base->input_shape()) + " does not match dataset images " +
                     shape_string(image_shape));
  }
  if (!c.denoiser) return base;
  nn::Model d = nn::load_model(*c.denoiser);
  const auto sidecar = training::sidecar_path(*c.denoiser);
  if (std::filesystem::exists(sidecar)) {
    const auto meta = training::load_checkpoint(*c.denoiser).meta;
    if (meta.sigma != c.smoothing.sigma) {
      std::ostringstream os;
      os << "denoiser was trained at sigma=" << meta.sigma << " but certification uses sigma=" << c.smoothing.sigma;
      throw ConfigError(os.str());
    }
  }
  return classifiers::make_denoised(std::move(d), base);
}

// ---- result records ------------------------------------------------------

struct CertRecord {
  std::size_t index = 0;
  int label = 0;
  Certificate cert;

  [[nodiscard]] bool correct() const { return cert.predicted && *cert.predicted == label; }

  [[nodiscard]] nlohmann::json to_json() const {
    nlohmann::json j;
    j["index"] = index;
    j["label"] = label;
    j["outcome"] = cert.abstained() ? "abstain" : "predicted";
    j["class"] = cert.predicted ? nlohmann::json(*cert.predicted) : nlohmann::json(nullptr);
    j["radius"] = cert.radius;
    j["p_lower"] = cert.p_lower;
    j["counts"] = {{"selected", cert.selected},
                   {"selection", cert.selection_counts},
                   {"estimation", cert.estimation_counts}};
    j["seed"] = cert.params.seed;
    return j;
  }

  static CertRecord from_json(const nlohmann::json& j, const SmoothingParams& params) {
    CertRecord r;
    try {
      r.index = j.at("index").get<std::size_t>();
      r.label = j.at("label").get<int>();
      const auto outcome = j.at("outcome").get<std::string>();
      if (outcome == "predicted") r.cert.predicted = j.at("class").get<int>();
      else if (outcome != "abstain") throw FormatError("unknown outcome '" + outcome + "'");
      r.cert.radius = j.at("radius").get<double>();
      r.cert.p_lower = j.at("p_lower").get<double>();
      const auto& counts = j.at("counts");
      r.cert.selected = counts.at("selected").get<int>();
      r.cert.selection_counts = counts.at("selection").get<std::vector<std::uint64_t>>();
      r.cert.estimation_counts = counts.at("estimation").get<std::vector<std::uint64_t>>();
      r.cert.params = params;
      r.cert.params.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("result log entry: ") + e.what());
    }
    return r;
  }
};

inline std::string log_line(const CertRecord& r) { return r.to_json().dump() + "\n"; }

/// Complete lines of a result log; a trailing partial line (from a killed
/// run) is ignored.
inline std::vector<CertRecord> read_log(const std::string& path, const SmoothingParams& params = {}) {
  const auto text = io::read_text(path);
  std::vector<CertRecord> out;
  std::size_t start = 0;
  while (true) {
    const auto end = text.find('\n', start);
    if (end == std::string::npos) break;
    try {
      out.push_back(CertRecord::from_json(nlohmann::json::parse(text.substr(start, end - start)), params));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("result log '" + path + "' line " + std::to_string(out.size() + 1) + ": " + e.what());
    }
    start = end + 1;
  }
  return out;
}

// ---- certification run ---------------------------------------------------

/// Worker count: DSK_WORKERS if set, else `requested`, else the hardware's parallelism.
inline std::size_t resolve_workers(std::optional<std::size_t> requested = std::nullopt) {
  if (const char* env = std::getenv("DSK_WORKERS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("DSK_WORKERS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  if (requested) return std::max<std::size_t>(1, *requested);
  return std::max(1u, std::thread::hardware_concurrency());
}

struct RunOptions {
  std::optional<std::size_t> workers;
  bool resume = true;
  // Stops cleanly after this many new log entries (used to simulate interruption).
  std::optional<std::size_t> stop_after;
  std::function<void(const CertRecord&)> on_record;
};

/// Certifies points [0, count) of `ds` with `h`, appending to the log at
/// `log_path` in index order. Existing complete entries are kept and skipped.
/// The first classifier error stops scheduling; entries before it stay in the
/// log and the error is rethrown.
inline std::vector<CertRecord> certify_dataset(const classifiers::Classifier& h, const data::Dataset& ds,
                                               const SmoothingParams& params, const std::string& log_path,
                                               std::size_t count, const RunOptions& opts = {}) {
  params.validate();
  count = std::min(count, ds.size());
  std::vector<CertRecord> done;
  if (opts.resume && std::filesystem::exists(log_path)) {
    done = read_log(log_path, params);
    if (done.size() > count) throw ConfigError("result log '" + log_path + "' has more entries than points to certify");
    for (std::size_t i = 0; i < done.size(); ++i) {
      const auto& r = done[i];
      const auto sum = [](const std::vector<std::uint64_t>& v) {
        return std::accumulate(v.begin(), v.end(), std::uint64_t{0});
      };
      if (r.index != i || r.label != ds.label(i) || r.cert.params.seed != params.seed ||
          sum(r.cert.selection_counts) != params.n0 || sum(r.cert.estimation_counts) != params.n) {
        throw ConfigError("result log '" + log_path + "' entry " + std::to_string(i) +
                          " does not match this configuration; remove it to start over");
      }
    }
  }
  // Rewrite the kept prefix so a torn final line is dropped.
  {
    std::ofstream out(log_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IOError("cannot open '" + log_path + "' for writing");
    for (const auto& r : done) out << log_line(r);
  }
  std::ofstream log(log_path, std::ios::binary | std::ios::app);
  if (!log) throw IOError("cannot open '" + log_path + "' for appending");

  const std::size_t first = done.size();
  std::size_t last = count;
  if (opts.stop_after) last = std::min(count, first + *opts.stop_after);
  const std::size_t todo = last - first;
  if (todo == 0) return done;

  std::vector<std::optional<CertRecord>> slots(todo);
  std::mutex mu;
  std::condition_variable cv;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::size_t error_at = todo;

  auto worker = [&] {
    while (!failed.load()) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo) break;
      const std::size_t i = first + k;
      try {
        CertRecord r{i, ds.label(i), smoothing::certify(h, ds.image(i), params, i)};
        std::lock_guard lock(mu);
        slots[k] = std::move(r);
      } catch (...) {
        std::lock_guard lock(mu);
        if (k < error_at) {
          error_at = k;
          error = std::current_exception();
        }
        failed.store(true);
      }
      cv.notify_all();
    }
    cv.notify_all();
  };

  const std::size_t nworkers = std::min(resolve_workers(opts.workers), todo);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < nworkers; ++w) pool.emplace_back(worker);

  std::size_t written = 0;
  {
    std::unique_lock lock(mu);
    while (written < todo) {
      cv.wait(lock, [&] { return slots[written].has_value() || written >= error_at; });
      if (written >= error_at) break;
      CertRecord r = std::move(*slots[written]);
      slots[written].reset();
      lock.unlock();
      log << log_line(r);
      log.flush();
      if (opts.on_record) opts.on_record(r);
      done.push_back(std::move(r));
      ++written;
      lock.lock();
    }
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return done;
}

/// Loads everything named in the config and certifies the dataset.
inline std::vector<CertRecord> run_certification(const ExperimentConfig& config, const RunOptions& opts = {}) {
  config.validate();
  const auto ds = data::load_dataset(config.dataset);
  const auto h = build_handle(config, ds.image_shape());
  auto params = config.smoothing;
  params.seed = config.seed;
  return certify_dataset(*h, ds, params, config.log, config.max_points.value_or(ds.size()), opts);
}

// ---- curves --------------------------------------------------------------

struct CurvePoint {
  double radius = 0.0;
  double certified_accuracy = 0.0;
  double standard_accuracy = 0.0;
  std::size_t n = 0;
};

/// Certified accuracy at r = fraction of points predicted correctly with
/// radius >= r; abstentions never count. Standard accuracy ignores radius.
inline std::vector<CurvePoint> certification_curve(const std::vector<CertRecord>& results,
                                                   const std::vector<double>& grid) {
  if (grid.empty()) throw ArgumentError("radius grid is empty");
  if (results.empty()) throw ArgumentError("no certification results");
  const double n = static_cast<double>(results.size());
  std::size_t correct = 0;
  for (const auto& r : results) correct += r.correct() ? 1 : 0;
  std::vector<double> sorted = grid;
  std::sort(sorted.begin(), sorted.end());
  std::vector<CurvePoint> out;
  for (double radius : sorted) {
    std::size_t ok = 0;
    for (const auto& r : results) ok += r.correct() && r.cert.radius >= radius ? 1 : 0;
    out.push_back({radius, static_cast<double>(ok) / n, static_cast<double>(correct) / n, results.size()});
  }
  return out;
}

/// Certified accuracy at one radius.
inline double certified_accuracy(const std::vector<CertRecord>& results, double radius) {
  return certification_curve(results, {radius}).front().certified_accuracy;
}

inline std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "radius,certified_accuracy,standard_accuracy,n\n";
  for (const auto& p : curve) {
    out += format_number(p.radius) + "," + format_number(p.certified_accuracy) + "," +
           format_number(p.standard_accuracy) + "," + std::to_string(p.n) + "\n";
  }
  return out;
}

struct NamedCurve {
  std::string name;
  std::vector<CurvePoint> curve;
};

/// One column of certified accuracy per curve plus their pointwise best.
inline std::string compare_csv(const std::vector<NamedCurve>& curves) {
  if (curves.empty()) throw ArgumentError("nothing to compare");
  const auto& grid = curves.front().curve;
  for (const auto& c : curves) {
    if (c.curve.size() != grid.size()) throw ArgumentError("curves use different radius grids");
    for (std::size_t i = 0; i < grid.size(); ++i) {
      if (c.curve[i].radius != grid[i].radius) throw ArgumentError("curves use different radius grids");
    }
  }
  std::string out = "radius";
  for (const auto& c : curves) out += "," + c.name;
  out += ",best\n";
  for (std::size_t i = 0; i < grid.size(); ++i) {
    out += format_number(grid[i].radius);
    double best = 0.0;
    for (const auto& c : curves) {
      out += "," + format_number(c.curve[i].certified_accuracy);
      best = std::max(best, c.curve[i].certified_accuracy);
    }
    out += "," + format_number(best) + "\n";
  }
  return out;
}

}  // namespace dsmooth::harness
