// Acceptance checks 1-8. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "dsmooth/harness.hpp"

#include "../gradcheck.hpp"
#include "../oracles.hpp"

using namespace dsmooth;
using smoothing::SmoothingParams;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

void note(const char* fmt, auto... args) {
  std::fprintf(stderr, fmt, args...);
  std::fputc('\n', stderr);
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double phi(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// Bisection on erfc, independent of the library quantile.
double probit_oracle(double p) {
  double lo = -40.0, hi = 40.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (phi(mid) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<double> radii(const std::vector<harness::CertRecord>& rs) {
  std::vector<double> out;
  for (const auto& r : rs) out.push_back(r.cert.radius);
  return out;
}

// ---- 1 --------------------------------------------------------------------

Outcome soundness() {
  const Shape shape{1, 8, 8};
  rng::Rng gen(2024);
  std::vector<double> w(64), x(64);
  double wx = 0.0, norm2 = 0.0;
  for (std::size_t i = 0; i < 64; ++i) {
    w[i] = gen.normal();
    x[i] = gen.uniform();
    wx += w[i] * x[i];
    norm2 += w[i] * w[i];
  }
  const double sigma = 0.25;
  const double norm = std::sqrt(norm2);
  // Margin chosen so the smoothed probability of class 1 is exactly 0.9.
  const double bias = sigma * norm * probit_oracle(0.9) - wx;
  const testing::LinearOracle h(shape, w, bias);
  Tensor input(shape);
  std::copy(x.begin(), x.end(), input.data().begin());
  const double true_radius = h.margin(input.data()) / norm;

  SmoothingParams p;
  p.sigma = sigma;
  p.n0 = 100;
  p.n = 10000;
  p.alpha = 0.001;
  p.batch = 10000;
  p.seed = 77;
  const int runs = 1000;
  int over = 0, wrong = 0;
  std::vector<double> rs;
  for (int run = 0; run < runs; ++run) {
    const auto c = smoothing::certify(h, input, p, static_cast<std::uint64_t>(run));
    if (c.predicted && *c.predicted != 1) ++wrong;
    if (c.radius > true_radius) ++over;
    rs.push_back(c.radius);
  }
  const double rate = static_cast<double>(over) / runs;
  const double med = median(rs);
  return {rate <= 0.004 && med >= 0.7 * true_radius && wrong == 0,
          fmt("true radius %.4f, over-radius rate %.4f (<= 0.004), median %.4f = %.1f%% of true (>= 70%%), "
              "wrong class %d",
              true_radius, rate, med, 100.0 * med / true_radius, wrong)};
}

// ---- 2 --------------------------------------------------------------------

Outcome coverage() {
  const int draws = 100000;
  std::mt19937_64 engine(12345);
  double worst_excess = -1.0;
  std::string worst;
  bool pass = true;
  for (double alpha : {0.001, 0.05}) {
    const numerics::ConfidenceLevel level(alpha);
    const double se = std::sqrt(alpha * (1.0 - alpha) / draws);
    for (std::uint64_t n : {50u, 500u}) {
      for (int pi = 1; pi <= 9; ++pi) {
        const double p = pi / 10.0;
        std::vector<double> bound(n + 1);
        for (std::uint64_t k = 0; k <= n; ++k) bound[k] = numerics::clopper_pearson_lower(k, n, level).value();
        std::binomial_distribution<std::uint64_t> binom(n, p);
        int violations = 0;
        for (int d = 0; d < draws; ++d) violations += bound[binom(engine)] > p ? 1 : 0;
        const double rate = static_cast<double>(violations) / draws;
        const double limit = alpha + 3.0 * se;
        if (rate > limit) pass = false;
        if (rate - limit > worst_excess) {
          worst_excess = rate - limit;
          worst = fmt("alpha=%g n=%llu p=%.1f rate %.5f limit %.5f", alpha, static_cast<unsigned long long>(n), p,
                      rate, limit);
        }
      }
    }
  }
  return {pass, "36 cells, tightest: " + worst};
}

// ---- 3 --------------------------------------------------------------------

Outcome closed_forms() {
  double cp_err = 0.0, radius_err = 0.0, probit_err = 0.0;
  for (double alpha : {0.001, 0.01, 0.05, 0.3}) {
    for (std::uint64_t n : {1u, 2u, 10u, 100u, 1000u, 10000u, 100000u}) {
      const double got = numerics::clopper_pearson_lower(n, n, numerics::ConfidenceLevel(alpha)).value();
      cp_err = std::max(cp_err, std::abs(got - std::pow(alpha, 1.0 / static_cast<double>(n))));
    }
  }
  for (int i = 0; i < 50; ++i) {
    const double p = 0.5 + 0.49 * (i + 1) / 51.0;
    for (double sigma : {0.12, 0.25, 0.5, 1.0}) {
      const double one = smoothing::certified_radius_one_sided(numerics::Probability(p), sigma);
      const double two =
          smoothing::certified_radius_two_sided(numerics::Probability(p), numerics::Probability(1.0 - p), sigma);
      radius_err = std::max(radius_err, std::abs(one - two));
    }
  }
  for (int i = 0; i <= 12000; ++i) {
    const double z = -6.0 + i * 0.001;
    probit_err = std::max(probit_err, std::abs(numerics::std_normal_quantile(numerics::std_normal_cdf(z)) - z));
  }
  return {cp_err <= 1e-9 && radius_err <= 1e-10 && probit_err < 1e-8,
          fmt("CP(n,n) max err %.2e, one- vs two-sided radius max err %.2e, probit round trip max err %.2e", cp_err,
              radius_err, probit_err)};
}

// ---- 4 --------------------------------------------------------------------

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo, double hi) {
  Tensor t(std::move(shape));
  rng::Rng gen(seed);
  for (auto& v : t.data()) v = gen.uniform(lo, hi);
  return t;
}

Outcome gradients() {
  struct Case {
    std::string name;
    nn::Architecture arch;
    Shape batch;
    double lo = -1.0;  // images live in [0,1]
  };
  auto single = [](Shape in, nn::Layer layer) {
    nn::Architecture a;
    a.input = std::move(in);
    a.layers = {std::move(layer)};
    return a;
  };
  std::vector<Case> cases = {
      {"conv3x3", single({2, 6, 6}, nn::Conv2D{3, 2, 4, 1}), {3, 2, 6, 6}},
      {"conv1x1", single({3, 5, 5}, nn::Conv2D{1, 3, 2, 0}), {2, 3, 5, 5}},
      {"linear", single({9}, nn::Linear{9, 5}), {4, 9}},
      {"relu", single({3, 4, 4}, nn::ReLU{}), {2, 3, 4, 4}},
      {"global-avg-pool", single({3, 4, 5}, nn::GlobalAvgPool{}), {2, 3, 4, 5}},
      {"denoiser", nn::dncnn_denoiser({1, 8, 8}), {2, 1, 8, 8}, 0.0},
      {"classifier", nn::conv_classifier({1, 8, 8}, 4), {2, 1, 8, 8}, 0.0},
  };
  bool pass = true;
  std::string detail;
  std::uint64_t seed = 1;
  for (auto& c : cases) {
    nn::Model m(c.arch, seed * 31);
    for (auto& p : m.params()) {
      if (p.name.find("bias") != std::string::npos) {
        rng::Rng g(seed);
        for (auto& v : p.value.data()) v = g.uniform(-0.2, 0.2);
      }
    }
    const auto r = testing::gradient_check(m, random_tensor(c.batch, seed * 7, c.lo, 1.0), 1000, seed);
    if (r.probes < 1000 || !(r.max_rel_error < 1e-4)) pass = false;
    detail += fmt("%s %d probes %.1e; ", c.name.c_str(), r.probes, r.max_rel_error);
    ++seed;
  }
  detail.resize(detail.size() - 2);
  return {pass, detail};
}

// ---- shared desk benchmark for 5-8 ------------------------------------------

constexpr double kSigma = 0.25;
constexpr std::uint64_t kSeed = 7;

template <class F>
void timed(const std::string& what, F&& fn) {
  const auto t0 = Clock::now();
  fn();
  note("  %s: %.1f s", what.c_str(), std::chrono::duration<double>(Clock::now() - t0).count());
}

template <class F>
auto timed_value(const std::string& what, F&& fn) {
  const auto t0 = Clock::now();
  auto v = fn();
  note("  %s: %.1f s", what.c_str(), std::chrono::duration<double>(Clock::now() - t0).count());
  return v;
}

class Bench {
 public:
  explicit Bench(fs::path dir) : dir_(std::move(dir)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }

  const data::Dataset& train() {
    if (!train_) {
      data::SyntheticSpec spec;
      spec.per_class = 500;
      train_ = data::make_synthetic_dataset(spec, 101);
    }
    return *train_;
  }

  const data::Dataset& test() {
    if (!test_) {
      data::SyntheticSpec spec;
      spec.per_class = 125;
      test_ = data::make_synthetic_dataset(spec, 202);
    }
    return *test_;
  }

  // Surrogates 0..2; surrogate 0 is the target classifier f.
  const training::SurrogateSet& surrogates() {
    if (!surrogates_) {
      timed("three classifiers", [&] { surrogates_ = training::build_surrogate_set(3, train(), kSeed); });
      for (double a : surrogates_->clean_accuracy) note("  train accuracy %.4f", a);
    }
    return *surrogates_;
  }
  training::Surrogate f() { return surrogates().classifiers[0]; }

  training::Surrogate held_out() {
    if (!held_out_) {
      timed("held-out classifier", [&] {
        held_out_ = training::build_surrogate_set(1, train(), kSeed, {}, 3).classifiers[0];
      });
    }
    return *held_out_;
  }

  const nn::Model& denoiser(const std::string& name) {
    auto it = denoisers_.find(name);
    if (it != denoisers_.end()) return it->second;
    training::TrainResult r = [&] {
      if (name == "mse") {
        return timed_value("MSE denoiser", [&] {
          return training::train_mse(train(), training::TrainPlan::preset(training::Objective::Mse, kSigma, 11));
        });
      }
      if (name == "stab+mse") {
        const auto parent = training::Checkpoint{denoiser("mse"), mse_meta_};
        return timed_value("Stab+MSE denoiser", [&] {
          return training::finetune_stab_from_mse(
              train(), training::TrainPlan::preset(training::Objective::StabFromMse, kSigma, 12), {f()}, parent);
        });
      }
      if (name == "stab") {
        return timed_value("Stab denoiser (k=1)", [&] {
          return training::train_stab(train(), training::TrainPlan::preset(training::Objective::Stab, kSigma, 13),
                                      {f()});
        });
      }
      if (name == "stab-k3") {
        return timed_value("Stab denoiser (k=3)", [&] {
          return training::train_stab(train(), training::TrainPlan::preset(training::Objective::Stab, kSigma, 13),
                                      surrogates().classifiers);
        });
      }
      throw ArgumentError("unknown denoiser " + name);
    }();
    if (name == "mse") mse_meta_ = r.meta;
    return denoisers_.emplace(name, std::move(r.model)).first->second;
  }

  static SmoothingParams params(std::uint64_t n) {
    SmoothingParams p;
    p.sigma = kSigma;
    p.n0 = 100;
    p.n = n;
    p.alpha = 0.001;
    p.batch = std::min<std::uint64_t>(n, 1000);
    p.seed = 5;
    return p;
  }

  // Certifies the first `count` test points; memoized by key.
  const std::vector<harness::CertRecord>& certify(const std::string& key, const classifiers::Classifier& h,
                                                  std::uint64_t n, std::size_t count) {
    auto it = results_.find(key);
    if (it != results_.end()) return it->second;
    auto rs = timed_value("certify " + key, [&] {
      return harness::certify_dataset(h, test(), params(n), path(key + ".jsonl"), count);
    });
    return results_.emplace(key, std::move(rs)).first->second;
  }

  classifiers::ClassifierHandle pipeline(const std::string& denoiser_name, training::Surrogate target) {
    classifiers::ClassifierHandle base = target;
    if (denoiser_name == "none") return base;
    return classifiers::make_denoised(denoiser(denoiser_name), base);
  }

  [[nodiscard]] std::string path(const std::string& name) const { return (dir_ / name).string(); }

 private:
  fs::path dir_;
  std::optional<data::Dataset> train_, test_;
  std::optional<training::SurrogateSet> surrogates_;
  std::optional<training::Surrogate> held_out_;
  std::map<std::string, nn::Model> denoisers_;
  training::CheckpointMeta mse_meta_;
  std::map<std::string, std::vector<harness::CertRecord>> results_;
};

constexpr std::size_t kTestPoints = 500;

// ---- 5 --------------------------------------------------------------------

Outcome orderings(Bench& b) {
  const double r = harness::mid_grid_radius(kSigma);
  std::map<std::string, double> acc;
  for (const std::string name : {"none", "mse", "stab+mse", "stab"}) {
    const auto h = b.pipeline(name, b.f());
    acc[name] = harness::certified_accuracy(b.certify(name, *h, 1000, kTestPoints), r);
  }
  const double floor = std::min({acc["mse"], acc["stab+mse"], acc["stab"]});
  const bool pass = acc["none"] < acc["mse"] && acc["mse"] <= acc["stab+mse"] && acc["stab+mse"] <= acc["stab"] &&
                    floor - acc["none"] >= 0.05;
  return {pass, fmt("certified accuracy at r=%.2f over %zu points: none %.3f < mse %.3f <= stab+mse %.3f <= stab %.3f",
                    r, kTestPoints, acc["none"], acc["mse"], acc["stab+mse"], acc["stab"])};
}

// ---- 6 --------------------------------------------------------------------

Outcome blackbox_and_transfer(Bench& b) {
  // (a) the wire protocol adds no semantics.
  const std::size_t wire_points = 100;
  auto local = std::dynamic_pointer_cast<const classifiers::LocalClassifier>(b.f());
  classifiers::ClassifierServer server(local, classifiers::LabelMap::numbered(4));
  const int port = server.bind("127.0.0.1", 0);
  server.start();
  const auto remote = std::make_shared<const classifiers::RemoteClassifier>(
      classifiers::RemoteConfig{"http://127.0.0.1:" + std::to_string(port)}, classifiers::LabelMap::numbered(4),
      b.test().image_shape());
  const auto blackbox = classifiers::make_denoised(b.denoiser("stab"), remote);
  const auto& whitebox = b.certify("stab", *b.pipeline("stab", b.f()), 1000, kTestPoints);
  const auto& wire = b.certify("stab-wire", *blackbox, 1000, wire_points);
  server.stop();
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < wire_points; ++i) {
    if (!(wire[i].cert == whitebox[i].cert) || wire[i].label != whitebox[i].label) ++mismatched;
  }

  // (b) transfer to a classifier none of the denoisers saw.
  const double r = harness::mid_grid_radius(kSigma);
  const auto g = b.held_out();
  const double none = harness::certified_accuracy(b.certify("heldout-none", *b.pipeline("none", g), 1000, kTestPoints), r);
  const double k1 = harness::certified_accuracy(b.certify("heldout-k1", *b.pipeline("stab", g), 1000, kTestPoints), r);
  const double k3 =
      harness::certified_accuracy(b.certify("heldout-k3", *b.pipeline("stab-k3", g), 1000, kTestPoints), r);
  const bool pass = mismatched == 0 && k3 > none && k3 >= k1;
  return {pass, fmt("(a) %zu/%zu certificates differ over the wire; (b) held-out classifier at r=%.2f: "
                    "none %.3f, k=1 %.3f, k=3 %.3f",
                    mismatched, wire_points, r, none, k1, k3)};
}

// ---- 7 --------------------------------------------------------------------

Outcome determinism(Bench& b) {
  const std::size_t points = 40;
  const auto h = b.pipeline("stab", b.f());
  const auto params = Bench::params(1000);
  std::string reference;
  bool identical = true;
  for (std::size_t w : {1, 4, 16}) {
    const auto log = b.path("workers" + std::to_string(w) + ".jsonl");
    harness::RunOptions opts;
    opts.workers = w;
    (void)harness::certify_dataset(*h, b.test(), params, log, points, opts);
    const auto bytes = io::read_text(log);
    if (reference.empty()) reference = bytes;
    identical = identical && bytes == reference;
  }

  // Kill after 15 points, resume; then tear the last line and resume again.
  const auto log = b.path("resumed.jsonl");
  harness::RunOptions stop;
  stop.workers = 4;
  stop.stop_after = 15;
  (void)harness::certify_dataset(*h, b.test(), params, log, points, stop);
  const bool partial = std::count(reference.begin(), reference.end(), '\n') == static_cast<long>(points) &&
                       io::read_text(log) == reference.substr(0, io::read_text(log).size());
  (void)harness::certify_dataset(*h, b.test(), params, log, points);
  const bool resumed = io::read_text(log) == reference;
  const auto cut = reference.find('\n', reference.size() / 2) + 25;
  io::write_text(log, reference.substr(0, cut));
  (void)harness::certify_dataset(*h, b.test(), params, log, points);
  const bool torn = io::read_text(log) == reference;
  return {identical && partial && resumed && torn,
          fmt("%zu points: workers 1/4/16 byte-identical %s; stop-at-15 prefix %s; resumed %s; torn-line resume %s",
              points, identical ? "yes" : "no", partial ? "ok" : "bad", resumed ? "identical" : "differs",
              torn ? "identical" : "differs")};
}

// ---- 8 --------------------------------------------------------------------

Outcome sample_budget(Bench& b) {
  const auto h = b.pipeline("stab", b.f());
  const double m100 = median(radii(b.certify("stab-n100", *h, 100, kTestPoints)));
  const double m1000 = median(radii(b.certify("stab", *h, 1000, kTestPoints)));
  return {m1000 >= m100, fmt("Stab pipeline, %zu points: median radius n=100 %.4f, n=1000 %.4f", kTestPoints, m100,
                             m1000)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  Bench bench(fs::temp_directory_path() / "dsmooth_acceptance");
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, soundness},
      {2, coverage},
      {3, closed_forms},
      {4, gradients},
      {5, [&] { return orderings(bench); }},
      {6, [&] { return blackbox_and_transfer(bench); }},
      {7, [&] { return determinism(bench); }},
      {8, [&] { return sample_budget(bench); }},
  };
  int failures = 0;
  for (const auto& [id, check] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("%s criterion %d: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
