// dsmooth command-line driver.
//
//   dsmooth gen-data --out train.dsk --per-class 500 --seed 1
//   dsmooth train-classifier --data train.dsk --out f.dsmk
//   dsmooth train-denoiser --data train.dsk --objective stab --surrogate f.dsmk --out d.dsmk
//   dsmooth certify --config run.json
//   dsmooth curve --log run.jsonl --sigma 0.25
//   dsmooth serve --model f.dsmk --port 8080
//   dsmooth compare --log stab=a.jsonl --log mse=b.jsonl --sigma 0.25
//
// Exit status: 0 success, 1 usage error, 2 runtime error.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"

#include "dsmooth/harness.hpp"

using namespace dsmooth;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

void write_or_print(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    io::write_text(path, text);
  }
}

std::vector<double> grid_from(const std::vector<double>& explicit_grid, double sigma) {
  return explicit_grid.empty() ? harness::default_radius_grid(sigma) : explicit_grid;
}

classifiers::LabelMap parse_labels(const std::string& spec, std::size_t num_classes) {
  if (spec.empty()) return classifiers::LabelMap::numbered(num_classes);
  std::vector<std::string> names;
  std::size_t start = 0;
  while (start <= spec.size()) {
    const auto comma = spec.find(',', start);
    names.push_back(spec.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (names.size() != num_classes) {
    throw ArgumentError("label list has " + std::to_string(names.size()) + " names, model has " +
                        std::to_string(num_classes) + " classes");
  }
  return classifiers::LabelMap(names, false);
}

training::StepHook epoch_printer(bool quiet) {
  if (quiet) return {};
  return [last = std::size_t(-1)](const training::StepInfo& s) mutable {
    if (s.epoch != last) {
      std::fprintf(stderr, "epoch %zu\n", s.epoch);
      last = s.epoch;
    }
  };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Denoised randomized smoothing toolkit"};
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  bool quiet = false;

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic DSK1 dataset");
  std::string gen_out;
  data::SyntheticSpec spec;
  std::size_t side = 8;
  gen->add_option("--out", gen_out, "Output path")->required();
  gen->add_option("--per-class", spec.per_class, "Images per class")->capture_default_str();
  gen->add_option("--classes", spec.num_classes, "Number of classes (2-6)")->capture_default_str();
  gen->add_option("--size", side, "Image side length")->capture_default_str();
  gen->add_option("--seed", seed, "Random seed")->capture_default_str();

  // train-classifier
  auto* tc = app.add_subcommand("train-classifier", "Train a small CNN classifier");
  std::string tc_data, tc_out;
  training::ClassifierPlan cplan;
  tc->add_option("--data", tc_data, "Training dataset")->required();
  tc->add_option("--out", tc_out, "Output model path")->required();
  tc->add_option("--epochs", cplan.epochs)->capture_default_str();
  tc->add_option("--width1", cplan.width1)->capture_default_str();
  tc->add_option("--width2", cplan.width2)->capture_default_str();
  tc->add_option("--batch", cplan.batch_size)->capture_default_str();
  tc->add_option("--seed", seed)->capture_default_str();
  tc->add_flag("--quiet", quiet);

  // train-denoiser
  auto* td = app.add_subcommand("train-denoiser", "Train a denoiser (mse, stab, clf, stab+mse)");
  std::string td_data, td_out, td_objective = "mse", td_init, td_schedule;
  std::vector<std::string> td_surrogates;
  double td_sigma = 0.25;
  std::optional<std::size_t> td_epochs;
  std::size_t td_batch = 64;
  td->add_option("--data", td_data, "Training dataset")->required();
  td->add_option("--out", td_out, "Output checkpoint path")->required();
  td->add_option("--objective", td_objective)->capture_default_str();
  td->add_option("--sigma", td_sigma)->capture_default_str();
  td->add_option("--epochs", td_epochs);
  td->add_option("--batch", td_batch)->capture_default_str();
  td->add_option("--schedule", td_schedule, "Optimizer schedule as a JSON file");
  td->add_option("--surrogate", td_surrogates, "Surrogate classifier model (repeatable)");
  td->add_option("--init", td_init, "MSE checkpoint to fine-tune (stab+mse)");
  td->add_option("--seed", seed)->capture_default_str();
  td->add_flag("--quiet", quiet);

  // certify
  auto* cert = app.add_subcommand("certify", "Certify a dataset from a JSON config");
  std::string cert_config;
  std::optional<std::size_t> cert_workers, cert_stop;
  std::optional<std::uint64_t> cert_seed;
  bool cert_fresh = false;
  cert->add_option("--config", cert_config)->required();
  cert->add_option("--workers", cert_workers, "Worker threads (DSK_WORKERS overrides)");
  cert->add_option("--stop-after", cert_stop, "Stop after this many points have been logged");
  cert->add_option("--seed", cert_seed, "Override the config seed");
  cert->add_flag("--fresh", cert_fresh, "Discard an existing log instead of resuming");

  // curve
  auto* curve = app.add_subcommand("curve", "Certified accuracy curve from a result log");
  std::string curve_log, curve_out;
  double curve_sigma = 0.25;
  std::vector<double> curve_grid;
  curve->add_option("--log", curve_log)->required();
  curve->add_option("--sigma", curve_sigma, "Noise level for the default grid")->capture_default_str();
  curve->add_option("--grid", curve_grid, "Explicit radii");
  curve->add_option("--out", curve_out, "CSV path (default stdout)");
  curve->add_option("--seed", seed, "Unused; accepted for uniformity");

  // serve
  auto* serve = app.add_subcommand("serve", "Serve a classifier over HTTP");
  std::string serve_model, serve_host = "127.0.0.1", serve_labels;
  int serve_port = 8080;
  serve->add_option("--model", serve_model)->required();
  serve->add_option("--host", serve_host)->capture_default_str();
  serve->add_option("--port", serve_port, "0 picks a free port")->capture_default_str();
  serve->add_option("--labels", serve_labels, "Comma-separated class names");
  serve->add_option("--seed", seed, "Unused; accepted for uniformity");

  // compare
  auto* cmp = app.add_subcommand("compare", "Overlay several result logs into one CSV");
  std::vector<std::string> cmp_logs;
  std::string cmp_out;
  double cmp_sigma = 0.25;
  std::vector<double> cmp_grid;
  cmp->add_option("--log", cmp_logs, "name=path (repeatable)")->required();
  cmp->add_option("--sigma", cmp_sigma)->capture_default_str();
  cmp->add_option("--grid", cmp_grid);
  cmp->add_option("--out", cmp_out);
  cmp->add_option("--seed", seed, "Unused; accepted for uniformity");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    (void)app.exit(e);
    return kUsage;
  }

  try {
    if (*gen) {
      spec.image_shape = {1, side, side};
      data::save_dataset(data::make_synthetic_dataset(spec, seed), gen_out);
    } else if (*tc) {
      const auto ds = data::load_dataset(tc_data);
      cplan.seed = seed;
      auto model = training::train_classifier(ds, cplan, epoch_printer(quiet));
      if (!quiet) {
        std::fprintf(stderr, "train accuracy %.4f\n", training::accuracy(classifiers::LocalClassifier(model), ds));
      }
      nn::save_model(model, tc_out);
    } else if (*td) {
      const auto ds = data::load_dataset(td_data);
      auto plan = training::TrainPlan::preset(training::parse_objective(td_objective), td_sigma, seed);
      if (td_epochs) {
        plan.epochs = *td_epochs;
        plan.schedule = training::default_schedule(plan.objective, plan.epochs);
      }
      if (!td_schedule.empty()) plan.schedule = training::schedule_from_json(nlohmann::json::parse(io::read_text(td_schedule)));
      plan.batch_size = td_batch;
      if (!td_init.empty()) plan.init_checkpoint = td_init;
      std::vector<training::Surrogate> surrogates;
      for (const auto& p : td_surrogates) {
        surrogates.push_back(std::make_shared<const classifiers::LocalClassifier>(nn::load_model(p)));
      }
      const auto r = training::train_denoiser(ds, plan, surrogates, epoch_printer(quiet));
      training::save_checkpoint(r.checkpoint(), td_out);
      if (!quiet && !r.meta.epoch_loss.empty()) std::fprintf(stderr, "final loss %.6g\n", r.meta.epoch_loss.back());
    } else if (*cert) {
      auto config = harness::ExperimentConfig::load(cert_config);
      if (cert_seed) {
        config.seed = *cert_seed;
        config.smoothing.seed = *cert_seed;
      }
      if (cert_fresh) std::remove(config.log.c_str());
      harness::RunOptions opts;
      opts.workers = cert_workers;
      opts.stop_after = cert_stop;
      const auto results = harness::run_certification(config, opts);
      if (config.curve) {
        io::write_text(*config.curve, harness::curve_csv(harness::certification_curve(results, config.radius_grid)));
      }
      std::fprintf(stderr, "%zu points, certified accuracy at %g: %.4f\n", results.size(),
                   harness::mid_grid_radius(config.smoothing.sigma),
                   harness::certified_accuracy(results, harness::mid_grid_radius(config.smoothing.sigma)));
    } else if (*curve) {
      const auto results = harness::read_log(curve_log);
      write_or_print(harness::curve_csv(harness::certification_curve(results, grid_from(curve_grid, curve_sigma))),
                     curve_out);
    } else if (*serve) {
      auto model = nn::load_model(serve_model);
      auto local = std::make_shared<const classifiers::LocalClassifier>(std::move(model));
      const auto labels = parse_labels(serve_labels, local->num_classes());
      classifiers::ClassifierServer server(local, labels);
      const int port = server.bind(serve_host, serve_port);
      std::printf("listening on http://%s:%d\n", serve_host.c_str(), port);
      std::fflush(stdout);
      server.run();
    } else if (*cmp) {
      const auto grid = grid_from(cmp_grid, cmp_sigma);
      std::vector<harness::NamedCurve> curves;
      for (const auto& entry : cmp_logs) {
        const auto eq = entry.find('=');
        if (eq == std::string::npos || eq == 0) {
          std::fprintf(stderr, "--log expects name=path, got '%s'\n", entry.c_str());
          return kUsage;
        }
        curves.push_back({entry.substr(0, eq), harness::certification_curve(harness::read_log(entry.substr(eq + 1)), grid)});
      }
      write_or_print(harness::compare_csv(curves), cmp_out);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return 0;
}
