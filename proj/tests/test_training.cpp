#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "dsmooth/remote.hpp"
#include "dsmooth/training.hpp"

namespace dsmooth::training {
namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("dsmooth_test_" + name)).string();
}

data::Dataset small_data(std::size_t per_class, std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.per_class = per_class;
  return data::make_synthetic_dataset(spec, seed);
}

// Shared small classifier: trained once, reused read-only.
const Surrogate& shared_surrogate() {
  static const Surrogate f = [] {
    ClassifierPlan plan;
    plan.epochs = 8;
    plan.seed = 5;
    return std::make_shared<const LocalClassifier>(train_classifier(small_data(50, 1), plan));
  }();
  return f;
}

// Same images, labels replaced by label(i) = (f(x_i) + shift) mod C.
data::Dataset relabel(const data::Dataset& ds, const LocalClassifier& f, int shift) {
  data::Dataset out(ds.image_shape(), ds.num_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int p = f.classify(ds.image(i).reshaped(batched(1, ds.image_shape())))[0];
    out.add(ds.pixels(i), (p + shift) % static_cast<int>(ds.num_classes()));
  }
  return out;
}

TrainPlan quick_plan(Objective o, std::size_t epochs, std::uint64_t seed = 7) {
  auto p = TrainPlan::preset(o, 0.25, seed);
  p.epochs = epochs;
  p.schedule = default_schedule(o, epochs);
  return p;
}

TEST(Objective, Names) {
  for (auto o : {Objective::Mse, Objective::Stab, Objective::Clf, Objective::StabFromMse}) {
    EXPECT_EQ(parse_objective(to_string(o)), o);
  }
  EXPECT_THROW((void)parse_objective("l1"), ConfigError);
}

TEST(Schedule, JsonRoundTrip) {
  const auto s = default_schedule(Objective::Stab, 60);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[1].start_epoch, 30u);
  EXPECT_EQ(s[1].drop_every, 20u);
  const auto back = schedule_from_json(schedule_to_json(s));
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].kind, nn::OptimizerKind::Sgd);
  EXPECT_EQ(back[1].lr, s[1].lr);
  EXPECT_THROW((void)schedule_from_json(nlohmann::json::parse(R"([{"optimizer":"adam","lr":1,"warmup":3}])")),
               ConfigError);
}

TEST(TrainMse, ZeroEpochsKeepsInitialization) {
  const auto ds = small_data(5, 2);
  const auto plan = quick_plan(Objective::Mse, 0);
  const auto r = train_mse(ds, plan);
  EXPECT_EQ(r.model.hash(), detail::fresh_denoiser(ds, plan.seed).hash());
  EXPECT_TRUE(r.meta.epoch_loss.empty());
}

TEST(TrainMse, LearnsToZeroBlankImages) {
  data::Dataset blank({1, 8, 8}, 2);
  for (int i = 0; i < 64; ++i) blank.add(std::vector<double>(64, 0.0), i % 2);
  auto plan = quick_plan(Objective::Mse, 60);
  plan.batch_size = 8;
  const auto r = train_mse(blank, plan);
  // Identity denoiser scores sigma^2 * d = 4.0 here.
  EXPECT_GT(r.meta.epoch_loss.front(), 1.0);
  EXPECT_LT(r.meta.epoch_loss.back(), 0.2);
}

TEST(TrainMse, BeatsIdentityOnHeldOutNoise) {
  const auto ds = small_data(100, 3);
  const auto r = train_mse(ds, quick_plan(Objective::Mse, 15));
  const auto held = small_data(25, 4);
  std::vector<std::size_t> idx(held.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Tensor clean = held.batch(idx);
  Tensor noisy = clean;
  rng::GaussianStream noise(123, 0);
  std::vector<double> delta(held.image_size());
  for (std::size_t k = 0; k < held.size(); ++k) {
    noise.fill(k, delta, 0.25);
    for (std::size_t i = 0; i < delta.size(); ++i) noisy.row(k)[i] += delta[i];
  }
  const double identity = nn::mse_loss(noisy, clean).value;
  EXPECT_NEAR(identity, 0.0625 * 64, 0.4);
  EXPECT_LT(nn::mse_loss(r.model.forward(noisy), clean).value, 0.5 * identity);
}

TEST(TrainMse, Deterministic) {
  const auto ds = small_data(10, 5);
  const auto plan = quick_plan(Objective::Mse, 2);
  EXPECT_EQ(train_mse(ds, plan).model.hash(), train_mse(ds, plan).model.hash());
  EXPECT_NE(train_mse(ds, plan).model.hash(), train_mse(ds, quick_plan(Objective::Mse, 2, 8)).model.hash());
}

TEST(TrainMse, EmptyDataset) {
  const data::Dataset empty({1, 8, 8}, 4);
  EXPECT_THROW((void)train_mse(empty, quick_plan(Objective::Mse, 1)), DataError);
}

TEST(TrainingNoise, FreshEveryEpoch) {
  std::vector<double> e0(64), e1(64), again(64);
  training_noise(1, 0, 0, e0, 0.25);
  training_noise(1, 1, 0, e1, 0.25);
  training_noise(1, 0, 0, again, 0.25);
  EXPECT_NE(e0, e1);
  EXPECT_EQ(e0, again);
}

TEST(TrainStab, SurrogateIsFrozen) {
  const auto& f = shared_surrogate();
  const auto before = f->model().hash();
  const auto r = train_stab(small_data(10, 6), quick_plan(Objective::Stab, 2), {f});
  EXPECT_EQ(f->model().hash(), before);
  ASSERT_EQ(r.meta.surrogate_hashes.size(), 1u);
  EXPECT_EQ(r.meta.surrogate_hashes[0], hex_hash(before));
}

TEST(TrainStab, MatchesClfWhenPseudoLabelsAreTrue) {
  const auto& f = shared_surrogate();
  const auto ds = relabel(small_data(10, 7), *f, 0);
  std::vector<double> stab, clf;
  const auto a = train_stab(ds, quick_plan(Objective::Stab, 3), {f}, [&](const StepInfo& s) { stab.push_back(s.loss); });
  const auto b = train_clf(ds, quick_plan(Objective::Clf, 3), {f}, [&](const StepInfo& s) { clf.push_back(s.loss); });
  ASSERT_FALSE(stab.empty());
  EXPECT_EQ(stab, clf);
  EXPECT_EQ(a.model.hash(), b.model.hash());
}

TEST(TrainClf, DivergesFromStabWithWrongLabels) {
  const auto& f = shared_surrogate();
  const auto ds = relabel(small_data(10, 7), *f, 1);
  double stab = 0.0, clf = 0.0;
  (void)train_stab(ds, quick_plan(Objective::Stab, 1), {f}, [&](const StepInfo& s) {
    if (s.step == 0) stab = s.loss;
  });
  (void)train_clf(ds, quick_plan(Objective::Clf, 1), {f}, [&](const StepInfo& s) {
    if (s.step == 0) clf = s.loss;
  });
  EXPECT_NE(stab, clf);
}

TEST(TrainStab, RoundRobinSurrogates) {
  const auto set = build_surrogate_set(3, small_data(10, 8), 9, [] {
    ClassifierPlan p;
    p.epochs = 1;
    return p;
  }());
  std::vector<std::size_t> used;
  auto plan = quick_plan(Objective::Stab, 2);
  plan.batch_size = 8;
  (void)train_stab(small_data(10, 8), plan, set.classifiers, [&](const StepInfo& s) {
    EXPECT_EQ(s.surrogate, s.step % 3);
    used.push_back(s.surrogate);
  });
  EXPECT_EQ(std::set<std::size_t>(used.begin(), used.end()).size(), 3u);
}

TEST(TrainStab, NeedsSurrogates) {
  EXPECT_THROW((void)train_stab(small_data(5, 1), quick_plan(Objective::Stab, 1), {}), ConfigError);
  EXPECT_THROW((void)train_stab(small_data(5, 1), quick_plan(Objective::Mse, 1), {shared_surrogate()}), ConfigError);
}

TEST(TrainStab, RemoteSurrogateRejected) {
  const classifiers::ClassifierHandle remote = std::make_shared<const classifiers::RemoteClassifier>(
      classifiers::RemoteConfig{"http://127.0.0.1:1"}, classifiers::LabelMap::numbered(4), Shape{1, 8, 8});
  EXPECT_THROW((void)as_surrogates({remote}), ConfigError);
  EXPECT_EQ(as_surrogates({shared_surrogate()}).size(), 1u);
}

TEST(Finetune, ZeroEpochsReturnsCheckpoint) {
  const auto ds = small_data(5, 10);
  const auto mse = train_mse(ds, quick_plan(Objective::Mse, 1));
  const auto ft = finetune_stab_from_mse(ds, quick_plan(Objective::StabFromMse, 0), {shared_surrogate()},
                                         mse.checkpoint());
  EXPECT_EQ(ft.model.hash(), mse.model.hash());
  EXPECT_TRUE(ft.meta.parent_checkpoint.has_value());
}

TEST(Finetune, SigmaMismatch) {
  const auto ds = small_data(5, 10);
  const auto mse = train_mse(ds, quick_plan(Objective::Mse, 0));
  auto plan = quick_plan(Objective::StabFromMse, 1);
  plan.sigma = 0.5;
  EXPECT_THROW((void)finetune_stab_from_mse(ds, plan, {shared_surrogate()}, mse.checkpoint()), CheckpointError);
  auto stab = mse.checkpoint();
  stab.meta.objective = Objective::Stab;
  EXPECT_THROW((void)finetune_stab_from_mse(ds, quick_plan(Objective::StabFromMse, 1), {shared_surrogate()}, stab),
               CheckpointError);
}

TEST(Finetune, FromDisk) {
  const auto ds = small_data(5, 10);
  const auto mse = train_mse(ds, quick_plan(Objective::Mse, 1));
  const auto path = temp_path("mse.dsmk");
  save_checkpoint(mse.checkpoint(), path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.model.hash(), mse.model.hash());
  EXPECT_EQ(back.meta.sigma, 0.25);
  EXPECT_EQ(back.meta.epoch_loss, mse.meta.epoch_loss);
  auto plan = quick_plan(Objective::StabFromMse, 1);
  plan.init_checkpoint = path;
  const auto ft = train_denoiser(ds, plan, {shared_surrogate()});
  EXPECT_EQ(*ft.meta.parent_checkpoint, path);
  plan.init_checkpoint.reset();
  EXPECT_THROW((void)train_denoiser(ds, plan, {shared_surrogate()}), ConfigError);
  std::remove(path.c_str());
  std::remove(sidecar_path(path).c_str());
}

TEST(Surrogates, DistinctAndAccurate) {
  const auto ds = small_data(100, 11);
  ClassifierPlan p;
  p.epochs = 15;
  const auto one = build_surrogate_set(1, ds, 3, p);
  EXPECT_EQ(one.classifiers.size(), 1u);
  const auto set = build_surrogate_set(3, ds, 3, p);
  std::set<std::uint64_t> hashes;
  for (const auto& c : set.classifiers) hashes.insert(c->model().hash());
  EXPECT_EQ(hashes.size(), 3u);
  for (double a : set.clean_accuracy) EXPECT_GE(a, 0.9);
  EXPECT_THROW((void)build_surrogate_set(0, ds, 3, p), ArgumentError);
}

}  // namespace
}  // namespace dsmooth::training
