#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "falldet/train.hpp"
#include "gradcheck.hpp"

using namespace falldet;
using falldet::testing::check_function;
using falldet::testing::random_tensor;

namespace {

double bce_oracle(const std::vector<double>& p, const std::vector<int>& y) {
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += y[i] ? -std::log(p[i]) : -std::log(1 - p[i]);
  return s / static_cast<double>(p.size());
}

ParamStore scalar_store(double v) {
  ParamStore s;
  s.add("theta", Tensor({1}, {v}));
  return s;
}

std::vector<SampleWindow> small_dataset(std::size_t subjects, std::uint64_t seed, std::size_t trials = 1) {
  SynthConfig cfg;
  cfg.subjects = subjects;
  cfg.trials_per_class = trials;
  cfg.seed = seed;
  return make_windows(synth_generate(cfg));
}

TrainConfig quick_config(std::size_t epochs, std::uint64_t seed) {
  TrainConfig c;
  c.max_epochs = epochs;
  c.patience = epochs - 1;
  c.seed = seed;
  return c;
}

}  // namespace

TEST_CASE("weighted BCE fixed points") {
  std::vector<int> one{1};
  CHECK(weighted_bce_value(std::vector<double>{1.0 - 1e-15}, one, {1, 1}) < 1e-11);
  CHECK(weighted_bce_value(std::vector<double>{0.5}, one, {1, 1}) == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  auto t = weighted_bce(Tensor({1, 1}, {0.5}), one, {1, 1});
  CHECK(t.item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  // Clamping keeps certain mistakes finite.
  CHECK(std::isfinite(weighted_bce(Tensor({1, 1}, {0.0}), one, {1, 1}).item()));
  CHECK(weighted_bce_value(std::vector<double>{0.0}, one, {1, 1}) ==
        doctest::Approx(-std::log(kProbabilityClamp)).epsilon(1e-12));
}

TEST_CASE("weighted BCE with unit weights equals the direct formula") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int c = 0; c < 50; ++c) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<double> p(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = u(rng);
      y[i] = static_cast<int>(rng() % 2);
    }
    const double oracle = bce_oracle(p, y);
    CHECK(std::abs(weighted_bce(Tensor({n, 1}, p), y, {1, 1}).item() - oracle) <= 1e-12 * (1 + oracle));
    CHECK(std::abs(weighted_bce_value(p, y, {1, 1}) - oracle) <= 1e-12 * (1 + oracle));
  }
}

TEST_CASE("weighted BCE applies the class weight of each label") {
  std::vector<double> p{0.3, 0.8};
  std::vector<int> y{0, 1};
  const double expect = -(0.6 * std::log(0.7) + 2.5 * std::log(0.8)) / 2;
  CHECK(weighted_bce_value(p, y, {0.6, 2.5}) == doctest::Approx(expect).epsilon(1e-14));
  CHECK(weighted_bce(Tensor({2, 1}, p), y, {0.6, 2.5}).item() == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("weighted BCE gradient matches finite differences") {
  std::mt19937_64 rng(8);
  auto p = random_tensor({9, 1}, rng, 0.05, 0.95);
  std::vector<int> y{1, 0, 0, 1, 1, 0, 1, 0, 1};
  auto report = check_function({p}, [&](const std::vector<Tensor>& in) { return weighted_bce(in[0], y, {0.7, 1.9}); });
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("weighted BCE rejects bad inputs") {
  std::vector<int> y{0, 1};
  CHECK_THROWS_AS(weighted_bce(Tensor({3, 1}, {0.1, 0.2, 0.3}), y, {1, 1}), ShapeError);
  CHECK_THROWS_AS(weighted_bce(Tensor({2}, {0.1, 0.2}), y, {1, 1}), ShapeError);
  std::vector<int> bad{0, 2};
  CHECK_THROWS_AS(weighted_bce(Tensor({2, 1}, {0.1, 0.2}), bad, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(weighted_bce_value(std::vector<double>{0.1, 0.2}, bad, {1, 1}), std::invalid_argument);
}

TEST_CASE("Adam: zero gradients leave parameters unchanged") {
  auto store = scalar_store(0.7);
  store.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
  AdamState state;
  TrainConfig c;
  std::vector<Tensor> grads{Tensor::zeros({1}), Tensor::zeros({2, 2})};
  for (int i = 0; i < 5; ++i) adam_step(store, grads, state, c);
  CHECK(store.get("theta")[0] == 0.7);
  CHECK(store.get("w").values() == std::vector<double>{1, 2, 3, 4});
  CHECK(state.t == 5);
}

TEST_CASE("Adam: first step moves by the learning rate") {
  auto store = scalar_store(0.0);
  AdamState state;
  TrainConfig c;
  c.learning_rate = 0.1;
  std::vector<Tensor> grads{Tensor({1}, {1.0})};
  adam_step(store, grads, state, c);
  CHECK(store.get("theta")[0] == doctest::Approx(-0.1).epsilon(1e-7));
}

TEST_CASE("Adam minimises theta^2 and matches an independent scalar loop") {
  auto store = scalar_store(1.0);
  AdamState state;
  TrainConfig c;
  c.learning_rate = 0.05;
  double theta = 1.0, m = 0, v = 0;
  for (int t = 1; t <= 100; ++t) {
    std::vector<Tensor> grads{Tensor({1}, {2 * store.get("theta")[0]})};
    adam_step(store, grads, state, c);
    const double g = 2 * theta;
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    theta -= 0.05 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
  }
  CHECK(std::abs(store.get("theta")[0]) < 0.05);
  CHECK(std::abs(store.get("theta")[0] - theta) < 1e-14);
}

TEST_CASE("Adam rejects misaligned gradients") {
  auto store = scalar_store(1.0);
  AdamState state;
  TrainConfig c;
  std::vector<Tensor> wrong_count{Tensor({1}, {1.0}), Tensor({1}, {1.0})};
  CHECK_THROWS_AS(adam_step(store, wrong_count, state, c), std::invalid_argument);
  std::vector<Tensor> wrong_shape{Tensor({2}, {1.0, 1.0})};
  CHECK_THROWS_AS(adam_step(store, wrong_shape, state, c), std::invalid_argument);
}

TEST_CASE("early stopping: two improvements then ten rising epochs") {
  EarlyStopping s(10, 1e-6);
  std::vector<double> val{1.0, 0.9};
  for (int i = 1; i <= 10; ++i) val.push_back(0.9 + 0.1 * i);
  std::size_t stopped = 0;
  for (std::size_t e = 1; e <= val.size(); ++e) {
    s.update(e, val[e - 1]);
    if (s.should_stop()) {
      stopped = e;
      break;
    }
  }
  CHECK(stopped == 12);
  CHECK(s.best_epoch() == 2);
  CHECK(s.best() == 0.9);
}

TEST_CASE("early stopping: steady improvement never stops; tiny gains do not count") {
  EarlyStopping s(10, 1e-6);
  for (std::size_t e = 1; e <= 250; ++e) {
    CHECK(s.update(e, 1.0 / static_cast<double>(e)));
    CHECK_FALSE(s.should_stop());
  }
  CHECK(s.best_epoch() == 250);

  EarlyStopping t(2, 1e-6);
  CHECK(t.update(1, 1.0));
  CHECK_FALSE(t.update(2, 1.0 - 5e-7));
  CHECK(t.update(3, 1.0 - 2e-6));
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), SpecError);
  c = {};
  c.patience = c.max_epochs;
  CHECK_THROWS_AS(c.validate(), SpecError);
  auto j = train_config_to_json(TrainConfig{});
  CHECK(train_config_from_json(j).max_epochs == 250);
  CHECK(train_config_from_json(nlohmann::json{{"batch_size", 8}}).batch_size == 8);
}

TEST_CASE("fit restores the best epoch bit-exactly and is deterministic") {
  const auto windows = small_dataset(4, 21);
  const auto plan = loso_plan(subjects_of(windows), 1, 0);
  const auto split = make_split(windows, plan[0]);
  auto cfg = quick_config(8, 5);
  cfg.patience = 3;

  ModelSpec spec;
  auto run = [&](std::vector<ParamStore>* snapshots) {
    auto model = Model::build(spec, 9);
    auto history = fit(model, split, cfg, [&](const EpochRecord&, const Model& m) {
      if (snapshots) snapshots->push_back(m.params().clone());
    });
    return std::pair{std::move(model), history};
  };

  std::vector<ParamStore> snapshots;
  auto [model, history] = run(&snapshots);
  REQUIRE(history.epochs.size() == snapshots.size());
  REQUIRE(history.epochs.front().epoch == 0);
  CHECK(model.params().same_values(snapshots[history.best_epoch]));

  double best_seen = std::numeric_limits<double>::infinity();
  for (const auto& e : history.epochs)
    if (e.epoch > 0) best_seen = std::min(best_seen, e.val_loss);
  CHECK(history.best_val_loss == best_seen);
  model.freeze();
  const auto val = gather(split.validation);
  CHECK(weighted_bce_value(model.predict(val.acc, val.gyro), val.labels, split.weights) == history.best_val_loss);

  auto [again, history2] = run(nullptr);
  CHECK(again.params().same_values(model.params()));
  REQUIRE(history2.epochs.size() == history.epochs.size());
  for (std::size_t i = 0; i < history.epochs.size(); ++i) {
    CHECK(history2.epochs[i].train_loss == history.epochs[i].train_loss);
    CHECK(history2.epochs[i].val_loss == history.epochs[i].val_loss);
  }
}

TEST_CASE("fit errors: empty split, frozen model, non-finite loss") {
  auto model = Model::build(ModelSpec{}, 1);
  DatasetSplit empty;
  CHECK_THROWS_AS(fit(model, empty, quick_config(3, 0)), DataError);

  auto windows = small_dataset(3, 2);
  auto split = make_split(windows, loso_plan(subjects_of(windows), 1, 0)[0]);
  auto bad = split;
  bad.train[0].acc[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(fit(model, bad, quick_config(3, 0)), DataError);

  auto& bias = model.params().get("head/dense2/bias");
  bias.mutable_data()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    fit(model, split, quick_config(3, 0));
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(e.epoch == 0);
  }
  model.freeze();
  CHECK_THROWS_AS(fit(model, split, quick_config(3, 0)), ModeError);
}

TEST_CASE("training loss falls below the epoch-0 loss (20 seeds)") {
  const auto windows = small_dataset(4, 33);
  const auto split = make_split(windows, loso_plan(subjects_of(windows), 1, 0)[0]);
  double sum_initial = 0, sum_median = 0;
  int below = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = Model::build(ModelSpec{}, seed);
    auto h = fit(model, split, quick_config(10, seed));
    std::vector<double> first;
    for (const auto& e : h.epochs)
      if (e.epoch >= 1 && e.epoch <= 10) first.push_back(e.train_loss);
    std::sort(first.begin(), first.end());
    const double median = first[first.size() / 2];
    sum_initial += h.epochs.front().train_loss;
    sum_median += median;
    below += median < h.epochs.front().train_loss;
  }
  MESSAGE("seeds with median below epoch 0: " << below << " / 20");
  CHECK(sum_median < sum_initial);
}

TEST_CASE("raising the fall weight does not lower fall recall (20 seeds)") {
  const auto windows = small_dataset(4, 44);
  const auto plan = loso_plan(subjects_of(windows), 1, 1)[0];
  auto split = make_split(windows, plan);
  const auto test = gather(split.test);
  double low = 0, high = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (double w1 : {0.5, 4.0}) {
      split.weights = {1.0, w1};
      auto model = Model::build(ModelSpec{}, seed);
      fit(model, split, quick_config(4, seed));
      model.freeze();
      const double recall = metrics(model.predict(test.acc, test.gyro), test.labels).fall.recall;
      (w1 < 1 ? low : high) += recall / 20;
    }
  }
  MESSAGE("mean fall recall: w1=0.5 -> " << low << ", w1=4 -> " << high);
  CHECK(high >= low);
}

TEST_CASE("run_loso: five subjects, each tested once") {
  const auto windows = small_dataset(5, 6);
  LosoConfig cfg;
  cfg.train = quick_config(2, 0);
  cfg.folds = 5;
  cfg.seed = 10;
  std::size_t callbacks = 0;
  auto results = run_loso(windows, cfg, [&](const FoldResult&) { ++callbacks; });
  REQUIRE(results.size() == 5);
  CHECK(callbacks == 5);
  std::set<std::string> tests;
  for (std::size_t k = 0; k < results.size(); ++k) {
    CHECK(results[k].ok);
    CHECK(results[k].plan.index == k);
    CHECK(results[k].seed == 10 + k);
    CHECK(results[k].param_count == 45377);
    CHECK(results[k].metrics.counts.total() == results[k].test_labels.size());
    tests.insert(results[k].plan.test);
    auto j = fold_result_to_json(results[k]);
    CHECK(j["test_subject"] == results[k].plan.test);
    CHECK(j.contains("metrics"));
  }
  CHECK(tests.size() == 5);
}

TEST_CASE("run_loso: parallel workers give the same results as one worker") {
  const auto windows = small_dataset(4, 8);
  LosoConfig cfg;
  cfg.train = quick_config(2, 0);
  cfg.seed = 3;
  auto serial = run_loso(windows, cfg);
  cfg.workers = 3;
  auto parallel = run_loso(windows, cfg);
  REQUIRE(serial.size() == parallel.size());
  for (std::size_t k = 0; k < serial.size(); ++k) {
    CHECK(serial[k].test_probs == parallel[k].test_probs);
    CHECK(serial[k].history.epochs.back().val_loss == parallel[k].history.epochs.back().val_loss);
  }
}

TEST_CASE("run_loso: a failing fold is recorded and the others still run") {
  // Subject D holds every fall, so folds that hold D out of training see one class.
  auto windows = small_dataset(4, 9);
  for (auto& w : windows) w.label = w.subject == "S04" ? 1 : 0;
  LosoConfig cfg;
  cfg.train = quick_config(2, 0);
  cfg.folds = 4;
  auto results = run_loso(windows, cfg);
  REQUIRE(results.size() == 4);
  std::size_t failed = 0;
  for (const auto& r : results) {
    const bool d_trains = std::find(r.plan.train.begin(), r.plan.train.end(), "S04") != r.plan.train.end();
    CHECK(r.ok == d_trains);
    if (!r.ok) {
      ++failed;
      CHECK(r.error.find("single class") != std::string::npos);
      CHECK(fold_result_to_json(r)["ok"] == false);
    }
  }
  CHECK(failed >= 1);
  CHECK(fold_f1(results).size() == 4 - failed);
}

TEST_CASE("aggregate uses the population standard deviation") {
  auto a = aggregate(std::vector<double>{0.9, 0.9, 0.9});
  CHECK(a.mean == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(a.std == 0.0);
  auto b = aggregate(std::vector<double>{1, 2, 3, 4});
  CHECK(b.mean == 2.5);
  CHECK(b.std == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));
}

TEST_CASE("paired t-test on a hand-computed example") {
  std::vector<double> a{0.90, 0.85, 0.88, 0.92, 0.87};
  std::vector<double> b{0.80, 0.83, 0.85, 0.86, 0.84};
  // d = (0.10, 0.02, 0.03, 0.06, 0.03), mean 0.048, sum of squared deviations 0.00428.
  const double sd = std::sqrt(0.00428 / 4);
  const double t = 0.048 / (sd / std::sqrt(5.0));
  auto r = paired_t_test(a, b);
  CHECK(r.t == doctest::Approx(t).epsilon(1e-10));
  CHECK(r.t == doctest::Approx(3.2812124497).epsilon(1e-9));
  CHECK(r.df == 4);
  CHECK(r.mean_difference == doctest::Approx(0.048).epsilon(1e-12));
  CHECK(r.p_value == doctest::Approx(0.0304659908).epsilon(1e-7));
  CHECK(paired_t_test(b, a).t == doctest::Approx(-t).epsilon(1e-10));
  CHECK_THROWS_AS(paired_t_test(a, std::vector<double>{1, 2}), std::invalid_argument);
}

TEST_CASE("history CSV lists every epoch") {
  History h;
  h.epochs = {{0, 0.7, 0.69}, {1, 0.5, 0.55}};
  auto path = std::filesystem::temp_directory_path() / "falldet_history.csv";
  write_history_csv(path, h);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch,train_loss,val_loss");
  std::getline(in, line);
  CHECK(line.rfind("0,0.69", 0) == 0);
  std::getline(in, line);
  CHECK(line == "1,0.5,0.55000000000000004");
}

TEST_CASE("trained gates open wider over an isolated impact than over the background (20 seeds)") {
  const auto windows = small_dataset(4, 55, 4);
  const auto split = make_split(windows, loso_plan(subjects_of(windows), 1, 2)[0]);

  // A still window with one 7 Hz ringing impact on the acc stream, samples [60, 68).
  std::mt19937_64 noise(3);
  std::normal_distribution<double> n01;
  SampleWindow probe;
  probe.acc.resize(128 * 4);
  probe.gyro.resize(128 * 4);
  for (std::size_t t = 0; t < 128; ++t) {
    double a[3] = {0.05 * n01(noise), 0.05 * n01(noise), 9.81 + 0.05 * n01(noise)};
    if (t >= 60 && t < 68) a[2] += 30.0 * std::exp(-(t - 60.0) / 2.5) * std::cos(2 * std::numbers::pi * 7.0 / 32.0 * (t - 60.0));
    double g[3] = {0.01 * n01(noise), 0.01 * n01(noise), 0.01 * n01(noise)};
    for (int c = 0; c < 3; ++c) {
      probe.acc[4 * t + c] = a[c];
      probe.gyro[4 * t + c] = g[c];
    }
    probe.acc[4 * t + 3] = magnitude(a[0], a[1], a[2]);
    probe.gyro[4 * t + 3] = magnitude(g[0], g[1], g[2]);
  }
  const auto batch = gather(std::span(&probe, 1));

  // Gate step p covers samples 4p..4p+3; the conv stack reaches about 7 samples further.
  std::vector<double> impact, background, gated_ratio;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto model = Model::build(ModelSpec{}, seed);
    fit(model, split, quick_config(20, seed));
    model.freeze();
    ForwardTrace trace;
    ForwardContext ctx(model.params(), model.buffers(), Mode::infer);
    model.forward(ctx, batch.acc, batch.gyro, &trace);
    const auto gate = trace.streams[0].gate.data();
    const auto gated = trace.streams[0].gated.data();
    double in = 0, out = 0, gin = 0, gout = 0;
    std::size_t n_in = 0, n_out = 0;
    for (std::size_t p = 0; p < 32; ++p) {
      const bool covers = p == 15 || p == 16;
      const bool clear = p <= 12 || p >= 19;
      for (std::size_t u = 0; u < 32; ++u) {
        if (covers) in += gate[p * 32 + u], gin += std::abs(gated[p * 32 + u]), ++n_in;
        if (clear) out += gate[p * 32 + u], gout += std::abs(gated[p * 32 + u]), ++n_out;
      }
    }
    impact.push_back(in / static_cast<double>(n_in));
    background.push_back(out / static_cast<double>(n_out));
    gated_ratio.push_back((gin / static_cast<double>(n_in)) / (gout / static_cast<double>(n_out)));
  }
  const auto t = paired_t_test(impact, background);
  MESSAGE("mean gate difference " << t.mean_difference << ", t " << t.t << ", two-sided p " << t.p_value);
  MESSAGE("mean |U*gate| impact/background ratio " << aggregate(gated_ratio).mean);
  CHECK(t.mean_difference > 0);
  CHECK(t.p_value / 2 < 0.05);
}
