#include "falldet/train.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "falldet/ops.hpp"

namespace falldet {

void TrainConfig::validate() const {
  if (max_epochs < 1) throw SpecError("max epochs must be at least 1");
  if (batch_size < 1) throw SpecError("batch size must be at least 1");
  if (patience >= max_epochs) throw SpecError("patience must be below max epochs");
  if (!(learning_rate > 0)) throw SpecError("learning rate must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw SpecError("Adam betas must lie in [0, 1)");
  if (!(epsilon > 0)) throw SpecError("Adam epsilon must be positive");
  if (!(min_delta >= 0)) throw SpecError("min_delta must be non-negative");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"max_epochs", c.max_epochs}, {"batch_size", c.batch_size}, {"patience", c.patience},
          {"learning_rate", c.learning_rate}, {"beta1", c.beta1}, {"beta2", c.beta2},
          {"epsilon", c.epsilon}, {"min_delta", c.min_delta}, {"seed", c.seed}, {"shuffle", c.shuffle}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c) {
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.patience = j.value("patience", c.patience);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.min_delta = j.value("min_delta", c.min_delta);
  c.seed = j.value("seed", c.seed);
  c.shuffle = j.value("shuffle", c.shuffle);
  return c;
}

namespace {

void check_labels(std::size_t n, std::span<const int> labels, ClassWeights w) {
  if (labels.size() != n) {
    throw ShapeError("weighted_bce: " + std::to_string(n) + " predictions vs " + std::to_string(labels.size()) +
                     " labels");
  }
  for (int y : labels)
    if (y != 0 && y != 1) throw std::invalid_argument("weighted_bce: label outside {0,1}");
  if (!(w.w0 >= 0) || !(w.w1 >= 0)) throw std::invalid_argument("weighted_bce: negative class weight");
}

}  // namespace

Tensor weighted_bce(const Tensor& probs, std::span<const int> labels, ClassWeights w) {
  if (probs.rank() != 2 || probs.dim(1) != 1) throw ShapeError("weighted_bce: expected (N, 1) probabilities");
  const std::size_t n = probs.dim(0);
  check_labels(n, labels, w);
  // q = p for y = 1 and 1 - p for y = 0, so the loss is -sum c_i ln q_i.
  std::vector<double> sign(n), offset(n), coef(n);
  for (std::size_t i = 0; i < n; ++i) {
    sign[i] = labels[i] ? 1.0 : -1.0;
    offset[i] = labels[i] ? 0.0 : 1.0;
    coef[i] = -(labels[i] ? w.w1 : w.w0) / static_cast<double>(n);
  }
  auto p = ops::clamp(ops::reshape(probs, {n}), kProbabilityClamp, 1.0 - kProbabilityClamp);
  auto q = ops::add(ops::mul(p, Tensor({n}, std::move(sign))), Tensor({n}, std::move(offset)));
  return ops::sum_all(ops::mul(ops::log(q), Tensor({n}, std::move(coef))));
}

double weighted_bce_value(std::span<const double> probs, std::span<const int> labels, ClassWeights w) {
  check_labels(probs.size(), labels, w);
  double total = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = std::clamp(probs[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    total -= labels[i] ? w.w1 * std::log(p) : w.w0 * std::log(1.0 - p);
  }
  return probs.empty() ? 0.0 : total / static_cast<double>(probs.size());
}

void adam_step(ParamStore& params, std::span<const Tensor> grads, AdamState& state, const TrainConfig& c) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  if (state.m.empty()) {
    for (const auto& [name, p] : params) {
      state.m.emplace_back(p.size(), 0.0);
      state.v.emplace_back(p.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
  std::size_t k = 0;
  for (const auto& [name, p] : params) {
    if (grads[k].shape() != p.shape()) throw std::invalid_argument("adam_step: misaligned gradient for " + name);
    if (state.m[k].size() != p.size()) throw std::invalid_argument("adam_step: state does not match " + name);
    ++k;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  k = 0;
  for (auto& [name, p] : params) {
    auto theta = p.mutable_data();
    auto g = grads[k].data();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1 - c.beta2) * g[i] * g[i];
      theta[i] -= c.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + c.epsilon);
    }
    ++k;
  }
}

bool EarlyStopping::update(std::size_t epoch, double value) {
  if (best_ - value >= min_delta_) {
    best_ = value;
    best_epoch_ = epoch;
    stale_ = 0;
    return true;
  }
  ++stale_;
  return false;
}

namespace {

double infer_loss(Model& model, const Batch& data, ClassWeights w) {
  return weighted_bce_value(model.predict(data.acc, data.gyro), data.labels, w);
}

// Train-mode loss over the given batches without updates; running statistics are restored.
double probe_train_loss(Model& model, std::span<const SampleWindow> windows, std::span<const std::size_t> order,
                        std::size_t batch, ClassWeights w, Rng& rng) {
  auto saved = model.buffers().clone();
  double total = 0;
  for (std::size_t begin = 0; begin < order.size(); begin += batch) {
    const auto idx = order.subspan(begin, std::min(batch, order.size() - begin));
    auto b = gather(windows, idx);
    ForwardContext ctx(model.params(), model.buffers(), Mode::train, nullptr, &rng);
    auto y = model.forward(ctx, b.acc, b.gyro);
    total += weighted_bce(y, b.labels, w).item() * static_cast<double>(idx.size());
  }
  model.buffers().assign_from(saved);
  return total / static_cast<double>(order.size());
}

}  // namespace

History fit(Model& model, const DatasetSplit& split, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (split.train.empty() || split.validation.empty()) throw DataError("fit: empty train or validation set");
  if (model.frozen()) throw ModeError("fit: model is frozen");
  for (const auto* part : {&split.train, &split.validation}) {
    for (const auto& win : *part) {
      const auto finite = [](double v) { return std::isfinite(v); };
      if (!std::all_of(win.acc.begin(), win.acc.end(), finite) || !std::all_of(win.gyro.begin(), win.gyro.end(), finite)) {
        throw DataError("fit: non-finite input in window " + win.trial + "@" + std::to_string(win.start));
      }
    }
  }

  Rng shuffle_rng(config.seed);
  Rng dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const auto val = gather(split.validation);
  const auto w = split.weights;
  const std::size_t n = split.train.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  History history;
  EarlyStopping stopper(config.patience, config.min_delta);
  ParamStore best_params = model.params().clone();
  ParamStore best_buffers = model.buffers().clone();

  auto record = [&](const EpochRecord& rec) {
    if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_loss)) {
      throw TrainingError("non-finite loss at epoch " + std::to_string(rec.epoch), rec.epoch);
    }
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec, model);
  };

  // Ops reject NaN arguments with domain_error; report those as a diverged run.
  std::size_t epoch = 0;
  try {
    {
      Rng probe_rng(config.seed ^ 0x5851f42d4c957f2dULL);
      record({0, probe_train_loss(model, split.train, order, config.batch_size, w, probe_rng), infer_loss(model, val, w)});
    }

    AdamState adam;
    for (epoch = 1; epoch <= config.max_epochs; ++epoch) {
      if (config.shuffle) shuffle_rng.shuffle(order);
      double total = 0;
      for (std::size_t begin = 0; begin < n; begin += config.batch_size) {
        const auto idx = std::span<const std::size_t>(order).subspan(begin, std::min(config.batch_size, n - begin));
        auto b = gather(split.train, idx);
        GradTape tape;
        ForwardContext ctx(model.params(), model.buffers(), Mode::train, &tape, &dropout_rng);
        auto y = model.forward(ctx, b.acc, b.gyro);
        auto loss = weighted_bce(y, b.labels, w);
        const double value = loss.item();
        if (!std::isfinite(value)) throw TrainingError("non-finite loss at epoch " + std::to_string(epoch), epoch);
        auto grads = ctx.gradients(tape.backward(loss));
        adam_step(model.params(), grads, adam, config);
        total += value * static_cast<double>(idx.size());
      }
      record({epoch, total / static_cast<double>(n), infer_loss(model, val, w)});
      if (stopper.update(epoch, history.epochs.back().val_loss)) {
        best_params.assign_from(model.params());
        best_buffers.assign_from(model.buffers());
      }
      if (stopper.should_stop()) {
        history.stopped_early = true;
        break;
      }
    }
  } catch (const std::domain_error& e) {
    throw TrainingError("epoch " + std::to_string(epoch) + ": " + e.what(), epoch);
  }
  model.params().assign_from(best_params);
  model.buffers().assign_from(best_buffers);
  history.best_epoch = stopper.best_epoch();
  history.best_val_loss = stopper.best();
  return history;
}

void write_history_csv(const std::filesystem::path& path, const History& history) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : history.epochs) out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

nlohmann::json fold_result_to_json(const FoldResult& r) {
  nlohmann::json j{{"fold", r.plan.index},
                   {"test_subject", r.plan.test},
                   {"validation_subject", r.plan.validation},
                   {"train_subjects", r.plan.train},
                   {"seed", r.seed},
                   {"ok", r.ok}};
  if (!r.ok) {
    j["error"] = r.error;
  } else {
    j["metrics"] = metrics_to_json(r.metrics);
    j["param_count"] = r.param_count;
    j["epochs"] = r.history.epochs.empty() ? 0 : r.history.epochs.back().epoch;
    j["best_epoch"] = r.history.best_epoch;
    j["best_val_loss"] = r.history.best_val_loss;
    j["stopped_early"] = r.history.stopped_early;
  }
  j["wall_time_s"] = r.wall_time_s;
  return j;
}

FoldResult train_fold(std::span<const SampleWindow> windows, const FoldPlan& plan, const LosoConfig& config,
                      const ModelCallback& on_model, const EpochCallback& on_epoch) {
  FoldResult r;
  r.plan = plan;
  r.seed = config.seed + plan.index;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  try {
    auto split = make_split(windows, plan, config.standardize);
    assert_disjoint(split);
    r.standardizer = split.standardizer;
    auto model = Model::build(config.spec, r.seed);
    auto train = config.train;
    train.seed = r.seed;
    r.history = fit(model, split, train, on_epoch);
    model.freeze();
    const auto test = gather(split.test);
    r.test_probs = model.predict(test.acc, test.gyro);
    r.test_labels = test.labels;
    r.metrics = metrics(r.test_probs, r.test_labels, config.threshold);
    r.param_count = model.param_count();
    r.ok = true;
    r.wall_time_s = elapsed();
    if (on_model) on_model(r, model);
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    r.wall_time_s = elapsed();
  }
  return r;
}

std::vector<FoldResult> run_loso(std::span<const SampleWindow> windows, const LosoConfig& config,
                                 const FoldCallback& on_fold, const ModelCallback& on_model) {
  config.spec.validate();
  config.train.validate();
  const auto plan = loso_plan(subjects_of(windows), config.folds, config.seed);
  std::vector<FoldResult> results(plan.size());
  std::mutex callback_mutex;

  auto run_fold = [&](std::size_t k) {
    results[k] = train_fold(windows, plan[k], config, on_model);
    if (on_fold) {
      std::lock_guard lock(callback_mutex);
      on_fold(results[k]);
    }
  };

  const std::size_t workers = std::clamp<std::size_t>(config.workers, 1, plan.size());
  if (workers == 1) {
    for (std::size_t k = 0; k < plan.size(); ++k) run_fold(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t i = 0; i < workers; ++i) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < plan.size(); k = next++) run_fold(k);
      });
    }
  }
  return results;
}

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  a.n = values.size();
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(a.n);
  double sq = 0;
  for (double v : values) sq += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(sq / static_cast<double>(a.n));
  return a;
}

std::vector<double> fold_f1(std::span<const FoldResult> results) {
  std::vector<double> f1;
  for (const auto& r : results)
    if (r.ok) f1.push_back(r.metrics.f1);
  return f1;
}

PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: samples differ in length");
  if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
  const auto n = static_cast<double>(a.size());
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0;
  for (double v : d) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1));
  PairedTTest r;
  r.mean_difference = mean;
  r.df = n - 1;
  if (sd == 0) {
    r.t = mean == 0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), mean);
    r.p_value = mean == 0 ? 1.0 : 0.0;
    return r;
  }
  r.t = mean / (sd / std::sqrt(n));
  boost::math::students_t dist(r.df);
  r.p_value = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

}  // namespace falldet
