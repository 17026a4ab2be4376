#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "falldet/data.hpp"
#include "falldet/eval.hpp"
#include "falldet/model.hpp"

namespace falldet {

struct TrainingError : std::runtime_error {
  TrainingError(const std::string& message, std::size_t epoch = 0)
      : std::runtime_error(message), epoch(epoch) {}
  std::size_t epoch;
};

struct TrainConfig {
  std::size_t max_epochs = 250;
  std::size_t batch_size = 32;
  std::size_t patience = 10;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double min_delta = 1e-6;
  std::uint64_t seed = 0;
  bool shuffle = true;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

inline constexpr double kProbabilityClamp = 1e-12;

// -(1/N) sum w_y [y ln p + (1 - y) ln(1 - p)] with p clamped to [eps, 1 - eps].
Tensor weighted_bce(const Tensor& probs, std::span<const int> labels, ClassWeights w);
double weighted_bce_value(std::span<const double> probs, std::span<const int> labels, ClassWeights w);

struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t t = 0;
};

// One bias-corrected Adam update of every parameter in store order.
void adam_step(ParamStore& params, std::span<const Tensor> grads, AdamState& state, const TrainConfig& config);

// Improvement means a decrease of at least min_delta below the best value so far.
class EarlyStopping {
public:
  EarlyStopping(std::size_t patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  // Returns true when this epoch is the new best.
  bool update(std::size_t epoch, double value);
  bool should_stop() const { return stale_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

private:
  std::size_t patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t best_epoch_ = 0;
  std::size_t stale_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the untrained model
  double train_loss = 0;
  double val_loss = 0;
};

struct History {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  bool stopped_early = false;
};

using EpochCallback = std::function<void(const EpochRecord&, const Model&)>;

// Trains in place and leaves the model holding its best-validation state.
History fit(Model& model, const DatasetSplit& split, const TrainConfig& config, const EpochCallback& on_epoch = {});

void write_history_csv(const std::filesystem::path& path, const History& history);

struct LosoConfig {
  ModelSpec spec;
  TrainConfig train;
  std::optional<std::size_t> folds;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool standardize = false;
  double threshold = 0.5;
};

struct FoldResult {
  FoldPlan plan;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  Metrics metrics;
  std::size_t param_count = 0;
  double wall_time_s = 0;
  History history;
  std::vector<double> test_probs;
  std::vector<int> test_labels;
  std::optional<Standardizer> standardizer;
};

nlohmann::json fold_result_to_json(const FoldResult& r);

using FoldCallback = std::function<void(const FoldResult&)>;
// Called once per fold with the trained, frozen model; runs on the fold's worker.
using ModelCallback = std::function<void(const FoldResult&, Model&)>;

// One fold: split, fit a fresh model seeded with seed + plan.index, score the
// test subject. Exceptions are caught into the result.
FoldResult train_fold(std::span<const SampleWindow> windows, const FoldPlan& plan, const LosoConfig& config,
                      const ModelCallback& on_model = {}, const EpochCallback& on_epoch = {});

// Fold k trains a fresh model seeded with seed + k. Fold failures are
// recorded in the result and do not stop the remaining folds.
std::vector<FoldResult> run_loso(std::span<const SampleWindow> windows, const LosoConfig& config,
                                 const FoldCallback& on_fold = {}, const ModelCallback& on_model = {});

struct Aggregate {
  double mean = 0;
  double std = 0;  // population
  std::size_t n = 0;
};

Aggregate aggregate(std::span<const double> values);
std::vector<double> fold_f1(std::span<const FoldResult> results);

struct PairedTTest {
  double mean_difference = 0;
  double t = 0;
  double df = 0;
  double p_value = 1;  // two-sided
};

PairedTTest paired_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace falldet
