#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "falldet/data.hpp"
#include "falldet/model.hpp"

namespace falldet {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t total() const { return tp + fp + tn + fn; }
};

struct ClassScores {
  double precision = 0, recall = 0, f1 = 0;
};

// Precision, recall and F1 are macro averages over the two classes.
struct Metrics {
  ClassScores adl;
  ClassScores fall;
  double precision = 0;
  double recall = 0;
  double f1 = 0;
  double accuracy = 0;
  ConfusionCounts counts;
};

// Empty denominators give 0.
double f1_score(double precision, double recall);
ConfusionCounts confusion(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);
Metrics metrics(const ConfusionCounts& counts);
Metrics metrics(std::span<const double> probs, std::span<const int> labels, double threshold = 0.5);
nlohmann::json metrics_to_json(const Metrics& m);

// ---- channel attribution ----

inline constexpr std::size_t kChannels = 8;
const std::array<std::string, kChannels>& channel_names();

enum class Baseline { mean, zero };
std::string to_string(Baseline b);
Baseline parse_baseline(std::string_view name);

// Maps a batch (acc, gyro) of (n, W, 4) blocks to n probabilities.
using BatchFunction = std::function<std::vector<double>(const Tensor& acc, const Tensor& gyro)>;

struct WindowAttribution {
  std::array<double, kChannels> phi{};
  double full = 0;   // v(all channels)
  double empty = 0;  // v(no channels)
  int label = 0;
};

struct AttributionReport {
  Baseline baseline = Baseline::mean;
  std::array<double, kChannels> baseline_values{};
  std::array<double, kChannels> fall{};  // mean |phi| over true falls
  std::array<double, kChannels> adl{};   // mean |phi| over true ADL windows
  std::size_t fall_windows = 0;
  std::size_t adl_windows = 0;
  std::vector<WindowAttribution> windows;
};

// Exact Shapley values of the 8 channels: v(S) is the model output with the
// channels outside S replaced by their baseline value at every time step.
AttributionReport shapley_channels(const BatchFunction& f, std::span<const SampleWindow> windows, Baseline baseline,
                                   const std::array<double, kChannels>& baseline_values);
// Requires a frozen model.
AttributionReport shapley_channels(Model& model, std::span<const SampleWindow> windows, Baseline baseline,
                                   const std::array<double, kChannels>& baseline_values);
nlohmann::json attribution_to_json(const AttributionReport& r);

// ---- feature maps ----

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;
};

struct FeatureMap {
  std::string key;  // e.g. "acc/gate" or "gyro/layer1/head0/attention"
  Matrix matrix;
};

// Gated-CNN: F, U, Gamma, U*Gamma, Z and a per-step curve of mean Gamma and
// the norm of U*Gamma. Transformer: the encoder input and every head's
// attention weights. Requires a frozen model.
std::vector<FeatureMap> export_feature_maps(Model& model, const SampleWindow& window);
// Writes <dir>/<key with '/' replaced by '_'>.csv for each map.
std::vector<std::filesystem::path> write_feature_maps(const std::filesystem::path& dir,
                                                      std::span<const FeatureMap> maps);

// 17 significant digits, one matrix row per line, optional header line.
void write_matrix_csv(const std::filesystem::path& path, const Matrix& m, const std::vector<std::string>& header = {});
Matrix read_matrix_csv(const std::filesystem::path& path, bool has_header = false);

// ---- cost ----

struct BenchRow {
  std::string variant;
  std::size_t steps = 0;
  double median_ms = 0;
  double p25_ms = 0;
  double p75_ms = 0;
  std::uint64_t analytic_flops = 0;  // per window
  bool unstable = false;             // IQR above half the median
};

struct ScalingFit {
  std::string variant;
  double exponent = 0;
  std::size_t points = 0;
};

struct CostReport {
  std::vector<BenchRow> rows;
  std::vector<ScalingFit> exponents;
  std::vector<std::string> warnings;
};

struct BenchConfig {
  std::vector<std::size_t> steps{64, 128, 256, 512, 1024, 2048};
  std::size_t repetitions = 30;
  std::size_t warmup = 2;
  std::size_t batch = 32;
  // Windows per forward call; the batch is timed as a sequence of chunks.
  std::size_t chunk = 32;
  std::uint64_t seed = 0;
  double fit_min_steps = 256;
  double fit_max_steps = 2048;
};

// Median wall time of an infer-mode forward over one batch at each length.
CostReport scaling_bench(std::span<const ModelSpec> specs, const BenchConfig& config,
                         const std::function<void(const BenchRow&)>& on_row = {});
// Least-squares slope of log(ms) against log(T).
double scaling_exponent(std::span<const std::size_t> steps, std::span<const double> ms);
// The last column repeats each variant's fitted exponent; empty when none was fitted.
void write_bench_csv(const std::filesystem::path& path, std::span<const BenchRow> rows,
                     std::span<const ScalingFit> exponents = {});

// Median of `repetitions` timed calls after `warmup` untimed ones, in ms.
struct Timing {
  double median_ms = 0, p25_ms = 0, p75_ms = 0;
};
Timing time_calls(const std::function<void()>& call, std::size_t repetitions, std::size_t warmup);

}  // namespace falldet
