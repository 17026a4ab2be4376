#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "falldet/tensor.hpp"

namespace falldet {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SeriesTooShort : DataError {
  SeriesTooShort(std::size_t length, std::size_t width);
  std::size_t length, width;
};

// Errors raised while reading a CSV file; line is 1-based, 0 for the file as a whole.
struct CsvError : DataError {
  CsvError(std::string file, std::size_t line, const std::string& message);
  std::string file;
  std::size_t line;
};

struct ImuSample {
  double t = 0;
  std::array<double, 3> acc{};
  std::array<double, 3> gyro{};
  bool fall = false;  // per-sample activity annotation
};

// One trial of one subject. Units are whatever the source used.
struct Recording {
  std::string subject;
  std::string trial;
  std::string activity;
  double rate_hz = 32;
  std::vector<ImuSample> samples;
};

// Per-stream L x 4 series: x, y, z and the Euclidean norm.
struct StreamSeries {
  std::size_t length = 0;
  std::vector<double> acc;
  std::vector<double> gyro;
};

StreamSeries magnitude_augment(const Recording& recording);
double magnitude(double x, double y, double z);

struct SampleWindow {
  std::vector<double> acc;   // W x 4
  std::vector<double> gyro;  // W x 4
  int label = 0;
  std::string subject;
  std::string trial;
  std::size_t start = 0;
};

// round(seconds * rate)
std::size_t window_length(double rate_hz, double seconds = 4.0);
std::size_t window_count(std::size_t length, std::size_t width, std::size_t stride);
std::vector<SampleWindow> window(const StreamSeries& series, double rate_hz, double seconds = 4.0,
                                 std::size_t stride = 10);

// A window is a fall window when it holds at least one annotated fall sample
// and their fraction reaches min_fraction. The default 0 means any overlap.
struct LabelRule {
  double min_fraction = 0.0;
};

int label_window(std::span<const std::uint8_t> fall, std::size_t start, std::size_t width,
                 const LabelRule& rule = {});

struct WindowConfig {
  double seconds = 4.0;
  std::size_t stride = 10;
  LabelRule label;
};

// magnitude_augment + window + label_window for one recording.
std::vector<SampleWindow> make_windows(const Recording& recording, const WindowConfig& config = {});
std::vector<SampleWindow> make_windows(std::span<const Recording> recordings, const WindowConfig& config = {});

struct ClassWeights {
  double w0 = 1;
  double w1 = 1;
};

ClassWeights class_weights(std::span<const int> labels);

// Canonical column name -> name used in the file.
struct CsvSchema {
  std::map<std::string, std::string> columns;

  static const std::vector<std::string>& canonical();
  std::string column(const std::string& canonical) const;
  static CsvSchema from_json_file(const std::filesystem::path& path);
};

struct IngestResult {
  std::vector<Recording> recordings;
  std::vector<std::string> warnings;
};

// The sampling rate is not a column; it applies to every recording in the file.
IngestResult ingest_csv(const std::filesystem::path& path, double rate_hz, const CsvSchema& schema = {});
void write_csv(const std::filesystem::path& path, std::span<const Recording> recordings);

struct SynthConfig {
  std::size_t subjects = 8;
  std::size_t trials_per_class = 4;
  double rate_hz = 32;
  double duration_s = 6;
  std::uint64_t seed = 0;

  void validate() const;
};

// Synthetic dual-stream recordings (acc in m/s^2, gyro in rad/s). ADL trials
// alternate between walking and a sit-down with a broad acceleration bump;
// fall trials add a rotational burst followed by a ringing impact transient.
std::vector<Recording> synth_generate(const SynthConfig& config);

// Crest factor of the acc magnitude after removing its median. Fall trials
// from the generator score at least kImpulseFloor, ADL trials below it.
double impulse_ratio(const Recording& recording);
inline constexpr double kImpulseFloor = 4.0;

struct FoldPlan {
  std::size_t index = 0;
  std::string test;
  std::string validation;
  std::vector<std::string> train;
};

// Sorted distinct subject ids.
std::vector<std::string> subjects_of(std::span<const Recording> recordings);
std::vector<std::string> subjects_of(std::span<const SampleWindow> windows);

// Folds default to min(10, subjects). Test subjects are a seeded sample
// without replacement; each fold draws its validation subject from the rest.
std::vector<FoldPlan> loso_plan(std::span<const std::string> subjects, std::optional<std::size_t> folds,
                                std::uint64_t seed);

// Per-channel affine map fitted on training windows; identity by default.
struct Standardizer {
  std::array<double, 8> mean{0, 0, 0, 0, 0, 0, 0, 0};
  std::array<double, 8> scale{1, 1, 1, 1, 1, 1, 1, 1};

  static Standardizer fit(std::span<const SampleWindow> windows);
  void apply(SampleWindow& w) const;
};

struct DatasetSplit {
  std::vector<SampleWindow> train;
  std::vector<SampleWindow> validation;
  std::vector<SampleWindow> test;
  ClassWeights weights;
  std::optional<Standardizer> standardizer;  // set when the split was standardized
};

DatasetSplit make_split(std::span<const SampleWindow> windows, const FoldPlan& fold, bool standardize = false);
// Throws DataError unless the three subject sets are pairwise disjoint.
void assert_disjoint(const DatasetSplit& split);

struct Batch {
  Tensor acc;   // (n, W, 4)
  Tensor gyro;  // (n, W, 4)
  std::vector<int> labels;
};

Batch gather(std::span<const SampleWindow> windows, std::span<const std::size_t> indices);
Batch gather(std::span<const SampleWindow> windows);

// Per-channel means of the 8 channels (acc then gyro) over all rows.
std::array<double, 8> channel_means(std::span<const SampleWindow> windows);

}  // namespace falldet
