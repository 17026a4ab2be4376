#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "falldet/data.hpp"
#include "falldet/eval.hpp"
#include "falldet/model.hpp"
#include "falldet/train.hpp"

namespace falldet {

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

enum class Command { synth, train, loso, ablate, attribute, bench, export_maps, eval };

std::string to_string(Command c);
Command parse_command(std::string_view name);

// Everything a command needs. Serialized in full into run-manifest.json, and
// a manifest is itself a valid config.
struct RunConfig {
  Command command = Command::loso;

  // Data source: a CSV file or synthetic generation, never both.
  std::optional<std::filesystem::path> data;
  std::optional<SynthConfig> synth;
  std::optional<std::filesystem::path> schema;
  double rate_hz = 32;  // CSV sampling rate
  WindowConfig window;

  ModelSpec model;
  TrainConfig train;
  std::filesystem::path out = "falldet-out";
  std::uint64_t seed = 0;
  std::optional<std::size_t> folds;
  std::size_t fold = 0;  // fold used by train, attribute and export-maps
  std::size_t workers = 1;
  double threshold = 0.5;
  bool standardize = false;
  Baseline baseline = Baseline::mean;

  // Trained model: a checkpoint file or a directory holding model.json.
  std::optional<std::filesystem::path> from;
  std::size_t max_windows = 64;
  std::optional<std::size_t> window_index;

  std::vector<Variant> variants;  // ablate and bench; empty means the command default
  BenchConfig bench;

  // Throws ConfigError.
  void validate() const;
  double sample_rate() const { return synth ? synth->rate_hz : rate_hz; }
};

nlohmann::json run_config_to_json(const RunConfig& c);
// Unknown keys are rejected. Fields absent from j keep their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
// Accepts a plain config or a run manifest (whose "config" member is used).
nlohmann::json config_document(const nlohmann::json& j);

using LogFn = std::function<void(std::string_view)>;

struct RunOutcome {
  // 0 ok, 4 when every fold of a LOSO-style command failed.
  int exit_code = 0;
  std::vector<std::string> warnings;
};

// Validates, writes run-manifest.json, runs the command, and rewrites the
// manifest with the final status. Throws ConfigError, DataError,
// TrainingError, SpecError or other std::exceptions.
RunOutcome run_command(const RunConfig& config, const LogFn& log = {});

// Exit code and error category for an exception escaping run_command.
struct ErrorCategory {
  int exit_code;
  const char* name;
};
ErrorCategory classify(const std::exception& e);

// Checkpoint sidecar holding the input standardizer, next to model files.
std::filesystem::path standardizer_path(const std::filesystem::path& checkpoint);
void save_standardizer(const std::filesystem::path& path, const Standardizer& s);
Standardizer load_standardizer(const std::filesystem::path& path);

std::string version();

}  // namespace falldet
