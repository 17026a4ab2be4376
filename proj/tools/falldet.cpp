#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "falldet/falldet.h"

using nlohmann::json;

namespace {

constexpr int kConfigError = FD_ERR_CONFIG;

struct ConfigFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Flag values; unset optionals leave the config file (or defaults) alone.
struct Flags {
  std::string config_file;
  std::optional<std::string> data, synth, schema, variant, out, gate_source, baseline, from;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> folds, fold, epochs, batch, patience, workers, max_windows, window_index, repetitions;
  std::optional<double> lr, threshold, rate, window_seconds, min_fraction;
  std::optional<std::size_t> stride;
  std::optional<bool> standardize;
  std::vector<std::string> variants;
  std::vector<std::size_t> steps;
  bool dry_run = false;
};

void add_flags(CLI::App& cmd, Flags& f) {
  cmd.add_option("--config", f.config_file, "JSON config or run manifest; flags override it");
  cmd.add_option("--data", f.data, "input CSV");
  cmd.add_option("--synth", f.synth, "synthetic data: subjects=N,trials=N,rate=HZ,duration=S,seed=N")
      ->expected(0, 1)
      ->default_str("");
  cmd.add_option("--schema", f.schema, "JSON column remapping for --data");
  cmd.add_option("--rate", f.rate, "CSV sampling rate in Hz");
  cmd.add_option("--window-seconds", f.window_seconds, "window length in seconds");
  cmd.add_option("--stride", f.stride, "window stride in samples");
  cmd.add_option("--label-fraction", f.min_fraction, "minimum fall fraction for a fall window");
  cmd.add_option("--variant", f.variant, "model variant");
  cmd.add_option("--variants", f.variants, "variants for ablate and bench")->delimiter(',');
  cmd.add_option("--gate-source", f.gate_source, "gate input: projection or features");
  cmd.add_option("--seed", f.seed, "base seed");
  cmd.add_option("--folds", f.folds, "number of LOSO folds");
  cmd.add_option("--fold", f.fold, "fold used by train, attribute and export-maps");
  cmd.add_option("--epochs", f.epochs, "maximum epochs");
  cmd.add_option("--batch", f.batch, "batch size");
  cmd.add_option("--patience", f.patience, "early stopping patience");
  cmd.add_option("--lr", f.lr, "learning rate");
  cmd.add_option("--out", f.out, "output directory");
  cmd.add_option("--workers", f.workers, "parallel folds");
  cmd.add_option("--threshold", f.threshold, "decision threshold");
  cmd.add_option("--baseline", f.baseline, "attribution baseline: mean or zero");
  cmd.add_flag("--standardize,!--no-standardize", f.standardize, "per-channel standardization from the train split");
  cmd.add_option("--from", f.from, "trained model: checkpoint file or train output directory");
  cmd.add_option("--max-windows", f.max_windows, "test windows to attribute");
  cmd.add_option("--window-index", f.window_index, "test window to export");
  cmd.add_option("--steps", f.steps, "bench sequence lengths")->delimiter(',');
  cmd.add_option("--repetitions", f.repetitions, "bench timed repetitions");
  cmd.add_flag("--dry-run", f.dry_run, "print the resolved config and exit");
}

json parse_synth(const std::string& text) {
  json s = json::object();
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw ConfigFailure("--synth: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    try {
      if (key == "subjects") s["subjects"] = std::stoull(value);
      else if (key == "trials" || key == "trials_per_class") s["trials_per_class"] = std::stoull(value);
      else if (key == "rate" || key == "rate_hz") s["rate_hz"] = std::stod(value);
      else if (key == "duration" || key == "duration_s") s["duration_s"] = std::stod(value);
      else if (key == "seed") s["seed"] = std::stoull(value);
      else throw ConfigFailure("--synth: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigFailure("--synth: bad value for " + key + ": '" + value + "'");
    }
  }
  return s;
}

json load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigFailure("cannot open config " + path);
  try {
    json j = json::parse(in);
    if (j.is_object() && j.contains("tool") && j.contains("config")) return j["config"];
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigFailure(path + ": " + e.what());
  }
}

json build_config(const std::string& command, const Flags& f) {
  json j = f.config_file.empty() ? json::object() : load_file(f.config_file);
  if (!j.is_object()) throw ConfigFailure("config must be a JSON object");
  j["command"] = command;
  if (f.data) {
    j["data"] = *f.data;
    j["synth"] = nullptr;
  }
  if (f.synth) {
    j["synth"] = parse_synth(*f.synth);
    j["data"] = nullptr;
  }
  if (f.schema) j["schema"] = *f.schema;
  if (f.rate) j["rate_hz"] = *f.rate;
  if (f.window_seconds) j["window"]["seconds"] = *f.window_seconds;
  if (f.stride) j["window"]["stride"] = *f.stride;
  if (f.min_fraction) j["window"]["min_fraction"] = *f.min_fraction;
  if (f.variant) j["model"]["variant"] = *f.variant;
  if (f.gate_source) j["model"]["gate_source"] = *f.gate_source;
  if (j.contains("model")) j["model"].erase("window");
  if (!f.variants.empty()) j["variants"] = f.variants;
  if (f.seed) j["seed"] = *f.seed;
  if (f.folds) j["folds"] = *f.folds;
  if (f.fold) j["fold"] = *f.fold;
  if (f.epochs) j["train"]["max_epochs"] = *f.epochs;
  if (f.batch) j["train"]["batch_size"] = *f.batch;
  if (f.patience) j["train"]["patience"] = *f.patience;
  if (f.lr) j["train"]["learning_rate"] = *f.lr;
  if (f.out) j["out"] = *f.out;
  if (f.workers) j["workers"] = *f.workers;
  if (f.threshold) j["threshold"] = *f.threshold;
  if (f.baseline) j["baseline"] = *f.baseline;
  if (f.standardize) j["standardize"] = *f.standardize;
  if (f.from) j["from"] = *f.from;
  if (f.max_windows) j["max_windows"] = *f.max_windows;
  if (f.window_index) j["window_index"] = *f.window_index;
  if (!f.steps.empty()) j["bench"]["steps"] = f.steps;
  if (f.repetitions) j["bench"]["repetitions"] = *f.repetitions;
  return j;
}

void to_stderr(const char* line, void*) { std::fprintf(stderr, "%s\n", line); }

int report(fd_status status) {
  std::fprintf(stderr, "error: %s: %s\n", fd_status_name(status), fd_last_error());
  return status;
}

int execute(const json& config, bool dry_run) {
  const std::string text = config.dump();
  if (dry_run) {
    std::size_t needed = 0;
    if (auto s = fd_resolve_config(text.c_str(), nullptr, 0, &needed); s != FD_OK) return report(s);
    std::string buf(needed, '\0');
    if (auto s = fd_resolve_config(text.c_str(), buf.data(), buf.size(), &needed); s != FD_OK) return report(s);
    std::printf("%s\n", buf.c_str());
    return 0;
  }
  const auto status = fd_run(text.c_str(), to_stderr, nullptr);
  return status == FD_OK ? 0 : report(status);
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Tensors are allocated and freed at high rates; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Dual-stream IMU fall detection: data, training, LOSO experiments, attribution and benchmarks"};
  app.set_version_flag("--version", std::string(fd_version()));
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands{
      {"synth", "generate a synthetic dataset as CSV"},
      {"train", "train one model on one LOSO fold"},
      {"loso", "leave-one-subject-out cross-validation"},
      {"ablate", "LOSO for every ablation variant"},
      {"attribute", "exact Shapley attribution over the 8 input channels"},
      {"bench", "parameter, FLOP and latency scaling report"},
      {"export-maps", "write gate and attention maps for one window"},
      {"eval", "score a trained model on a dataset"},
  };
  Flags flags;
  std::vector<std::pair<CLI::App*, std::string>> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_flags(*sub, flags);
    subs.emplace_back(sub, name);
  }
  std::string manifest;
  std::optional<std::string> rerun_out;
  auto* rerun = app.add_subcommand("rerun", "repeat a run from its run-manifest.json");
  rerun->add_option("manifest", manifest, "run manifest")->required();
  rerun->add_option("--out", rerun_out, "output directory (default: the manifest's)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return kConfigError;
  }

  try {
    if (rerun->parsed()) {
      std::ifstream in(manifest);
      if (!in) throw ConfigFailure("cannot open manifest " + manifest);
      json m = json::parse(in, nullptr, false);
      if (m.is_discarded() || !m.contains("config")) throw ConfigFailure(manifest + ": not a run manifest");
      json config = m["config"];
      if (rerun_out) config["out"] = *rerun_out;
      return execute(config, false);
    }
    for (const auto& [sub, name] : subs) {
      if (sub->parsed()) return execute(build_config(name, flags), flags.dry_run);
    }
  } catch (const ConfigFailure& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return kConfigError;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "error: config: %s\n", e.what());
    return kConfigError;
  }
  return kConfigError;
}
