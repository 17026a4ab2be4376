#include "falldet/run.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace falldet {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr std::array<std::pair<Command, std::string_view>, 8> kCommandNames{{
    {Command::synth, "synth"},
    {Command::train, "train"},
    {Command::loso, "loso"},
    {Command::ablate, "ablate"},
    {Command::attribute, "attribute"},
    {Command::bench, "bench"},
    {Command::export_maps, "export-maps"},
    {Command::eval, "eval"},
}};

void check_keys(const json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw ConfigError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string fold_name(std::size_t k) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "fold-%02zu", k);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string shortest(double v) {
  char buf[40];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// ---- shared run state ----

struct Context {
  const RunConfig& config;
  const LogFn& log;
  json manifest;
  std::vector<std::string> warnings;

  void say(const std::string& msg) const {
    if (log) log("[" + to_string(config.command) + "] " + msg);
  }
  void warn(const std::string& msg) {
    warnings.push_back(msg);
    say("warning: " + msg);
  }
  fs::path path(const fs::path& rel) const { return config.out / rel; }
};

std::vector<SampleWindow> load_windows(Context& ctx) {
  const auto& c = ctx.config;
  std::vector<Recording> recordings;
  if (c.synth) {
    recordings = synth_generate(*c.synth);
    ctx.say("generated " + std::to_string(recordings.size()) + " synthetic recordings");
  } else {
    const CsvSchema schema = c.schema ? CsvSchema::from_json_file(*c.schema) : CsvSchema{};
    auto result = ingest_csv(*c.data, c.rate_hz, schema);
    for (const auto& w : result.warnings) ctx.warn(c.data->string() + ": " + w);
    recordings = std::move(result.recordings);
    ctx.say("read " + std::to_string(recordings.size()) + " recordings from " + c.data->string());
  }
  auto windows = make_windows(recordings, c.window);
  if (windows.empty()) throw DataError("no windows: every recording is shorter than one window");
  std::size_t falls = 0;
  for (const auto& w : windows) falls += w.label;
  ctx.say(std::to_string(windows.size()) + " windows, " + std::to_string(falls) + " falls");
  return windows;
}

LosoConfig loso_config(const RunConfig& c, const ModelSpec& spec) {
  LosoConfig l;
  l.spec = spec;
  l.train = c.train;
  l.folds = c.folds;
  l.seed = c.seed;
  l.workers = c.workers;
  l.standardize = c.standardize;
  l.threshold = c.threshold;
  return l;
}

FoldPlan pick_fold(const RunConfig& c, std::span<const SampleWindow> windows) {
  const auto plan = loso_plan(subjects_of(windows), c.folds, c.seed);
  if (c.fold >= plan.size()) {
    throw ConfigError("fold " + std::to_string(c.fold) + " out of range: the plan has " + std::to_string(plan.size()) +
                      " folds");
  }
  return plan[c.fold];
}

void save_model(const fs::path& path, const Model& model, const std::optional<Standardizer>& st) {
  save_checkpoint(model, path.string());
  if (st) save_standardizer(standardizer_path(path), *st);
}

struct LoadedModel {
  Model model;
  std::optional<Standardizer> standardizer;
};

LoadedModel load_model(const fs::path& from) {
  const fs::path file = fs::is_directory(from) ? from / "model.json" : from;
  if (!fs::exists(file)) throw ConfigError("no checkpoint at " + file.string());
  LoadedModel m{load_checkpoint(file.string()), std::nullopt};
  if (fs::exists(standardizer_path(file))) m.standardizer = load_standardizer(standardizer_path(file));
  m.model.freeze();
  return m;
}

void write_predictions(const fs::path& path, std::span<const SampleWindow> windows, std::span<const double> probs) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "subject,trial,start,label,probability\n";
  for (std::size_t i = 0; i < windows.size(); ++i) {
    out << windows[i].subject << ',' << windows[i].trial << ',' << windows[i].start << ',' << windows[i].label << ','
        << shortest(probs[i]) << '\n';
  }
}

json aggregate_json(const Aggregate& a) { return {{"mean", a.mean}, {"std", a.std}, {"n", a.n}}; }

// A model for attribute and export-maps: loaded from --from, or trained on
// the configured fold and saved into the output directory.
struct FoldModel {
  Model model;
  DatasetSplit split;
};

FoldModel fold_model(Context& ctx, std::span<const SampleWindow> windows, const ModelSpec& spec) {
  const auto& c = ctx.config;
  const auto plan = pick_fold(c, windows);
  if (c.from) {
    auto loaded = load_model(*c.from);
    if (loaded.model.spec().window != c.model.window) {
      throw ConfigError("checkpoint window " + std::to_string(loaded.model.spec().window) + " differs from data window " +
                        std::to_string(c.model.window));
    }
    auto split = make_split(windows, plan, false);
    if (loaded.standardizer) {
      for (auto* part : {&split.train, &split.validation, &split.test})
        for (auto& w : *part) loaded.standardizer->apply(w);
      split.standardizer = loaded.standardizer;
    }
    ctx.say("loaded " + to_string(loaded.model.spec().variant) + " from " + c.from->string());
    return {std::move(loaded.model), std::move(split)};
  }
  ctx.say("training " + to_string(spec.variant) + " on fold " + std::to_string(plan.index) + " (test " + plan.test +
          ")");
  std::optional<Model> trained;
  const auto r = train_fold(windows, plan, loso_config(c, spec), [&](const FoldResult&, Model& m) { trained = m; });
  if (!r.ok) throw TrainingError(r.error, r.history.epochs.size());
  save_model(ctx.path("model.json"), *trained, r.standardizer);
  write_history_csv(ctx.path("history.csv"), r.history);
  return {std::move(*trained), make_split(windows, plan, c.standardize)};
}

// ---- commands ----

int cmd_synth(Context& ctx) {
  const auto recordings = synth_generate(*ctx.config.synth);
  write_csv(ctx.path("data.csv"), recordings);
  const auto windows = make_windows(recordings, ctx.config.window);
  std::size_t falls = 0;
  for (const auto& w : windows) falls += w.label;
  write_json(ctx.path("dataset.json"), {{"recordings", recordings.size()},
                                        {"subjects", subjects_of(recordings).size()},
                                        {"windows", windows.size()},
                                        {"fall_windows", falls}});
  ctx.say("wrote " + std::to_string(recordings.size()) + " recordings to " + ctx.path("data.csv").string());
  return 0;
}

int cmd_train(Context& ctx) {
  const auto& c = ctx.config;
  const auto windows = load_windows(ctx);
  const auto plan = pick_fold(c, windows);
  ctx.say("fold " + std::to_string(plan.index) + ": test " + plan.test + ", validation " + plan.validation);
  auto on_epoch = [&](const EpochRecord& e, const Model&) {
    ctx.say("epoch " + std::to_string(e.epoch) + " train " + fixed(e.train_loss) + " val " + fixed(e.val_loss));
  };
  auto on_model = [&](const FoldResult& r, Model& m) { save_model(ctx.path("model.json"), m, r.standardizer); };
  const auto r = train_fold(windows, plan, loso_config(c, c.model), on_model, on_epoch);
  if (!r.ok) throw TrainingError(r.error, r.history.epochs.size());
  write_history_csv(ctx.path("history.csv"), r.history);
  write_json(ctx.path("result.json"), fold_result_to_json(r));
  ctx.say("test macro-F1 " + fixed(r.metrics.f1) + " after " + std::to_string(r.history.epochs.back().epoch) +
          " epochs (best " + std::to_string(r.history.best_epoch) + ")");
  return 0;
}

struct LosoRun {
  std::vector<FoldResult> results;
  json summary;
};

LosoRun loso_into(Context& ctx, const fs::path& dir, std::span<const SampleWindow> windows, const ModelSpec& spec) {
  const auto cfg = loso_config(ctx.config, spec);
  fs::create_directories(dir / "folds");
  const std::string tag = to_string(spec.variant);
  auto on_fold = [&](const FoldResult& r) {
    if (r.ok) {
      ctx.say(tag + " fold " + std::to_string(r.plan.index) + " test " + r.plan.test + " macro-F1 " +
              fixed(r.metrics.f1) + " epochs " + std::to_string(r.history.epochs.back().epoch) + " (" +
              fixed(r.wall_time_s, 1) + " s)");
    } else {
      ctx.say(tag + " fold " + std::to_string(r.plan.index) + " failed: " + r.error);
    }
  };
  auto on_model = [&](const FoldResult& r, Model& m) {
    save_model(dir / "folds" / (fold_name(r.plan.index) + "-model.json"), m, r.standardizer);
  };
  LosoRun run{run_loso(windows, cfg, on_fold, on_model), {}};

  std::vector<double> f1, precision, recall, accuracy;
  json folds = json::array();
  for (const auto& r : run.results) {
    const auto base = dir / "folds" / fold_name(r.plan.index);
    write_json(base.string() + ".json", fold_result_to_json(r));
    folds.push_back({{"fold", r.plan.index}, {"ok", r.ok}});
    if (!r.ok) {
      folds.back()["error"] = r.error;
      ctx.warn(tag + " fold " + std::to_string(r.plan.index) + " failed: " + r.error);
      continue;
    }
    write_history_csv(base.string() + "-history.csv", r.history);
    std::ofstream pred(base.string() + "-predictions.csv");
    pred << "label,probability\n";
    for (std::size_t i = 0; i < r.test_probs.size(); ++i) pred << r.test_labels[i] << ',' << shortest(r.test_probs[i]) << '\n';
    f1.push_back(r.metrics.f1);
    precision.push_back(r.metrics.precision);
    recall.push_back(r.metrics.recall);
    accuracy.push_back(r.metrics.accuracy);
  }
  const std::size_t params = Model::build(spec, ctx.config.seed).param_count();
  run.summary = {{"variant", tag},
                 {"folds", run.results.size()},
                 {"folds_ok", f1.size()},
                 {"param_count", params},
                 {"f1", aggregate_json(aggregate(f1))},
                 {"precision", aggregate_json(aggregate(precision))},
                 {"recall", aggregate_json(aggregate(recall))},
                 {"accuracy", aggregate_json(aggregate(accuracy))},
                 {"fold_f1", f1},
                 {"fold_status", folds}};
  write_json(dir / "summary.json", run.summary);
  const auto a = aggregate(f1);
  ctx.say(tag + " macro-F1 " + fixed(a.mean) + " +/- " + fixed(a.std) + " over " + std::to_string(a.n) + " folds");
  return run;
}

int cmd_loso(Context& ctx) {
  const auto windows = load_windows(ctx);
  auto run = loso_into(ctx, ctx.config.out, windows, ctx.config.model);
  ctx.manifest["folds"] = run.summary["fold_status"];
  return run.summary["folds_ok"].get<std::size_t>() == 0 ? 4 : 0;
}

int cmd_ablate(Context& ctx) {
  const auto& c = ctx.config;
  const auto windows = load_windows(ctx);
  std::vector<Variant> variants = c.variants;
  if (variants.empty()) variants.assign(ablation_variants().begin(), ablation_variants().end());

  struct Row {
    Variant variant;
    LosoRun run;
  };
  std::vector<Row> rows;
  json status = json::object();
  for (auto v : variants) {
    ModelSpec spec = c.model;
    spec.variant = v;
    spec.dropout.reset();
    rows.push_back({v, loso_into(ctx, c.out / to_string(v), windows, spec)});
    status[to_string(v)] = rows.back().run.summary["fold_status"];
  }
  ctx.manifest["folds"] = status;

  // Paired comparison against the first variant over folds where both succeeded.
  const auto& ref = rows.front().run.results;
  std::ofstream csv(c.out / "summary.csv");
  csv << "variant,folds_ok,mean_f1,std_f1,mean_precision,mean_recall,param_count,mean_diff,t,p_value\n";
  json table = json::array();
  bool any_ok = false;
  for (const auto& row : rows) {
    const auto& s = row.run.summary;
    any_ok = any_ok || s["folds_ok"].get<std::size_t>() > 0;
    std::vector<double> a, b;
    for (std::size_t k = 0; k < ref.size() && k < row.run.results.size(); ++k) {
      if (ref[k].ok && row.run.results[k].ok) {
        a.push_back(row.run.results[k].metrics.f1);
        b.push_back(ref[k].metrics.f1);
      }
    }
    json entry = {{"variant", to_string(row.variant)},
                  {"folds_ok", s["folds_ok"]},
                  {"f1", s["f1"]},
                  {"precision", s["precision"]},
                  {"recall", s["recall"]},
                  {"param_count", s["param_count"]}};
    std::string diff, t, p;
    if (&row != &rows.front() && a.size() >= 2) {
      try {
        const auto test = paired_t_test(a, b);
        entry["paired_t_test"] = {{"reference", to_string(rows.front().variant)},
                                  {"mean_difference", test.mean_difference},
                                  {"t", test.t},
                                  {"df", test.df},
                                  {"p_value", test.p_value}};
        diff = shortest(test.mean_difference);
        t = shortest(test.t);
        p = shortest(test.p_value);
      } catch (const std::exception& e) {
        ctx.warn(to_string(row.variant) + ": paired t-test skipped: " + e.what());
      }
    }
    csv << to_string(row.variant) << ',' << s["folds_ok"].get<std::size_t>() << ','
        << shortest(s["f1"]["mean"].get<double>()) << ',' << shortest(s["f1"]["std"].get<double>()) << ','
        << shortest(s["precision"]["mean"].get<double>()) << ',' << shortest(s["recall"]["mean"].get<double>()) << ','
        << s["param_count"].get<std::size_t>() << ',' << diff << ',' << t << ',' << p << '\n';
    table.push_back(entry);
  }
  write_json(c.out / "summary.json", {{"variants", table}});
  return any_ok ? 0 : 4;
}

int cmd_attribute(Context& ctx) {
  const auto& c = ctx.config;
  const auto windows = load_windows(ctx);
  auto fm = fold_model(ctx, windows, c.model);
  const auto& test = fm.split.test;
  std::vector<SampleWindow> chosen;
  const std::size_t n = std::min(c.max_windows, test.size());
  for (std::size_t i = 0; i < n; ++i) chosen.push_back(test[i * test.size() / n]);
  const auto base = c.baseline == Baseline::mean ? channel_means(fm.split.train) : std::array<double, kChannels>{};
  ctx.say("attributing " + std::to_string(chosen.size()) + " test windows, " + to_string(c.baseline) + " baseline");
  const auto report = shapley_channels(fm.model, chosen, c.baseline, base);

  auto j = attribution_to_json(report);
  j["variant"] = to_string(fm.model.spec().variant);
  j["test_subject"] = fm.split.test.front().subject;
  write_json(ctx.path("attribution.json"), j);

  std::ofstream out(ctx.path("attribution-windows.csv"));
  out << "subject,trial,start,label";
  for (const auto& name : channel_names()) out << ",phi_" << name;
  out << ",v_full,v_empty\n";
  for (std::size_t i = 0; i < chosen.size(); ++i) {
    const auto& w = report.windows[i];
    out << chosen[i].subject << ',' << chosen[i].trial << ',' << chosen[i].start << ',' << w.label;
    for (double p : w.phi) out << ',' << shortest(p);
    out << ',' << shortest(w.full) << ',' << shortest(w.empty) << '\n';
  }
  for (std::size_t k = 0; k < kChannels; ++k) {
    ctx.say(channel_names()[k] + " mean|phi| fall " + fixed(report.fall[k]) + " adl " + fixed(report.adl[k]));
  }
  return 0;
}

int cmd_export_maps(Context& ctx) {
  const auto& c = ctx.config;
  const auto windows = load_windows(ctx);
  auto fm = fold_model(ctx, windows, c.model);
  const auto& test = fm.split.test;
  std::size_t index = 0;
  if (c.window_index) {
    if (*c.window_index >= test.size()) {
      throw ConfigError("window index " + std::to_string(*c.window_index) + " out of range: the test subject has " +
                        std::to_string(test.size()) + " windows");
    }
    index = *c.window_index;
  } else {
    const auto it = std::find_if(test.begin(), test.end(), [](const SampleWindow& w) { return w.label == 1; });
    if (it != test.end()) index = static_cast<std::size_t>(it - test.begin());
  }
  const auto& w = test[index];
  const auto maps = export_feature_maps(fm.model, w);
  const auto paths = write_feature_maps(ctx.path("maps"), maps);
  json files = json::array();
  for (std::size_t i = 0; i < maps.size(); ++i) {
    files.push_back({{"key", maps[i].key},
                     {"file", fs::relative(paths[i], c.out).generic_string()},
                     {"rows", maps[i].matrix.rows},
                     {"cols", maps[i].matrix.cols}});
  }
  const std::size_t t = w.acc.size() / 4;
  const double prob = fm.model.predict(Tensor({1, t, 4}, w.acc), Tensor({1, t, 4}, w.gyro)).front();
  write_json(ctx.path("maps.json"), {{"variant", to_string(fm.model.spec().variant)},
                                     {"window",
                                      {{"subject", w.subject},
                                       {"trial", w.trial},
                                       {"start", w.start},
                                       {"label", w.label},
                                       {"test_index", index},
                                       {"probability", prob}}},
                                     {"maps", files}});
  ctx.say("wrote " + std::to_string(maps.size()) + " maps for " + w.trial + "@" + std::to_string(w.start));
  return 0;
}

int cmd_eval(Context& ctx) {
  const auto& c = ctx.config;
  auto windows = load_windows(ctx);
  auto loaded = load_model(*c.from);
  if (loaded.model.spec().window != c.model.window) {
    throw ConfigError("checkpoint window " + std::to_string(loaded.model.spec().window) + " differs from data window " +
                      std::to_string(c.model.window));
  }
  if (loaded.standardizer)
    for (auto& w : windows) loaded.standardizer->apply(w);
  const auto batch = gather(windows);
  const auto probs = loaded.model.predict(batch.acc, batch.gyro);
  const auto m = metrics(probs, batch.labels, c.threshold);
  auto j = metrics_to_json(m);
  j["variant"] = to_string(loaded.model.spec().variant);
  j["windows"] = windows.size();
  j["threshold"] = c.threshold;
  write_json(ctx.path("metrics.json"), j);
  write_predictions(ctx.path("predictions.csv"), windows, probs);
  ctx.say("macro-F1 " + fixed(m.f1) + " accuracy " + fixed(m.accuracy) + " on " + std::to_string(windows.size()) +
          " windows");
  return 0;
}

int cmd_bench(Context& ctx) {
  const auto& c = ctx.config;
  std::vector<Variant> variants = c.variants;
  if (variants.empty()) variants = {Variant::gated_cnn, Variant::transformer};
  std::vector<ModelSpec> specs;
  json models = json::array();
  for (auto v : variants) {
    ModelSpec spec = c.model;
    spec.variant = v;
    spec.dropout.reset();
    specs.push_back(spec);
    const auto model = Model::build(spec, c.seed);
    json layers = json::array();
    for (const auto& [name, count] : model.param_table()) layers.push_back({{"layer", name}, {"params", count}});
    const auto flops = model.flops(spec.window);
    models.push_back({{"variant", to_string(v)},
                      {"window", spec.window},
                      {"param_count", model.param_count()},
                      {"flops", flops.total()},
                      {"backbone_flops", flops.backbone},
                      {"head_flops", flops.head},
                      {"params_by_layer", layers}});
  }
  auto bench = c.bench;
  bench.seed = c.seed;
  auto report = scaling_bench(specs, bench, [&](const BenchRow& r) {
    ctx.say(r.variant + " T=" + std::to_string(r.steps) + " median " + fixed(r.median_ms, 2) + " ms");
  });
  for (const auto& w : report.warnings) ctx.warn(w);
  write_bench_csv(ctx.path("bench.csv"), report.rows, report.exponents);
  json exponents = json::array();
  for (const auto& e : report.exponents) {
    exponents.push_back({{"variant", e.variant}, {"exponent", e.exponent}, {"points", e.points}});
    ctx.say(e.variant + " scaling exponent " + fixed(e.exponent, 3));
  }
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"variant", r.variant},
                    {"T", r.steps},
                    {"median_ms", r.median_ms},
                    {"p25_ms", r.p25_ms},
                    {"p75_ms", r.p75_ms},
                    {"analytic_flops", r.analytic_flops},
                    {"unstable", r.unstable}});
  }
  write_json(ctx.path("cost.json"), {{"models", models},
                                     {"batch", bench.batch},
                                     {"repetitions", bench.repetitions},
                                     {"rows", rows},
                                     {"scaling_exponents", exponents},
                                     {"warnings", report.warnings}});
  return 0;
}

json synth_to_json(const SynthConfig& s) {
  return {{"subjects", s.subjects},
          {"trials_per_class", s.trials_per_class},
          {"rate_hz", s.rate_hz},
          {"duration_s", s.duration_s},
          {"seed", s.seed}};
}

}  // namespace

std::string to_string(Command c) {
  for (const auto& [cmd, name] : kCommandNames)
    if (cmd == c) return std::string(name);
  return "unknown";
}

Command parse_command(std::string_view name) {
  for (const auto& [cmd, n] : kCommandNames)
    if (n == name) return cmd;
  throw ConfigError("unknown command '" + std::string(name) + "'");
}

std::string version() {
  return FALLDET_VERSION;
}

void RunConfig::validate() const {
  const bool needs_data = command != Command::bench;
  if (data && synth) throw ConfigError("give either a CSV file or synthetic parameters, not both");
  if (needs_data && !data && !synth) throw ConfigError(to_string(command) + " needs a data source (--data or --synth)");
  if (command == Command::synth && !synth) throw ConfigError("synth needs synthetic parameters");
  if (command == Command::eval && !from) throw ConfigError("eval needs a trained model (--from)");
  if (out.empty()) throw ConfigError("output directory is empty");
  if (workers == 0) throw ConfigError("workers must be at least 1");
  if (!(threshold >= 0 && threshold <= 1)) throw ConfigError("threshold must lie in [0, 1]");
  if (max_windows == 0) throw ConfigError("max_windows must be at least 1");
  if (!(rate_hz > 0)) throw ConfigError("rate_hz must be positive");
  if (!(window.seconds > 0) || window.stride == 0) throw ConfigError("window seconds and stride must be positive");
  if (!(window.label.min_fraction >= 0 && window.label.min_fraction <= 1)) {
    throw ConfigError("window min_fraction must lie in [0, 1]");
  }
  if (folds && *folds == 0) throw ConfigError("folds must be at least 1");
  try {
    if (synth) synth->validate();
    train.validate();
    model.validate();
    for (auto v : variants) {
      ModelSpec s = model;
      s.variant = v;
      s.validate();
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (command == Command::export_maps && !from && model.variant != Variant::gated_cnn &&
      model.variant != Variant::transformer) {
    throw ConfigError("export-maps supports gated-cnn and transformer, not " + to_string(model.variant));
  }
  if (command == Command::bench) {
    if (bench.steps.empty() || bench.repetitions == 0 || bench.batch == 0 || bench.chunk == 0) {
      throw ConfigError("bench needs steps, repetitions, batch and chunk");
    }
  }
}

json run_config_to_json(const RunConfig& c) {
  json train = train_config_to_json(c.train);
  train.erase("seed");
  json variants = json::array();
  for (auto v : c.variants) variants.push_back(to_string(v));
  return {{"command", to_string(c.command)},
          {"data", c.data ? json(c.data->string()) : json(nullptr)},
          {"synth", c.synth ? synth_to_json(*c.synth) : json(nullptr)},
          {"schema", c.schema ? json(c.schema->string()) : json(nullptr)},
          {"rate_hz", c.rate_hz},
          {"window",
           {{"seconds", c.window.seconds}, {"stride", c.window.stride}, {"min_fraction", c.window.label.min_fraction}}},
          {"model", spec_to_json(c.model)},
          {"train", train},
          {"out", c.out.string()},
          {"seed", c.seed},
          {"folds", c.folds ? json(*c.folds) : json(nullptr)},
          {"fold", c.fold},
          {"workers", c.workers},
          {"threshold", c.threshold},
          {"standardize", c.standardize},
          {"baseline", to_string(c.baseline)},
          {"from", c.from ? json(c.from->string()) : json(nullptr)},
          {"max_windows", c.max_windows},
          {"window_index", c.window_index ? json(*c.window_index) : json(nullptr)},
          {"variants", variants},
          {"bench",
           {{"steps", c.bench.steps},
            {"repetitions", c.bench.repetitions},
            {"warmup", c.bench.warmup},
            {"batch", c.bench.batch},
            {"chunk", c.bench.chunk},
            {"fit_min_steps", c.bench.fit_min_steps},
            {"fit_max_steps", c.bench.fit_max_steps}}}};
}

json config_document(const json& j) {
  if (j.is_object() && j.contains("config") && j.contains("tool")) return j.at("config");
  return j;
}

RunConfig run_config_from_json(const json& doc) {
  const json& j = config_document(doc);
  check_keys(j,
             {"command", "data", "synth", "schema", "rate_hz", "window", "model", "train", "out", "seed", "folds", "fold",
              "workers", "threshold", "standardize", "baseline", "from", "max_windows", "window_index", "variants",
              "bench"},
             "config");
  RunConfig c;
  try {
    if (j.contains("command")) c.command = parse_command(j.at("command").get<std::string>());
    read(j, "seed", c.seed);
    if (j.contains("data") && !j.at("data").is_null()) c.data = j.at("data").get<std::string>();
    if (j.contains("synth") && !j.at("synth").is_null()) {
      const auto& s = j.at("synth");
      check_keys(s, {"subjects", "trials_per_class", "rate_hz", "duration_s", "seed"}, "synth");
      SynthConfig sc;
      sc.seed = c.seed;
      read(s, "subjects", sc.subjects);
      read(s, "trials_per_class", sc.trials_per_class);
      read(s, "rate_hz", sc.rate_hz);
      read(s, "duration_s", sc.duration_s);
      read(s, "seed", sc.seed);
      c.synth = sc;
    }
    if (j.contains("schema") && !j.at("schema").is_null()) c.schema = j.at("schema").get<std::string>();
    read(j, "rate_hz", c.rate_hz);
    if (j.contains("window")) {
      const auto& w = j.at("window");
      check_keys(w, {"seconds", "stride", "min_fraction"}, "window");
      read(w, "seconds", c.window.seconds);
      read(w, "stride", c.window.stride);
      read(w, "min_fraction", c.window.label.min_fraction);
    }
    std::optional<std::size_t> explicit_window;
    if (j.contains("model")) {
      const auto& m = j.at("model");
      check_keys(m, {"variant", "window", "head_hidden", "dropout", "gate_source"}, "model");
      if (m.contains("variant")) c.model.variant = parse_variant(m.at("variant").get<std::string>());
      if (m.contains("window")) explicit_window = m.at("window").get<std::size_t>();
      read(m, "head_hidden", c.model.head_hidden);
      if (m.contains("dropout") && !m.at("dropout").is_null()) c.model.dropout = m.at("dropout").get<double>();
      if (m.contains("gate_source")) c.model.gate_source = parse_gate_source(m.at("gate_source").get<std::string>());
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      check_keys(t, {"max_epochs", "batch_size", "patience", "learning_rate", "beta1", "beta2", "epsilon", "min_delta",
                     "shuffle"},
                 "train");
      c.train = train_config_from_json(t, c.train);
    }
    c.train.seed = c.seed;
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    if (j.contains("folds") && !j.at("folds").is_null()) c.folds = j.at("folds").get<std::size_t>();
    read(j, "fold", c.fold);
    read(j, "workers", c.workers);
    read(j, "threshold", c.threshold);
    read(j, "standardize", c.standardize);
    if (j.contains("baseline")) c.baseline = parse_baseline(j.at("baseline").get<std::string>());
    if (j.contains("from") && !j.at("from").is_null()) c.from = j.at("from").get<std::string>();
    read(j, "max_windows", c.max_windows);
    if (j.contains("window_index") && !j.at("window_index").is_null()) {
      c.window_index = j.at("window_index").get<std::size_t>();
    }
    if (j.contains("variants")) {
      for (const auto& v : j.at("variants")) c.variants.push_back(parse_variant(v.get<std::string>()));
    }
    if (j.contains("bench")) {
      const auto& b = j.at("bench");
      check_keys(b, {"steps", "repetitions", "warmup", "batch", "chunk", "fit_min_steps", "fit_max_steps"}, "bench");
      read(b, "steps", c.bench.steps);
      read(b, "repetitions", c.bench.repetitions);
      read(b, "warmup", c.bench.warmup);
      read(b, "batch", c.bench.batch);
      read(b, "chunk", c.bench.chunk);
      read(b, "fit_min_steps", c.bench.fit_min_steps);
      read(b, "fit_max_steps", c.bench.fit_max_steps);
    }
    c.bench.seed = c.seed;
    if (!(c.sample_rate() > 0) || !(c.window.seconds > 0)) throw ConfigError("sample rate and window must be positive");
    c.model.window = window_length(c.sample_rate(), c.window.seconds);
    if (explicit_window && *explicit_window != c.model.window) {
      throw ConfigError("model window " + std::to_string(*explicit_window) + " does not match " +
                        std::to_string(c.model.window) + " samples per window at the configured rate");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  } catch (const SpecError& e) {
    throw ConfigError(e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return c;
}

ErrorCategory classify(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const SpecError*>(&e)) return {2, "config"};
  if (dynamic_cast<const DataError*>(&e)) return {3, "data"};
  if (dynamic_cast<const TrainingError*>(&e)) return {4, "training"};
  return {1, "internal"};
}

fs::path standardizer_path(const fs::path& checkpoint) {
  std::string name = checkpoint.filename().string();
  const std::string suffix = "model.json";
  if (name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0) {
    name.replace(name.size() - suffix.size(), suffix.size(), "standardizer.json");
  } else {
    name += ".standardizer.json";
  }
  return checkpoint.parent_path() / name;
}

void save_standardizer(const fs::path& path, const Standardizer& s) {
  write_json(path, {{"channels", channel_names()}, {"mean", s.mean}, {"scale", s.scale}});
}

Standardizer load_standardizer(const fs::path& path) {
  const auto j = read_json(path);
  Standardizer s;
  try {
    s.mean = j.at("mean").get<std::array<double, 8>>();
    s.scale = j.at("scale").get<std::array<double, 8>>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": malformed standardizer: " + e.what());
  }
  return s;
}

RunOutcome run_command(const RunConfig& config, const LogFn& log) {
  config.validate();
  std::error_code ec;
  fs::create_directories(config.out, ec);
  if (ec || !fs::is_directory(config.out)) {
    throw ConfigError("cannot create output directory " + config.out.string() + ": " + ec.message());
  }
  {
    const auto probe = config.out / ".write-test";
    std::ofstream f(probe);
    if (!f) throw ConfigError("output directory " + config.out.string() + " is not writable");
    f.close();
    fs::remove(probe, ec);
  }

  Context ctx{config, log, {}, {}};
  ctx.manifest = {{"tool", "falldet"},
                  {"version", version()},
                  {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                std::to_string(EIGEN_MINOR_VERSION)},
                  {"command", to_string(config.command)},
                  {"seed", config.seed},
                  {"config", run_config_to_json(config)},
                  {"status", "running"}};
  const auto manifest_path = config.out / "run-manifest.json";
  write_json(manifest_path, ctx.manifest);

  int code = 0;
  try {
    switch (config.command) {
      case Command::synth: code = cmd_synth(ctx); break;
      case Command::train: code = cmd_train(ctx); break;
      case Command::loso: code = cmd_loso(ctx); break;
      case Command::ablate: code = cmd_ablate(ctx); break;
      case Command::attribute: code = cmd_attribute(ctx); break;
      case Command::bench: code = cmd_bench(ctx); break;
      case Command::export_maps: code = cmd_export_maps(ctx); break;
      case Command::eval: code = cmd_eval(ctx); break;
    }
  } catch (const std::exception& e) {
    const auto cat = classify(e);
    ctx.manifest["status"] = "failed";
    ctx.manifest["error"] = {{"category", cat.name}, {"message", e.what()}};
    ctx.manifest["warnings"] = ctx.warnings;
    write_json(manifest_path, ctx.manifest);
    throw;
  }
  ctx.manifest["status"] = code == 0 ? "ok" : "failed";
  if (code != 0) ctx.manifest["error"] = {{"category", "training"}, {"message", "every fold failed"}};
  ctx.manifest["warnings"] = ctx.warnings;
  write_json(manifest_path, ctx.manifest);
  return {code, ctx.warnings};
}

}  // namespace falldet
