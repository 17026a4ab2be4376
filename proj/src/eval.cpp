#include "falldet/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace falldet {

double f1_score(double precision, double recall) {
  return precision + recall > 0 ? 2 * precision * recall / (precision + recall) : 0.0;
}

ConfusionCounts confusion(std::span<const double> probs, std::span<const int> labels, double threshold) {
  if (probs.size() != labels.size()) {
    throw std::invalid_argument("metrics: " + std::to_string(probs.size()) + " predictions vs " +
                                std::to_string(labels.size()) + " labels");
  }
  ConfusionCounts c;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const bool pred = probs[i] >= threshold;
    const bool truth = labels[i] != 0;
    if (pred && truth) ++c.tp;
    else if (pred) ++c.fp;
    else if (truth) ++c.fn;
    else ++c.tn;
  }
  return c;
}

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

ClassScores scores(std::size_t hit, std::size_t false_alarm, std::size_t miss) {
  ClassScores s;
  s.precision = ratio(hit, hit + false_alarm);
  s.recall = ratio(hit, hit + miss);
  s.f1 = f1_score(s.precision, s.recall);
  return s;
}

}  // namespace

Metrics metrics(const ConfusionCounts& c) {
  Metrics m;
  m.counts = c;
  m.fall = scores(c.tp, c.fp, c.fn);
  m.adl = scores(c.tn, c.fn, c.fp);
  m.precision = (m.fall.precision + m.adl.precision) / 2;
  m.recall = (m.fall.recall + m.adl.recall) / 2;
  m.f1 = (m.fall.f1 + m.adl.f1) / 2;
  m.accuracy = ratio(c.tp + c.tn, c.total());
  return m;
}

Metrics metrics(std::span<const double> probs, std::span<const int> labels, double threshold) {
  return metrics(confusion(probs, labels, threshold));
}

nlohmann::json metrics_to_json(const Metrics& m) {
  auto cls = [](const ClassScores& s) {
    return nlohmann::json{{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
  };
  return {{"precision", m.precision},
          {"recall", m.recall},
          {"f1", m.f1},
          {"accuracy", m.accuracy},
          {"fall", cls(m.fall)},
          {"adl", cls(m.adl)},
          {"counts", {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"tn", m.counts.tn}, {"fn", m.counts.fn}}}};
}

// ---- attribution ----

const std::array<std::string, kChannels>& channel_names() {
  static const std::array<std::string, kChannels> names{"acc_x",  "acc_y",  "acc_z",  "acc_mag",
                                                        "gyro_x", "gyro_y", "gyro_z", "gyro_mag"};
  return names;
}

std::string to_string(Baseline b) { return b == Baseline::mean ? "mean" : "zero"; }

Baseline parse_baseline(std::string_view name) {
  if (name == "mean") return Baseline::mean;
  if (name == "zero") return Baseline::zero;
  throw std::invalid_argument("unknown baseline '" + std::string(name) + "' (expected mean or zero)");
}

namespace {

constexpr std::size_t kCoalitions = std::size_t{1} << kChannels;

// |S|! (n - |S| - 1)! / n! for n = 8 players.
std::array<double, kChannels> shapley_weights() {
  std::array<double, kChannels> w{};
  auto fact = [](std::size_t k) {
    double f = 1;
    for (std::size_t i = 2; i <= k; ++i) f *= static_cast<double>(i);
    return f;
  };
  for (std::size_t s = 0; s < kChannels; ++s) w[s] = fact(s) * fact(kChannels - s - 1) / fact(kChannels);
  return w;
}

}  // namespace

AttributionReport shapley_channels(const BatchFunction& f, std::span<const SampleWindow> windows, Baseline baseline,
                                   const std::array<double, kChannels>& baseline_values) {
  if (windows.empty()) throw std::invalid_argument("shapley_channels: no windows");
  AttributionReport report;
  report.baseline = baseline;
  if (baseline == Baseline::mean) report.baseline_values = baseline_values;
  const auto weights = shapley_weights();

  for (const auto& win : windows) {
    const std::size_t t = win.acc.size() / 4;
    std::vector<double> acc(kCoalitions * t * 4), gyro(kCoalitions * t * 4);
    for (std::size_t s = 0; s < kCoalitions; ++s) {
      double* a = acc.data() + s * t * 4;
      double* g = gyro.data() + s * t * 4;
      for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t c = 0; c < 4; ++c) {
          a[4 * i + c] = (s >> c) & 1 ? win.acc[4 * i + c] : report.baseline_values[c];
          g[4 * i + c] = (s >> (4 + c)) & 1 ? win.gyro[4 * i + c] : report.baseline_values[4 + c];
        }
      }
    }
    const auto v = f(Tensor({kCoalitions, t, 4}, std::move(acc)), Tensor({kCoalitions, t, 4}, std::move(gyro)));
    if (v.size() != kCoalitions) throw std::logic_error("shapley_channels: value function returned wrong count");

    WindowAttribution wa;
    wa.label = win.label;
    wa.full = v[kCoalitions - 1];
    wa.empty = v[0];
    for (std::size_t c = 0; c < kChannels; ++c) {
      const std::size_t bit = std::size_t{1} << c;
      double phi = 0;
      for (std::size_t s = 0; s < kCoalitions; ++s) {
        if (s & bit) continue;
        phi += weights[static_cast<std::size_t>(std::popcount(s))] * (v[s | bit] - v[s]);
      }
      wa.phi[c] = phi;
    }
    auto& group = win.label ? report.fall : report.adl;
    for (std::size_t c = 0; c < kChannels; ++c) group[c] += std::abs(wa.phi[c]);
    ++(win.label ? report.fall_windows : report.adl_windows);
    report.windows.push_back(wa);
  }
  for (std::size_t c = 0; c < kChannels; ++c) {
    if (report.fall_windows) report.fall[c] /= static_cast<double>(report.fall_windows);
    if (report.adl_windows) report.adl[c] /= static_cast<double>(report.adl_windows);
  }
  return report;
}

AttributionReport shapley_channels(Model& model, std::span<const SampleWindow> windows, Baseline baseline,
                                   const std::array<double, kChannels>& baseline_values) {
  if (!model.frozen()) throw ModeError("shapley_channels: model must be frozen");
  return shapley_channels([&](const Tensor& a, const Tensor& g) { return model.predict(a, g, kCoalitions); }, windows,
                          baseline, baseline_values);
}

nlohmann::json attribution_to_json(const AttributionReport& r) {
  nlohmann::json channels = nlohmann::json::array();
  for (std::size_t c = 0; c < kChannels; ++c) {
    channels.push_back({{"channel", channel_names()[c]},
                        {"baseline_value", r.baseline_values[c]},
                        {"mean_abs_phi_fall", r.fall[c]},
                        {"mean_abs_phi_adl", r.adl[c]}});
  }
  return {{"baseline", to_string(r.baseline)},
          {"grouping", "true label"},
          {"fall_windows", r.fall_windows},
          {"adl_windows", r.adl_windows},
          {"channels", channels}};
}

// ---- feature maps ----

namespace {

Matrix matrix_of(const Tensor& t) {
  // Drops the leading batch axis of a single-window tensor.
  if (t.rank() != 3 || t.dim(0) != 1) throw std::logic_error("feature map: expected a (1, rows, cols) tensor");
  return {t.dim(1), t.dim(2), std::vector<double>(t.data().begin(), t.data().end())};
}

std::string stream_key(const std::string& name) { return name == "stream-a" ? "acc" : "gyro"; }

}  // namespace

std::vector<FeatureMap> export_feature_maps(Model& model, const SampleWindow& window) {
  const auto v = model.spec().variant;
  if (v != Variant::gated_cnn && v != Variant::transformer) {
    throw SpecError("feature-map export supports gated-cnn and transformer, not " + to_string(v));
  }
  if (!model.frozen()) throw ModeError("export_feature_maps: model must be frozen");
  const std::size_t t = window.acc.size() / 4;
  Tensor acc({1, t, 4}, window.acc), gyro({1, t, 4}, window.gyro);
  ForwardTrace trace;
  ForwardContext ctx(model.params(), model.buffers(), Mode::infer);
  model.forward(ctx, acc, gyro, &trace);

  std::vector<FeatureMap> maps;
  for (const auto& st : trace.streams) {
    const auto key = stream_key(st.name);
    maps.push_back({key + "/features", matrix_of(st.features)});
    if (v == Variant::gated_cnn) {
      maps.push_back({key + "/projection", matrix_of(st.projection)});
      maps.push_back({key + "/gate", matrix_of(st.gate)});
      maps.push_back({key + "/gated", matrix_of(st.gated)});
      maps.push_back({key + "/refined", matrix_of(st.refined)});
      const auto gate = matrix_of(st.gate);
      const auto gated = matrix_of(st.gated);
      Matrix curve{gate.rows, 2, std::vector<double>(gate.rows * 2)};
      for (std::size_t r = 0; r < gate.rows; ++r) {
        double mean = 0, sq = 0;
        for (std::size_t c = 0; c < gate.cols; ++c) {
          mean += gate.values[r * gate.cols + c];
          sq += gated.values[r * gated.cols + c] * gated.values[r * gated.cols + c];
        }
        curve.values[2 * r] = mean / static_cast<double>(gate.cols);
        curve.values[2 * r + 1] = std::sqrt(sq);
      }
      maps.push_back({key + "/gate_curve", std::move(curve)});
    } else {
      for (std::size_t l = 0; l < st.attention.size(); ++l) {
        const auto& a = st.attention[l];  // (1, H, T, T)
        const std::size_t heads = a.dim(1), steps = a.dim(2);
        for (std::size_t h = 0; h < heads; ++h) {
          Matrix m{steps, steps, {}};
          const auto begin = a.data().begin() + static_cast<std::ptrdiff_t>(h * steps * steps);
          m.values.assign(begin, begin + static_cast<std::ptrdiff_t>(steps * steps));
          maps.push_back({key + "/layer" + std::to_string(l) + "/head" + std::to_string(h) + "/attention",
                          std::move(m)});
        }
      }
    }
  }
  return maps;
}

void write_matrix_csv(const std::filesystem::path& path, const Matrix& m, const std::vector<std::string>& header) {
  std::string out;
  for (std::size_t c = 0; c < header.size(); ++c) out += (c ? "," : "") + header[c];
  if (!header.empty()) out += '\n';
  char buf[40];
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      const auto [ptr, ec] =
          std::to_chars(buf, buf + sizeof buf, m.values[r * m.cols + c], std::chars_format::general, 17);
      if (c) out += ',';
      out.append(buf, ptr);
    }
    out += '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << out;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Matrix read_matrix_csv(const std::filesystem::path& path, bool has_header) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  Matrix m;
  std::string line;
  if (has_header) std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t cols = 0, pos = 0;
    for (;;) {
      const auto comma = line.find(',', pos);
      const auto end = comma == std::string::npos ? line.size() : comma;
      double v = 0;
      const auto [ptr, ec] = std::from_chars(line.data() + pos, line.data() + end, v);
      if (ec != std::errc() || ptr != line.data() + end) {
        throw std::runtime_error(path.string() + ": cannot parse row " + std::to_string(m.rows + 1));
      }
      m.values.push_back(v);
      ++cols;
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (m.rows == 0) m.cols = cols;
    if (cols != m.cols) throw std::runtime_error(path.string() + ": ragged row " + std::to_string(m.rows + 1));
    ++m.rows;
  }
  return m;
}

std::vector<std::filesystem::path> write_feature_maps(const std::filesystem::path& dir,
                                                      std::span<const FeatureMap> maps) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (const auto& fm : maps) {
    std::string file = fm.key;
    std::replace(file.begin(), file.end(), '/', '_');
    paths.push_back(dir / (file + ".csv"));
    write_matrix_csv(paths.back(), fm.matrix);
  }
  return paths;
}

// ---- cost ----

Timing time_calls(const std::function<void()>& call, std::size_t repetitions, std::size_t warmup) {
  if (repetitions == 0) throw std::invalid_argument("time_calls: need at least one repetition");
  for (std::size_t i = 0; i < warmup; ++i) call();
  std::vector<double> ms(repetitions);
  for (auto& m : ms) {
    const auto t0 = std::chrono::steady_clock::now();
    call();
    m = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  std::sort(ms.begin(), ms.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(ms.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, ms.size() - 1);
    return ms[lo] + (pos - static_cast<double>(lo)) * (ms[hi] - ms[lo]);
  };
  return {quantile(0.5), quantile(0.25), quantile(0.75)};
}

double scaling_exponent(std::span<const std::size_t> steps, std::span<const double> ms) {
  if (steps.size() != ms.size() || steps.size() < 2) throw std::invalid_argument("scaling_exponent: need two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const auto n = static_cast<double>(steps.size());
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const double x = std::log(static_cast<double>(steps[i])), y = std::log(ms[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

CostReport scaling_bench(std::span<const ModelSpec> specs, const BenchConfig& config,
                         const std::function<void(const BenchRow&)>& on_row) {
  if (config.batch == 0 || config.chunk == 0) throw std::invalid_argument("bench: batch and chunk must be positive");
  CostReport report;
  for (const auto& base : specs) {
    std::vector<std::size_t> fit_steps;
    std::vector<double> fit_ms;
    for (std::size_t steps : config.steps) {
      ModelSpec spec = base;
      spec.window = steps;
      if (spec.has_cnn() && steps % 4 != 0) {
        report.warnings.push_back(to_string(spec.variant) + ": T=" + std::to_string(steps) + " not divisible by 4");
        continue;
      }
      auto model = Model::build(spec, config.seed);
      model.freeze();
      Rng rng(config.seed + steps);
      std::vector<double> acc(config.batch * steps * 4), gyro(config.batch * steps * 4);
      for (auto& v : acc) v = rng.normal();
      for (auto& v : gyro) v = rng.normal();
      const Tensor a({config.batch, steps, 4}, std::move(acc)), g({config.batch, steps, 4}, std::move(gyro));
      const auto timing = time_calls([&] { model.predict(a, g, config.chunk); }, config.repetitions, config.warmup);

      BenchRow row{to_string(spec.variant), steps, timing.median_ms, timing.p25_ms, timing.p75_ms,
                   model.flops(steps).total(), false};
      row.unstable = timing.p75_ms - timing.p25_ms > 0.5 * timing.median_ms;
      if (row.unstable) {
        report.warnings.push_back(row.variant + " at T=" + std::to_string(steps) +
                                  ": timing unstable, inter-quartile range exceeds half the median");
      }
      if (static_cast<double>(steps) >= config.fit_min_steps && static_cast<double>(steps) <= config.fit_max_steps) {
        fit_steps.push_back(steps);
        fit_ms.push_back(row.median_ms);
      }
      report.rows.push_back(row);
      if (on_row) on_row(row);
    }
    if (fit_steps.size() >= 2) {
      report.exponents.push_back({to_string(base.variant), scaling_exponent(fit_steps, fit_ms), fit_steps.size()});
    }
  }
  return report;
}

void write_bench_csv(const std::filesystem::path& path, std::span<const BenchRow> rows,
                     std::span<const ScalingFit> exponents) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(6);
  out << "variant,T,median_ms,p25,p75,analytic_flops,scaling_exponent\n";
  for (const auto& r : rows) {
    out << r.variant << ',' << r.steps << ',' << r.median_ms << ',' << r.p25_ms << ',' << r.p75_ms << ','
        << r.analytic_flops << ',';
    for (const auto& e : exponents)
      if (e.variant == r.variant) out << e.exponent;
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace falldet
