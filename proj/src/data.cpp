#include "falldet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "falldet/rng.hpp"

namespace falldet {

SeriesTooShort::SeriesTooShort(std::size_t length, std::size_t width)
    : DataError("series of " + std::to_string(length) + " samples is shorter than the window of " +
                std::to_string(width)),
      length(length),
      width(width) {}

CsvError::CsvError(std::string file, std::size_t line, const std::string& message)
    : DataError(file + (line ? ":" + std::to_string(line) : std::string()) + ": " + message),
      file(std::move(file)),
      line(line) {}

double magnitude(double x, double y, double z) { return std::sqrt(x * x + y * y + z * z); }

StreamSeries magnitude_augment(const Recording& recording) {
  StreamSeries s;
  s.length = recording.samples.size();
  s.acc.reserve(4 * s.length);
  s.gyro.reserve(4 * s.length);
  for (const auto& smp : recording.samples) {
    const auto& a = smp.acc;
    const auto& g = smp.gyro;
    s.acc.insert(s.acc.end(), {a[0], a[1], a[2], magnitude(a[0], a[1], a[2])});
    s.gyro.insert(s.gyro.end(), {g[0], g[1], g[2], magnitude(g[0], g[1], g[2])});
  }
  return s;
}

std::size_t window_length(double rate_hz, double seconds) {
  if (!(rate_hz > 0) || !(seconds > 0)) throw DataError("window: rate and duration must be positive");
  return static_cast<std::size_t>(std::llround(rate_hz * seconds));
}

std::size_t window_count(std::size_t length, std::size_t width, std::size_t stride) {
  if (length < width) return 0;
  return (length - width) / stride + 1;
}

std::vector<SampleWindow> window(const StreamSeries& series, double rate_hz, double seconds, std::size_t stride) {
  if (stride == 0) throw DataError("window: stride must be positive");
  const std::size_t w = window_length(rate_hz, seconds);
  if (w == 0) throw DataError("window: window length rounds to zero");
  if (series.length < w) throw SeriesTooShort(series.length, w);
  const std::size_t n = window_count(series.length, w, stride);
  std::vector<SampleWindow> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = i * stride;
    out[i].start = start;
    out[i].acc.assign(series.acc.begin() + 4 * start, series.acc.begin() + 4 * (start + w));
    out[i].gyro.assign(series.gyro.begin() + 4 * start, series.gyro.begin() + 4 * (start + w));
  }
  return out;
}

int label_window(std::span<const std::uint8_t> fall, std::size_t start, std::size_t width, const LabelRule& rule) {
  if (start + width > fall.size()) {
    throw DataError("label_window: annotations cover " + std::to_string(fall.size()) + " samples, window needs " +
                    std::to_string(start + width));
  }
  const auto hits = static_cast<std::size_t>(std::count_if(fall.begin() + start, fall.begin() + start + width,
                                                           [](std::uint8_t f) { return f != 0; }));
  if (hits == 0) return 0;
  return static_cast<double>(hits) / static_cast<double>(width) >= rule.min_fraction ? 1 : 0;
}

std::vector<SampleWindow> make_windows(const Recording& recording, const WindowConfig& config) {
  auto windows = window(magnitude_augment(recording), recording.rate_hz, config.seconds, config.stride);
  std::vector<std::uint8_t> fall(recording.samples.size());
  std::transform(recording.samples.begin(), recording.samples.end(), fall.begin(),
                 [](const ImuSample& s) { return static_cast<std::uint8_t>(s.fall); });
  const std::size_t w = window_length(recording.rate_hz, config.seconds);
  for (auto& win : windows) {
    win.label = label_window(fall, win.start, w, config.label);
    win.subject = recording.subject;
    win.trial = recording.trial;
  }
  return windows;
}

std::vector<SampleWindow> make_windows(std::span<const Recording> recordings, const WindowConfig& config) {
  std::vector<SampleWindow> out;
  for (const auto& r : recordings) {
    auto w = make_windows(r, config);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

ClassWeights class_weights(std::span<const int> labels) {
  std::size_t n1 = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw DataError("class_weights: label outside {0,1}");
    n1 += static_cast<std::size_t>(y);
  }
  const std::size_t n0 = labels.size() - n1;
  if (n0 == 0 || n1 == 0) throw DataError("class_weights: training labels contain a single class");
  const double n = static_cast<double>(labels.size());
  return {n / (2.0 * static_cast<double>(n0)), n / (2.0 * static_cast<double>(n1))};
}

// ---- CSV ----

const std::vector<std::string>& CsvSchema::canonical() {
  static const std::vector<std::string> names{"subject", "trial", "activity", "label_is_fall", "t", "ax",
                                              "ay",      "az",    "gx",       "gy",            "gz"};
  return names;
}

std::string CsvSchema::column(const std::string& name) const {
  auto it = columns.find(name);
  return it == columns.end() ? name : it->second;
}

CsvSchema CsvSchema::from_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema " + path.string());
  CsvSchema schema;
  try {
    const auto j = nlohmann::json::parse(in);
    for (const auto& [key, value] : j.items()) {
      if (std::find(canonical().begin(), canonical().end(), key) == canonical().end()) {
        throw DataError("schema " + path.string() + ": unknown column " + key);
      }
      schema.columns[key] = value.get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("schema " + path.string() + ": " + e.what());
  }
  return schema;
}

namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  for (;;) {
    const auto comma = line.find(',', pos);
    auto field = line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    while (!field.empty() && (field.front() == ' ' || field.front() == '\t')) field.remove_prefix(1);
    while (!field.empty() && (field.back() == ' ' || field.back() == '\t')) field.remove_suffix(1);
    out.push_back(field);
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return out;
}

double parse_number(std::string_view text, const std::string& file, std::size_t line, const std::string& column) {
  double v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw CsvError(file, line, "column " + column + ": cannot parse '" + std::string(text) + "' as a finite number");
  }
  return v;
}

bool parse_flag(std::string_view text, const std::string& file, std::size_t line, const std::string& column) {
  if (text == "1" || text == "true" || text == "True") return true;
  if (text == "0" || text == "false" || text == "False") return false;
  throw CsvError(file, line, "column " + column + ": expected 0 or 1, found '" + std::string(text) + "'");
}

}  // namespace

IngestResult ingest_csv(const std::filesystem::path& path, double rate_hz, const CsvSchema& schema) {
  const std::string file = path.string();
  std::ifstream in(path);
  if (!in) throw CsvError(file, 0, "cannot open file");
  IngestResult result;

  std::string line;
  std::size_t line_no = 0;
  auto next_line = [&]() {
    while (std::getline(in, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) return true;
    }
    return false;
  };

  if (!next_line()) {
    result.warnings.push_back(file + ": empty file, no recordings");
    return result;
  }
  const auto header = split_fields(line);
  std::array<std::size_t, 11> col{};
  const auto& names = CsvSchema::canonical();
  for (std::size_t c = 0; c < names.size(); ++c) {
    const std::string want = schema.column(names[c]);
    auto it = std::find(header.begin(), header.end(), want);
    if (it == header.end()) throw CsvError(file, line_no, "missing column " + want);
    col[c] = static_cast<std::size_t>(it - header.begin());
  }

  std::map<std::pair<std::string, std::string>, std::size_t> index;
  while (next_line()) {
    const auto f = split_fields(line);
    if (f.size() != header.size()) {
      throw CsvError(file, line_no,
                     "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
    }
    auto field = [&](std::size_t c) { return f[col[c]]; };
    auto number = [&](std::size_t c) { return parse_number(field(c), file, line_no, schema.column(names[c])); };

    const std::string subject(field(0)), trial(field(1));
    if (subject.empty()) throw CsvError(file, line_no, "empty subject id");
    auto [it, inserted] = index.try_emplace({subject, trial}, result.recordings.size());
    if (inserted) {
      Recording r;
      r.subject = subject;
      r.trial = trial;
      r.activity = std::string(field(2));
      r.rate_hz = rate_hz;
      result.recordings.push_back(std::move(r));
    }
    auto& rec = result.recordings[it->second];

    ImuSample s;
    s.fall = parse_flag(field(3), file, line_no, schema.column(names[3]));
    s.t = number(4);
    s.acc = {number(5), number(6), number(7)};
    s.gyro = {number(8), number(9), number(10)};
    if (!rec.samples.empty() && !(s.t > rec.samples.back().t)) {
      throw CsvError(file, line_no, "timestamp " + std::string(field(4)) + " does not increase within subject " +
                                        subject + " trial " + trial);
    }
    rec.samples.push_back(s);
  }
  if (result.recordings.empty()) result.warnings.push_back(file + ": header only, no recordings");
  return result;
}

namespace {

void put_number(std::string& out, double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, ptr);
}

}  // namespace

void write_csv(const std::filesystem::path& path, std::span<const Recording> recordings) {
  std::string out;
  const auto& names = CsvSchema::canonical();
  for (std::size_t c = 0; c < names.size(); ++c) out += (c ? "," : "") + names[c];
  out += '\n';
  for (const auto& r : recordings) {
    for (const auto& s : r.samples) {
      out += r.subject + ',' + r.trial + ',' + r.activity + ',' + (s.fall ? '1' : '0') + ',';
      put_number(out, s.t);
      for (double v : s.acc) {
        out += ',';
        put_number(out, v);
      }
      for (double v : s.gyro) {
        out += ',';
        put_number(out, v);
      }
      out += '\n';
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path.string());
  f << out;
  if (!f) throw DataError("failed writing " + path.string());
}

// ---- synthetic data ----

void SynthConfig::validate() const {
  if (subjects < 3) throw DataError("synth: at least 3 subjects are needed for train/validation/test");
  if (trials_per_class < 1) throw DataError("synth: trials per class must be at least 1");
  if (!(rate_hz >= 16) || !(rate_hz <= 1000)) throw DataError("synth: rate must lie in [16, 1000] Hz");
  if (!(duration_s >= 4) || !(duration_s <= 600)) throw DataError("synth: duration must lie in [4, 600] s");
}

namespace {

constexpr double kGravity = 9.81;
constexpr double kTwoPi = 2 * std::numbers::pi;

using Vec3 = std::array<double, 3>;

Vec3 unit(Vec3 v) {
  const double n = magnitude(v[0], v[1], v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 random_unit(Rng& rng) { return unit({rng.normal(), rng.normal(), rng.normal()}); }

struct SubjectStyle {
  double amplitude;
  double frequency;
  Vec3 tilt;
};

struct Sinusoid {
  double amplitude, frequency, phase;
};

std::vector<Sinusoid> sinusoids(Rng& rng, std::size_t count, double amp_lo, double amp_hi, double f_lo, double f_hi,
                                const SubjectStyle& style) {
  std::vector<Sinusoid> out(count);
  for (auto& s : out) {
    s.amplitude = style.amplitude * rng.uniform(amp_lo, amp_hi);
    s.frequency = style.frequency * rng.uniform(f_lo, f_hi);
    s.phase = rng.uniform(0, kTwoPi);
  }
  return out;
}

double evaluate(const std::vector<Sinusoid>& parts, double t) {
  double v = 0;
  for (const auto& p : parts) v += p.amplitude * std::sin(kTwoPi * p.frequency * t + p.phase);
  return v;
}

enum class Kind { walk, sit_down, fall };

Recording synth_trial(Rng& rng, const SynthConfig& cfg, const SubjectStyle& style, Kind kind, std::string subject,
                      std::string trial) {
  const auto L = static_cast<std::size_t>(std::llround(cfg.duration_s * cfg.rate_hz));
  const double rate = cfg.rate_hz;
  const auto secs = [&](double s) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(s * rate))); };

  Recording r;
  r.subject = std::move(subject);
  r.trial = std::move(trial);
  r.activity = kind == Kind::fall ? "fall" : kind == Kind::walk ? "walk" : "sit-down";
  r.rate_hz = rate;

  const Vec3 g = unit({style.tilt[0] + 0.15 * rng.normal(), style.tilt[1], style.tilt[2] + 0.15 * rng.normal()});
  const double vigor = kind == Kind::walk ? 1.5 : 1.0;
  std::array<std::vector<Sinusoid>, 3> acc_parts, gyro_parts;
  for (int a = 0; a < 3; ++a) {
    acc_parts[a] = sinusoids(rng, 3, 0.2 * vigor, 0.8 * vigor, 0.4, 2.2, style);
    gyro_parts[a] = sinusoids(rng, 2, 0.05 * vigor, 0.4 * vigor, 0.3, 1.5, style);
  }
  const double acc_noise = 0.05 * style.amplitude;
  const double gyro_noise = 0.01;

  // Event durations in samples.
  std::size_t rot = 0, impact = 0, bump = 0;
  double rot_amp = 0, impact_amp = 0, ring_hz = 0, bump_amp = 0;
  const Vec3 rot_axis = random_unit(rng);
  if (kind == Kind::fall) {
    rot = secs(rng.uniform(0.25, 0.5));
    impact = secs(rng.uniform(0.2, 0.5));
    rot_amp = rng.uniform(3, 6);
    impact_amp = rng.uniform(20, 40);
    ring_hz = std::min(rng.uniform(5, 9), 0.4 * rate);
  } else if (kind == Kind::sit_down) {
    rot = secs(rng.uniform(0.25, 0.5));
    bump = std::max(secs(1.0), static_cast<std::size_t>(rng.uniform(0.17, 0.25) * static_cast<double>(L)));
    rot_amp = rng.uniform(3, 6);
    bump_amp = rng.uniform(20, 40);
  }
  const std::size_t event = kind == Kind::fall ? rot + impact : kind == Kind::sit_down ? std::max(rot, bump) : 0;

  // Events sit where every 4 s window of the trial covers them when possible.
  const std::size_t w4 = window_length(rate, 4.0);
  std::size_t lo = L > w4 ? L - w4 : 0, hi = std::min(L, w4);
  if (hi < lo + event) lo = 0, hi = L;
  const std::size_t start = event ? lo + rng.index(hi - lo - event + 1) : L;
  const std::size_t settle = start + event;
  const double after = kind == Kind::fall ? 0.25 : kind == Kind::sit_down ? 0.5 : 1.0;

  r.samples.resize(L);
  for (std::size_t i = 0; i < L; ++i) {
    auto& s = r.samples[i];
    const double t = static_cast<double>(i) / rate;
    const double env = i < settle ? 1.0 : after;
    for (int a = 0; a < 3; ++a) {
      s.acc[a] = kGravity * g[a] + env * evaluate(acc_parts[a], t) + rng.normal(0, acc_noise);
      s.gyro[a] = env * evaluate(gyro_parts[a], t) + rng.normal(0, gyro_noise);
    }
    s.t = t;
    if (i >= start && i < start + rot) {
      const double phase = std::numbers::pi * static_cast<double>(i - start) / static_cast<double>(rot);
      for (int a = 0; a < 3; ++a) s.gyro[a] += rot_amp * std::sin(phase) * rot_axis[a];
    }
    if (kind == Kind::fall && i >= start + rot && i < settle) {
      const double tau = static_cast<double>(i - start - rot);
      const double decay = std::exp(-tau / (static_cast<double>(impact) / 4.0));
      const double v = impact_amp * decay * std::cos(kTwoPi * ring_hz * tau / rate);
      for (int a = 0; a < 3; ++a) s.acc[a] += v * g[a];
    }
    if (kind == Kind::sit_down && i >= start && i < start + bump) {
      const double v = bump_amp * std::sin(std::numbers::pi * static_cast<double>(i - start) / static_cast<double>(bump));
      for (int a = 0; a < 3; ++a) s.acc[a] += v * g[a];
    }
    s.fall = kind == Kind::fall && i >= start && i < settle;
  }
  return r;
}

std::string padded(std::size_t v, int width) {
  std::string s = std::to_string(v);
  return std::string(s.size() < static_cast<std::size_t>(width) ? width - s.size() : 0, '0') + s;
}

}  // namespace

std::vector<Recording> synth_generate(const SynthConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<Recording> out;
  for (std::size_t s = 0; s < config.subjects; ++s) {
    SubjectStyle style{rng.uniform(0.7, 1.3), rng.uniform(0.8, 1.25), {0.3 * rng.normal(), 1.0, 0.3 * rng.normal()}};
    const std::string subject = "S" + padded(s + 1, 2);
    std::size_t trial = 0;
    for (std::size_t k = 0; k < config.trials_per_class; ++k) {
      const Kind kind = k % 2 == 0 ? Kind::walk : Kind::sit_down;
      out.push_back(synth_trial(rng, config, style, kind, subject, subject + "-T" + padded(++trial, 2)));
    }
    for (std::size_t k = 0; k < config.trials_per_class; ++k) {
      out.push_back(synth_trial(rng, config, style, Kind::fall, subject, subject + "-T" + padded(++trial, 2)));
    }
  }
  return out;
}

double impulse_ratio(const Recording& recording) {
  const auto n = recording.samples.size();
  if (n == 0) throw DataError("impulse_ratio: empty recording");
  std::vector<double> mag(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& a = recording.samples[i].acc;
    mag[i] = magnitude(a[0], a[1], a[2]);
  }
  std::vector<double> sorted = mag;
  std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
  const double median = sorted[n / 2];
  double peak = 0, sq = 0;
  for (double m : mag) {
    const double d = m - median;
    peak = std::max(peak, std::abs(d));
    sq += d * d;
  }
  const double rms = std::sqrt(sq / static_cast<double>(n));
  return rms > 0 ? peak / rms : 0.0;
}

// ---- folds ----

std::vector<std::string> subjects_of(std::span<const Recording> recordings) {
  std::set<std::string> s;
  for (const auto& r : recordings) s.insert(r.subject);
  return {s.begin(), s.end()};
}

std::vector<std::string> subjects_of(std::span<const SampleWindow> windows) {
  std::set<std::string> s;
  for (const auto& w : windows) s.insert(w.subject);
  return {s.begin(), s.end()};
}

std::vector<FoldPlan> loso_plan(std::span<const std::string> subject_ids, std::optional<std::size_t> folds,
                                std::uint64_t seed) {
  std::set<std::string> unique(subject_ids.begin(), subject_ids.end());
  const std::vector<std::string> subjects(unique.begin(), unique.end());
  if (subjects.size() < 3) {
    throw DataError("loso_plan: need at least 3 subjects, found " + std::to_string(subjects.size()));
  }
  const std::size_t k = folds.value_or(std::min<std::size_t>(10, subjects.size()));
  if (k < 1 || k > subjects.size()) {
    throw DataError("loso_plan: folds must lie in [1, " + std::to_string(subjects.size()) + "], got " +
                    std::to_string(k));
  }
  Rng rng(seed);
  auto order = subjects;
  rng.shuffle(order);

  std::vector<FoldPlan> plan(k);
  for (std::size_t f = 0; f < k; ++f) {
    auto& fold = plan[f];
    fold.index = f;
    fold.test = order[f];
    std::vector<std::string> rest;
    for (const auto& s : subjects)
      if (s != fold.test) rest.push_back(s);
    fold.validation = rest[rng.index(rest.size())];
    for (const auto& s : rest)
      if (s != fold.validation) fold.train.push_back(s);
  }
  return plan;
}

// ---- splits ----

Standardizer Standardizer::fit(std::span<const SampleWindow> windows) {
  Standardizer st;
  std::array<double, 8> sum{}, sq{};
  std::size_t rows = 0;
  for (const auto& w : windows) {
    const std::size_t t = w.acc.size() / 4;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        sum[c] += w.acc[4 * i + c];
        sq[c] += w.acc[4 * i + c] * w.acc[4 * i + c];
        sum[4 + c] += w.gyro[4 * i + c];
        sq[4 + c] += w.gyro[4 * i + c] * w.gyro[4 * i + c];
      }
    }
    rows += t;
  }
  if (rows == 0) throw DataError("standardize: no training rows");
  for (std::size_t c = 0; c < 8; ++c) {
    st.mean[c] = sum[c] / static_cast<double>(rows);
    const double var = std::max(0.0, sq[c] / static_cast<double>(rows) - st.mean[c] * st.mean[c]);
    st.scale[c] = var > 1e-24 ? 1.0 / std::sqrt(var) : 1.0;
  }
  return st;
}

void Standardizer::apply(SampleWindow& w) const {
  const std::size_t t = w.acc.size() / 4;
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      w.acc[4 * i + c] = (w.acc[4 * i + c] - mean[c]) * scale[c];
      w.gyro[4 * i + c] = (w.gyro[4 * i + c] - mean[4 + c]) * scale[4 + c];
    }
  }
}

DatasetSplit make_split(std::span<const SampleWindow> windows, const FoldPlan& fold, bool standardize) {
  const std::set<std::string> train(fold.train.begin(), fold.train.end());
  DatasetSplit split;
  for (const auto& w : windows) {
    if (w.subject == fold.test) split.test.push_back(w);
    else if (w.subject == fold.validation) split.validation.push_back(w);
    else if (train.count(w.subject)) split.train.push_back(w);
  }
  if (split.train.empty() || split.validation.empty() || split.test.empty()) {
    throw DataError("fold " + std::to_string(fold.index) + ": empty train, validation or test set");
  }
  std::vector<int> labels;
  for (const auto& w : split.train) labels.push_back(w.label);
  split.weights = class_weights(labels);
  if (standardize) {
    const auto st = Standardizer::fit(split.train);
    for (auto* part : {&split.train, &split.validation, &split.test})
      for (auto& w : *part) st.apply(w);
    split.standardizer = st;
  }
  return split;
}

void assert_disjoint(const DatasetSplit& split) {
  const auto a = subjects_of(split.train), b = subjects_of(split.validation), c = subjects_of(split.test);
  auto overlap = [](const std::vector<std::string>& x, const std::vector<std::string>& y) {
    std::vector<std::string> both;
    std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(both));
    return both;
  };
  for (const auto& [name, both] : {std::pair{"train/validation", overlap(a, b)}, std::pair{"train/test", overlap(a, c)},
                                   std::pair{"validation/test", overlap(b, c)}}) {
    if (!both.empty()) throw DataError(std::string("subject leakage between ") + name + ": " + both.front());
  }
}

Batch gather(std::span<const SampleWindow> windows, std::span<const std::size_t> indices) {
  if (indices.empty()) throw DataError("gather: empty batch");
  const std::size_t w = windows[indices[0]].acc.size() / 4;
  std::vector<double> acc, gyro;
  acc.reserve(indices.size() * w * 4);
  gyro.reserve(indices.size() * w * 4);
  Batch b;
  for (std::size_t i : indices) {
    const auto& win = windows[i];
    if (win.acc.size() != 4 * w || win.gyro.size() != 4 * w) throw DataError("gather: windows differ in length");
    acc.insert(acc.end(), win.acc.begin(), win.acc.end());
    gyro.insert(gyro.end(), win.gyro.begin(), win.gyro.end());
    b.labels.push_back(win.label);
  }
  b.acc = Tensor({indices.size(), w, 4}, std::move(acc));
  b.gyro = Tensor({indices.size(), w, 4}, std::move(gyro));
  return b;
}

Batch gather(std::span<const SampleWindow> windows) {
  std::vector<std::size_t> idx(windows.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return gather(windows, idx);
}

std::array<double, 8> channel_means(std::span<const SampleWindow> windows) {
  std::array<double, 8> sum{};
  std::size_t rows = 0;
  for (const auto& w : windows) {
    const std::size_t t = w.acc.size() / 4;
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t c = 0; c < 4; ++c) {
        sum[c] += w.acc[4 * i + c];
        sum[4 + c] += w.gyro[4 * i + c];
      }
    }
    rows += t;
  }
  if (rows == 0) throw DataError("channel_means: no windows");
  for (double& s : sum) s /= static_cast<double>(rows);
  return sum;
}

}  // namespace falldet
