#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "falldet/data.hpp"

using namespace falldet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("falldet_test_data_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Recording ramp_recording(std::size_t length, std::size_t fall_begin = 0, std::size_t fall_end = 0) {
  Recording r;
  r.subject = "A";
  r.trial = "1";
  r.activity = "walk";
  for (std::size_t i = 0; i < length; ++i) {
    ImuSample s;
    s.t = static_cast<double>(i) / 32.0;
    s.acc = {double(i), 1.0, -2.0};
    s.gyro = {0.5, double(i) * 0.1, 3.0};
    s.fall = i >= fall_begin && i < fall_end;
    r.samples.push_back(s);
  }
  return r;
}

void check_magnitude_channel(const SampleWindow& w) {
  for (const auto* block : {&w.acc, &w.gyro}) {
    for (std::size_t i = 0; i < block->size() / 4; ++i) {
      const double* row = block->data() + 4 * i;
      REQUIRE(std::abs(row[3] - std::sqrt(row[0] * row[0] + row[1] * row[1] + row[2] * row[2])) <= 1e-12);
    }
  }
}

const char* kHeader = "subject,trial,activity,label_is_fall,t,ax,ay,az,gx,gy,gz\n";

}  // namespace

TEST_CASE("magnitude of fixed vectors") {
  CHECK(magnitude(3, 4, 0) == 5.0);
  CHECK(magnitude(0, 0, 0) == 0.0);
}

TEST_CASE("magnitude is invariant under axis permutation and sign flips") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 5);
  for (int trial = 0; trial < 500; ++trial) {
    std::array<double, 3> v{n(rng), n(rng), n(rng)};
    const double m = magnitude(v[0], v[1], v[2]);
    std::array<int, 3> perm{0, 1, 2};
    std::shuffle(perm.begin(), perm.end(), rng);
    const double sx = rng() % 2 ? 1 : -1, sy = rng() % 2 ? 1 : -1, sz = rng() % 2 ? 1 : -1;
    CHECK(std::abs(magnitude(sx * v[perm[0]], sy * v[perm[1]], sz * v[perm[2]]) - m) <= 1e-12 * (1 + m));
  }
}

TEST_CASE("magnitude_augment appends the norm as the fourth channel") {
  auto s = magnitude_augment(ramp_recording(5));
  REQUIRE(s.length == 5);
  CHECK(s.acc.size() == 20);
  CHECK(s.acc[4 * 3 + 0] == 3.0);
  CHECK(s.acc[4 * 3 + 3] == doctest::Approx(std::sqrt(9.0 + 1.0 + 4.0)).epsilon(1e-15));
  CHECK(s.gyro[4 * 2 + 3] == doctest::Approx(std::sqrt(0.25 + 0.04 + 9.0)).epsilon(1e-15));
}

TEST_CASE("window length and count") {
  CHECK(window_length(32) == 128);
  CHECK(window_length(50) == 200);
  CHECK(window_count(200, 128, 10) == 8);
  CHECK(window_count(128, 128, 10) == 1);
  CHECK(window_count(127, 128, 10) == 0);

  auto series = magnitude_augment(ramp_recording(200));
  auto w = window(series, 32);
  REQUIRE(w.size() == 8);
  for (std::size_t i = 0; i < w.size(); ++i) {
    CHECK(w[i].start == 10 * i);
    CHECK(w[i].acc.size() == 128 * 4);
    CHECK(w[i].acc[0] == double(10 * i));
    CHECK(w[i].acc[4 * 127] == double(10 * i + 127));
  }

  auto one = window(magnitude_augment(ramp_recording(128)), 32);
  REQUIRE(one.size() == 1);
  CHECK(one[0].start == 0);
}

TEST_CASE("too-short series reports its length and the window") {
  auto series = magnitude_augment(ramp_recording(100));
  try {
    window(series, 32);
    FAIL("expected SeriesTooShort");
  } catch (const SeriesTooShort& e) {
    CHECK(e.length == 100);
    CHECK(e.width == 128);
  }
}

TEST_CASE("window count formula over 1000 random cases") {
  std::mt19937_64 rng(2024);
  for (int c = 0; c < 1000; ++c) {
    const std::size_t width = 1 + rng() % 300;
    const std::size_t stride = 1 + rng() % 40;
    const std::size_t length = width + rng() % 2000;
    std::size_t brute = 0;
    for (std::size_t start = 0; start + width <= length; start += stride) ++brute;
    REQUIRE(window_count(length, width, stride) == brute);
    REQUIRE(window_count(length, width, stride) == (length - width) / stride + 1);
  }
}

TEST_CASE("label_window rules") {
  std::vector<std::uint8_t> fall(300, 0);
  for (std::size_t i = 150; i < 300; ++i) fall[i] = 1;
  CHECK(label_window(fall, 0, 128) == 0);    // ADL only
  CHECK(label_window(fall, 160, 128) == 1);  // fall only
  CHECK(label_window(fall, 23, 128) == 1);   // last sample is the first fall sample
  CHECK(label_window(fall, 22, 128) == 0);

  LabelRule half{0.5};
  CHECK(label_window(fall, 23, 128, half) == 0);
  CHECK(label_window(fall, 86, 128, half) == 1);  // 64 of 128
  CHECK(label_window(fall, 85, 128, half) == 0);

  CHECK_THROWS_AS(label_window(fall, 200, 128), DataError);
}

TEST_CASE("make_windows attaches labels and ids") {
  auto rec = ramp_recording(200, 130, 140);
  auto w = make_windows(rec);
  REQUIRE(w.size() == 8);
  // Window i covers [10i, 10i + 127]; samples 130..139 are annotated.
  CHECK(w[0].label == 0);
  CHECK(w[1].label == 1);
  CHECK(w[7].label == 1);
  auto late = make_windows(ramp_recording(200, 0, 5));
  CHECK(late[0].label == 1);
  CHECK(late[1].label == 0);
  CHECK(w[3].subject == "A");
  CHECK(w[3].trial == "1");
}

TEST_CASE("class weights") {
  std::vector<int> y(100, 0);
  std::fill(y.begin(), y.begin() + 40, 1);
  auto w = class_weights(y);
  CHECK(w.w0 == doctest::Approx(100.0 / 120.0).epsilon(1e-15));
  CHECK(w.w1 == doctest::Approx(1.25).epsilon(1e-15));

  std::vector<int> balanced(50, 0);
  balanced.resize(100, 1);
  w = class_weights(balanced);
  CHECK(w.w0 == 1.0);
  CHECK(w.w1 == 1.0);

  std::vector<int> skewed(90, 0);
  skewed.resize(100, 1);
  w = class_weights(skewed);
  CHECK(w.w1 == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(w.w0 == doctest::Approx(100.0 / 180.0).epsilon(1e-15));

  std::vector<int> single(10, 0);
  CHECK_THROWS_AS(class_weights(single), DataError);
}

TEST_CASE("ingest: empty file warns and yields nothing") {
  auto dir = temp_dir("empty");
  write_text(dir / "empty.csv", "");
  auto r = ingest_csv(dir / "empty.csv", 32);
  CHECK(r.recordings.empty());
  REQUIRE(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("empty") != std::string::npos);
}

TEST_CASE("ingest: two subjects with one trial each") {
  auto dir = temp_dir("two");
  std::string text = kHeader;
  text += "s1,t1,walk,0,0.0,1,2,3,0.1,0.2,0.3\n";
  text += "s1,t1,walk,0,0.03125,1,2,3,0.1,0.2,0.3\n";
  text += "s2,t1,fall,1,0.0,0,0,9.8,0,0,0\r\n";
  write_text(dir / "two.csv", text);
  auto r = ingest_csv(dir / "two.csv", 32);
  REQUIRE(r.recordings.size() == 2);
  CHECK(r.warnings.empty());
  CHECK(r.recordings[0].subject == "s1");
  CHECK(r.recordings[0].samples.size() == 2);
  CHECK(r.recordings[1].activity == "fall");
  CHECK(r.recordings[1].samples[0].fall);
  CHECK(r.recordings[1].samples[0].acc[2] == 9.8);
}

TEST_CASE("ingest: errors name file and line") {
  auto dir = temp_dir("errors");
  std::string text = kHeader;
  text += "s1,t1,walk,0,0.0,1,2,3,0.1,0.2,0.3\n";
  text += "s1,t1,walk,0,0.2,1,2,3,0.1,0.2,0.3\n";
  text += "s1,t1,walk,0,0.1,1,2,3,0.1,0.2,0.3\n";
  write_text(dir / "shuffled.csv", text);
  try {
    ingest_csv(dir / "shuffled.csv", 32);
    FAIL("expected CsvError");
  } catch (const CsvError& e) {
    CHECK(e.line == 4);
    CHECK(std::string(e.what()).find("shuffled.csv:4") != std::string::npos);
  }

  write_text(dir / "missing.csv", "subject,trial,activity,label_is_fall,t,ax,ay,az,gx,gy\n");
  try {
    ingest_csv(dir / "missing.csv", 32);
    FAIL("expected CsvError");
  } catch (const CsvError& e) {
    CHECK(e.line == 1);
    CHECK(std::string(e.what()).find("gz") != std::string::npos);
  }

  write_text(dir / "bad.csv", std::string(kHeader) + "s1,t1,walk,0,0.0,1,abc,3,0.1,0.2,0.3\n");
  try {
    ingest_csv(dir / "bad.csv", 32);
    FAIL("expected CsvError");
  } catch (const CsvError& e) {
    CHECK(e.line == 2);
    CHECK(std::string(e.what()).find("ay") != std::string::npos);
  }

  write_text(dir / "short.csv", std::string(kHeader) + "s1,t1,walk,0,0.0,1\n");
  CHECK_THROWS_AS(ingest_csv(dir / "short.csv", 32), CsvError);
  write_text(dir / "flag.csv", std::string(kHeader) + "s1,t1,walk,2,0.0,1,2,3,0.1,0.2,0.3\n");
  CHECK_THROWS_AS(ingest_csv(dir / "flag.csv", 32), CsvError);
}

TEST_CASE("ingest: remapped column names") {
  auto dir = temp_dir("schema");
  write_text(dir / "schema.json", R"({"subject": "participant", "ax": "acc_x", "label_is_fall": "is_fall"})");
  write_text(dir / "data.csv",
             "participant,trial,activity,is_fall,t,acc_x,ay,az,gx,gy,gz\n"
             "p7,a,walk,0,0.0,4,5,6,0,0,0\n");
  auto schema = CsvSchema::from_json_file(dir / "schema.json");
  auto r = ingest_csv(dir / "data.csv", 50, schema);
  REQUIRE(r.recordings.size() == 1);
  CHECK(r.recordings[0].subject == "p7");
  CHECK(r.recordings[0].samples[0].acc[0] == 4.0);
  CHECK(r.recordings[0].rate_hz == 50.0);

  write_text(dir / "bad_schema.json", R"({"subjet": "participant"})");
  CHECK_THROWS_AS(CsvSchema::from_json_file(dir / "bad_schema.json"), DataError);
}

TEST_CASE("synthetic data is deterministic per seed") {
  auto dir = temp_dir("synth");
  SynthConfig cfg;
  cfg.subjects = 4;
  cfg.seed = 99;
  write_csv(dir / "a.csv", synth_generate(cfg));
  write_csv(dir / "b.csv", synth_generate(cfg));
  CHECK(read_text(dir / "a.csv") == read_text(dir / "b.csv"));
  cfg.seed = 100;
  write_csv(dir / "c.csv", synth_generate(cfg));
  CHECK(read_text(dir / "a.csv") != read_text(dir / "c.csv"));
}

TEST_CASE("synthetic CSV round-trips through ingestion") {
  auto dir = temp_dir("roundtrip");
  SynthConfig cfg;
  cfg.subjects = 3;
  cfg.seed = 5;
  const auto recs = synth_generate(cfg);
  write_csv(dir / "synth.csv", recs);
  const auto back = ingest_csv(dir / "synth.csv", cfg.rate_hz).recordings;
  REQUIRE(back.size() == recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(back[i].subject == recs[i].subject);
    CHECK(back[i].trial == recs[i].trial);
    CHECK(back[i].activity == recs[i].activity);
    REQUIRE(back[i].samples.size() == recs[i].samples.size());
    for (std::size_t j = 0; j < recs[i].samples.size(); ++j) {
      const auto& a = back[i].samples[j];
      const auto& b = recs[i].samples[j];
      REQUIRE((a.t == b.t && a.acc == b.acc && a.gyro == b.gyro && a.fall == b.fall));
    }
  }
}

TEST_CASE("synthetic falls clear the impulse floor and ADL trials stay below it") {
  for (std::uint64_t seed : {0, 1, 2, 3, 4, 5, 6, 7}) {
    SynthConfig cfg;
    cfg.seed = seed;
    for (double rate : {32.0, 50.0}) {
      cfg.rate_hz = rate;
      for (const auto& r : synth_generate(cfg)) {
        CAPTURE(r.trial);
        CAPTURE(seed);
        const double ratio = impulse_ratio(r);
        if (r.activity == "fall") {
          CHECK(ratio >= kImpulseFloor);
        } else {
          CHECK(ratio < kImpulseFloor);
        }
      }
    }
  }
}

TEST_CASE("synthetic windows: magnitude invariant, labels follow trial class") {
  SynthConfig cfg;
  cfg.seed = 3;
  const auto recs = synth_generate(cfg);
  CHECK(subjects_of(recs).size() == 8);
  CHECK(recs.size() == 8 * 2 * cfg.trials_per_class);
  const auto windows = make_windows(recs);
  CHECK(windows.size() == recs.size() * 7);
  std::map<std::string, std::string> activity;
  for (const auto& r : recs) activity[r.trial] = r.activity;
  for (const auto& w : windows) {
    check_magnitude_channel(w);
    CHECK(w.label == (activity[w.trial] == "fall" ? 1 : 0));
  }
}

TEST_CASE("synthetic parameter validation") {
  SynthConfig cfg;
  cfg.subjects = 2;
  CHECK_THROWS_AS(synth_generate(cfg), DataError);
  cfg = {};
  cfg.trials_per_class = 0;
  CHECK_THROWS_AS(synth_generate(cfg), DataError);
  cfg = {};
  cfg.duration_s = 3;
  CHECK_THROWS_AS(synth_generate(cfg), DataError);
  cfg = {};
  cfg.rate_hz = 0;
  CHECK_THROWS_AS(synth_generate(cfg), DataError);
}

TEST_CASE("loso plan: every subject tests once with 5 subjects") {
  std::vector<std::string> s{"e", "a", "c", "b", "d"};
  auto plan = loso_plan(s, 5, 1);
  REQUIRE(plan.size() == 5);
  std::set<std::string> tests;
  for (const auto& f : plan) {
    tests.insert(f.test);
    CHECK(f.validation != f.test);
    CHECK(f.train.size() == 3);
    for (const auto& t : f.train) {
      CHECK(t != f.test);
      CHECK(t != f.validation);
    }
  }
  CHECK(tests.size() == 5);
}

TEST_CASE("loso plan: 30 subjects, 10 folds, defaults and errors") {
  std::vector<std::string> s;
  for (int i = 0; i < 30; ++i) s.push_back("subj" + std::to_string(i));
  auto plan = loso_plan(s, 10, 7);
  std::set<std::string> tests;
  for (const auto& f : plan) tests.insert(f.test);
  CHECK(plan.size() == 10);
  CHECK(tests.size() == 10);
  CHECK(loso_plan(s, std::nullopt, 7).size() == 10);
  CHECK(loso_plan(std::vector<std::string>{"a", "b", "c", "d"}, std::nullopt, 7).size() == 4);

  auto again = loso_plan(s, 10, 7);
  for (std::size_t i = 0; i < plan.size(); ++i) {
    CHECK(again[i].test == plan[i].test);
    CHECK(again[i].validation == plan[i].validation);
  }
  CHECK_THROWS_AS(loso_plan(std::vector<std::string>{"a", "b"}, std::nullopt, 1), DataError);
  CHECK_THROWS_AS(loso_plan(std::vector<std::string>{"a", "b", "c"}, 4, 1), DataError);
  CHECK_THROWS_AS(loso_plan(std::vector<std::string>{"a", "b", "c"}, 0, 1), DataError);
}

TEST_CASE("every generated split is subject-disjoint") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    SynthConfig cfg;
    cfg.subjects = 3 + seed;
    cfg.seed = seed;
    const auto windows = make_windows(synth_generate(cfg));
    for (const auto& fold : loso_plan(subjects_of(windows), std::nullopt, seed)) {
      auto split = make_split(windows, fold);
      CHECK_NOTHROW(assert_disjoint(split));
      CHECK(split.train.size() + split.validation.size() + split.test.size() == windows.size());
      CHECK(split.weights.w1 > 0);
    }
  }
  DatasetSplit leaky;
  leaky.train.push_back(SampleWindow{{}, {}, 0, "x", "t", 0});
  leaky.test.push_back(SampleWindow{{}, {}, 0, "x", "t", 0});
  CHECK_THROWS_AS(assert_disjoint(leaky), DataError);
}

TEST_CASE("optional standardization uses training statistics") {
  SynthConfig cfg;
  cfg.subjects = 4;
  const auto windows = make_windows(synth_generate(cfg));
  auto plan = loso_plan(subjects_of(windows), 1, 0);
  auto raw = make_split(windows, plan[0], false);
  auto std_split = make_split(windows, plan[0], true);
  CHECK(raw.train[0].acc == windows[0].acc);
  const auto means = channel_means(std_split.train);
  for (double m : means) CHECK(std::abs(m) < 1e-9);
}

TEST_CASE("gather builds batch tensors") {
  SynthConfig cfg;
  cfg.subjects = 3;
  const auto windows = make_windows(synth_generate(cfg));
  std::vector<std::size_t> idx{3, 0, 5};
  auto b = gather(windows, idx);
  CHECK(b.acc.shape() == Shape{3, 128, 4});
  CHECK(b.gyro.shape() == Shape{3, 128, 4});
  CHECK(b.labels == std::vector<int>{windows[3].label, windows[0].label, windows[5].label});
  CHECK(b.acc[128 * 4] == windows[0].acc[0]);
}
