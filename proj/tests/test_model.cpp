#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "falldet/model.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace falldet;
using falldet::testing::random_tensor;

namespace {

struct Inputs {
  Tensor acc, gyro;
};

Inputs random_inputs(std::size_t n, std::size_t t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return {random_tensor({n, t, 4}, rng, -2, 2), random_tensor({n, t, 4}, rng, -2, 2)};
}

ModelSpec spec_of(Variant v, std::size_t window = 128) {
  ModelSpec s;
  s.variant = v;
  s.window = window;
  return s;
}

std::map<std::string, std::map<std::string, std::size_t>> read_audit() {
  std::ifstream in(std::string(FALLDET_TEST_DATA) + "/param_audit.csv");
  REQUIRE(in);
  std::map<std::string, std::map<std::string, std::size_t>> table;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string variant, layer, count;
    std::getline(ss, variant, ',');
    std::getline(ss, layer, ',');
    std::getline(ss, count, ',');
    table[variant][layer] = std::stoul(count);
  }
  return table;
}

}  // namespace

TEST_CASE("architecture shapes for every variant at W = 128") {
  auto in = random_inputs(3, 128, 1);
  for (Variant v : all_variants()) {
    CAPTURE(to_string(v));
    auto model = Model::build(spec_of(v), 7);
    ForwardTrace trace;
    ForwardContext ctx(model.params(), model.buffers(), Mode::infer);
    auto y = model.forward(ctx, in.acc, in.gyro, &trace);
    CHECK(y.shape() == Shape{3, 1});
    for (double p : y.data()) CHECK((p > 0.0 && p < 1.0));

    const ModelSpec& spec = model.spec();
    const std::size_t streams = (v == Variant::t5_acc_only || v == Variant::t5_gyro_only) ? 1 : 2;
    REQUIRE(trace.streams.size() == streams);
    const std::size_t steps = spec.has_cnn() ? 32 : 128;
    for (const auto& s : trace.streams) {
      CAPTURE(s.name);
      CHECK(s.input.shape() == Shape{3, 128, spec.input_channels()});
      if (v == Variant::t2_no_cnn) {
        CHECK(s.features.shape() == Shape{3, 128, 4});
      } else {
        CHECK(s.features.shape() == Shape{3, steps, 64});
      }
      if (spec.has_gate()) {
        CHECK(s.gate.shape() == Shape{3, steps, 32});
        CHECK(s.refined.shape() == Shape{3, steps, 32});
      } else {
        CHECK(s.gate.size() == 1);
      }
      if (v == Variant::t6_no_gap) {
        CHECK(s.pooled.shape() == Shape{3, 1024});
      } else {
        CHECK(s.pooled.shape() == Shape{3, spec.has_gate() ? 32u : 64u});
      }
      if (v == Variant::transformer) {
        REQUIRE(s.attention.size() == 2);
        CHECK(s.attention[0].shape() == Shape{3, 4, 128, 128});
      }
    }
    CHECK(trace.fused.shape() == Shape{3, spec.fused_features()});
  }
  CHECK(ModelSpec{}.fused_features() == 64);
  CHECK(spec_of(Variant::t6_no_gap).fused_features() == 2048);
}

TEST_CASE("parameter counts match the audited table") {
  auto audit = read_audit();
  REQUIRE(audit.size() == all_variants().size());
  for (Variant v : all_variants()) {
    CAPTURE(to_string(v));
    auto model = Model::build(spec_of(v), 1);
    const auto& expected = audit.at(to_string(v));
    std::size_t layers = 0;
    for (const auto& [layer, count] : model.param_table()) {
      CAPTURE(layer);
      REQUIRE(expected.count(layer) == 1);
      CHECK(count == expected.at(layer));
      ++layers;
    }
    CHECK(layers + 1 == expected.size());
    CHECK(model.param_count() == expected.at("TOTAL"));
    CHECK(Model::build(spec_of(v), 99).param_count() == model.param_count());
  }
  CHECK(nn::Dense{"d", 64, 256}.param_count() == 16640);
  auto gated = Model::build(ModelSpec{}, 1);
  std::size_t conv_stack = 0;
  for (const auto& [layer, count] : gated.param_table())
    if (layer.rfind("stream-a/conv", 0) == 0) conv_stack += count;
  CHECK(conv_stack == 416 + 3104 + 6208);
  ModelSpec features_gate;
  features_gate.gate_source = GateSource::features;
  CHECK(Model::build(features_gate, 1).param_count() == 45377 + 2 * (2080 - 1056));
}

TEST_CASE("same seed builds bit-identical parameters") {
  for (Variant v : all_variants()) {
    auto a = Model::build(spec_of(v), 42);
    auto b = Model::build(spec_of(v), 42);
    CHECK(a.params().same_values(b.params()));
    CHECK_FALSE(a.params().same_values(Model::build(spec_of(v), 43).params()));
  }
}

TEST_CASE("invalid specs are rejected") {
  CHECK_THROWS_AS(Model::build(spec_of(Variant::gated_cnn, 130), 1), SpecError);
  CHECK_NOTHROW(Model::build(spec_of(Variant::transformer, 130), 1));
  ModelSpec bad;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), SpecError);
  CHECK_THROWS_AS(parse_variant("t7"), SpecError);
  CHECK(parse_variant("t5-acc") == Variant::t5_acc_only);
}

TEST_CASE("gating block matches an explicit step-by-step recomposition") {
  std::mt19937_64 g(3);
  for (auto source : {GateSource::projection, GateSource::features}) {
    ParamStore params, buffers;
    Rng rng(5);
    GatingBlock block{"g", 64, 32, source};
    block.init(params, rng);
    for (auto& [name, t] : params)
      for (auto& v : t.mutable_data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(g);
    auto f = random_tensor({2, 8, 64}, g);
    ForwardContext ctx(params, buffers, Mode::infer);
    auto out = block.forward(ctx, f);

    const std::size_t rows = 16;
    // 1x1 conv weight (out, in, 1) read as a dense (in, out) matrix.
    const auto& raw = params.get("g/proj/weight");
    std::vector<double> w(64 * 32);
    for (std::size_t o = 0; o < 32; ++o)
      for (std::size_t i = 0; i < 64; ++i) w[i * 32 + o] = raw[o * 64 + i];
    auto pre = testing::dense_oracle(f.values(), 64, Tensor({64, 32}, w), params.get("g/proj/bias"));
    std::vector<double> u(pre.size());
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = pre[i] * 0.5 * (1.0 + std::erf(pre[i] / std::sqrt(2.0)));
    auto logits = source == GateSource::projection
                      ? testing::dense_oracle(u, 32, params.get("g/gate/weight"), params.get("g/gate/bias"))
                      : testing::dense_oracle(f.values(), 64, params.get("g/gate/weight"), params.get("g/gate/bias"));
    std::vector<double> gamma(logits.size()), gated(logits.size());
    for (std::size_t i = 0; i < gamma.size(); ++i) {
      gamma[i] = 1.0 / (1.0 + std::exp(-logits[i]));
      gated[i] = u[i] * gamma[i];
    }
    auto z = testing::dense_oracle(gated, 32, params.get("g/out/weight"), params.get("g/out/bias"));
    REQUIRE(z.size() == rows * 32);
    for (std::size_t i = 0; i < z.size(); ++i) {
      CHECK(std::abs(out.projection[i] - u[i]) < 1e-12);
      CHECK(std::abs(out.gate[i] - gamma[i]) < 1e-12);
      CHECK(std::abs(out.refined[i] - z[i]) < 1e-12);
      CHECK((out.gate[i] > 0.0 && out.gate[i] < 1.0));
    }
  }
}

TEST_CASE("a zeroed gate dense layer gives a constant half gate") {
  ParamStore params, buffers;
  Rng rng(5);
  GatingBlock block{"g", 64, 32};
  block.init(params, rng);
  for (const char* n : {"g/gate/weight", "g/gate/bias"})
    for (auto& v : params.get(n).mutable_data()) v = 0.0;
  std::mt19937_64 g(2);
  auto f = random_tensor({2, 8, 64}, g);
  ForwardContext ctx(params, buffers, Mode::infer);
  auto out = block.forward(ctx, f);
  for (double v : out.gate.data()) CHECK(v == 0.5);
  auto half_u = ops::scale(out.projection, 0.5);
  auto expected = block.output().forward(ctx, half_u);
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(out.refined[i] == doctest::Approx(expected[i]).epsilon(1e-14));
}

TEST_CASE("forward is pure in infer mode and refuses train mode when frozen") {
  auto model = Model::build(ModelSpec{}, 3);
  auto in = random_inputs(32, 128, 4);
  ForwardContext c1(model.params(), model.buffers(), Mode::infer);
  auto y1 = model.forward(c1, in.acc, in.gyro);
  ForwardContext c2(model.params(), model.buffers(), Mode::infer);
  auto y2 = model.forward(c2, in.acc, in.gyro);
  CHECK(y1.shape() == Shape{32, 1});
  CHECK(y1.same_values(y2));
  auto p = model.predict(in.acc, in.gyro, 5);
  for (std::size_t i = 0; i < 32; ++i) CHECK(std::abs(p[i] - y1[i]) < 1e-12);

  model.freeze();
  Rng rng(1);
  ForwardContext train(model.params(), model.buffers(), Mode::train, nullptr, &rng);
  CHECK_THROWS_AS(model.forward(train, in.acc, in.gyro), ModeError);
  CHECK_NOTHROW(model.predict(in.acc, in.gyro));
}

TEST_CASE("model input shape errors") {
  auto model = Model::build(ModelSpec{}, 3);
  ForwardContext ctx(model.params(), model.buffers(), Mode::infer);
  CHECK_THROWS_AS(model.forward(ctx, Tensor::zeros({1, 128, 3}), Tensor::zeros({1, 128, 4})), ShapeError);
  CHECK_THROWS_AS(model.forward(ctx, Tensor::zeros({1, 126, 4}), Tensor::zeros({1, 126, 4})), ShapeError);
  CHECK_THROWS_AS(model.forward(ctx, Tensor::zeros({1, 128, 4}), Tensor::zeros({2, 128, 4})), ShapeError);
}

TEST_CASE("variant structure") {
  auto in = random_inputs(2, 128, 8);
  auto other = random_inputs(2, 128, 9);
  SUBCASE("single-stream models ignore the other stream") {
    auto acc_only = Model::build(spec_of(Variant::t5_acc_only), 1);
    CHECK(acc_only.predict(in.acc, in.gyro) == acc_only.predict(in.acc, other.gyro));
    CHECK(acc_only.predict(in.acc, in.gyro) != acc_only.predict(other.acc, in.gyro));
    auto gyro_only = Model::build(spec_of(Variant::t5_gyro_only), 1);
    CHECK(gyro_only.predict(in.acc, in.gyro) == gyro_only.predict(other.acc, in.gyro));
  }
  SUBCASE("t5-acc is gated-cnn without the gyro branch") {
    auto full = Model::build(ModelSpec{}, 1).param_table();
    auto single = Model::build(spec_of(Variant::t5_acc_only), 1).param_table();
    std::map<std::string, std::size_t> full_map(full.begin(), full.end());
    for (const auto& [layer, count] : single) {
      if (layer.rfind("head/", 0) == 0) continue;
      CHECK(full_map.at(layer) == count);
    }
  }
  SUBCASE("t1 routes the extractor output straight into pooling") {
    auto model = Model::build(spec_of(Variant::t1_no_gate), 1);
    for (const auto& [name, t] : model.params()) CHECK(name.find("/gate/") == std::string::npos);
    ForwardTrace trace;
    ForwardContext ctx(model.params(), model.buffers(), Mode::infer);
    model.forward(ctx, in.acc, in.gyro, &trace);
    auto gap = nn::global_average_pool(trace.streams[0].features);
    CHECK(gap.same_values(trace.streams[0].pooled));
  }
  SUBCASE("t4 only sees the z and magnitude channels") {
    auto model = Model::build(spec_of(Variant::t4_channel_subset), 1);
    auto acc = in.acc.clone(), gyro = in.gyro.clone();
    for (std::size_t i = 0; i < acc.size(); i += 4) {
      acc.mutable_data()[i] += 5.0;
      gyro.mutable_data()[i + 1] -= 3.0;
    }
    CHECK(model.predict(in.acc, in.gyro) == model.predict(acc, gyro));
  }
}

TEST_CASE("analytic FLOPs") {
  SUBCASE("gated-cnn backbone is exactly linear in T") {
    for (std::size_t t = 4; t <= 4096; t *= 2) {
      auto spec = spec_of(Variant::gated_cnn, t);
      auto f1 = estimate_flops(spec, t), f2 = estimate_flops(spec, 2 * t);
      CHECK(f2.backbone == 2 * f1.backbone);
      CHECK(f2.head == f1.head);
    }
  }
  SUBCASE("transformer carries a quadratic score term") {
    auto spec = spec_of(Variant::transformer);
    auto f = [&](std::size_t t) { return static_cast<double>(estimate_flops(spec, t).backbone); };
    CHECK((f(512) - 2 * f(256)) / (f(256) - 2 * f(128)) == 4.0);
    CHECK(f(2048) / f(1024) > f(256) / f(128));
  }
  SUBCASE("head dense layers") {
    auto report = estimate_flops(ModelSpec{}, 128);
    std::uint64_t dense1 = 0;
    for (const auto& l : report.layers)
      if (l.layer == "head/dense1") dense1 = l.flops;
    CHECK(dense1 == 2 * 64 * 256 + 256 + 256);
    CHECK(report.total() == report.backbone + report.head);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  std::vector<double> specials{0.0, -0.0, 1.0 / 3.0, 1e-310, -1e308, std::numeric_limits<double>::infinity(), 42.0};
  for (std::size_t n = 0; n <= specials.size(); ++n) {
    std::vector<double> part(specials.begin(), specials.begin() + n);
    auto back = decode_doubles(encode_doubles(part));
    REQUIRE(back.size() == n);
    CHECK(std::memcmp(back.data(), part.data(), n * sizeof(double)) == 0);
  }
  CHECK(encode_doubles(std::vector<double>{1.0}) == "AAAAAAAA8D8=");

  auto dir = std::filesystem::temp_directory_path() / "falldet_test_ckpt";
  std::filesystem::create_directories(dir);
  for (Variant v : {Variant::gated_cnn, Variant::transformer, Variant::t4_channel_subset}) {
    auto model = Model::build(spec_of(v), 11);
    for (auto& [name, t] : model.buffers())
      for (auto& x : t.mutable_data()) x += 0.123456789;
    const auto path = (dir / (to_string(v) + ".json")).string();
    save_checkpoint(model, path);
    auto loaded = load_checkpoint(path);
    CHECK(loaded.seed() == 11);
    CHECK(loaded.spec().variant == v);
    CHECK(loaded.params().same_values(model.params()));
    CHECK(loaded.buffers().same_values(model.buffers()));
  }
  std::ofstream(dir / "bad.json") << "{\"format\": \"other\"}";
  CHECK_THROWS(load_checkpoint((dir / "bad.json").string()));
  std::filesystem::remove_all(dir);
}

TEST_CASE("full model gradients match finite differences") {
  for (Variant v : {Variant::gated_cnn, Variant::transformer}) {
    CAPTURE(to_string(v));
    auto model = Model::build(spec_of(v, 16), 21);
    std::mt19937_64 g(5);
    for (auto& [name, t] : model.params())
      for (auto& x : t.mutable_data()) x += std::uniform_real_distribution<double>(-0.1, 0.1)(g);
    auto in = random_inputs(4, 16, 6);
    auto labels = random_tensor({4, 1}, g, 0.0, 1.0);
    auto loss_of = [&](const Tensor& y) {
      // Cross-entropy against soft targets keeps every output element live.
      auto ll = ops::add(ops::mul(labels, ops::log(y)),
                         ops::mul(ops::add_scalar(ops::neg(labels), 1.0), ops::log(ops::add_scalar(ops::neg(y), 1.0))));
      return ops::neg(ops::mean_all(ll));
    };
    std::vector<Tensor> leaves;
    for (auto& [name, t] : model.params()) leaves.push_back(t);
    leaves.push_back(in.acc);
    leaves.push_back(in.gyro);
    auto analytic = [&] {
      GradTape tape;
      Rng rng(77);
      ForwardContext ctx(model.params(), model.buffers(), Mode::train, &tape, &rng);
      auto a = tape.watch(in.acc), gy = tape.watch(in.gyro);
      auto grads = tape.backward(loss_of(model.forward(ctx, a, gy)));
      auto out = ctx.gradients(grads);
      out.push_back(grads.of(a));
      out.push_back(grads.of(gy));
      return out;
    };
    auto evaluate = [&] {
      Rng rng(77);
      ForwardContext ctx(model.params(), model.buffers(), Mode::train, nullptr, &rng);
      return loss_of(model.forward(ctx, in.acc, in.gyro)).item();
    };
    auto report = testing::check_gradients(leaves, analytic, evaluate, 1e-6, 12);
    INFO("worst leaf " << report.worst_leaf << " analytic " << report.analytic << " numeric " << report.numeric);
    CHECK(report.max_rel_error < 1e-6);
  }
}
