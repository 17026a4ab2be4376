#include "falldet/model.hpp"

#include <algorithm>
#include <array>
#include <map>

#include <nlohmann/json.hpp>

namespace falldet {

using namespace ops;

namespace {

constexpr std::size_t kEmbed = 64;
constexpr std::size_t kHeads = 4;
constexpr std::size_t kFeedForward = 128;
constexpr std::size_t kEncoderLayers = 2;
constexpr std::size_t kGateWidth = 32;

struct VariantName {
  Variant variant;
  const char* name;
};

constexpr std::array<VariantName, 9> kVariantNames{{
    {Variant::gated_cnn, "gated-cnn"},
    {Variant::transformer, "transformer"},
    {Variant::t1_no_gate, "t1-no-gate"},
    {Variant::t2_no_cnn, "t2-no-cnn"},
    {Variant::t3_linear_proj, "t3-linear-proj"},
    {Variant::t4_channel_subset, "t4-channel-subset"},
    {Variant::t5_acc_only, "t5-acc-only"},
    {Variant::t5_gyro_only, "t5-gyro-only"},
    {Variant::t6_no_gap, "t6-no-gap"},
}};

constexpr std::array<Variant, 9> kAll{Variant::gated_cnn,        Variant::transformer,  Variant::t1_no_gate,
                                      Variant::t2_no_cnn,        Variant::t3_linear_proj, Variant::t4_channel_subset,
                                      Variant::t5_acc_only,      Variant::t5_gyro_only, Variant::t6_no_gap};

constexpr std::array<Variant, 8> kAblation{Variant::gated_cnn,         Variant::t1_no_gate,  Variant::t2_no_cnn,
                                           Variant::t3_linear_proj,    Variant::t4_channel_subset,
                                           Variant::t5_acc_only,       Variant::t5_gyro_only, Variant::t6_no_gap};

std::vector<std::string> stream_names(const ModelSpec& spec) {
  std::vector<std::string> names;
  if (spec.uses_acc()) names.emplace_back("stream-a");
  if (spec.uses_gyro()) names.emplace_back("stream-g");
  return names;
}

nn::Conv1D cnn_layer(const std::string& stream, int index, std::size_t in, std::size_t out) {
  return {stream + "/conv" + std::to_string(index), in, out, 3};
}

nn::EncoderLayer encoder(const std::string& stream, std::size_t index, double dropout) {
  return {stream + "/encoder" + std::to_string(index), kEmbed, kHeads, kFeedForward, dropout};
}

std::size_t gate_input(const ModelSpec& spec) {
  return spec.variant == Variant::t2_no_cnn ? spec.input_channels() : kEmbed;
}

GatingBlock gating(const ModelSpec& spec, const std::string& stream) {
  return {stream + "/gate", gate_input(spec), kGateWidth, spec.gate_source};
}

}  // namespace

std::string to_string(Variant v) {
  for (const auto& [variant, name] : kVariantNames)
    if (variant == v) return name;
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (const auto& [variant, n] : kVariantNames)
    if (name == n) return variant;
  // Short aliases.
  if (name == "t5-acc") return Variant::t5_acc_only;
  if (name == "t5-gyro") return Variant::t5_gyro_only;
  for (const auto& [variant, n] : kVariantNames) {
    const std::string_view full(n);
    if (name != "t5" && full.starts_with('t') && name == full.substr(0, 2)) return variant;
  }
  throw SpecError("unknown model variant: " + std::string(name));
}

std::string to_string(GateSource s) { return s == GateSource::projection ? "projection" : "features"; }

GateSource parse_gate_source(std::string_view name) {
  if (name == "projection") return GateSource::projection;
  if (name == "features") return GateSource::features;
  throw SpecError("unknown gate source: " + std::string(name) + " (expected projection or features)");
}

std::span<const Variant> all_variants() { return kAll; }
std::span<const Variant> ablation_variants() { return kAblation; }

double ModelSpec::effective_dropout() const {
  if (dropout) return *dropout;
  return variant == Variant::transformer ? 0.3 : 0.25;
}

bool ModelSpec::has_cnn() const {
  return variant != Variant::transformer && variant != Variant::t2_no_cnn && variant != Variant::t3_linear_proj;
}

bool ModelSpec::has_gate() const { return variant != Variant::transformer && variant != Variant::t1_no_gate; }

std::size_t ModelSpec::feature_steps(std::size_t t) const { return has_cnn() ? t / 4 : t; }

std::size_t ModelSpec::stream_output_features() const {
  if (variant == Variant::t6_no_gap) return feature_steps(window) * kGateWidth;
  return has_gate() ? kGateWidth : kEmbed;
}

std::size_t ModelSpec::fused_features() const { return stream_output_features() * stream_names(*this).size(); }

void ModelSpec::validate() const {
  if (window == 0) throw SpecError("window length must be positive");
  if (has_cnn() && window % 4 != 0) {
    throw SpecError("window length " + std::to_string(window) + " is not divisible by 4 (required by " +
                    to_string(variant) + ")");
  }
  if (head_hidden == 0) throw SpecError("head hidden size must be positive");
  const double p = effective_dropout();
  if (!(p >= 0.0 && p < 1.0)) throw SpecError("dropout must lie in [0, 1), got " + std::to_string(p));
}

nlohmann::json spec_to_json(const ModelSpec& spec) {
  return {{"variant", to_string(spec.variant)},
          {"window", spec.window},
          {"head_hidden", spec.head_hidden},
          {"dropout", spec.effective_dropout()},
          {"gate_source", to_string(spec.gate_source)}};
}

ModelSpec spec_from_json(const nlohmann::json& j) {
  ModelSpec spec;
  try {
    if (j.contains("variant")) spec.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("window")) spec.window = j.at("window").get<std::size_t>();
    if (j.contains("head_hidden")) spec.head_hidden = j.at("head_hidden").get<std::size_t>();
    if (j.contains("dropout") && !j.at("dropout").is_null()) spec.dropout = j.at("dropout").get<double>();
    if (j.contains("gate_source")) spec.gate_source = parse_gate_source(j.at("gate_source").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw SpecError(std::string("malformed model spec: ") + e.what());
  }
  spec.validate();
  return spec;
}

void GatingBlock::init(ParamStore& params, Rng& rng) const {
  projection().init(params, rng);
  gate_dense().init(params, rng);
  output().init(params, rng);
}

GateOutput GatingBlock::forward(ForwardContext& ctx, const Tensor& features) const {
  GateOutput out;
  out.projection = nn::gelu(projection().forward(ctx, features));
  const Tensor& source_tensor = source == GateSource::projection ? out.projection : features;
  out.gate = nn::sigmoid(gate_dense().forward(ctx, source_tensor));
  out.gated = mul(out.projection, out.gate);
  out.refined = output().forward(ctx, out.gated);
  return out;
}

std::size_t GatingBlock::param_count() const {
  return projection().param_count() + gate_dense().param_count() + output().param_count();
}

Model Model::build(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model model(spec, seed);
  Rng rng(seed);
  auto& params = model.params_;
  const std::size_t cin = spec.input_channels();
  for (const auto& stream : stream_names(spec)) {
    if (spec.has_cnn()) {
      cnn_layer(stream, 1, cin, 32).init(params, rng);
      cnn_layer(stream, 2, 32, 32).init(params, rng);
      cnn_layer(stream, 3, 32, 64).init(params, rng);
    } else if (spec.variant == Variant::t3_linear_proj) {
      nn::Conv1D{stream + "/linear", cin, kEmbed, 3}.init(params, rng);
    } else if (spec.variant == Variant::transformer) {
      nn::Dense{stream + "/embed", cin, kEmbed}.init(params, rng);
      for (std::size_t l = 0; l < kEncoderLayers; ++l) encoder(stream, l, spec.effective_dropout()).init(params, rng);
      nn::LayerNorm{stream + "/final_norm", kEmbed}.init(params);
    }
    if (spec.has_gate()) gating(spec, stream).init(params, rng);
  }
  const std::size_t fused = spec.fused_features();
  nn::BatchNorm{"head/bn1", fused}.init(params, model.buffers_);
  nn::Dense{"head/dense1", fused, spec.head_hidden}.init(params, rng);
  nn::BatchNorm{"head/bn2", spec.head_hidden}.init(params, model.buffers_);
  nn::Dense{"head/dense2", spec.head_hidden, 1}.init(params, rng);
  return model;
}

Tensor Model::stream_forward(ForwardContext& ctx, const std::string& name, const Tensor& block, ForwardTrace* trace) {
  const Tensor x = spec_.variant == Variant::t4_channel_subset ? slice(block, 2, 2, 4) : block;
  const std::size_t n = x.dim(0), t = x.dim(1);
  Tensor features;
  std::vector<Tensor> attention;
  if (spec_.has_cnn()) {
    auto h = nn::maxpool1d(nn::relu(cnn_layer(name, 1, spec_.input_channels(), 32).forward(ctx, x)));
    h = nn::maxpool1d(nn::relu(cnn_layer(name, 2, 32, 32).forward(ctx, h)));
    features = nn::relu(cnn_layer(name, 3, 32, 64).forward(ctx, h));
  } else if (spec_.variant == Variant::t3_linear_proj) {
    features = nn::Conv1D{name + "/linear", spec_.input_channels(), kEmbed, 3}.forward(ctx, x);
  } else if (spec_.variant == Variant::transformer) {
    auto h = nn::Dense{name + "/embed", spec_.input_channels(), kEmbed}.forward(ctx, x);
    h = add(h, broadcast(nn::sinusoidal_positions(t, kEmbed), 0, n));
    for (std::size_t l = 0; l < kEncoderLayers; ++l) {
      auto out = encoder(name, l, spec_.effective_dropout()).forward(ctx, h);
      h = out.output;
      attention.push_back(out.weights);
    }
    features = nn::LayerNorm{name + "/final_norm", kEmbed}.forward(ctx, h);
  } else {
    features = x;
  }

  GateOutput gate;
  Tensor refined = features;
  if (spec_.has_gate()) {
    gate = gating(spec_, name).forward(ctx, features);
    refined = gate.refined;
  }
  Tensor pooled = spec_.variant == Variant::t6_no_gap
                      ? reshape(refined, {n, refined.dim(1) * refined.dim(2)})
                      : nn::global_average_pool(refined);
  if (trace) {
    StreamTrace st;
    st.name = name;
    st.input = x;
    st.features = features;
    if (spec_.has_gate()) {
      st.projection = gate.projection;
      st.gate = gate.gate;
      st.gated = gate.gated;
    }
    st.refined = refined;
    st.pooled = pooled;
    st.attention = std::move(attention);
    trace->streams.push_back(std::move(st));
  }
  return pooled;
}

Tensor Model::forward(ForwardContext& ctx, const Tensor& acc, const Tensor& gyro, ForwardTrace* trace) {
  if (frozen_ && ctx.training()) throw ModeError("train-mode forward requested on a frozen model");
  auto check_block = [&](const char* which, const Tensor& b) {
    if (b.rank() != 3 || b.dim(2) != 4) {
      throw ShapeError(std::string("model input ") + which + ": expected (N, T, 4), got " + to_string(b.shape()));
    }
    const std::size_t t = b.dim(1);
    if (spec_.has_cnn() && t % 4 != 0) {
      throw ShapeError(std::string("model input ") + which + ": temporal extent " + std::to_string(t) +
                       " is not divisible by 4");
    }
    if (spec_.variant == Variant::t6_no_gap && t != spec_.window) {
      throw ShapeError(std::string("model input ") + which + ": t6-no-gap needs exactly " +
                       std::to_string(spec_.window) + " steps, got " + std::to_string(t));
    }
  };
  if (spec_.uses_acc()) check_block("acc", acc);
  if (spec_.uses_gyro()) check_block("gyro", gyro);
  if (spec_.uses_acc() && spec_.uses_gyro() && acc.shape() != gyro.shape()) {
    throw ShapeError("model inputs differ in shape: acc " + to_string(acc.shape()) + ", gyro " +
                     to_string(gyro.shape()));
  }

  std::vector<Tensor> pooled;
  for (const auto& name : stream_names(spec_)) {
    pooled.push_back(stream_forward(ctx, name, name == "stream-a" ? acc : gyro, trace));
  }
  Tensor fused = pooled.size() == 1 ? pooled[0] : concat(pooled, 1);
  if (trace) trace->fused = fused;

  const nn::Dropout drop{spec_.effective_dropout()};
  const std::size_t fused_features = spec_.fused_features();
  auto h = nn::BatchNorm{"head/bn1", fused_features}.forward(ctx, fused);
  h = nn::Dense{"head/dense1", fused_features, spec_.head_hidden}.forward(ctx, drop.forward(ctx, h));
  h = nn::relu(h);
  h = nn::BatchNorm{"head/bn2", spec_.head_hidden}.forward(ctx, h);
  h = nn::Dense{"head/dense2", spec_.head_hidden, 1}.forward(ctx, drop.forward(ctx, h));
  return nn::sigmoid(h);
}

std::vector<double> Model::predict(const Tensor& acc, const Tensor& gyro, std::size_t batch) {
  const std::size_t n = spec_.uses_acc() ? acc.dim(0) : gyro.dim(0);
  std::vector<double> out;
  out.reserve(n);
  batch = std::max<std::size_t>(batch, 1);
  for (std::size_t begin = 0; begin < n; begin += batch) {
    const std::size_t end = std::min(n, begin + batch);
    auto part = [&](const Tensor& t) { return (begin == 0 && end == n) ? t : slice(t, 0, begin, end); };
    ForwardContext ctx(params_, buffers_, Mode::infer);
    const Tensor a = spec_.uses_acc() ? part(acc) : Tensor();
    const Tensor g = spec_.uses_gyro() ? part(gyro) : Tensor();
    auto y = forward(ctx, a, g);
    out.insert(out.end(), y.data().begin(), y.data().end());
  }
  return out;
}

std::vector<std::pair<std::string, std::size_t>> Model::param_table() const {
  std::vector<std::pair<std::string, std::size_t>> table;
  for (const auto& [name, t] : params_) {
    const std::string layer = name.substr(0, name.rfind('/'));
    if (table.empty() || table.back().first != layer) table.emplace_back(layer, 0);
    table.back().second += t.size();
  }
  return table;
}

FlopReport estimate_flops(const ModelSpec& spec, std::size_t steps) {
  spec.validate();
  FlopReport report;
  auto emit = [&](std::string layer, std::uint64_t flops, bool backbone) {
    (backbone ? report.backbone : report.head) += flops;
    report.layers.push_back({std::move(layer), flops, backbone});
  };
  // rows x (in -> out) affine map plus bias
  auto affine = [](std::uint64_t rows, std::uint64_t in, std::uint64_t out) { return 2 * rows * in * out + rows * out; };
  const std::uint64_t cin = spec.input_channels();
  const std::uint64_t t = steps;

  for (const auto& stream : stream_names(spec)) {
    std::uint64_t tf = t;  // steps reaching the gate
    if (spec.has_cnn()) {
      emit(stream + "/conv1", affine(t, 3 * cin, 32) + t * 32, true);
      emit(stream + "/pool1", (t / 2) * 32, true);
      emit(stream + "/conv2", affine(t / 2, 3 * 32, 32) + (t / 2) * 32, true);
      emit(stream + "/pool2", (t / 4) * 32, true);
      emit(stream + "/conv3", affine(t / 4, 3 * 32, 64) + (t / 4) * 64, true);
      tf = t / 4;
    } else if (spec.variant == Variant::t3_linear_proj) {
      emit(stream + "/linear", affine(t, 3 * cin, kEmbed), true);
    } else if (spec.variant == Variant::transformer) {
      const std::uint64_t e = kEmbed, h = kHeads, dk = kEmbed / kHeads, ff = kFeedForward;
      // Layer norm: center, square, normalize, scale, shift.
      const std::uint64_t norm = 5 * t * e;
      emit(stream + "/embed", affine(t, cin, e) + t * e, true);
      for (std::size_t l = 0; l < kEncoderLayers; ++l) {
        const std::string name = stream + "/encoder" + std::to_string(l);
        emit(name + "/norm1", norm, true);
        emit(name + "/qkv", 3 * affine(t, e, e), true);
        emit(name + "/scores", 2 * h * t * t * dk + h * t * t, true);
        emit(name + "/softmax", 3 * h * t * t, true);
        emit(name + "/context", 2 * h * t * t * dk, true);
        emit(name + "/attn_out", affine(t, e, e) + t * e, true);
        emit(name + "/norm2", norm, true);
        emit(name + "/ff", affine(t, e, ff) + t * ff + affine(t, ff, e) + t * e, true);
      }
      emit(stream + "/final_norm", norm, true);
    }
    if (spec.has_gate()) {
      const std::uint64_t fin = gate_input(spec);
      const std::uint64_t w = kGateWidth;
      const std::uint64_t gate_in = spec.gate_source == GateSource::projection ? w : fin;
      emit(stream + "/gate", affine(tf, fin, w) + tf * w + affine(tf, gate_in, w) + tf * w + tf * w + affine(tf, w, w),
           true);
    }
    const std::uint64_t width = spec.has_gate() ? kGateWidth : kEmbed;
    if (spec.variant != Variant::t6_no_gap) emit(stream + "/gap", tf * width, true);
  }

  const std::uint64_t fused = spec.variant == Variant::t6_no_gap
                                  ? spec.feature_steps(steps) * kGateWidth * stream_names(spec).size()
                                  : spec.fused_features();
  const std::uint64_t hidden = spec.head_hidden;
  emit("head/bn1", 2 * fused, false);
  emit("head/dense1", affine(1, fused, hidden) + hidden, false);
  emit("head/bn2", 2 * hidden, false);
  emit("head/dense2", affine(1, hidden, 1) + 1, false);
  return report;
}

}  // namespace falldet
