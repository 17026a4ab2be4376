#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "falldet/layers.hpp"
#include "falldet/params.hpp"
#include "falldet/tensor.hpp"

namespace falldet {

enum class Variant {
  gated_cnn,
  transformer,
  t1_no_gate,
  t2_no_cnn,
  t3_linear_proj,
  t4_channel_subset,
  t5_acc_only,
  t5_gyro_only,
  t6_no_gap,
};

enum class GateSource { projection, features };

std::string to_string(Variant v);
Variant parse_variant(std::string_view name);
std::string to_string(GateSource s);
GateSource parse_gate_source(std::string_view name);

std::span<const Variant> all_variants();
// Gated-CNN followed by T1..T6 (both single-stream T5 models).
std::span<const Variant> ablation_variants();

struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ModeError : std::logic_error {
  using std::logic_error::logic_error;
};

struct ModelSpec {
  Variant variant = Variant::gated_cnn;
  std::size_t window = 128;
  std::size_t head_hidden = 256;
  std::optional<double> dropout;  // unset: 0.25, or 0.3 for the transformer
  GateSource gate_source = GateSource::projection;

  double effective_dropout() const;
  // Channels each stream reads from its 4-channel block.
  std::size_t input_channels() const { return variant == Variant::t4_channel_subset ? 2 : 4; }
  bool has_cnn() const;
  bool has_gate() const;
  bool uses_acc() const { return variant != Variant::t5_gyro_only; }
  bool uses_gyro() const { return variant != Variant::t5_acc_only; }
  // Temporal extent reaching the gate / pooling stage for a window of length t.
  std::size_t feature_steps(std::size_t t) const;
  std::size_t stream_output_features() const;
  std::size_t fused_features() const;
  void validate() const;
};

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

// Intermediate tensors of one stream, for shape checks and feature-map export.
struct StreamTrace {
  std::string name;
  Tensor input;        // (N, T, C) after channel selection
  Tensor features;     // F: extractor output
  Tensor projection;   // U
  Tensor gate;         // Gamma
  Tensor gated;        // U * Gamma
  Tensor refined;      // Z
  Tensor pooled;       // per-stream head input
  std::vector<Tensor> attention;  // transformer: (N, H, T, T) per layer
};

struct ForwardTrace {
  std::vector<StreamTrace> streams;
  Tensor fused;
};

struct GateOutput {
  Tensor projection;
  Tensor gate;
  Tensor gated;
  Tensor refined;
};

// U = GeLU(Conv1x1(F)); Gamma = sigmoid(Dense(U or F)); Z = Dense(U * Gamma).
struct GatingBlock {
  std::string name;
  std::size_t in_features = 64;
  std::size_t width = 32;
  GateSource source = GateSource::projection;

  nn::Conv1D projection() const { return {name + "/proj", in_features, width, 1}; }
  nn::Dense gate_dense() const {
    return {name + "/gate", source == GateSource::projection ? width : in_features, width};
  }
  nn::Dense output() const { return {name + "/out", width, width}; }

  void init(ParamStore& params, Rng& rng) const;
  GateOutput forward(ForwardContext& ctx, const Tensor& features) const;
  std::size_t param_count() const;
};

struct LayerFlops {
  std::string layer;
  std::uint64_t flops = 0;
  bool backbone = true;  // scales with T; head entries are per-window constants
};

// One multiply-add counts as 2 FLOPs; every other elementwise operation
// counts 1 per element. Counts are per window (batch of one).
struct FlopReport {
  std::vector<LayerFlops> layers;
  std::uint64_t backbone = 0;
  std::uint64_t head = 0;
  std::uint64_t total() const { return backbone + head; }
};

FlopReport estimate_flops(const ModelSpec& spec, std::size_t steps);

class Model {
public:
  static Model build(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  ParamStore& buffers() { return buffers_; }
  const ParamStore& buffers() const { return buffers_; }

  // acc and gyro are (N, T, 4) blocks; single-stream variants ignore the
  // unused one. Returns (N, 1) probabilities.
  Tensor forward(ForwardContext& ctx, const Tensor& acc, const Tensor& gyro, ForwardTrace* trace = nullptr);

  // Infer-mode forward over batches of at most `batch` windows, untaped.
  std::vector<double> predict(const Tensor& acc, const Tensor& gyro, std::size_t batch = 256);

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  std::size_t param_count() const { return params_.element_count(); }
  // Parameter count per layer, keyed by the name prefix before the array name.
  std::vector<std::pair<std::string, std::size_t>> param_table() const;
  FlopReport flops(std::size_t steps) const { return estimate_flops(spec_, steps); }

private:
  friend Model load_checkpoint(const std::string& path);
  Model(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)), seed_(seed) {}
  Tensor stream_forward(ForwardContext& ctx, const std::string& name, const Tensor& block, ForwardTrace* trace);

  ModelSpec spec_;
  std::uint64_t seed_ = 0;
  ParamStore params_;
  ParamStore buffers_;
  bool frozen_ = false;
};

// Single JSON document: spec, seed, and every parameter and buffer as shape
// plus base64 of little-endian doubles.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);
std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(std::string_view text);

}  // namespace falldet
