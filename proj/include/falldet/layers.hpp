#pragma once

#include <cstddef>
#include <string>

#include "falldet/ops.hpp"
#include "falldet/params.hpp"
#include "falldet/rng.hpp"
#include "falldet/tensor.hpp"

// Layer vocabulary. Layers are plain descriptions (name prefix + sizes); their
// arrays live in a ParamStore under "<name>/<array>" and are created by init().
namespace falldet::nn {

Tensor relu(const Tensor& x);
// x * Phi(x) with Phi the standard normal CDF, via erf.
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_last(const Tensor& x);

// (N, T, C) -> (N, floor(T/2), C); a trailing odd step is dropped.
Tensor maxpool1d(const Tensor& x, std::size_t pool = 2);
// (N, T, C) -> (N, C)
Tensor global_average_pool(const Tensor& x);

// Truncated-normal draw scaled by sqrt(2 / (fan_in + fan_out)).
Tensor glorot_truncated(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// Same-padded 1D convolution. Weight layout (out, in, kernel).
struct Conv1D {
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 3;

  void init(ParamStore& params, Rng& rng) const;
  Tensor forward(ForwardContext& ctx, const Tensor& x) const;
  std::size_t param_count() const { return out_channels * in_channels * kernel + out_channels; }
};

// Affine map over the trailing axis. Weight layout (in, out).
struct Dense {
  std::string name;
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  void init(ParamStore& params, Rng& rng) const;
  Tensor forward(ForwardContext& ctx, const Tensor& x) const;
  std::size_t param_count() const { return in_features * out_features + out_features; }
};

// Normalizes (N, F) over the batch axis in train mode and with running
// statistics in infer mode. Running statistics live in the buffer store.
struct BatchNorm {
  std::string name;
  std::size_t features = 0;
  double momentum = 0.9;
  double epsilon = 1e-5;

  void init(ParamStore& params, ParamStore& buffers) const;
  Tensor forward(ForwardContext& ctx, const Tensor& x) const;
  std::size_t param_count() const { return 2 * features; }
};

// Inverted dropout: survivors are scaled by 1/(1-p) in train mode; identity
// in infer mode.
struct Dropout {
  double p = 0.0;

  Tensor forward(ForwardContext& ctx, const Tensor& x) const;
};

// Normalizes over the trailing axis.
struct LayerNorm {
  std::string name;
  std::size_t features = 0;
  double epsilon = 1e-5;

  void init(ParamStore& params) const;
  Tensor forward(ForwardContext& ctx, const Tensor& x) const;
  std::size_t param_count() const { return 2 * features; }
};

struct AttentionOutput {
  Tensor output;   // (N, T, E)
  Tensor weights;  // (N, H, T, T), each row sums to one
};

struct MultiHeadAttention {
  std::string name;
  std::size_t embed = 64;
  std::size_t heads = 4;

  std::size_t key_dim() const { return embed / heads; }
  void init(ParamStore& params, Rng& rng) const;
  AttentionOutput forward(ForwardContext& ctx, const Tensor& x) const;
  std::size_t param_count() const { return 4 * (embed * embed + embed); }
};

// Pre-norm encoder block: x + Drop(MHA(LN(x))), then h + Drop(FFN(LN(h))).
struct EncoderLayer {
  std::string name;
  std::size_t embed = 64;
  std::size_t heads = 4;
  std::size_t ff_hidden = 128;
  double dropout = 0.0;

  MultiHeadAttention attention() const { return {name + "/mha", embed, heads}; }
  void init(ParamStore& params, Rng& rng) const;
  AttentionOutput forward(ForwardContext& ctx, const Tensor& x) const;
  std::size_t param_count() const;
};

// Sinusoidal table (T, E): sin on even columns, cos on odd columns.
Tensor sinusoidal_positions(std::size_t steps, std::size_t embed);

}  // namespace falldet::nn
