#include "falldet/layers.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace falldet::nn {

using namespace falldet::ops;

namespace {

void expect_rank(const char* layer, const Tensor& x, std::size_t rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(layer) + ": expected rank " + std::to_string(rank) + " input, got " +
                     to_string(x.shape()));
  }
}

void expect_trailing(const char* layer, const Tensor& x, std::size_t extent) {
  if (x.rank() == 0 || x.shape().back() != extent) {
    throw ShapeError(std::string(layer) + ": expected trailing extent " + std::to_string(extent) + ", got " +
                     to_string(x.shape()));
  }
}

}  // namespace

Tensor relu(const Tensor& x) { return ops::relu(x); }

Tensor gelu(const Tensor& x) {
  auto cdf = scale(add_scalar(ops::erf(scale(x, 1.0 / std::numbers::sqrt2)), 1.0), 0.5);
  return mul(x, cdf);
}

Tensor sigmoid(const Tensor& x) { return ops::sigmoid(x); }

Tensor softmax_last(const Tensor& x) { return ops::softmax_last(x); }

Tensor maxpool1d(const Tensor& x, std::size_t pool) {
  expect_rank("maxpool1d", x, 3);
  if (pool == 0) throw std::invalid_argument("maxpool1d: pool size must be positive");
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  if (t < pool) {
    throw ShapeError("maxpool1d: temporal extent " + std::to_string(t) + " is shorter than the pool size " +
                     std::to_string(pool));
  }
  const std::size_t steps = t / pool;
  Tensor trimmed = (steps * pool == t) ? x : slice(x, 1, 0, steps * pool);
  return reduce_max(reshape(trimmed, {n, steps, pool, c}), 2);
}

Tensor global_average_pool(const Tensor& x) {
  expect_rank("global_average_pool", x, 3);
  return reduce_mean(x, 1);
}

Tensor glorot_truncated(const Shape& shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.truncated_normal(stddev);
  return Tensor(shape, std::move(v));
}

void Conv1D::init(ParamStore& params, Rng& rng) const {
  params.add(name + "/weight", glorot_truncated({out_channels, in_channels, kernel}, in_channels * kernel,
                                                out_channels * kernel, rng));
  params.add(name + "/bias", Tensor::zeros({out_channels}));
}

Tensor Conv1D::forward(ForwardContext& ctx, const Tensor& x) const {
  expect_rank("conv1d", x, 3);
  expect_trailing("conv1d", x, in_channels);
  const auto& w = ctx.param(name + "/weight");
  const auto& b = ctx.param(name + "/bias");
  static const std::size_t order[] = {2, 1, 0};
  auto matrix = reshape(permute(w, order), {kernel * in_channels, out_channels});
  auto cols = kernel == 1 ? x : window_gather(x, kernel);
  return add(matmul(cols, matrix), b);
}

void Dense::init(ParamStore& params, Rng& rng) const {
  params.add(name + "/weight", glorot_truncated({in_features, out_features}, in_features, out_features, rng));
  params.add(name + "/bias", Tensor::zeros({out_features}));
}

Tensor Dense::forward(ForwardContext& ctx, const Tensor& x) const {
  expect_trailing("dense", x, in_features);
  const auto& w = ctx.param(name + "/weight");
  const auto& b = ctx.param(name + "/bias");
  if (x.rank() == 1) return add(reshape(matmul(reshape(x, {1, in_features}), w), {out_features}), b);
  return add(matmul(x, w), b);
}

void BatchNorm::init(ParamStore& params, ParamStore& buffers) const {
  params.add(name + "/gamma", Tensor::full({features}, 1.0));
  params.add(name + "/beta", Tensor::zeros({features}));
  buffers.add(name + "/running_mean", Tensor::zeros({features}));
  buffers.add(name + "/running_var", Tensor::full({features}, 1.0));
}

Tensor BatchNorm::forward(ForwardContext& ctx, const Tensor& x) const {
  expect_rank("batch_norm", x, 2);
  expect_trailing("batch_norm", x, features);
  const auto& gamma = ctx.param(name + "/gamma");
  const auto& beta = ctx.param(name + "/beta");
  auto& running_mean = ctx.buffers().get(name + "/running_mean");
  auto& running_var = ctx.buffers().get(name + "/running_var");

  Tensor normalized;
  if (ctx.training()) {
    auto mean = reduce_mean(x, 0);
    auto centered = sub(x, mean);
    auto var = reduce_mean(mul(centered, centered), 0);
    auto inv_std = reciprocal(ops::sqrt(add_scalar(var, epsilon)));
    normalized = mul(centered, inv_std);
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t f = 0; f < features; ++f) {
      rm[f] = momentum * rm[f] + (1.0 - momentum) * mean[f];
      rv[f] = momentum * rv[f] + (1.0 - momentum) * var[f];
    }
  } else {
    std::vector<double> shift(features), inv(features);
    for (std::size_t f = 0; f < features; ++f) {
      shift[f] = -running_mean[f];
      inv[f] = 1.0 / std::sqrt(running_var[f] + epsilon);
    }
    normalized = mul(add(x, Tensor({features}, std::move(shift))), Tensor({features}, std::move(inv)));
  }
  return add(mul(normalized, gamma), beta);
}

Tensor Dropout::forward(ForwardContext& ctx, const Tensor& x) const {
  if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1), got " + std::to_string(p));
  if (!ctx.training() || p == 0.0) return x;
  if (!ctx.rng()) throw std::logic_error("dropout in train mode needs an RNG");
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = ctx.rng()->bernoulli(p) ? 0.0 : keep_scale;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

void LayerNorm::init(ParamStore& params) const {
  params.add(name + "/gamma", Tensor::full({features}, 1.0));
  params.add(name + "/beta", Tensor::zeros({features}));
}

Tensor LayerNorm::forward(ForwardContext& ctx, const Tensor& x) const {
  expect_trailing("layer_norm", x, features);
  auto normalized = layer_norm_last(x, epsilon);
  return add(mul(normalized, ctx.param(name + "/gamma")), ctx.param(name + "/beta"));
}

void MultiHeadAttention::init(ParamStore& params, Rng& rng) const {
  if (heads == 0 || embed % heads != 0) throw std::invalid_argument("attention: embed must divide evenly into heads");
  for (const char* proj : {"query", "key", "value", "output"}) {
    Dense{name + "/" + proj, embed, embed}.init(params, rng);
  }
}

AttentionOutput MultiHeadAttention::forward(ForwardContext& ctx, const Tensor& x) const {
  expect_rank("attention", x, 3);
  expect_trailing("attention", x, embed);
  const std::size_t n = x.dim(0), t = x.dim(1), dk = key_dim();
  static const std::size_t split_order[] = {0, 2, 1, 3};

  // (N, T, E) -> (N*H, T, dk)
  auto split_heads = [&](const Tensor& y) {
    return reshape(permute(reshape(y, {n, t, heads, dk}), split_order), {n * heads, t, dk});
  };
  // 1/sqrt(dk) is applied to the queries, which equals scaling the logits.
  auto q = split_heads(scale(Dense{name + "/query", embed, embed}.forward(ctx, x), 1.0 / std::sqrt(static_cast<double>(dk))));
  auto k = split_heads(Dense{name + "/key", embed, embed}.forward(ctx, x));
  auto v = split_heads(Dense{name + "/value", embed, embed}.forward(ctx, x));

  auto scores = matmul(q, transpose(k, 1, 2));
  auto weights = softmax_last(scores);
  auto context = matmul(weights, v);
  auto merged = reshape(permute(reshape(context, {n, heads, t, dk}), split_order), {n, t, embed});
  auto out = Dense{name + "/output", embed, embed}.forward(ctx, merged);
  return {out, reshape(weights, {n, heads, t, t})};
}

void EncoderLayer::init(ParamStore& params, Rng& rng) const {
  LayerNorm{name + "/norm1", embed}.init(params);
  attention().init(params, rng);
  LayerNorm{name + "/norm2", embed}.init(params);
  Dense{name + "/ff1", embed, ff_hidden}.init(params, rng);
  Dense{name + "/ff2", ff_hidden, embed}.init(params, rng);
}

AttentionOutput EncoderLayer::forward(ForwardContext& ctx, const Tensor& x) const {
  Dropout drop{dropout};
  auto attn = attention().forward(ctx, LayerNorm{name + "/norm1", embed}.forward(ctx, x));
  auto h = add(x, drop.forward(ctx, attn.output));
  auto ff = Dense{name + "/ff1", embed, ff_hidden}.forward(ctx, LayerNorm{name + "/norm2", embed}.forward(ctx, h));
  ff = Dense{name + "/ff2", ff_hidden, embed}.forward(ctx, ops::relu(ff));
  return {add(h, drop.forward(ctx, ff)), attn.weights};
}

std::size_t EncoderLayer::param_count() const {
  return 2 * LayerNorm{"", embed}.param_count() + attention().param_count() +
         Dense{"", embed, ff_hidden}.param_count() + Dense{"", ff_hidden, embed}.param_count();
}

Tensor sinusoidal_positions(std::size_t steps, std::size_t embed) {
  std::vector<double> table(steps * embed);
  for (std::size_t t = 0; t < steps; ++t) {
    for (std::size_t i = 0; i < embed; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(embed));
      const double angle = static_cast<double>(t) * rate;
      table[t * embed + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return Tensor({steps, embed}, std::move(table));
}

}  // namespace falldet::nn
