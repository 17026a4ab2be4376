#include "falldet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace falldet::ops {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// Staged through an aligned buffer so the vector/scalar split, and with it the
// rounding of each element, does not depend on where the data lives.
void exp_into(const double* in, double* out, std::size_t n) {
  constexpr std::size_t kBlock = 512;
  alignas(64) std::array<double, kBlock> buf;
  using AlignedArray = Eigen::Map<Eigen::ArrayXd, Eigen::Aligned64>;
  for (std::size_t i = 0; i < n; i += kBlock) {
    const std::size_t m = std::min(kBlock, n - i);
    std::copy_n(in + i, m, buf.data());
    AlignedArray a(buf.data(), static_cast<Eigen::Index>(m));
    a = a.exp();
    std::copy_n(buf.data(), m, out + i);
  }
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b, const std::string& why = {}) {
  std::string msg = std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b);
  if (!why.empty()) msg += " (" + why + ")";
  throw ShapeError(msg);
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": invalid shape " + to_string(a) + " (" + why + ")");
}

void check_finite([[maybe_unused]] const std::vector<double>& values, [[maybe_unused]] OpKind kind) {
#ifndef NDEBUG
  for (double v : values) {
    if (!std::isfinite(v)) throw std::domain_error(std::string(op_name(kind)) + " produced a non-finite value");
  }
#endif
}

GradTape* common_tape(std::span<const Tensor* const> inputs) {
  GradTape* tape = nullptr;
  for (const Tensor* t : inputs) {
    if (!t->on_tape()) continue;
    if (tape && tape != t->tape()) throw TapeError("inputs are recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

Tensor emit(OpKind kind, Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
            BackwardFn backward) {
  check_finite(values, kind);
  Tensor out(std::move(shape), std::move(values));
  std::span<const Tensor* const> in(inputs.begin(), inputs.size());
  GradTape* tape = common_tape(in);
  if (!tape) return out;
  return tape->record(kind, std::move(out), in, std::move(backward));
}

Tensor emit_many(OpKind kind, Shape shape, std::vector<double> values, std::span<const Tensor* const> inputs,
                 BackwardFn backward) {
  check_finite(values, kind);
  Tensor out(std::move(shape), std::move(values));
  GradTape* tape = common_tape(inputs);
  if (!tape) return out;
  return tape->record(kind, std::move(out), inputs, std::move(backward));
}

// How the smaller operand of a binary elementwise op maps onto the larger.
enum class Bcast { same, scalar, trailing };

struct BinaryPlan {
  Bcast mode;
  bool swapped;  // true when `a` is the broadcast operand
  Shape out_shape;
  std::size_t trailing;
};

BinaryPlan plan_binary(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return {Bcast::same, false, a.shape(), 0};
  if (b.size() == 1) return {Bcast::scalar, false, a.shape(), 0};
  if (a.size() == 1) return {Bcast::scalar, true, b.shape(), 0};
  if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) return {Bcast::trailing, false, a.shape(), b.dim(0)};
  if (a.rank() == 1 && b.rank() >= 1 && b.shape().back() == a.dim(0)) return {Bcast::trailing, true, b.shape(), a.dim(0)};
  shape_fail(op, a.shape(), b.shape(), "only scalar and trailing-axis broadcasting are supported");
}

inline std::size_t small_index(Bcast mode, std::size_t i, std::size_t trailing) {
  switch (mode) {
    case Bcast::same: return i;
    case Bcast::scalar: return 0;
    case Bcast::trailing: return i % trailing;
  }
  return i;
}

template <class F, class D>
Tensor unary(OpKind kind, const Tensor& x, F f, D dfdx) {
  std::vector<double> y(x.size());
  const auto xs = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xs[i]);
  check_finite(y, kind);
  Tensor out(x.shape(), std::move(y));
  const Tensor* inputs[] = {&x};
  GradTape* tape = common_tape(inputs);
  if (!tape) return out;
  auto xv = x.detach();
  auto yv = out.detach();
  return tape->record(kind, std::move(out), inputs, [xv, yv, dfdx](auto g, auto gin) {
    const auto xs = xv.data();
    const auto ys = yv.data();
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * dfdx(xs[i], ys[i]);
  });
}

// Decomposes a shape around `axis` into (outer, extent, inner).
std::array<std::size_t, 3> split_axis(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out = s;
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

void check_axis(const char* op, const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) shape_fail(op, x.shape(), "axis " + std::to_string(axis) + " out of range");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  auto plan = plan_binary("add", a, b);
  const Tensor& big = plan.swapped ? b : a;
  const Tensor& small = plan.swapped ? a : b;
  std::vector<double> out(big.size());
  const auto bd = big.data();
  const auto sd = small.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bd[i] + sd[small_index(plan.mode, i, plan.trailing)];
  return emit(OpKind::add, plan.out_shape, std::move(out), {&a, &b}, [plan](auto g, auto gin) {
    auto g_big = gin[plan.swapped ? 1 : 0];
    auto g_small = gin[plan.swapped ? 0 : 1];
    if (!g_big.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g_big[i] += g[i];
    }
    if (!g_small.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g_small[small_index(plan.mode, i, plan.trailing)] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  auto plan = plan_binary("mul", a, b);
  const Tensor& big = plan.swapped ? b : a;
  const Tensor& small = plan.swapped ? a : b;
  std::vector<double> out(big.size());
  const auto bd = big.data();
  const auto sd = small.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = bd[i] * sd[small_index(plan.mode, i, plan.trailing)];
  auto big_v = big.detach();
  auto small_v = small.detach();
  return emit(OpKind::mul, plan.out_shape, std::move(out), {&a, &b}, [plan, big_v, small_v](auto g, auto gin) {
    auto g_big = gin[plan.swapped ? 1 : 0];
    auto g_small = gin[plan.swapped ? 0 : 1];
    const auto bd = big_v.data();
    const auto sd = small_v.data();
    if (!g_big.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g_big[i] += g[i] * sd[small_index(plan.mode, i, plan.trailing)];
    }
    if (!g_small.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) g_small[small_index(plan.mode, i, plan.trailing)] += g[i] * bd[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() >= 2 && b.rank() == 2) {
    const std::size_t k = a.shape().back();
    if (k != b.dim(0)) shape_fail("matmul", a.shape(), b.shape(), "contraction extents differ");
    const std::size_t m = a.size() / k;
    const std::size_t n = b.dim(1);
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(m * n);
    MutMap(out.data(), m, n).noalias() = ConstMap(a.data().data(), m, k) * ConstMap(b.data().data(), k, n);
    auto av = a.detach();
    auto bv = b.detach();
    return emit(OpKind::matmul, std::move(out_shape), std::move(out), {&a, &b}, [av, bv, m, k, n](auto g, auto gin) {
      ConstMap gm(g.data(), m, n);
      if (!gin[0].empty()) MutMap(gin[0].data(), m, k).noalias() += gm * ConstMap(bv.data().data(), k, n).transpose();
      if (!gin[1].empty()) MutMap(gin[1].data(), k, n).noalias() += ConstMap(av.data().data(), m, k).transpose() * gm;
    });
  }
  if (a.rank() == 3 && b.rank() == 3) {
    const std::size_t batch = a.dim(0);
    if (b.dim(0) != batch) shape_fail("matmul", a.shape(), b.shape(), "batch extents differ");
    const std::size_t m = a.dim(1), k = a.dim(2), n = b.dim(2);
    if (b.dim(1) != k) shape_fail("matmul", a.shape(), b.shape(), "contraction extents differ");
    std::vector<double> out(batch * m * n);
    for (std::size_t i = 0; i < batch; ++i) {
      MutMap(out.data() + i * m * n, m, n).noalias() =
          ConstMap(a.data().data() + i * m * k, m, k) * ConstMap(b.data().data() + i * k * n, k, n);
    }
    auto av = a.detach();
    auto bv = b.detach();
    return emit(OpKind::matmul, {batch, m, n}, std::move(out), {&a, &b},
                [av, bv, batch, m, k, n](auto g, auto gin) {
                  for (std::size_t i = 0; i < batch; ++i) {
                    ConstMap gm(g.data() + i * m * n, m, n);
                    if (!gin[0].empty()) {
                      MutMap(gin[0].data() + i * m * k, m, k).noalias() +=
                          gm * ConstMap(bv.data().data() + i * k * n, k, n).transpose();
                    }
                    if (!gin[1].empty()) {
                      MutMap(gin[1].data() + i * k * n, k, n).noalias() +=
                          ConstMap(av.data().data() + i * m * k, m, k).transpose() * gm;
                    }
                  }
                });
  }
  shape_fail("matmul", a.shape(), b.shape(), "expected (...,M,K)x(K,N) or (B,M,K)x(B,K,N)");
}

Tensor window_gather(const Tensor& x, std::size_t kernel) {
  if (x.rank() != 3) shape_fail("window_gather", x.shape(), "expected (N, T, C)");
  if (kernel == 0) shape_fail("window_gather", x.shape(), "kernel size must be positive");
  const std::size_t n = x.dim(0), t = x.dim(1), c = x.dim(2);
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const std::size_t width = kernel * c;
  std::vector<double> out(n * t * width, 0.0);
  const auto xd = x.data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t p = 0; p < t; ++p) {
      double* row = out.data() + (b * t + p) * width;
      for (std::size_t j = 0; j < kernel; ++j) {
        auto src = static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(j) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
        std::copy_n(xd.data() + (b * t + static_cast<std::size_t>(src)) * c, c, row + j * c);
      }
    }
  }
  return emit(OpKind::window_gather, {n, t, width}, std::move(out), {&x}, [n, t, c, kernel, half](auto g, auto gin) {
    auto gx = gin[0];
    const std::size_t width = kernel * c;
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t p = 0; p < t; ++p) {
        const double* row = g.data() + (b * t + p) * width;
        for (std::size_t j = 0; j < kernel; ++j) {
          auto src = static_cast<std::ptrdiff_t>(p) + static_cast<std::ptrdiff_t>(j) - half;
          if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
          double* dst = gx.data() + (b * t + static_cast<std::size_t>(src)) * c;
          for (std::size_t q = 0; q < c; ++q) dst[q] += row[j * c + q];
        }
      }
    }
  });
}

Tensor reduce_max(const Tensor& x, std::size_t axis) {
  check_axis("reduce_max", x, axis);
  auto [outer, extent, inner] = split_axis(x.shape(), axis);
  std::vector<double> out(outer * inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>(outer * inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      std::size_t best = o * extent * inner + i;
      for (std::size_t e = 1; e < extent; ++e) {
        std::size_t idx = (o * extent + e) * inner + i;
        if (xd[idx] > xd[best]) best = idx;
      }
      out[o * inner + i] = xd[best];
      (*argmax)[o * inner + i] = best;
    }
  }
  return emit(OpKind::reduce_max, drop_axis(x.shape(), axis), std::move(out), {&x}, [argmax](auto g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][(*argmax)[i]] += g[i];
  });
}

Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  check_axis("reduce_sum", x, axis);
  auto [outer, extent, inner] = split_axis(x.shape(), axis);
  std::vector<double> out(outer * inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* src = xd.data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  return emit(OpKind::reduce_sum, drop_axis(x.shape(), axis), std::move(out), {&x},
              [outer, extent, inner](auto g, auto gin) {
                for (std::size_t o = 0; o < outer; ++o) {
                  for (std::size_t e = 0; e < extent; ++e) {
                    double* dst = gin[0].data() + (o * extent + e) * inner;
                    const double* src = g.data() + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
                  }
                }
              });
}

Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  check_axis("reduce_mean", x, axis);
  auto [outer, extent, inner] = split_axis(x.shape(), axis);
  const double w = 1.0 / static_cast<double>(extent);
  std::vector<double> out(outer * inner, 0.0);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      const double* src = xd.data() + (o * extent + e) * inner;
      double* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  }
  for (double& v : out) v *= w;
  return emit(OpKind::reduce_mean, drop_axis(x.shape(), axis), std::move(out), {&x},
              [outer, extent, inner, w](auto g, auto gin) {
                for (std::size_t o = 0; o < outer; ++o) {
                  for (std::size_t e = 0; e < extent; ++e) {
                    double* dst = gin[0].data() + (o * extent + e) * inner;
                    const double* src = g.data() + o * inner;
                    for (std::size_t i = 0; i < inner; ++i) dst[i] += w * src[i];
                  }
                }
              });
}

Tensor exp(const Tensor& x) {
  std::vector<double> y(x.size());
  exp_into(x.data().data(), y.data(), y.size());
  check_finite(y, OpKind::exp);
  Tensor out(x.shape(), std::move(y));
  const Tensor* inputs[] = {&x};
  GradTape* tape = common_tape(inputs);
  if (!tape) return out;
  auto yv = out.detach();
  return tape->record(OpKind::exp, std::move(out), inputs, [yv](auto g, auto gin) {
    const auto ys = yv.data();
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * ys[i];
  });
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw std::domain_error("log: argument must be positive, got " + std::to_string(v));
  }
  return unary(OpKind::log, x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor erf(const Tensor& x) {
  return unary(
      OpKind::erf, x, [](double v) { return std::erf(v); },
      [](double v, double) { return std::numbers::inv_sqrtpi * 2.0 * std::exp(-v * v); });
}

Tensor reciprocal(const Tensor& x) {
  for (double v : x.data()) {
    if (v == 0.0) throw std::domain_error("reciprocal: division by zero");
  }
  return unary(OpKind::reciprocal, x, [](double v) { return 1.0 / v; }, [](double, double y) { return -y * y; });
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (!(v > 0.0)) throw std::domain_error("sqrt: argument must be positive, got " + std::to_string(v));
  }
  return unary(OpKind::sqrt, x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Tensor relu(const Tensor& x) {
  return unary(
      OpKind::relu, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  const std::size_t n = x.size();
  const auto xd = x.data();
  std::vector<double> y(n);
  // e^{-|v|} never overflows; the sign picks the stable branch.
  for (std::size_t i = 0; i < n; ++i) y[i] = -std::abs(xd[i]);
  exp_into(y.data(), y.data(), n);
  for (std::size_t i = 0; i < n; ++i) y[i] = xd[i] >= 0.0 ? 1.0 / (1.0 + y[i]) : y[i] / (1.0 + y[i]);
  check_finite(y, OpKind::sigmoid);
  Tensor out(x.shape(), std::move(y));
  const Tensor* inputs[] = {&x};
  GradTape* tape = common_tape(inputs);
  if (!tape) return out;
  auto yv = out.detach();
  return tape->record(OpKind::sigmoid, std::move(out), inputs, [yv](auto g, auto gin) {
    const auto ys = yv.data();
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i] * ys[i] * (1.0 - ys[i]);
  });
}

Tensor softmax_last(const Tensor& x) {
  if (x.rank() == 0) shape_fail("softmax", x.shape(), "needs at least one axis");
  const std::size_t extent = x.shape().back();
  const std::size_t rows = x.size() / extent;
  std::vector<double> y(x.size());
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * extent;
    double* out = y.data() + r * extent;
    const double top = *std::max_element(in, in + extent);
    for (std::size_t j = 0; j < extent; ++j) out[j] = in[j] - top;
    exp_into(out, out, extent);
    double total = 0.0;
    for (std::size_t j = 0; j < extent; ++j) total += out[j];
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < extent; ++j) out[j] *= inv;
  }
  check_finite(y, OpKind::softmax);
  Tensor result(x.shape(), std::move(y));
  const Tensor* inputs[] = {&x};
  GradTape* tape = common_tape(inputs);
  if (!tape) return result;
  auto yv = result.detach();
  return tape->record(OpKind::softmax, std::move(result), inputs, [yv, rows, extent](auto g, auto gin) {
    const auto yd = yv.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yd.data() + r * extent;
      const double* gr = g.data() + r * extent;
      double dot = 0.0;
      for (std::size_t j = 0; j < extent; ++j) dot += gr[j] * yr[j];
      double* out = gin[0].data() + r * extent;
      for (std::size_t j = 0; j < extent; ++j) out[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor layer_norm_last(const Tensor& x, double epsilon) {
  if (x.rank() == 0) shape_fail("layer_norm", x.shape(), "needs at least one axis");
  if (!(epsilon > 0.0)) throw std::invalid_argument("layer_norm: epsilon must be positive");
  const std::size_t extent = x.shape().back();
  const std::size_t rows = x.size() / extent;
  const double w = 1.0 / static_cast<double>(extent);
  std::vector<double> y(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto xd = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xd.data() + r * extent;
    double* out = y.data() + r * extent;
    double mean = 0.0;
    for (std::size_t j = 0; j < extent; ++j) mean += in[j];
    mean *= w;
    double var = 0.0;
    for (std::size_t j = 0; j < extent; ++j) {
      out[j] = in[j] - mean;
      var += out[j] * out[j];
    }
    const double inv = 1.0 / std::sqrt(var * w + epsilon);
    for (std::size_t j = 0; j < extent; ++j) out[j] *= inv;
    (*inv_std)[r] = inv;
  }
  check_finite(y, OpKind::layer_norm);
  Tensor result(x.shape(), std::move(y));
  const Tensor* inputs[] = {&x};
  GradTape* tape = common_tape(inputs);
  if (!tape) return result;
  auto yv = result.detach();
  return tape->record(OpKind::layer_norm, std::move(result), inputs, [yv, inv_std, rows, extent, w](auto g, auto gin) {
    const auto yd = yv.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = yd.data() + r * extent;
      const double* gr = g.data() + r * extent;
      double g_mean = 0.0, gy_mean = 0.0;
      for (std::size_t j = 0; j < extent; ++j) {
        g_mean += gr[j];
        gy_mean += gr[j] * yr[j];
      }
      g_mean *= w;
      gy_mean *= w;
      double* out = gin[0].data() + r * extent;
      const double inv = (*inv_std)[r];
      for (std::size_t j = 0; j < extent; ++j) out[j] += inv * (gr[j] - g_mean - yr[j] * gy_mean);
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lower bound exceeds upper bound");
  return unary(
      OpKind::clamp, x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor broadcast(const Tensor& x, std::size_t axis, std::size_t extent) {
  if (axis > x.rank()) shape_fail("broadcast", x.shape(), "axis " + std::to_string(axis) + " out of range");
  if (extent == 0) shape_fail("broadcast", x.shape(), "extent must be positive");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis; i < x.rank(); ++i) inner *= x.dim(i);
  Shape shape = x.shape();
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), extent);
  std::vector<double> out(outer * extent * inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      std::copy_n(xd.data() + o * inner, inner, out.data() + (o * extent + e) * inner);
    }
  }
  return emit(OpKind::broadcast, std::move(shape), std::move(out), {&x}, [outer, extent, inner](auto g, auto gin) {
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t e = 0; e < extent; ++e) {
        const double* src = g.data() + (o * extent + e) * inner;
        double* dst = gin[0].data() + o * inner;
        for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
      }
    }
  });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) shape_fail("concat", ref, "axis " + std::to_string(axis) + " out of range");
  std::vector<std::size_t> extents;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) shape_fail("concat", ref, p.shape(), "rank differs");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dim(i) != ref[i]) shape_fail("concat", ref, p.shape(), "non-concat extents differ");
    }
    extents.push_back(p.dim(axis));
    total += p.dim(axis);
  }
  auto [outer, unused, inner] = split_axis(ref, axis);
  (void)unused;
  Shape shape = ref;
  shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pd = parts[k].data();
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pd.data() + o * block, block, out.data() + o * total * inner + offset * inner);
    }
    offset += extents[k];
  }
  std::vector<const Tensor*> inputs;
  for (const auto& p : parts) inputs.push_back(&p);
  return emit_many(OpKind::concat, std::move(shape), std::move(out), inputs,
                   [extents, outer = outer, inner = inner, total](auto g, auto gin) {
                     std::size_t offset = 0;
                     for (std::size_t k = 0; k < extents.size(); ++k) {
                       const std::size_t block = extents[k] * inner;
                       if (!gin[k].empty()) {
                         for (std::size_t o = 0; o < outer; ++o) {
                           const double* src = g.data() + o * total * inner + offset * inner;
                           double* dst = gin[k].data() + o * block;
                           for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
                         }
                       }
                       offset += extents[k];
                     }
                   });
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  check_axis("slice", x, axis);
  if (begin >= end || end > x.dim(axis)) {
    shape_fail("slice", x.shape(), "range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid");
  }
  auto [outer, extent, inner] = split_axis(x.shape(), axis);
  const std::size_t len = end - begin;
  Shape shape = x.shape();
  shape[axis] = len;
  std::vector<double> out(outer * len * inner);
  const auto xd = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xd.data() + (o * extent + begin) * inner, len * inner, out.data() + o * len * inner);
  }
  return emit(OpKind::slice, std::move(shape), std::move(out), {&x},
              [outer = outer, extent = extent, inner = inner, begin, len](auto g, auto gin) {
                for (std::size_t o = 0; o < outer; ++o) {
                  const double* src = g.data() + o * len * inner;
                  double* dst = gin[0].data() + (o * extent + begin) * inner;
                  for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                }
              });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const std::size_t r = x.rank();
  if (order.size() != r) shape_fail("permute", x.shape(), "permutation length differs from rank");
  std::vector<bool> seen(r, false);
  for (auto a : order) {
    if (a >= r || seen[a]) shape_fail("permute", x.shape(), "not a permutation");
    seen[a] = true;
  }
  Shape shape(r);
  for (std::size_t i = 0; i < r; ++i) shape[i] = x.dim(order[i]);
  // Source stride for each output axis.
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.dim(i);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[order[i]];

  auto index_map = std::make_shared<std::vector<std::size_t>>(x.size());
  std::vector<std::size_t> counter(r, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < x.size(); ++flat) {
    (*index_map)[flat] = src;
    for (std::size_t ax = r; ax-- > 0;) {
      if (++counter[ax] < shape[ax]) {
        src += src_stride[ax];
        break;
      }
      src -= src_stride[ax] * (shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  std::vector<double> out(x.size());
  const auto xd = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[(*index_map)[i]];
  return emit(OpKind::permute, std::move(shape), std::move(out), {&x}, [index_map](auto g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][(*index_map)[i]] += g[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_fail("reshape", x.shape(), shape, "element counts differ");
  Tensor out = x.view(std::move(shape));
  const Tensor* inputs[] = {&x};
  GradTape* tape = common_tape(inputs);
  if (!tape) return out;
  return tape->record(OpKind::reshape, std::move(out), inputs, [](auto g, auto gin) {
    for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += g[i];
  });
}

Tensor neg(const Tensor& x) { return mul(x, Tensor::scalar(-1.0)); }
Tensor sub(const Tensor& a, const Tensor& b) { return add(a, neg(b)); }
Tensor scale(const Tensor& x, double factor) { return mul(x, Tensor::scalar(factor)); }
Tensor add_scalar(const Tensor& x, double value) { return add(x, Tensor::scalar(value)); }

Tensor transpose(const Tensor& x, std::size_t axis_a, std::size_t axis_b) {
  check_axis("transpose", x, axis_a);
  check_axis("transpose", x, axis_b);
  std::vector<std::size_t> order(x.rank());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::swap(order[axis_a], order[axis_b]);
  return permute(x, order);
}

Tensor sum_all(const Tensor& x) { return reshape(reduce_sum(reshape(x, {x.size()}), 0), {}); }
Tensor mean_all(const Tensor& x) { return reshape(reduce_mean(reshape(x, {x.size()}), 0), {}); }

}  // namespace falldet::ops
