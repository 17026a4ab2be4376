#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace falldet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

enum class OpKind {
  leaf,
  add,
  mul,
  matmul,
  window_gather,
  reduce_max,
  reduce_mean,
  reduce_sum,
  exp,
  log,
  erf,
  reciprocal,
  sqrt,
  relu,
  sigmoid,
  clamp,
  softmax,
  layer_norm,
  broadcast,
  concat,
  slice,
  permute,
  reshape,
};

const char* op_name(OpKind kind);

class GradTape;

// Dense row-major array of doubles. Copies share the underlying buffer; a
// tensor produced while a tape is active carries the id of its tape node.
class Tensor {
public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_->size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<const double> data() const { return *data_; }
  // Writes through to every tensor sharing this buffer.
  std::span<double> mutable_data() { return *data_; }
  const std::vector<double>& values() const { return *data_; }

  double item() const;
  double operator[](std::size_t flat) const { return (*data_)[flat]; }

  GradTape* tape() const { return tape_; }
  std::size_t node() const { return node_; }
  bool on_tape() const { return tape_ != nullptr; }

  // Same values, no tape binding, private buffer.
  Tensor clone() const;
  // Same buffer, no tape binding.
  Tensor detach() const;
  // Untaped view of the same buffer under another shape of equal size.
  Tensor view(Shape shape) const;

  bool same_values(const Tensor& other) const;

private:
  friend class GradTape;

  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  GradTape* tape_ = nullptr;
  std::size_t node_ = 0;
};

// grad_in[i] is empty when input i does not require a gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

class Gradients {
public:
  const Tensor& of(const Tensor& leaf) const;
  bool has(const Tensor& leaf) const;
  std::size_t size() const { return by_node_.size(); }

private:
  friend class GradTape;
  const GradTape* tape_ = nullptr;
  std::unordered_map<std::size_t, Tensor> by_node_;
};

// Records primitive applications in execution order. Confined to one thread.
class GradTape {
public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Registers a leaf whose gradient backward() will report.
  Tensor watch(const Tensor& value);

  Tensor record(OpKind kind, Tensor output, std::span<const Tensor* const> inputs, BackwardFn backward);

  // Reverse sweep from a scalar loss. A tape can be swept once.
  Gradients backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  OpKind kind(std::size_t node) const { return nodes_.at(node).kind; }
  const std::vector<std::size_t>& inputs(std::size_t node) const { return nodes_.at(node).inputs; }

  static constexpr std::size_t no_node = static_cast<std::size_t>(-1);

private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    Shape shape;
    std::size_t size;
    BackwardFn backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

}  // namespace falldet
