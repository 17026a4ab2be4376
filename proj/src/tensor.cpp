#include "falldet/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <numeric>
#include <sstream>

namespace falldet {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::window_gather: return "window_gather";
    case OpKind::reduce_max: return "reduce_max";
    case OpKind::reduce_mean: return "reduce_mean";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::erf: return "erf";
    case OpKind::reciprocal: return "reciprocal";
    case OpKind::sqrt: return "sqrt";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::clamp: return "clamp";
    case OpKind::softmax: return "softmax";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::broadcast: return "broadcast";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::permute: return "permute";
    case OpKind::reshape: return "reshape";
  }
  return "unknown";
}

Tensor::Tensor() : data_(std::make_shared<std::vector<double>>(1, 0.0)) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(values))) {
  for (auto extent : shape_) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + to_string(shape_));
  }
  if (numel(shape_) != data_->size()) {
    throw ShapeError("tensor of shape " + to_string(shape_) + " needs " + std::to_string(numel(shape_)) +
                     " values, got " + std::to_string(data_->size()));
  }
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (data_->size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return (*data_)[0];
}

Tensor Tensor::clone() const { return Tensor(shape_, *data_); }

Tensor Tensor::view(Shape shape) const {
  if (numel(shape) != size()) {
    throw ShapeError("view: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  Tensor out = detach();
  out.shape_ = std::move(shape);
  return out;
}

Tensor Tensor::detach() const {
  Tensor out;
  out.shape_ = shape_;
  out.data_ = data_;
  return out;
}

bool Tensor::same_values(const Tensor& other) const {
  return shape_ == other.shape_ &&
         std::memcmp(data_->data(), other.data_->data(), data_->size() * sizeof(double)) == 0;
}

const Tensor& Gradients::of(const Tensor& leaf) const {
  if (leaf.tape() != tape_) throw TapeError("tensor is not bound to the tape these gradients came from");
  auto it = by_node_.find(leaf.node());
  if (it == by_node_.end()) throw TapeError("no gradient recorded for node " + std::to_string(leaf.node()));
  return it->second;
}

bool Gradients::has(const Tensor& leaf) const {
  return leaf.tape() == tape_ && by_node_.count(leaf.node()) > 0;
}

Tensor GradTape::watch(const Tensor& value) {
  if (consumed_) throw TapeError("cannot watch on a consumed tape");
  Tensor bound = value.detach();
  bound.tape_ = this;
  bound.node_ = nodes_.size();
  nodes_.push_back(Node{OpKind::leaf, {}, value.shape(), value.size(), {}});
  return bound;
}

Tensor GradTape::record(OpKind kind, Tensor output, std::span<const Tensor* const> inputs, BackwardFn backward) {
  if (consumed_) throw TapeError("cannot record on a consumed tape");
  Node node{kind, {}, output.shape(), output.size(), std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor* in : inputs) node.inputs.push_back(in->tape() == this ? in->node() : no_node);
  output.tape_ = this;
  output.node_ = nodes_.size();
  nodes_.push_back(std::move(node));
  return output;
}

Gradients GradTape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("tape was already consumed by a previous backward pass");
  if (loss.tape() != this) throw TapeError("loss is not recorded on this tape");
  if (loss.size() != 1) throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  consumed_ = true;

  std::vector<std::vector<double>> grads(nodes_.size());
  grads[loss.node()].assign(1, 1.0);

  std::vector<std::span<double>> grad_in;
  for (std::size_t i = loss.node() + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (grads[i].empty() || node.kind == OpKind::leaf) continue;
    grad_in.assign(node.inputs.size(), {});
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      auto src = node.inputs[k];
      if (src == no_node) continue;
      if (grads[src].empty()) grads[src].assign(nodes_[src].size, 0.0);
      grad_in[k] = grads[src];
    }
    node.backward(grads[i], grad_in);
    grads[i].clear();
    grads[i].shrink_to_fit();
    node.backward = nullptr;
  }

  Gradients out;
  out.tape_ = this;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i].kind != OpKind::leaf) continue;
    if (grads[i].empty()) grads[i].assign(nodes_[i].size, 0.0);
    out.by_node_.emplace(i, Tensor(nodes_[i].shape, std::move(grads[i])));
  }
  return out;
}

}  // namespace falldet
