#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "falldet/rng.hpp"
#include "falldet/tensor.hpp"

namespace falldet {

// Ordered, uniquely named collection of arrays. Iteration follows insertion
// order, which is also the checkpoint order.
class ParamStore {
public:
  using Entry = std::pair<std::string, Tensor>;

  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get(const std::string& name);
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t size() const { return entries_.size(); }
  std::size_t element_count() const;
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  // Deep copy with private buffers.
  ParamStore clone() const;
  // Copies values of a same-layout store into this store's existing buffers.
  void assign_from(const ParamStore& other);
  bool same_values(const ParamStore& other) const;

private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

enum class Mode { train, infer };

// Per-forward state: which tape (if any) records, the mode, and the dropout
// RNG. Parameters are watched on first use so each appears once on the tape.
class ForwardContext {
public:
  ForwardContext(ParamStore& params, ParamStore& buffers, Mode mode, GradTape* tape = nullptr, Rng* rng = nullptr)
      : params_(params), buffers_(buffers), mode_(mode), tape_(tape), rng_(rng) {}

  const Tensor& param(const std::string& name);
  ParamStore& buffers() { return buffers_; }
  Mode mode() const { return mode_; }
  bool training() const { return mode_ == Mode::train; }
  GradTape* tape() const { return tape_; }
  Rng* rng() const { return rng_; }

  // Gradients of every parameter touched in this forward, in store order.
  // Untouched parameters get zero gradients.
  std::vector<Tensor> gradients(const Gradients& grads) const;

private:
  ParamStore& params_;
  ParamStore& buffers_;
  Mode mode_;
  GradTape* tape_;
  Rng* rng_;
  std::map<std::string, Tensor> bound_;
};

}  // namespace falldet
