#include "falldet/params.hpp"

#include <stdexcept>

namespace falldet {

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, value.clone());
  return entries_.back().second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
  return entries_[it->second].second;
}

std::size_t ParamStore::element_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : entries_) n += t.size();
  return n;
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const auto& [name, t] : entries_) out.add(name, t);
  return out;
}

void ParamStore::assign_from(const ParamStore& other) {
  if (other.size() != size()) throw std::invalid_argument("parameter stores differ in layout");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    auto& [name, dst] = entries_[i];
    const auto& [other_name, src] = other.entries_[i];
    if (name != other_name || dst.shape() != src.shape()) {
      throw std::invalid_argument("parameter stores differ at " + name);
    }
    std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
  }
}

bool ParamStore::same_values(const ParamStore& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (!entries_[i].second.same_values(other.entries_[i].second)) return false;
  }
  return true;
}

const Tensor& ForwardContext::param(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  const Tensor& raw = params_.get(name);
  Tensor bound = tape_ ? tape_->watch(raw) : raw.detach();
  return bound_.emplace(name, std::move(bound)).first->second;
}

std::vector<Tensor> ForwardContext::gradients(const Gradients& grads) const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& [name, value] : params_) {
    auto it = bound_.find(name);
    if (it != bound_.end() && grads.has(it->second)) {
      out.push_back(grads.of(it->second));
    } else {
      out.push_back(Tensor::zeros(value.shape()));
    }
  }
  return out;
}

}  // namespace falldet
