#pragma once

// Named trainable tensors and their binding onto a tape.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "bevtrack/error.hpp"
#include "bevtrack/numerics/autodiff.hpp"

namespace bev {

class ParamSet {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw DomainError("duplicate parameter " + name);
    index_[name] = values_.size();
    names_.push_back(name);
    values_.push_back(std::move(t));
    return values_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) > 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DomainError("unknown parameter " + name);
    return it->second;
  }
  Tensor& get(const std::string& name) { return values_[index(name)]; }
  const Tensor& get(const std::string& name) const { return values_[index(name)]; }

  const std::vector<std::string>& names() const { return names_; }
  std::vector<Tensor>& values() { return values_; }
  const std::vector<Tensor>& values() const { return values_; }
  std::size_t size() const { return values_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
  std::map<std::string, std::size_t> index_;
};

// Uniform(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot(Shape shape, std::mt19937_64& rng, double gain = 1.0) {
  const std::size_t fan_out = shape.back();
  const std::size_t fan_in = shape_numel(shape) / fan_out;
  const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Parameters as tape leaves, looked up by name.
class BoundParams {
 public:
  BoundParams(ad::Tape& tape, const ParamSet& set, bool requires_grad = true) : set_(&set) {
    vars_.reserve(set.size());
    for (const auto& v : set.values())
      vars_.push_back(requires_grad ? tape.variable(v.shape(), v.vec()) : tape.constant(v.shape(), v.vec()));
  }

  ad::Var operator[](const std::string& name) const { return vars_[set_->index(name)]; }
  const std::vector<ad::Var>& vars() const { return vars_; }

  std::vector<Tensor> grads() const {
    std::vector<Tensor> g;
    g.reserve(vars_.size());
    for (const auto& v : vars_) g.push_back(v.tape()->grad(v));
    return g;
  }

 private:
  const ParamSet* set_;
  std::vector<ad::Var> vars_;
};

}  // namespace bev
