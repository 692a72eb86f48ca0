// Copyright 2026 The Stif Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "stif/rng.hpp"
#include "stif/tensor.hpp"

namespace stif::net {

// Named parameter store. std::map keeps iteration in lexicographic name
// order, which fixes the optimizer update order and the checkpoint layout.
class Weights {
 public:
  struct Entry {
    ad::Shape shape;
    std::vector<double> value;
  };

  void define(const std::string& name, ad::Shape shape, std::vector<double> value) {
    if (static_cast<int64_t>(value.size()) != ad::numel(shape))
      throw ShapeError("Weights::define: size mismatch for " + name);
    if (params_.count(name)) throw InvalidArgument("Weights::define: duplicate " + name);
    params_.emplace(name, Entry{std::move(shape), std::move(value)});
  }

  bool has(const std::string& name) const { return params_.count(name) > 0; }

  Entry& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("Weights: unknown parameter " + name);
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("Weights: unknown parameter " + name);
    return it->second;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  size_t count() const { return params_.size(); }

  size_t total_params() const {
    size_t n = 0;
    for (const auto& [k, v] : params_) n += v.value.size();
    return n;
  }

 private:
  std::map<std::string, Entry> params_;
};

// Glorot-uniform values for a fan_in x fan_out linear map.
inline std::vector<double> glorot(Rng& rng, int fan_in, int fan_out) {
  double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> v(static_cast<size_t>(fan_in) * fan_out);
  for (auto& x : v) x = rng.uniform(-limit, limit);
  return v;
}

// Materializes parameters as leaves of one tape, caching by name so each
// parameter appears once per forward pass regardless of how often it is used.
class TapeWeights {
 public:
  TapeWeights(ad::Tape& tape, const Weights& w, bool trainable)
      : tape_(&tape), weights_(&w), trainable_(trainable) {}

  ad::Tensor operator[](const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    const auto& e = weights_->at(name);
    ad::Tensor t = tape_->input(e.shape, e.value, trainable_);
    cache_.emplace(name, t);
    return t;
  }

  // Gradients of every parameter touched by the pass; untouched parameters
  // are absent. Call after Tape::backward.
  std::map<std::string, std::vector<double>> grads() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, t] : cache_) {
      auto g = tape_->grad(t);
      out.emplace(name, std::vector<double>(g.begin(), g.end()));
    }
    return out;
  }

 private:
  ad::Tape* tape_;
  const Weights* weights_;
  bool trainable_;
  std::map<std::string, ad::Tensor> cache_;
};

}  // namespace stif::net
