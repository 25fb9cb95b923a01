#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "tspf/rng.hpp"
#include "tspf/tensor.hpp"

namespace tspf {

enum class Activation { kRelu, kTanh, kIdentity };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kIdentity: return "identity";
  }
  return "?";
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  if (s == "identity" || s == "linear") return Activation::kIdentity;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

// Fully connected net. Weights are out_dim x in_dim per layer; the hidden
// activation is applied after every layer except the last, which stays
// linear. Parameters are graph leaves so a single Mlp can participate in
// many forward graphs.
class Mlp {
 public:
  Mlp() = default;

  // dims = {in, h1, ..., out}. Glorot uniform weights, zero biases.
  Mlp(std::vector<std::size_t> dims, Activation act, Rng& rng)
      : dims_(std::move(dims)), act_(act) {
    if (dims_.size() < 2) throw std::invalid_argument("Mlp: need at least input and output dims");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      const std::size_t in = dims_[l], out = dims_[l + 1];
      const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
      Tensor w = Tensor::zeros({out, in});
      for (auto& v : w.values) v = rng.uniform(-bound, bound);
      weights_.push_back(ad::Var::param(std::move(w)));
      biases_.push_back(ad::Var::param(Tensor::zeros({out})));
    }
  }

  // Takes ownership of explicit parameter tensors (deserialization, block
  // construction). Shapes must be consistent.
  Mlp(std::vector<Tensor> weights, std::vector<Tensor> biases, Activation act) : act_(act) {
    if (weights.empty() || weights.size() != biases.size())
      throw std::invalid_argument("Mlp: weights/biases layer count mismatch");
    dims_.push_back(weights[0].shape[1]);
    for (std::size_t l = 0; l < weights.size(); ++l) {
      const auto& ws = weights[l].shape;
      if (ws.size() != 2)
        throw std::invalid_argument("Mlp: layer " + std::to_string(l) + " weight is not a matrix");
      if (ws[1] != dims_.back())
        throw std::invalid_argument("Mlp: layer " + std::to_string(l) + " expects input dim " +
                                    std::to_string(dims_.back()) + ", weight has " +
                                    std::to_string(ws[1]));
      if (biases[l].numel() != ws[0])
        throw std::invalid_argument("Mlp: layer " + std::to_string(l) + " bias dim " +
                                    std::to_string(biases[l].numel()) + " vs weight rows " +
                                    std::to_string(ws[0]));
      const std::size_t out = ws[0];
      dims_.push_back(out);
      weights_.push_back(ad::Var::param(std::move(weights[l])));
      biases_.push_back(ad::Var::param(Tensor::zeros({out})));
      biases_.back().mutable_value() = std::move(biases[l]);
    }
  }

  std::size_t in_dim() const { return dims_.front(); }
  std::size_t out_dim() const { return dims_.back(); }
  std::size_t layer_count() const { return weights_.size(); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  Activation activation() const { return act_; }

  ad::Var weight(std::size_t l) const { return weights_.at(l); }
  ad::Var bias(std::size_t l) const { return biases_.at(l); }

  std::vector<ad::Var> params() const {
    std::vector<ad::Var> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(weights_[l]);
      out.push_back(biases_[l]);
    }
    return out;
  }

  void set_frozen(bool frozen) {
    for (auto& w : weights_) w.set_requires_grad(!frozen);
    for (auto& b : biases_) b.set_requires_grad(!frozen);
  }
  bool frozen() const { return !weights_.empty() && !weights_[0].requires_grad(); }

  ad::Var forward(const ad::Var& x) const {
    if (x.shape().size() != 2)
      throw std::invalid_argument("Mlp::forward: expected [n x " + std::to_string(in_dim()) +
                                  "] input, got " + shape_str(x.shape()));
    if (x.shape()[1] != in_dim())
      throw std::invalid_argument("Mlp::forward: input has " + std::to_string(x.shape()[1]) +
                                  " features, net expects " + std::to_string(in_dim()));
    ad::Var h = x;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      h = ad::linear(h, weights_[l], biases_[l]);
      if (l + 1 < weights_.size()) h = activate(h);
    }
    return h;
  }

  ad::Var forward(const Tensor& x) const { return forward(ad::Var::constant(x)); }

 private:
  ad::Var activate(const ad::Var& h) const {
    switch (act_) {
      case Activation::kRelu: return ad::relu(h);
      case Activation::kTanh: return ad::tanh(h);
      case Activation::kIdentity: return h;
    }
    throw std::logic_error("unreachable");
  }

  std::vector<std::size_t> dims_;
  Activation act_ = Activation::kRelu;
  std::vector<ad::Var> weights_;
  std::vector<ad::Var> biases_;
};

}  // namespace tspf
