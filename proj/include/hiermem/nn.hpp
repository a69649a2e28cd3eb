#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hiermem/distributions.hpp"
#include "hiermem/graph.hpp"

namespace hiermem {

/// A parameter tensor together with its checkpoint name.
struct NamedParam {
  std::string name;
  Tensor* tensor;
};

using ParamList = std::vector<NamedParam>;

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
void glorot_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);

/// y = x W + b for x of shape (B, in).
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, std::mt19937_64& rng);

  Var operator()(Graph& g, Var x) const;
  void collect(const std::string& prefix, ParamList& out);
  void zero();

  std::size_t in_features() const { return weight_.dim(0); }
  std::size_t out_features() const { return weight_.dim(1); }
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

 private:
  // Bound to graphs from const forward passes; backward() writes only grad().
  mutable Tensor weight_;
  mutable Tensor bias_;
};

/// Two fully connected layers with a relu between them.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);

  Var operator()(Graph& g, Var x) const;
  void collect(const std::string& prefix, ParamList& out);

  std::size_t in_features() const { return first_.in_features(); }
  std::size_t out_features() const { return second_.out_features(); }
  Linear& first() { return first_; }
  Linear& output() { return second_; }

 private:
  Linear first_;
  Linear second_;
};

/// Amortized Gaussian: an Mlp emitting (mean, raw) halves; variance is
/// softplus(raw) + kVarianceFloor.
class GaussianHead {
 public:
  GaussianHead() = default;
  /// `init_raw_var` is the initial bias of the raw variance outputs. With
  /// `identity_init` the mean starts out equal to the first `dim` inputs.
  GaussianHead(std::size_t in, std::size_t hidden, std::size_t dim, std::mt19937_64& rng,
               double init_raw_var = 0.0, bool identity_init = false);

  GaussianDiag operator()(Graph& g, Var x) const;
  void collect(const std::string& prefix, ParamList& out);

  std::size_t in_features() const { return net_.in_features(); }
  std::size_t dim() const { return net_.out_features() / 2; }
  Mlp& net() { return net_; }

 private:
  Mlp net_;
};

std::size_t parameter_count(const ParamList& params);

/// SGD with classical momentum: v = mu v + g; p -= lr v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  /// Applies and clears gradients of every parameter that has one.
  /// `clip_norm` > 0 rescales the joint gradient to at most that L2 norm.
  void step(const ParamList& params, double clip_norm = 0.0);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

/// Writes `<stem>.manifest` (name, shape, offset per line) and `<stem>.bin`
/// (tensors back to back in the serialized tensor format).
void save_checkpoint(const std::filesystem::path& stem, const ParamList& params);
/// Loads values into `params` by name. Throws ShapeError when the tensor
/// names, count or shapes differ from `params` and IoError on a missing,
/// truncated or inconsistent file; `params` is left untouched on any error.
void load_checkpoint(const std::filesystem::path& stem, const ParamList& params);

}  // namespace hiermem
