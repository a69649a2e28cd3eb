#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "hiermem/graph.hpp"

namespace hiermem {

/// Lower bound added after softplus wherever a network emits a variance.
inline constexpr double kVarianceFloor = 1e-6;

/// Diagonal Gaussian. `mean` and `var` are (rows, D); rows are independent,
/// so a batch of r rows is itself a diagonal Gaussian over r*D coordinates.
struct GaussianDiag {
  Var mean;
  Var var;

  GaussianDiag() = default;
  /// Validates equal shapes and strictly positive finite variances.
  GaussianDiag(Var mean, Var var);

  static GaussianDiag constant(Graph& g, const std::vector<double>& mean, const std::vector<double>& var);

  std::size_t rows() const { return mean.shape()[0]; }
  std::size_t dim() const { return mean.shape()[1]; }
};

/// Mixture over `components.rows()` Gaussians with the given weights (n).
struct GaussianMixture {
  Var weights;
  GaussianDiag components;

  GaussianMixture(Var weights, GaussianDiag components);
  std::size_t size() const { return components.rows(); }
};

/// mean + sqrt(var) * noise; differentiable in mean and var.
Var sample(const GaussianDiag& g, Var noise);
/// Per-row closed-form KL(q || p), shape (rows).
Var kl_rows(const GaussianDiag& q, const GaussianDiag& p);
/// Total KL(q || p) summed over rows; a scalar.
Var kl(const GaussianDiag& q, const GaussianDiag& p);
/// Convexity upper bound sum_i w_i KL(c_i || p) >= KL(mixture || p). `p` has one row.
Var kl_mixture_bound(const GaussianMixture& mix, const GaussianDiag& p);
/// Exact log density of `x` (same shape as the mean), summed over rows.
Var log_prob(const GaussianDiag& g, Var x);

/// Monte Carlo estimate of KL(mixture || p) from plain values.
struct McEstimate {
  double value = 0.0;
  double std_error = 0.0;
};

/// Plain-value mixture used by the Monte Carlo estimator.
struct MixtureValues {
  std::vector<double> weights;
  std::vector<std::vector<double>> means;
  std::vector<std::vector<double>> vars;
};

McEstimate kl_mixture_mc(const MixtureValues& mix, const std::vector<double>& p_mean,
                         const std::vector<double>& p_var, std::size_t samples, std::mt19937_64& rng);

/// Differentiable Monte Carlo KL(mixture || p) with caller-supplied noise.
/// `choice_uniforms` (S) selects components, `noise` is (S, D). Gradients
/// reach the weights only through log mixture density, not through the
/// component choice.
Var kl_mixture_mc(const GaussianMixture& mix, const GaussianDiag& p,
                  const std::vector<double>& choice_uniforms, Var noise);

}  // namespace hiermem
