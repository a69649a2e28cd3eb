#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hiermem/graph.hpp"
#include "hiermem/nn.hpp"

namespace hiermem {

struct GradCheckOptions {
  double eps = 1e-5;
  double tol = 1e-4;
  /// Denominator floor of the relative error, so near-zero gradients are
  /// compared on an absolute scale.
  double floor = 1e-5;
  /// Coordinates whose one-sided slopes differ by more than this fraction of
  /// their magnitude straddle a kink and are excluded.
  double kink_ratio = 0.1;
  /// Coordinates probed per input; 0 probes all of them.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

struct GradCheckEntry {
  std::size_t input = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
  bool excluded = false;
};

struct GradCheckReport {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  std::vector<GradCheckEntry> entries;
  double tol = 0.0;

  bool passed() const { return max_rel_error <= tol; }
  std::vector<GradCheckEntry> failures() const;
};

/// f builds a scalar from leaves holding `inputs`. It is rebuilt on a fresh
/// graph for every probe, so it must be deterministic.
using MultiScalarFn = std::function<Var(Graph&, const std::vector<Var>&)>;
using ScalarFn = std::function<Var(Graph&, Var)>;

/// Central differences (f(x+eps e_i) - f(x-eps e_i)) / (2 eps) against the
/// reverse-mode gradient of every probed coordinate.
GradCheckReport grad_check(const MultiScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& opts = {}, std::string name = {});
GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& opts = {},
                           std::string name = {});

/// Same check against tensors bound with Graph::param. `input` of an entry
/// indexes `params`. Leaves the parameters' values and gradients as found.
using LossFn = std::function<Var(Graph&)>;
GradCheckReport grad_check_params(const LossFn& f, const ParamList& params, const GradCheckOptions& opts = {},
                                  std::string name = {});

}  // namespace hiermem
