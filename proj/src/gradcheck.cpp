#include "hiermem/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

#include "hiermem/error.hpp"

namespace hiermem {

std::vector<GradCheckEntry> GradCheckReport::failures() const {
  std::vector<GradCheckEntry> out;
  for (const auto& e : entries) {
    if (!e.excluded && e.rel_error > tol) out.push_back(e);
  }
  return out;
}

namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.constant(t));
  Var y = f(g, vars);
  if (y.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  return y.item();
}

std::vector<std::size_t> probe_indices(std::size_t n, const GradCheckOptions& opts, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (opts.max_coords == 0 || opts.max_coords >= n) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(opts.max_coords);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace

namespace {

// Shared probing loop. `set(k, i, v)` writes coordinate i of input k and
// `eval()` recomputes the scalar at the current point.
GradCheckReport probe(const std::vector<std::size_t>& sizes, const std::vector<std::vector<double>>& analytic,
                      const std::function<double(std::size_t, std::size_t)>& get,
                      const std::function<void(std::size_t, std::size_t, double)>& set,
                      const std::function<double()>& eval, const GradCheckOptions& opts, std::string name) {
  GradCheckReport report;
  report.name = std::move(name);
  report.tol = opts.tol;
  const double f0 = eval();
  std::mt19937_64 rng(opts.seed);
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    for (std::size_t i : probe_indices(sizes[k], opts, rng)) {
      const double x0 = get(k, i);
      set(k, i, x0 + opts.eps);
      const double fp = eval();
      set(k, i, x0 - opts.eps);
      const double fm = eval();
      set(k, i, x0);

      GradCheckEntry e;
      e.input = k;
      e.index = i;
      e.analytic = analytic[k][i];
      e.numeric = (fp - fm) / (2.0 * opts.eps);
      const double fwd = (fp - f0) / opts.eps;
      const double bwd = (f0 - fm) / opts.eps;
      const double scale_ = std::max({1.0, std::abs(fwd), std::abs(bwd)});
      e.excluded = std::abs(fwd - bwd) > opts.kink_ratio * scale_;
      const double denom = std::max({std::abs(e.analytic), std::abs(e.numeric), opts.floor});
      e.rel_error = std::abs(e.analytic - e.numeric) / denom;
      if (e.excluded) {
        ++report.excluded;
      } else {
        ++report.checked;
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
      }
      report.entries.push_back(e);
    }
  }
  return report;
}

}  // namespace

GradCheckReport grad_check(const MultiScalarFn& f, const std::vector<Tensor>& inputs,
                           const GradCheckOptions& opts, std::string name) {
  std::vector<std::vector<double>> analytic;
  {
    Graph g;
    std::vector<Var> vars;
    for (const auto& t : inputs) vars.push_back(g.leaf(t));
    Var y = f(g, vars);
    if (y.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    g.backward(y);
    for (const auto& v : vars) analytic.push_back(v.grad());
  }
  std::vector<Tensor> work = inputs;
  std::vector<std::size_t> sizes;
  for (const auto& t : inputs) sizes.push_back(t.numel());
  return probe(
      sizes, analytic, [&](std::size_t k, std::size_t i) { return work[k][i]; },
      [&](std::size_t k, std::size_t i, double v) { work[k][i] = v; }, [&] { return evaluate(f, work); }, opts,
      std::move(name));
}

GradCheckReport grad_check_params(const LossFn& f, const ParamList& params, const GradCheckOptions& opts,
                                  std::string name) {
  auto eval = [&] {
    Graph g;
    Var y = f(g);
    if (y.numel() != 1) throw ShapeError("grad_check: function is not scalar-valued");
    return y.item();
  };
  std::vector<std::vector<double>> analytic;
  std::vector<std::size_t> sizes;
  for (const auto& p : params) p.tensor->clear_grad();
  {
    Graph g;
    Var y = f(g);
    g.backward(y);
  }
  for (const auto& p : params) {
    sizes.push_back(p.tensor->numel());
    if (p.tensor->has_grad()) {
      auto gr = std::as_const(*p.tensor).grad();
      analytic.emplace_back(gr.begin(), gr.end());
    } else {
      analytic.emplace_back(p.tensor->numel(), 0.0);
    }
    p.tensor->clear_grad();
  }
  return probe(
      sizes, analytic, [&](std::size_t k, std::size_t i) { return (*params[k].tensor)[i]; },
      [&](std::size_t k, std::size_t i, double v) { (*params[k].tensor)[i] = v; }, eval, opts, std::move(name));
}

GradCheckReport grad_check(const ScalarFn& f, const Tensor& x, const GradCheckOptions& opts,
                           std::string name) {
  return grad_check([&f](Graph& g, const std::vector<Var>& v) { return f(g, v[0]); },
                    std::vector<Tensor>{x}, opts, std::move(name));
}

}  // namespace hiermem
