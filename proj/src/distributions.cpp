#include "hiermem/distributions.hpp"

#include <cmath>
#include <numbers>

#include "hiermem/error.hpp"

namespace hiermem {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void require_valid_variance(const Tensor& v) {
  for (double x : v.data()) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw ValueError("Gaussian variance must be positive and finite");
    }
  }
}

}  // namespace

GaussianDiag::GaussianDiag(Var m, Var v) : mean(m), var(v) {
  if (mean.shape().size() != 2 || mean.shape() != var.shape()) {
    throw ShapeError("GaussianDiag: mean " + to_string(mean.shape()) + " vs var " +
                     to_string(var.shape()));
  }
  require_valid_variance(var.value());
}

GaussianDiag GaussianDiag::constant(Graph& g, const std::vector<double>& m, const std::vector<double>& v) {
  if (m.size() != v.size()) throw ShapeError("GaussianDiag: mean and var lengths differ");
  return GaussianDiag(g.constant(Tensor({1, m.size()}, m)), g.constant(Tensor({1, v.size()}, v)));
}

GaussianMixture::GaussianMixture(Var w, GaussianDiag c) : weights(w), components(c) {
  if (components.rows() == 0 || weights.numel() != components.rows()) {
    throw ShapeError("GaussianMixture: " + std::to_string(weights.numel()) + " weights for " +
                     std::to_string(components.rows()) + " components");
  }
  double total = 0.0;
  for (double x : weights.value().data()) {
    if (x < 0.0) throw ValueError("GaussianMixture: negative weight");
    total += x;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ValueError("GaussianMixture: weights do not sum to 1");
}

Var sample(const GaussianDiag& g, Var noise) {
  if (noise.shape() != g.mean.shape()) {
    throw ShapeError("sample: noise " + to_string(noise.shape()) + " vs mean " +
                     to_string(g.mean.shape()));
  }
  return g.mean + sqrt(g.var) * noise;
}

Var kl_rows(const GaussianDiag& q, const GaussianDiag& p) {
  if (q.mean.shape() != p.mean.shape()) {
    throw ShapeError("kl: dimension mismatch " + to_string(q.mean.shape()) + " vs " +
                     to_string(p.mean.shape()));
  }
  // 0.5 * sum(log(vp/vq) + (vq + (mq-mp)^2)/vp - 1)
  Var diff = q.mean - p.mean;
  Var ratio = (q.var + square(diff)) / p.var;
  Var terms = log(p.var) - log(q.var) + ratio;
  Var per_row = sum(terms, 1);
  const double d = static_cast<double>(q.dim());
  return scale(add_scalar(per_row, -d), 0.5);
}

Var kl(const GaussianDiag& q, const GaussianDiag& p) { return sum(kl_rows(q, p)); }

Var kl_mixture_bound(const GaussianMixture& mix, const GaussianDiag& p) {
  if (p.rows() != 1) throw ShapeError("kl_mixture_bound: target must have one row");
  if (p.dim() != mix.components.dim()) {
    throw ShapeError("kl_mixture_bound: dimension mismatch " + to_string(mix.components.mean.shape()) +
                     " vs " + to_string(p.mean.shape()));
  }
  const std::size_t n = mix.size();
  GaussianDiag target(repeat_rows(p.mean, n), repeat_rows(p.var, n));
  Var per = kl_rows(mix.components, target);
  return sum(per * reshape(mix.weights, {n}));
}

Var log_prob(const GaussianDiag& g, Var x) {
  if (x.shape() != g.mean.shape()) {
    throw ShapeError("log_prob: x " + to_string(x.shape()) + " vs mean " + to_string(g.mean.shape()));
  }
  Var quad = square(x - g.mean) / g.var;
  Var terms = add_scalar(log(g.var) + quad, kLog2Pi);
  return scale(sum(terms), -0.5);
}

McEstimate kl_mixture_mc(const MixtureValues& mix, const std::vector<double>& p_mean,
                         const std::vector<double>& p_var, std::size_t samples, std::mt19937_64& rng) {
  const std::size_t n = mix.weights.size();
  if (n == 0) throw ValueError("kl_mixture_mc: empty mixture");
  if (samples < 2) throw ValueError("kl_mixture_mc: need at least 2 samples");
  const std::size_t d = p_mean.size();
  std::discrete_distribution<std::size_t> pick(mix.weights.begin(), mix.weights.end());
  std::normal_distribution<double> normal;
  auto log_density = [d](const std::vector<double>& m, const std::vector<double>& v,
                         const std::vector<double>& x) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double z = x[j] - m[j];
      acc += std::log(v[j]) + z * z / v[j] + kLog2Pi;
    }
    return -0.5 * acc;
  };
  std::vector<double> x(d), comp(n);
  double s1 = 0.0, s2 = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t c = pick(rng);
    for (std::size_t j = 0; j < d; ++j) x[j] = mix.means[c][j] + std::sqrt(mix.vars[c][j]) * normal(rng);
    double mx = -INFINITY;
    for (std::size_t i = 0; i < n; ++i) {
      comp[i] = mix.weights[i] > 0 ? std::log(mix.weights[i]) + log_density(mix.means[i], mix.vars[i], x)
                                   : -INFINITY;
      mx = std::max(mx, comp[i]);
    }
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(comp[i] - mx);
    const double term = mx + std::log(z) - log_density(p_mean, p_var, x);
    s1 += term;
    s2 += term * term;
  }
  const double ns = static_cast<double>(samples);
  McEstimate est;
  est.value = s1 / ns;
  const double var = std::max(0.0, (s2 - ns * est.value * est.value) / (ns - 1.0));
  est.std_error = std::sqrt(var / ns);
  return est;
}

Var kl_mixture_mc(const GaussianMixture& mix, const GaussianDiag& p,
                  const std::vector<double>& choice_uniforms, Var noise) {
  const std::size_t n = mix.size(), d = mix.components.dim(), s = choice_uniforms.size();
  if (s == 0 || noise.shape() != Shape{s, d}) {
    throw ShapeError("kl_mixture_mc: noise must be (samples, D)");
  }
  if (p.rows() != 1 || p.dim() != d) throw ShapeError("kl_mixture_mc: target must be (1, D)");
  const auto& w = mix.weights.value();
  std::vector<std::size_t> chosen(s);
  for (std::size_t k = 0; k < s; ++k) {
    double acc = 0.0;
    chosen[k] = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      acc += w[i];
      if (choice_uniforms[k] < acc) {
        chosen[k] = i;
        break;
      }
    }
  }
  GaussianDiag picked(gather_rows(mix.components.mean, chosen), gather_rows(mix.components.var, chosen));
  Var x = sample(picked, noise);  // (s, d)
  // log N(x_k; mu_i, v_i) for every (k, i): expand to (s*n, d).
  std::vector<std::size_t> rep_x, rep_c;
  for (std::size_t k = 0; k < s; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      rep_x.push_back(k);
      rep_c.push_back(i);
    }
  }
  Var xe = gather_rows(x, rep_x);
  Var me = gather_rows(mix.components.mean, rep_c);
  Var ve = gather_rows(mix.components.var, rep_c);
  Var quad = sum(add_scalar(log(ve) + square(xe - me) / ve, kLog2Pi), 1);  // (s*n)
  Var log_comp = reshape(scale(quad, -0.5), {s, n});
  Var log_w = log(add_scalar(repeat_rows(reshape(mix.weights, {1, n}), s), 1e-300));
  Var log_mix = logsumexp(log_comp + log_w, 1);  // (s)
  Var log_p = scale(sum(add_scalar(log(repeat_rows(p.var, s)) + square(x - repeat_rows(p.mean, s)) /
                                       repeat_rows(p.var, s),
                                   kLog2Pi),
                        1),
                    -0.5);
  return mean(log_mix - log_p);
}

}  // namespace hiermem
