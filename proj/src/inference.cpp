#include "hiermem/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "hiermem/error.hpp"

namespace hiermem {

Var detach(Var v) { return v.graph->constant(v.value()); }

Var class_means(Var feats, const std::vector<int>& labels, std::size_t n_classes) {
  auto& g = *feats.graph;
  if (feats.shape().size() != 2 || feats.shape()[0] != labels.size()) {
    throw ShapeError("class_means: features " + to_string(feats.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = labels.size();
  std::vector<std::size_t> count(n_classes, 0);
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
      throw ValueError("class_means: label " + std::to_string(y) + " outside 0.." + std::to_string(n_classes - 1));
    }
    ++count[y];
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (count[k] == 0) throw ValueError("class " + std::to_string(k) + " has no support samples");
  }
  Tensor avg({n_classes, b}, 0.0);
  for (std::size_t i = 0; i < b; ++i) avg.storage()[labels[i] * b + i] = 1.0 / static_cast<double>(count[labels[i]]);
  return matmul(g.constant(std::move(avg)), feats);
}

namespace {

Var slot(Graph& g, Var v, std::size_t rows, std::size_t width, const char* what) {
  if (!v.graph) return g.constant(Tensor({rows, width}, 0.0));
  if (v.shape() != Shape{rows, width}) {
    throw ShapeError(std::string(what) + " " + to_string(v.shape()) + " vs expected " +
                     to_string(Shape{rows, width}));
  }
  return v;
}

}  // namespace

GaussianDiag infer_prototype_posterior(Graph& g, const LevelNets& nets, Var class_mean, Var m, Var z_upper) {
  if (class_mean.shape().size() != 2 || class_mean.shape()[1] != nets.dim) {
    throw ShapeError("posterior: class means " + to_string(class_mean.shape()) + " vs level width " +
                     std::to_string(nets.dim));
  }
  const std::size_t r = class_mean.shape()[0];
  return nets.posterior(g, concat({class_mean, slot(g, m, r, nets.dim, "memory sample"),
                                   slot(g, z_upper, r, nets.upper_dim, "upper prototype sample")},
                                  1));
}

GaussianDiag infer_prototype_prior(Graph& g, const LevelNets& nets, Var query, Var z_upper) {
  if (query.shape().size() != 2 || query.shape()[1] != nets.dim) {
    throw ShapeError("prior: query " + to_string(query.shape()) + " vs level width " + std::to_string(nets.dim));
  }
  const std::size_t r = query.shape()[0];
  return nets.prior(g, concat({query, slot(g, z_upper, r, nets.upper_dim, "upper prototype sample")}, 1));
}

Var log_predictive(Var query, Var prototypes, std::size_t samples) {
  const auto& ps = prototypes.shape();
  if (samples == 0 || ps.size() != 2 || ps[0] == 0 || ps[0] % samples) {
    throw ShapeError("log_predictive: " + to_string(ps) + " prototypes for " + std::to_string(samples) + " samples");
  }
  const std::size_t n = ps[0] / samples, q = query.shape()[0];
  Var d = reshape(sq_distances(query, prototypes), {q, samples, n});
  Var lp = logsumexp(log_softmax(-d, 2), 1);
  return add_scalar(lp, -std::log(static_cast<double>(samples)));
}

std::vector<double> classify(const std::vector<double>& query,
                             const std::vector<std::vector<std::vector<double>>>& prototype_samples) {
  if (prototype_samples.empty() || prototype_samples[0].empty()) throw ValueError("classify: no prototypes");
  const std::size_t n = prototype_samples[0].size();
  std::vector<double> out(n, 0.0);
  for (const auto& protos : prototype_samples) {
    if (protos.size() != n) throw ShapeError("classify: prototype samples disagree on class count");
    std::vector<double> neg(n);
    for (std::size_t k = 0; k < n; ++k) {
      if (protos[k].size() != query.size()) throw ShapeError("classify: prototype width differs from query");
      double d = 0.0;
      for (std::size_t j = 0; j < query.size(); ++j) d += (query[j] - protos[k][j]) * (query[j] - protos[k][j]);
      neg[k] = -d;
    }
    const double mx = *std::max_element(neg.begin(), neg.end());
    double z = 0.0;
    for (auto& v : neg) z += (v = std::exp(v - mx));
    for (std::size_t k = 0; k < n; ++k) out[k] += neg[k] / z;
  }
  for (auto& v : out) v /= static_cast<double>(prototype_samples.size());
  return out;
}

GradientSummary support_gradient_summary(const Tensor& feats, const std::vector<int>& labels, std::size_t n_classes) {
  if (feats.rank() != 2 || feats.dim(0) != labels.size()) {
    throw ShapeError("gradient summary: features " + to_string(feats.shape()) + " for " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t b = labels.size(), d = feats.dim(1);
  GradientSummary out;
  out.summary.assign(d, 0.0);
  if (n_classes == 1 && b == 1) {
    out.degenerate = true;
    return out;
  }
  std::vector<std::vector<double>> sums(n_classes, std::vector<double>(d, 0.0));
  std::vector<std::size_t> count(n_classes, 0);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= n_classes) {
      throw ValueError("gradient summary: label out of range");
    }
    ++count[labels[i]];
    for (std::size_t j = 0; j < d; ++j) sums[labels[i]][j] += feats.at(i, j);
  }
  for (std::size_t k = 0; k < n_classes; ++k) {
    if (count[k] == 0) throw ValueError("class " + std::to_string(k) + " has no support samples");
  }
  std::vector<std::vector<double>> protos(n_classes, std::vector<double>(d));
  std::vector<double> neg(n_classes), row(d);
  for (std::size_t i = 0; i < b; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    for (std::size_t k = 0; k < n_classes; ++k) {
      const bool loo = k == y && count[k] > 1;
      const double c = loo ? static_cast<double>(count[k] - 1) : static_cast<double>(count[k]);
      for (std::size_t j = 0; j < d; ++j) protos[k][j] = (sums[k][j] - (loo ? feats.at(i, j) : 0.0)) / c;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) dist += (feats.at(i, j) - protos[k][j]) * (feats.at(i, j) - protos[k][j]);
      neg[k] = -dist;
    }
    const double mx = *std::max_element(neg.begin(), neg.end());
    double z = 0.0;
    for (auto& v : neg) z += (v = std::exp(v - mx));
    std::fill(row.begin(), row.end(), 0.0);
    for (std::size_t k = 0; k < n_classes; ++k) {
      const double coeff = (k == y ? 1.0 : 0.0) - neg[k] / z;
      for (std::size_t j = 0; j < d; ++j) row[j] += coeff * 2.0 * (feats.at(i, j) - protos[k][j]);
    }
    for (std::size_t j = 0; j < d; ++j) out.summary[j] += std::abs(row[j]);
  }
  for (auto& v : out.summary) v /= static_cast<double>(b);
  return out;
}

Var level_weights(Graph& g, const HyperNet& hyper, const std::vector<Var>& summaries) {
  if (summaries.size() != hyper.heads.size()) {
    throw ShapeError("level_weights: " + std::to_string(summaries.size()) + " summaries for " +
                     std::to_string(hyper.heads.size()) + " heads");
  }
  std::vector<Var> scores;
  for (std::size_t l = 0; l < summaries.size(); ++l) {
    if (summaries[l].shape() != Shape{1, hyper.heads[l].in_features()}) {
      throw ShapeError("level_weights: summary " + to_string(summaries[l].shape()) + " for a width-" +
                       std::to_string(hyper.heads[l].in_features()) + " head");
    }
    scores.push_back(hyper.heads[l](g, summaries[l]));
  }
  return softmax(reshape(concat(scores, 0), {summaries.size()}), 0);
}

std::vector<double> level_weights(const HyperNet& hyper, const std::vector<std::vector<double>>& summaries) {
  Graph g;
  std::vector<Var> vs;
  for (const auto& s : summaries) vs.push_back(g.constant(Tensor({1, s.size()}, s)));
  const Tensor a = level_weights(g, hyper, vs).value();
  return {a.data().begin(), a.data().end()};
}

Tensor combine_weighted(const std::vector<Tensor>& logits, const std::vector<double>& alpha) {
  if (logits.empty() || logits.size() != alpha.size()) {
    throw ShapeError("combine_weighted: " + std::to_string(logits.size()) + " logit sets for " +
                     std::to_string(alpha.size()) + " weights");
  }
  Tensor out(logits[0].shape(), 0.0);
  for (std::size_t l = 0; l < logits.size(); ++l) {
    if (logits[l].shape() != out.shape()) {
      throw ShapeError("combine_weighted: logits " + to_string(logits[l].shape()) + " vs " + to_string(out.shape()));
    }
    for (std::size_t i = 0; i < out.numel(); ++i) out.storage()[i] += alpha[l] * logits[l][i];
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.dim(0));
  const std::size_t n = logits.dim(1);
  for (std::size_t r = 0; r < out.size(); ++r) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k) {
      if (logits.at(r, k) > logits.at(r, best)) best = k;
    }
    out[r] = static_cast<int>(best);
  }
  return out;
}

std::vector<int> combine_bagging(const std::vector<Tensor>& logits) {
  if (logits.empty()) throw ShapeError("combine_bagging: no levels");
  const std::size_t rows = logits[0].dim(0), n = logits[0].dim(1);
  std::vector<std::vector<int>> votes;
  for (const auto& l : logits) {
    if (l.shape() != logits[0].shape()) throw ShapeError("combine_bagging: logit shapes differ");
    votes.push_back(argmax_rows(l));
  }
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::vector<std::size_t> tally(n, 0);
    for (const auto& v : votes) ++tally[v[r]];
    const std::size_t top = *std::max_element(tally.begin(), tally.end());
    int best = -1;
    double best_mean = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      if (tally[k] != top) continue;
      double m = 0.0;
      for (const auto& l : logits) m += l.at(r, k);
      m /= static_cast<double>(logits.size());
      if (best < 0 || m > best_mean) {
        best = static_cast<int>(k);
        best_mean = m;
      }
    }
    out[r] = best;
  }
  return out;
}

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::uint64_t NoiseStream::key(Purpose p, std::size_t step) const {
  return splitmix(splitmix(splitmix(splitmix(seed_) ^ episode_) ^ static_cast<std::uint64_t>(p)) ^ step);
}

Tensor NoiseStream::normal(Purpose p, std::size_t step, Shape shape) const {
  std::mt19937_64 rng(key(p, step));
  std::normal_distribution<double> nd;
  Tensor t(std::move(shape));
  for (auto& x : t.storage()) x = nd(rng);
  return t;
}

std::vector<double> NoiseStream::uniform(Purpose p, std::size_t step, std::size_t n) const {
  std::mt19937_64 rng(key(p, step));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& x : out) x = u(rng);
  return out;
}

std::vector<ChainStep> run_chain(Graph& g, const Model& model, const HierarchicalMemory* memory,
                                 const ChainInputs& in, const ChainSpec& spec, const NoiseStream& noise) {
  if (spec.levels.empty()) throw ValueError("chain has no levels");
  if (spec.samples == 0) throw ValueError("L_z must be at least 1");
  const std::size_t s = spec.samples, n = in.n_classes;
  const bool labelled = !in.query_labels.empty();
  std::vector<ChainStep> out;
  Var prev_z, prev_m;
  for (std::size_t t = 0; t < spec.levels.size(); ++t) {
    const std::size_t l = spec.levels[t];
    if (l >= model.levels()) throw ValueError("chain level " + std::to_string(l + 1) + " beyond model depth");
    if (spec.hierarchical && t > 0 && spec.levels[t - 1] + 1 != l) {
      throw ValueError("hierarchical chain levels must be consecutive");
    }
    const LevelNets& nets = model.nets[l];
    const std::size_t d = nets.dim;
    Var support = in.support.at(l), query = in.query.at(l);
    const std::size_t q = query.shape()[0];
    ChainStep step;
    step.level = l;

    Var cm = class_means(support, in.support_labels, n);
    Var m;
    const auto recalled = spec.memory && memory ? memory->keys_excluding(l, in.recall_excluded) : std::nullopt;
    if (recalled) {
      const Tensor& keys = *recalled;
      Var m_up = spec.hierarchical ? prev_m : Var{};
      if (spec.detach_upper && m_up.graph) m_up = detach(m_up);
      Var addr = address(g, keys, cm, spec.tau);
      LatentMemory lm = infer_latent_memory(g, nets, keys, addr, cm, m_up);
      GaussianDiag mp = memory_prior(g, nets, cm, m_up);
      m = sample_latent_memory(lm, g.constant(noise.normal(NoiseStream::kMemory, t, {n, d})));
      if (spec.mc_memory_kl) {
        std::vector<Var> per;
        for (std::size_t k = 0; k < n; ++k) {
          GaussianDiag pk(slice(mp.mean, 0, k, 1), slice(mp.var, 0, k, 1));
          auto u = noise.uniform(NoiseStream::kMixtureChoice, t * n + k, spec.mc_samples);
          Var eps = g.constant(noise.normal(NoiseStream::kMixtureNoise, t * n + k, {spec.mc_samples, d}));
          per.push_back(reshape(kl_mixture_mc(lm.mixture(k), pk, u, eps), {1}));
        }
        step.kl_memory = mean(concat(per, 0));
      } else {
        step.kl_memory = mean(kl_latent_memory(lm, mp));
      }
      step.memory_used = true;
    }

    Var z_up = spec.hierarchical ? prev_z : Var{};
    if (spec.detach_upper && z_up.graph) z_up = detach(z_up);
    std::vector<std::size_t> rep(s * n);
    for (std::size_t i = 0; i < s * n; ++i) rep[i] = i % n;
    Var m_rep = m.graph ? gather_rows(m, rep) : Var{};
    step.posterior = infer_prototype_posterior(g, nets, gather_rows(cm, rep), m_rep, z_up);
    step.prototypes = sample(step.posterior, g.constant(noise.normal(NoiseStream::kPrototype, t, {s * n, d})));
    step.log_probs = log_predictive(query, step.prototypes, s);

    if (labelled) {
      if (in.query_labels.size() != q) throw ShapeError("query labels do not match query rows");
      Tensor onehot({q, n}, 0.0);
      std::vector<std::size_t> q_rows, z_rows;
      for (std::size_t i = 0; i < q; ++i) onehot.storage()[i * n + in.query_labels[i]] = 1.0;
      for (std::size_t si = 0; si < s; ++si) {
        for (std::size_t i = 0; i < q; ++i) {
          q_rows.push_back(i);
          z_rows.push_back(si * n + static_cast<std::size_t>(in.query_labels[i]));
        }
      }
      step.nll = scale(sum(g.constant(std::move(onehot)) * step.log_probs), -1.0 / static_cast<double>(q));
      Var prior_up = z_up.graph ? gather_rows(z_up, z_rows) : Var{};
      GaussianDiag prior = infer_prototype_prior(g, nets, gather_rows(query, q_rows), prior_up);
      GaussianDiag post(gather_rows(step.posterior.mean, z_rows), gather_rows(step.posterior.var, z_rows));
      step.kl_prototype = scale(kl(post, prior), 1.0 / static_cast<double>(s * q));
    }
    prev_z = step.prototypes;
    prev_m = m;
    out.push_back(step);
  }
  return out;
}

}  // namespace hiermem
