#pragma once

#include <cstdint>
#include <vector>

#include "hiermem/distributions.hpp"
#include "hiermem/graph.hpp"
#include "hiermem/memory.hpp"
#include "hiermem/model.hpp"

namespace hiermem {

/// Value copy of `v` as a new constant; gradients stop here.
Var detach(Var v);

/// (N, D) per-class means of `feats` (B, D). Throws ValueError naming the
/// class when a label in 0..N-1 has no rows.
Var class_means(Var feats, const std::vector<int>& labels, std::size_t n_classes);

/// nets.posterior(concat(class_mean, m or 0, z_upper or 0)). `m` and
/// `z_upper` are null or have as many rows as `class_mean`.
GaussianDiag infer_prototype_posterior(Graph& g, const LevelNets& nets, Var class_mean, Var m, Var z_upper);
/// nets.prior(concat(query, z_upper or 0)).
GaussianDiag infer_prototype_prior(Graph& g, const LevelNets& nets, Var query, Var z_upper);

/// log p(y | x) averaged over prototype samples: prototypes is (S*N, D) with
/// rows s*N + k. Result (Q, N) = log(mean_s softmax(-||x - z_s||^2)).
Var log_predictive(Var query, Var prototypes, std::size_t samples);
/// Probability form of log_predictive for plain vectors.
std::vector<double> classify(const std::vector<double>& query,
                             const std::vector<std::vector<std::vector<double>>>& prototype_samples);

struct GradientSummary {
  std::vector<double> summary;
  bool degenerate = false;
};

/// Mean over support rows of |d CE_i / d e_i| (elementwise), where CE_i is the cross-entropy
/// of row i against fixed class-mean prototypes (leaving row i out of its
/// own class mean when K > 1). One class with one shot yields zeros and the
/// degenerate flag.
GradientSummary support_gradient_summary(const Tensor& support_feats, const std::vector<int>& labels,
                                         std::size_t n_classes);

/// alpha = softmax_l(f_l(summary_l)); summaries[l] is (1, D_l). Returns (L).
Var level_weights(Graph& g, const HyperNet& hyper, const std::vector<Var>& summaries);
std::vector<double> level_weights(const HyperNet& hyper, const std::vector<std::vector<double>>& summaries);

/// sum_l alpha_l logits_l; every logits_l is (Q, N).
Tensor combine_weighted(const std::vector<Tensor>& logits, const std::vector<double>& alpha);
/// Majority vote over per-level argmax; ties go to the tied class with the
/// largest mean logit. One prediction per row.
std::vector<int> combine_bagging(const std::vector<Tensor>& logits);
std::vector<int> argmax_rows(const Tensor& logits);

/// Which backbone levels feed the prototype chain and what they condition on.
struct ChainSpec {
  std::vector<std::size_t> levels;  ///< backbone levels, shallow to deep
  bool memory = false;              ///< infer latent memory m at each step
  bool hierarchical = false;        ///< feed z (and m) samples of step t-1 into step t
  bool detach_upper = false;        ///< stop gradients through the upper feed
  std::size_t samples = 10;         ///< L_z
  double tau = 1.0;                 ///< address temperature
  bool mc_memory_kl = false;        ///< Monte Carlo memory KL instead of the bound
  std::size_t mc_samples = 16;
};

/// Deterministic standard-normal and uniform draws keyed by
/// (seed, episode, purpose, step).
class NoiseStream {
 public:
  enum Purpose : std::uint64_t { kPrototype = 1, kMemory = 2, kMixtureChoice = 3, kMixtureNoise = 4 };

  NoiseStream(std::uint64_t seed, std::uint64_t episode) : seed_(seed), episode_(episode) {}
  Tensor normal(Purpose p, std::size_t step, Shape shape) const;
  std::vector<double> uniform(Purpose p, std::size_t step, std::size_t n) const;

 private:
  std::uint64_t key(Purpose p, std::size_t step) const;
  std::uint64_t seed_;
  std::uint64_t episode_;
};

/// Per-level inputs of the chain: support rows in episode order and queries.
struct ChainInputs {
  std::vector<Var> support;  ///< indexed by backbone level; null when unused
  std::vector<Var> query;
  std::vector<int> support_labels;
  std::vector<int> query_labels;  ///< may be empty when only predicting
  std::size_t n_classes = 0;
  std::vector<int> recall_excluded;  ///< memory classes hidden from addressing
};

struct ChainStep {
  std::size_t level = 0;
  GaussianDiag posterior;   ///< (S*N, D), rows s*N + k
  Var prototypes;           ///< (S*N, D) samples
  Var log_probs;            ///< (Q, N)
  Var nll;                  ///< scalar mean over queries; null without labels
  Var kl_prototype;         ///< scalar mean over queries and samples; null without labels
  Var kl_memory;            ///< scalar mean over classes; null when memory is off or empty
  bool memory_used = false;
};

/// Runs the prototype chain of `spec` over `in`. Noise is drawn from `noise`
/// with the chain step as the key, so a level's draws depend only on its
/// position in the chain.
std::vector<ChainStep> run_chain(Graph& g, const Model& model, const HierarchicalMemory* memory,
                                 const ChainInputs& in, const ChainSpec& spec, const NoiseStream& noise);

}  // namespace hiermem
