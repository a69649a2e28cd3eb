#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hiermem/episodes.hpp"
#include "hiermem/inference.hpp"
#include "hiermem/memory.hpp"
#include "hiermem/model.hpp"

namespace hiermem {

enum class Objective { kProto, kVp, kVsm, kHvp, kHvm };

std::string objective_name(Objective o);
/// Throws ConfigError for unknown names.
Objective parse_objective(const std::string& name);
bool uses_memory(Objective o);
bool is_hierarchical(Objective o);

struct TrainConfig {
  Objective objective = Objective::kHvm;
  std::size_t lz = 10;
  double lr = 0.01;
  double momentum = 0.9;
  double clip_norm = 10.0;        ///< 0 disables clipping
  std::size_t episodes = 2000;
  std::size_t way = 5, shot = 5, queries = 10;
  std::uint64_t seed = 1;
  double beta = kMemoryBeta;
  double tau = 1.0;
  double kl_weight = 0.01;         ///< final KL weight
  double kl_warmup = 0.1;          ///< fraction of episodes of the linear 0 -> kl_weight ramp
  bool mc_memory_kl = false;
  std::size_t mc_samples = 16;
  /// Hide the episode's own classes from memory recall while training, as
  /// they are at test time where every class is new.
  bool mask_own_classes = true;
  double hyper_lr = 0.05;
  std::size_t log_every = 50;

  /// Throws ConfigError naming the key.
  void validate() const;
  double kl_weight_at(std::size_t episode) const;
};

/// The prototype chain an objective trains and predicts with on an L-level model.
ChainSpec chain_spec(Objective o, std::size_t levels, const TrainConfig& cfg);

/// Loss terms as plain values plus the differentiable total. KL entries are
/// already multiplied by the KL weight and the 1/L level average, so
/// total == nll + sum(kl_prototype) + sum(kl_memory).
struct EpisodeLoss {
  Var total_var;
  double total = 0.0;
  double nll = 0.0;
  std::vector<double> kl_prototype;
  std::vector<double> kl_memory;
  std::vector<ChainStep> steps;  ///< empty for the deterministic objective
};

/// Deterministic prototypes (class means), cross-entropy of -distance logits.
EpisodeLoss loss_proto(Graph& g, const Model& model, const ChainInputs& in);
EpisodeLoss loss_vp(Graph& g, const Model& model, const ChainInputs& in, const TrainConfig& cfg,
                    const NoiseStream& noise, double kl_weight = 1.0);
EpisodeLoss loss_vsm(Graph& g, const Model& model, const HierarchicalMemory& memory, const ChainInputs& in,
                     const TrainConfig& cfg, const NoiseStream& noise, double kl_weight = 1.0);
EpisodeLoss loss_hvp(Graph& g, const Model& model, const ChainInputs& in, const TrainConfig& cfg,
                     const NoiseStream& noise, double kl_weight = 1.0);
EpisodeLoss loss_hvm(Graph& g, const Model& model, const HierarchicalMemory& memory, const ChainInputs& in,
                     const TrainConfig& cfg, const NoiseStream& noise, double kl_weight = 1.0);
/// Any objective over an explicit chain; the named losses call this.
EpisodeLoss chain_loss(Graph& g, const Model& model, const HierarchicalMemory* memory, const ChainInputs& in,
                       const ChainSpec& spec, const NoiseStream& noise, double kl_weight);
EpisodeLoss episode_loss(Objective o, Graph& g, const Model& model, const HierarchicalMemory* memory,
                         const ChainInputs& in, const TrainConfig& cfg, const NoiseStream& noise,
                         double kl_weight = 1.0);

/// Runs the backbone on an episode's images and wires the features into
/// chain inputs. Only the levels in `wanted` are extracted.
ChainInputs episode_inputs(Graph& g, const Model& model, const Dataset& data, const Episode& ep,
                           const std::vector<bool>& wanted, bool with_query_labels = true);
std::vector<bool> levels_needed(Objective o, std::size_t levels);

struct TrainRecord {
  std::size_t episode = 0;
  double total = 0.0, nll = 0.0;
  std::vector<double> kl_prototype, kl_memory;
  double accuracy = 0.0;          ///< query accuracy of this episode
  double running_accuracy = 0.0;  ///< mean query accuracy over the last log window
  std::vector<double> alpha;
  double kl_weight = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> log;  ///< every episode
  bool diverged = false;
  std::size_t diverged_at = 0;
  std::string divergence;
};

/// Episodic meta-training: per episode, sample a task, take one SGD step on
/// the objective, train the level-weight heads on the detached level logits,
/// then write support features into memory. On a non-finite loss or gradient
/// training stops and `model` / `memory` hold the last good state.
TrainResult meta_train(const TrainConfig& cfg, const Dataset& data, Model& model, HierarchicalMemory& memory,
                       const std::function<void(const TrainRecord&)>& on_episode = {});

// Evaluation ---------------------------------------------------------------------

struct TaskPrediction {
  std::vector<int> weighted;  ///< predicted label per query, learned level weights
  std::vector<int> bagging;   ///< predicted label per query, majority vote
  std::vector<double> alpha;  ///< level weights used (empty for single-level predictors)
};

/// Predicts query labels of one episode. Must be callable concurrently.
using Predictor = std::function<TaskPrediction(const Episode& ep)>;

struct TaskRecord {
  std::size_t task = 0;
  double acc_weighted = 0.0;
  double acc_bagging = 0.0;
  std::vector<double> alpha;
};

struct Summary {
  double mean = 0.0;
  double ci95 = 0.0;
};

/// mean and 1.96 * sd / sqrt(n) with the n - 1 standard deviation. n < 2 is rejected.
Summary mean_ci95(const std::vector<double>& xs);

struct EvalConfig {
  std::size_t tasks = 600;
  std::size_t way = 5, shot = 5, queries = 15;
  std::uint64_t seed = 1;
  std::size_t threads = 0;  ///< 0 means HIERMEM_THREADS or 1; the variable also caps explicit counts
};

struct EvalResult {
  Summary weighted;
  Summary bagging;
  std::vector<double> mean_alpha;
  std::vector<TaskRecord> records;
};

/// Tasks are sampled from (seed, task index) alone, so results do not depend
/// on thread count or order.
EvalResult evaluate_predictor(const Dataset& data, const EvalConfig& cfg, const Predictor& predict);
Episode eval_episode(const Dataset& data, const EvalConfig& cfg, std::size_t task);
std::size_t eval_threads(const EvalConfig& cfg);

/// Per-level features of every image in `data` under the frozen backbone.
std::vector<Tensor> cache_features(const Model& model, const Dataset& data, const std::vector<bool>& wanted,
                                   std::size_t batch = 64);

/// Predictor of a trained model on cached features. Level weights come from
/// the frozen hypernet for hierarchical objectives.
Predictor model_predictor(const Model& model, const HierarchicalMemory& memory, const TrainConfig& cfg,
                          const std::vector<Tensor>& features, std::uint64_t noise_seed);

struct PrototypeExport {
  std::size_t level = 0;
  std::vector<int> classes;  ///< dataset class per episode label
  Tensor samples;            ///< (S*N, D), rows s*N + k
};

/// Prototype samples of every chain level for one episode.
std::vector<PrototypeExport> export_prototypes(const Model& model, const HierarchicalMemory& memory,
                                               const TrainConfig& cfg, const std::vector<Tensor>& features,
                                               const Episode& ep, std::uint64_t noise_seed);

EvalResult evaluate(const Model& model, const HierarchicalMemory& memory, const TrainConfig& cfg,
                    const Dataset& data, const EvalConfig& ecfg);

}  // namespace hiermem
