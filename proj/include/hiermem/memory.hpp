#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "hiermem/distributions.hpp"
#include "hiermem/graph.hpp"
#include "hiermem/model.hpp"

namespace hiermem {

struct MemoryEntry {
  std::vector<double> key;
  int class_id = 0;
  std::uint64_t count = 1;

  bool operator==(const MemoryEntry&) const = default;
};

/// Default EMA rate of memory updates.
inline constexpr double kMemoryBeta = 0.3;

/// L banks of class-keyed running feature means. Bank l holds D_feat(l)-wide
/// keys; entries appear in the order classes were first written.
class HierarchicalMemory {
 public:
  HierarchicalMemory() = default;
  explicit HierarchicalMemory(std::vector<std::size_t> dims);

  std::size_t levels() const { return banks_.size(); }
  std::size_t dim(std::size_t l) const { return dims_.at(l); }
  const std::vector<std::size_t>& dims() const { return dims_; }
  const std::vector<MemoryEntry>& bank(std::size_t l) const { return banks_.at(l); }
  bool empty(std::size_t l) const { return banks_.at(l).empty(); }
  std::size_t total_entries() const;

  /// Keys of bank l stacked as (entries, D). Throws MemoryEmpty.
  Tensor keys(std::size_t l) const;
  /// Keys of bank l whose class is not listed; nullopt when nothing is left.
  std::optional<Tensor> keys_excluding(std::size_t l, const std::vector<int>& classes) const;

  /// Per-class EMA write. `level_feats[l]` is (B, D_l) or null to leave bank l
  /// alone; `labels` are global class ids aligned with the rows. Classes are
  /// written in ascending id order. Nothing changes if any check fails.
  void update(const std::vector<const Tensor*>& level_feats, const std::vector<int>& labels,
              double beta = kMemoryBeta);

  /// `<stem>.manifest` lists (level, class_id, count, offset) per entry and
  /// `<stem>.bin` holds the keys as serialized tensors.
  void save(const std::filesystem::path& stem) const;
  /// Throws IoError with the failing byte offset; the result is built
  /// completely before it is returned.
  static HierarchicalMemory load(const std::filesystem::path& stem);

  bool operator==(const HierarchicalMemory&) const = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<std::vector<MemoryEntry>> banks_;
};

/// softmax(keys . summary / (tau sqrt(D))) for every summary row: (r, entries).
Var address(Graph& g, const Tensor& keys, Var summary, double tau);
/// Plain-value addressing of one summary vector against a bank.
std::vector<double> address(const std::vector<MemoryEntry>& bank, const std::vector<double>& summary,
                            double tau);

/// One mixture per summary row. Row k*n + i of `components` is the
/// Gaussian recalled from entry i for row k.
struct LatentMemory {
  Var weights;  ///< (rows, entries)
  GaussianDiag components;
  std::size_t rows = 0;
  std::size_t entries = 0;

  GaussianMixture mixture(std::size_t k) const;
};

/// Components from nets.memory(concat(key_i, summary_k, m_upper_k or 0)),
/// weighted by `addr`.
LatentMemory infer_latent_memory(Graph& g, const LevelNets& nets, const Tensor& keys, Var addr, Var summary,
                                 Var m_upper);
/// nets.memory_prior(concat(summary, m_upper or 0)).
GaussianDiag memory_prior(Graph& g, const LevelNets& nets, Var summary, Var m_upper);
/// sum_i w_ki (mu_ki + sqrt(var_ki) eps_k), one noise row per mixture: (rows, D).
Var sample_latent_memory(const LatentMemory& mem, Var noise);
/// Per-row convexity bound sum_i w_ki KL(c_ki || prior_k): (rows).
Var kl_latent_memory(const LatentMemory& mem, const GaussianDiag& prior);

}  // namespace hiermem
