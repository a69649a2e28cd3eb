#include "hiermem/memory.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "hiermem/error.hpp"

namespace hiermem {

HierarchicalMemory::HierarchicalMemory(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
  for (auto d : dims_) {
    if (d == 0) throw ValueError("memory: level dimension must be positive");
  }
  banks_.resize(dims_.size());
}

std::size_t HierarchicalMemory::total_entries() const {
  std::size_t n = 0;
  for (const auto& b : banks_) n += b.size();
  return n;
}

Tensor HierarchicalMemory::keys(std::size_t l) const {
  const auto& b = bank(l);
  if (b.empty()) throw MemoryEmpty();
  Tensor t({b.size(), dims_[l]});
  auto out = t.storage().begin();
  for (const auto& e : b) out = std::copy(e.key.begin(), e.key.end(), out);
  return t;
}

std::optional<Tensor> HierarchicalMemory::keys_excluding(std::size_t l, const std::vector<int>& classes) const {
  const auto& b = bank(l);
  std::vector<const MemoryEntry*> kept;
  for (const auto& e : b) {
    if (std::find(classes.begin(), classes.end(), e.class_id) == classes.end()) kept.push_back(&e);
  }
  if (kept.empty()) return std::nullopt;
  Tensor t({kept.size(), dims_[l]});
  auto out = t.storage().begin();
  for (const auto* e : kept) out = std::copy(e->key.begin(), e->key.end(), out);
  return t;
}

void HierarchicalMemory::update(const std::vector<const Tensor*>& level_feats, const std::vector<int>& labels,
                                double beta) {
  if (level_feats.size() != banks_.size()) {
    throw ShapeError("memory update: " + std::to_string(level_feats.size()) + " feature levels for " +
                     std::to_string(banks_.size()) + " banks");
  }
  if (!(beta > 0.0 && beta <= 1.0)) throw ValueError("memory update: beta must be in (0, 1]");
  for (std::size_t l = 0; l < banks_.size(); ++l) {
    const Tensor* f = level_feats[l];
    if (!f) continue;
    if (f->rank() != 2 || f->dim(0) != labels.size() || f->dim(1) != dims_[l]) {
      throw ShapeError("memory update: level " + std::to_string(l + 1) + " features " + to_string(f->shape()) +
                       " for " + std::to_string(labels.size()) + " labels of width " + std::to_string(dims_[l]));
    }
    if (!f->all_finite()) throw NumericError("memory update: non-finite features");
  }
  std::map<int, std::vector<std::size_t>> rows_of;
  for (std::size_t i = 0; i < labels.size(); ++i) rows_of[labels[i]].push_back(i);

  auto next = banks_;
  for (std::size_t l = 0; l < next.size(); ++l) {
    const Tensor* f = level_feats[l];
    if (!f) continue;
    const std::size_t d = dims_[l];
    for (const auto& [cls, rows] : rows_of) {
      std::vector<double> mean(d, 0.0);
      for (auto r : rows) {
        for (std::size_t j = 0; j < d; ++j) mean[j] += f->at(r, j);
      }
      for (auto& m : mean) m /= static_cast<double>(rows.size());
      auto& bank = next[l];
      auto it = std::find_if(bank.begin(), bank.end(), [&](const MemoryEntry& e) { return e.class_id == cls; });
      if (it == bank.end()) {
        bank.push_back({std::move(mean), cls, 1});
      } else {
        for (std::size_t j = 0; j < d; ++j) it->key[j] = (1.0 - beta) * it->key[j] + beta * mean[j];
        ++it->count;
      }
    }
  }
  banks_.swap(next);
}

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  auto p = stem;
  p += suffix;
  return p;
}

}  // namespace

void HierarchicalMemory::save(const std::filesystem::path& stem) const {
  std::ofstream man(with_suffix(stem, ".manifest"));
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!man || !bin) throw IoError("cannot write memory " + stem.string());
  man << "# hiermem memory\n";
  man << "levels " << levels() << "\n";
  man << "dims";
  for (auto d : dims_) man << ' ' << d;
  man << "\n# level class_id count offset\n";
  std::size_t offset = 0;
  for (std::size_t l = 0; l < banks_.size(); ++l) {
    for (const auto& e : banks_[l]) {
      Tensor key({e.key.size()}, e.key);
      man << l + 1 << ' ' << e.class_id << ' ' << e.count << ' ' << offset << '\n';
      write_tensor(bin, key);
      offset += serialized_size(key);
    }
  }
  if (!man || !bin) throw IoError("failed writing memory " + stem.string());
}

HierarchicalMemory HierarchicalMemory::load(const std::filesystem::path& stem) {
  const auto man_path = with_suffix(stem, ".manifest");
  const auto bin_path = with_suffix(stem, ".bin");
  std::ifstream man(man_path, std::ios::binary);
  if (!man) throw IoError("cannot open " + man_path.string());

  struct Row {
    std::size_t level;
    int class_id;
    std::uint64_t count;
    std::size_t offset;
  };
  std::vector<Row> rows;
  std::size_t levels = 0;
  std::vector<std::size_t> dims;
  bool have_levels = false, have_dims = false;
  std::string line;
  std::int64_t line_start = 0;
  auto fail = [&](const std::string& what) -> IoError {
    return IoError(man_path.string() + ": " + what, line_start);
  };
  while (true) {
    line_start = static_cast<std::int64_t>(man.tellg());
    if (!std::getline(man, line)) break;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (line.rfind("levels", 0) == 0) {
      std::string tag;
      if (!(ls >> tag >> levels)) throw fail("malformed levels line");
      have_levels = true;
    } else if (line.rfind("dims", 0) == 0) {
      std::string tag;
      ls >> tag;
      std::size_t d;
      while (ls >> d) dims.push_back(d);
      have_dims = true;
    } else {
      Row r{};
      if (!(ls >> r.level >> r.class_id >> r.count >> r.offset) || r.level == 0 || r.count == 0) {
        throw fail("malformed entry line");
      }
      rows.push_back(r);
    }
  }
  if (!have_levels || !have_dims || dims.size() != levels) {
    line_start = 0;
    throw fail("missing or inconsistent levels/dims header");
  }
  HierarchicalMemory mem;
  try {
    mem = HierarchicalMemory(dims);
  } catch (const Error& e) {
    line_start = 0;
    throw fail(e.what());
  }

  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw IoError("cannot open " + bin_path.string());
  std::size_t expected = 0;
  for (const auto& r : rows) {
    if (r.level > levels) throw IoError(bin_path.string() + ": entry for level " + std::to_string(r.level));
    if (r.offset != expected) {
      throw IoError(bin_path.string() + ": manifest offset does not match key layout",
                    static_cast<std::int64_t>(expected));
    }
    Tensor key = read_tensor(bin, static_cast<std::int64_t>(expected));
    const std::size_t d = dims[r.level - 1];
    if (key.rank() != 1 || key.numel() != d) {
      throw IoError(bin_path.string() + ": key of shape " + to_string(key.shape()) + " in a width-" +
                        std::to_string(d) + " bank",
                    static_cast<std::int64_t>(expected));
    }
    if (!key.all_finite()) throw IoError(bin_path.string() + ": non-finite key", static_cast<std::int64_t>(expected));
    expected += serialized_size(key);
    auto& bank = mem.banks_[r.level - 1];
    for (const auto& e : bank) {
      if (e.class_id == r.class_id) {
        throw IoError(bin_path.string() + ": duplicate class " + std::to_string(r.class_id),
                      static_cast<std::int64_t>(expected));
      }
    }
    bank.push_back({std::vector<double>(key.data().begin(), key.data().end()), r.class_id, r.count});
  }
  bin.peek();
  if (!bin.eof()) {
    throw IoError(bin_path.string() + ": trailing bytes after last key", static_cast<std::int64_t>(expected));
  }
  return mem;
}

Var address(Graph& g, const Tensor& keys, Var summary, double tau) {
  if (keys.rank() != 2 || keys.dim(0) == 0) throw MemoryEmpty();
  if (summary.shape().size() != 2 || summary.shape()[1] != keys.dim(1)) {
    throw ShapeError("address: summary " + to_string(summary.shape()) + " vs keys " + to_string(keys.shape()));
  }
  if (!(tau > 0.0)) throw ValueError("address: temperature must be positive");
  const double scale_by = 1.0 / (tau * std::sqrt(static_cast<double>(keys.dim(1))));
  Var scores = matmul(summary, transpose(g.constant(keys)));
  return softmax(scale(scores, scale_by), 1);
}

std::vector<double> address(const std::vector<MemoryEntry>& bank, const std::vector<double>& summary, double tau) {
  if (bank.empty()) throw MemoryEmpty();
  Tensor keys({bank.size(), summary.size()});
  for (std::size_t i = 0; i < bank.size(); ++i) {
    if (bank[i].key.size() != summary.size()) {
      throw ShapeError("address: key width " + std::to_string(bank[i].key.size()) + " vs summary " +
                       std::to_string(summary.size()));
    }
    std::copy(bank[i].key.begin(), bank[i].key.end(), keys.storage().begin() + i * summary.size());
  }
  Graph g;
  const Tensor w = address(g, keys, g.constant(Tensor({1, summary.size()}, summary)), tau).value();
  return {w.data().begin(), w.data().end()};
}

GaussianMixture LatentMemory::mixture(std::size_t k) const {
  return GaussianMixture(reshape(slice(weights, 0, k, 1), {entries}),
                         GaussianDiag(slice(components.mean, 0, k * entries, entries),
                                      slice(components.var, 0, k * entries, entries)));
}

namespace {

Var upper_or_zero(Graph& g, Var m_upper, std::size_t rows, const LevelNets& nets) {
  if (m_upper.graph) {
    if (m_upper.shape() != Shape{rows, nets.upper_dim}) {
      throw ShapeError("upper memory sample " + to_string(m_upper.shape()) + " vs expected " +
                       to_string(Shape{rows, nets.upper_dim}));
    }
    return m_upper;
  }
  return g.constant(Tensor({rows, nets.upper_dim}, 0.0));
}

void require_summary(Var summary, const LevelNets& nets) {
  if (summary.shape().size() != 2 || summary.shape()[1] != nets.dim) {
    throw ShapeError("memory: summary " + to_string(summary.shape()) + " vs level width " +
                     std::to_string(nets.dim));
  }
}

}  // namespace

LatentMemory infer_latent_memory(Graph& g, const LevelNets& nets, const Tensor& keys, Var addr, Var summary,
                                 Var m_upper) {
  require_summary(summary, nets);
  if (keys.rank() != 2 || keys.dim(0) == 0) throw MemoryEmpty();
  if (keys.dim(1) != nets.dim) {
    throw ShapeError("memory: keys " + to_string(keys.shape()) + " vs level width " + std::to_string(nets.dim));
  }
  const std::size_t r = summary.shape()[0], n = keys.dim(0);
  if (addr.shape() != Shape{r, n}) {
    throw ShapeError("memory: address " + to_string(addr.shape()) + " vs " + to_string(Shape{r, n}));
  }
  Var up = upper_or_zero(g, m_upper, r, nets);
  std::vector<std::size_t> entry_idx, row_idx;
  for (std::size_t k = 0; k < r; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      entry_idx.push_back(i);
      row_idx.push_back(k);
    }
  }
  Var in = concat({gather_rows(g.constant(keys), entry_idx), gather_rows(summary, row_idx), gather_rows(up, row_idx)}, 1);
  return LatentMemory{addr, nets.memory(g, in), r, n};
}

GaussianDiag memory_prior(Graph& g, const LevelNets& nets, Var summary, Var m_upper) {
  require_summary(summary, nets);
  Var up = upper_or_zero(g, m_upper, summary.shape()[0], nets);
  return nets.memory_prior(g, concat({summary, up}, 1));
}

namespace {

// (rows, rows*entries) matrix summing each row's block of entries.
Tensor block_sum(std::size_t rows, std::size_t entries) {
  Tensor s({rows, rows * entries}, 0.0);
  for (std::size_t k = 0; k < rows; ++k) {
    for (std::size_t i = 0; i < entries; ++i) s.storage()[k * rows * entries + k * entries + i] = 1.0;
  }
  return s;
}

std::vector<std::size_t> repeat_each(std::size_t rows, std::size_t entries) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < rows; ++k) idx.insert(idx.end(), entries, k);
  return idx;
}

}  // namespace

Var sample_latent_memory(const LatentMemory& mem, Var noise) {
  Graph& g = *mem.weights.graph;
  const std::size_t d = mem.components.dim();
  if (noise.shape() != Shape{mem.rows, d}) {
    throw ShapeError("latent memory noise " + to_string(noise.shape()) + " vs " + to_string(Shape{mem.rows, d}));
  }
  const std::size_t rn = mem.rows * mem.entries;
  Var eps = gather_rows(noise, repeat_each(mem.rows, mem.entries));
  Var per = sample(mem.components, eps);  // (rn, d)
  Var w = matmul(reshape(mem.weights, {rn, 1}), g.constant(Tensor({1, d}, 1.0)));
  return matmul(g.constant(block_sum(mem.rows, mem.entries)), w * per);
}

Var kl_latent_memory(const LatentMemory& mem, const GaussianDiag& prior) {
  if (prior.rows() != mem.rows || prior.dim() != mem.components.dim()) {
    throw ShapeError("latent memory prior " + to_string(prior.mean.shape()) + " vs " +
                     std::to_string(mem.rows) + " mixtures of width " + std::to_string(mem.components.dim()));
  }
  const auto idx = repeat_each(mem.rows, mem.entries);
  GaussianDiag target(gather_rows(prior.mean, idx), gather_rows(prior.var, idx));
  Var per = reshape(kl_rows(mem.components, target), {mem.rows, mem.entries});
  return sum(per * mem.weights, 1);
}

}  // namespace hiermem
