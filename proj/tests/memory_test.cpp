#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "hiermem/error.hpp"
#include "hiermem/memory.hpp"

namespace hiermem {
namespace {

namespace fs = std::filesystem;

fs::path temp_stem(const std::string& name) {
  auto dir = fs::temp_directory_path() / "hiermem_memory_test";
  fs::create_directories(dir);
  return dir / name;
}

Tensor rows(std::vector<std::vector<double>> r) {
  std::vector<double> flat;
  for (auto& x : r) flat.insert(flat.end(), x.begin(), x.end());
  return Tensor({r.size(), r[0].size()}, flat);
}

TEST(Address, SingleEntryIsOne) {
  std::vector<MemoryEntry> bank{{{0.3, -1.0}, 4, 1}};
  auto w = address(bank, {2.0, 5.0}, 1.0);
  ASSERT_EQ(w.size(), 1u);
  EXPECT_EQ(w[0], 1.0);
}

TEST(Address, SharpOnMatchingKey) {
  std::vector<MemoryEntry> bank{{{1.0, 0.0}, 0, 1}, {{0.0, 1.0}, 1, 1}};
  auto w = address(bank, {1.0, 0.0}, 0.05);
  // softmax([1, 0] / (0.05 sqrt 2)) by hand
  const double a = 1.0 / (0.05 * std::sqrt(2.0));
  EXPECT_NEAR(w[0], 1.0 / (1.0 + std::exp(-a)), 1e-15);
  EXPECT_GE(w[0], 0.99);
}

TEST(Address, OrthogonalQueryIsUniform) {
  std::vector<MemoryEntry> bank{{{1.0, 0.0, 0.0}, 0, 1}, {{0.0, 1.0, 0.0}, 1, 1}, {{2.0, 3.0, 0.0}, 2, 1}};
  auto w = address(bank, {0.0, 0.0, 4.0}, 1.0);
  for (double x : w) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(Address, SumsToOneAndShiftInvariant) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  for (int t = 0; t < 20; ++t) {
    std::vector<MemoryEntry> bank;
    for (int i = 0; i < 5; ++i) bank.push_back({{n(rng), n(rng), n(rng)}, i, 1});
    std::vector<double> q{n(rng), n(rng), n(rng)};
    auto w = address(bank, q, 0.7);
    double s = 0;
    for (double x : w) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
    // Adding c along q to every key adds c|q|^2 to every dot product.
    auto shifted = bank;
    for (auto& e : shifted) {
      for (int j = 0; j < 3; ++j) e.key[j] += 0.8 * q[j];
    }
    auto w2 = address(shifted, q, 0.7);
    for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], w2[i], 1e-12);
  }
}

TEST(Address, EmptyBankSignals) {
  EXPECT_THROW(address(std::vector<MemoryEntry>{}, {1.0}, 1.0), MemoryEmpty);
  HierarchicalMemory mem({2, 3});
  EXPECT_THROW(mem.keys(0), MemoryEmpty);
}

LevelNets nets_for(std::size_t d, std::size_t up, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone.levels = 2;
  cfg.backbone.channels = {2, 2};
  cfg.backbone.height = cfg.backbone.width = 8;
  cfg.backbone.embed_dims = {up, d};
  cfg.infer_hidden = 6;
  Model m(cfg, seed);
  return m.nets[1];
}

TEST(LatentMemory, OneEntryDegenerates) {
  auto nets = nets_for(3, 2, 2);
  Graph g;
  Tensor keys = rows({{0.5, -0.2, 1.0}});
  Var s = g.constant(rows({{0.1, 0.2, 0.3}}));
  auto lm = infer_latent_memory(g, nets, keys, address(g, keys, s, 1.0), s, Var{});
  auto mix = lm.mixture(0);
  EXPECT_EQ(mix.size(), 1u);
  EXPECT_EQ(mix.weights.value()[0], 1.0);
}

TEST(LatentMemory, DegenerateWeightsPickComponent) {
  auto nets = nets_for(3, 2, 3);
  Graph g;
  Tensor keys = rows({{0.5, -0.2, 1.0}, {-1.0, 0.4, 0.0}});
  Var s = g.constant(rows({{0.1, 0.2, 0.3}}));
  Var w = g.constant(Tensor({1, 2}, {1.0, 0.0}));
  auto lm = infer_latent_memory(g, nets, keys, w, s, Var{});
  Var m = sample_latent_memory(lm, g.constant(Tensor({1, 3}, 0.0)));
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m.value()[j], lm.components.mean.value().at(0, j));
}

TEST(LatentMemory, ComponentInputsByRecomputation) {
  auto nets = nets_for(3, 2, 4);
  Graph g;
  Tensor keys = rows({{0.5, -0.2, 1.0}, {-1.0, 0.4, 0.0}});
  Tensor summ = rows({{0.1, 0.2, 0.3}, {0.0, -0.5, 0.9}});
  Tensor up = rows({{0.7, -0.7}, {0.2, 0.4}});
  Var s = g.constant(summ);
  auto lm = infer_latent_memory(g, nets, keys, address(g, keys, s, 1.0), s, g.constant(up));
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<double> in;
      for (std::size_t j = 0; j < 3; ++j) in.push_back(keys.at(i, j));
      for (std::size_t j = 0; j < 3; ++j) in.push_back(summ.at(k, j));
      for (std::size_t j = 0; j < 2; ++j) in.push_back(up.at(k, j));
      Graph h;
      auto c = nets.memory(h, h.constant(Tensor({1, 8}, in)));
      for (std::size_t j = 0; j < 3; ++j) {
        EXPECT_EQ(lm.components.mean.value().at(k * 2 + i, j), c.mean.value()[j]);
        EXPECT_EQ(lm.components.var.value().at(k * 2 + i, j), c.var.value()[j]);
      }
    }
  }
}

TEST(LatentMemory, ZeroFinalLayerGivesBiasMeans) {
  auto nets = nets_for(3, 2, 5);
  nets.memory.net().output().weight().storage().assign(nets.memory.net().output().weight().numel(), 0.0);
  auto& b = nets.memory.net().output().bias();
  for (std::size_t j = 0; j < b.numel(); ++j) b.storage()[j] = 0.1 * static_cast<double>(j) - 0.2;
  Graph g;
  Tensor keys = rows({{0.5, -0.2, 1.0}, {-1.0, 0.4, 0.0}, {3.0, 3.0, 3.0}});
  Var s = g.constant(rows({{0.1, 0.2, 0.3}}));
  auto lm = infer_latent_memory(g, nets, keys, address(g, keys, s, 1.0), s, Var{});
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(lm.components.mean.value().at(i, j), b[j]);
  }
}

TEST(MemoryPrior, ZeroOutputLayer) {
  auto nets = nets_for(3, 2, 6);
  nets.memory_prior.net().output().zero();
  Graph g;
  auto p = memory_prior(g, nets, g.constant(rows({{1.0, 2.0, 3.0}})), Var{});
  for (double m : p.mean.value().data()) EXPECT_EQ(m, 0.0);
  for (double v : p.var.value().data()) EXPECT_NEAR(v, 0.6931471805599453 + 1e-6, 1e-15);
}

TEST(MemoryPrior, DeterministicAndFloored) {
  auto nets = nets_for(3, 2, 7);
  Graph g;
  Var s = g.constant(rows({{1.0, -2.0, 30.0}}));
  Var up = g.constant(rows({{-50.0, 40.0}}));
  auto a = memory_prior(g, nets, s, up);
  auto b = memory_prior(g, nets, s, up);
  EXPECT_EQ(a.mean.value(), b.mean.value());
  EXPECT_EQ(a.var.value(), b.var.value());
  for (double v : a.var.value().data()) EXPECT_GE(v, 1e-6);
  EXPECT_THROW(memory_prior(g, nets, g.constant(rows({{1.0, 2.0}})), Var{}), ShapeError);
}

TEST(LatentMemory, KlZeroWhenComponentsEqualPrior) {
  auto nets = nets_for(3, 2, 8);
  Graph g;
  auto prior = GaussianDiag::constant(g, {0.1, 0.2, 0.3}, {1.0, 2.0, 0.5});
  LatentMemory lm{g.constant(Tensor({1, 2}, {0.4, 0.6})),
                  GaussianDiag(repeat_rows(prior.mean, 2), repeat_rows(prior.var, 2)), 1, 2};
  EXPECT_EQ(kl_latent_memory(lm, prior).value()[0], 0.0);
}

TEST(Update, EmptyMemoryFirstWrite) {
  HierarchicalMemory mem({2});
  Tensor f = rows({{1.5, -2.0}});
  mem.update({&f}, {7}, 0.3);
  ASSERT_EQ(mem.bank(0).size(), 1u);
  EXPECT_EQ(mem.bank(0)[0].key, (std::vector<double>{1.5, -2.0}));
  EXPECT_EQ(mem.bank(0)[0].class_id, 7);
  EXPECT_EQ(mem.bank(0)[0].count, 1u);
}

TEST(Update, Ema) {
  HierarchicalMemory mem({2});
  Tensor k = rows({{1.0, 2.0}});
  Tensor v = rows({{3.0, -2.0}, {5.0, 0.0}});
  mem.update({&k}, {0}, 0.5);
  mem.update({&v}, {0, 0}, 0.5);
  EXPECT_EQ(mem.bank(0)[0].key, (std::vector<double>{0.5 * 1.0 + 0.5 * 4.0, 0.5 * 2.0 + 0.5 * -1.0}));
  EXPECT_EQ(mem.bank(0)[0].count, 2u);
}

TEST(Update, PermutationOfBatch) {
  Tensor a = rows({{1.0, 0.0}, {0.0, 1.0}, {2.0, 2.0}, {4.0, 0.0}});
  Tensor b = rows({{4.0, 0.0}, {0.0, 1.0}, {2.0, 2.0}, {1.0, 0.0}});
  HierarchicalMemory m1({2}), m2({2});
  m1.update({&a}, {3, 1, 1, 3}, 0.3);
  m2.update({&b}, {3, 1, 1, 3}, 0.3);
  EXPECT_EQ(m1, m2);
  ASSERT_EQ(m1.bank(0).size(), 2u);
  EXPECT_EQ(m1.bank(0)[0].class_id, 1);
  EXPECT_EQ(m1.bank(0)[0].key, (std::vector<double>{1.0, 1.5}));
  EXPECT_EQ(m1.bank(0)[1].key, (std::vector<double>{2.5, 0.0}));
}

TEST(Update, GeometricConvergence) {
  HierarchicalMemory mem({1});
  Tensor k0 = rows({{10.0}});
  Tensor v = rows({{2.0}});
  mem.update({&k0}, {0}, 0.3);
  for (int t = 1; t <= 20; ++t) {
    mem.update({&v}, {0}, 0.3);
    EXPECT_NEAR(std::abs(mem.bank(0)[0].key[0] - 2.0), std::pow(0.7, t) * 8.0, 1e-12);
  }
}

TEST(Update, SizeEqualsDistinctClasses) {
  HierarchicalMemory mem({1, 1});
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> cls(0, 11);
  std::set<int> seen;
  for (int t = 0; t < 30; ++t) {
    std::vector<int> labels{cls(rng), cls(rng)};
    seen.insert(labels.begin(), labels.end());
    Tensor f = rows({{1.0}, {2.0}});
    mem.update({&f, &f}, labels, 0.3);
    EXPECT_EQ(mem.bank(0).size(), seen.size());
    EXPECT_EQ(mem.bank(1).size(), seen.size());
  }
}

TEST(Recall, KeysExcludingDropsListedClasses) {
  HierarchicalMemory mem({2});
  Tensor f = rows({{1.0, 2.0}, {3.0, 4.0}, {5.0, 6.0}});
  mem.update({&f}, {4, 9, 2}, 0.3);
  auto all = mem.keys_excluding(0, {});
  ASSERT_TRUE(all.has_value());
  EXPECT_EQ(all->storage(), mem.keys(0).storage());
  auto some = mem.keys_excluding(0, {9, 11});
  ASSERT_TRUE(some.has_value());
  EXPECT_EQ(some->shape(), (Shape{2, 2}));
  EXPECT_EQ(some->storage(), (std::vector<double>{5.0, 6.0, 1.0, 2.0}));
  EXPECT_FALSE(mem.keys_excluding(0, {2, 4, 9}).has_value());
  EXPECT_FALSE(HierarchicalMemory({3}).keys_excluding(0, {}).has_value());
}

TEST(Update, RejectsNonFiniteWithoutMutation) {
  HierarchicalMemory mem({2, 2});
  Tensor ok = rows({{1.0, 2.0}});
  mem.update({&ok, &ok}, {0}, 0.3);
  const auto before = mem;
  Tensor bad = rows({{1.0, std::nan("")}});
  EXPECT_THROW(mem.update({&ok, &bad}, {0}, 0.3), NumericError);
  EXPECT_EQ(mem, before);
  EXPECT_THROW(mem.update({&ok, &ok}, {0, 1}, 0.3), ShapeError);
  EXPECT_EQ(mem, before);
}

TEST(Persistence, RoundTrip) {
  HierarchicalMemory mem({2, 3});
  Tensor a = rows({{0.1, 1e-300}, {-3.5, 2.0}});
  Tensor b = rows({{1.0, 2.0, 3.0}, {std::nextafter(1.0, 2.0), 0.0, -0.0}});
  mem.update({&a, &b}, {5, 2}, 0.3);
  mem.update({&a, &b}, {5, 5}, 0.3);
  const auto stem = temp_stem("roundtrip");
  mem.save(stem);
  EXPECT_EQ(HierarchicalMemory::load(stem), mem);
}

TEST(Persistence, EmptyRoundTrip) {
  HierarchicalMemory mem({4, 4, 2});
  const auto stem = temp_stem("empty");
  mem.save(stem);
  auto back = HierarchicalMemory::load(stem);
  EXPECT_EQ(back, mem);
  EXPECT_EQ(back.levels(), 3u);
}

TEST(Persistence, TruncatedFileReportsOffset) {
  HierarchicalMemory mem({2});
  Tensor a = rows({{0.1, 0.2}, {0.3, 0.4}});
  mem.update({&a}, {0, 1}, 0.3);
  const auto stem = temp_stem("truncated");
  mem.save(stem);
  auto bin = stem;
  bin += ".bin";
  fs::resize_file(bin, fs::file_size(bin) - 3);
  try {
    HierarchicalMemory::load(stem);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_GE(e.offset(), 0);
  }
}

}  // namespace
}  // namespace hiermem
