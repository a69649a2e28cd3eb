#include <gtest/gtest.h>

#include <random>

#include "hiermem/backbone.hpp"
#include "hiermem/error.hpp"

namespace hiermem {
namespace {

BackboneConfig toy() {
  BackboneConfig c;
  c.levels = 3;
  c.channels = {2, 3, 4};
  c.height = c.width = 8;
  c.embed_dims = {5, 6, 7};
  return c;
}

Tensor random_images(std::size_t b, const BackboneConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Tensor t({b, c.in_channels, c.height, c.width});
  for (auto& x : t.storage()) x = n(rng);
  return t;
}

TEST(Backbone, ExposesLevelsWithBatchRows) {
  auto cfg = toy();
  Backbone bb(cfg, 1);
  EXPECT_EQ(bb.levels(), 3u);
  Graph g;
  auto f = bb.extract(g, g.constant(random_images(4, cfg, 2)));
  ASSERT_EQ(f.levels.size(), 3u);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(f.levels[l].shape(), (Shape{4, cfg.embed_dims[l]}));
}

TEST(Backbone, SeedDeterminism) {
  Backbone a(toy(), 7), b(toy(), 7), c(toy(), 8);
  ParamList pa, pb, pc;
  a.collect(pa);
  b.collect(pb);
  c.collect(pc);
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(*pa[i].tensor, *pb[i].tensor);
  EXPECT_NE(*pa[0].tensor, *pc[0].tensor);
}

TEST(Backbone, ParameterCountByHand) {
  Backbone bb(toy(), 1);
  // conv blocks: (2*1*9+2) + (3*2*9+3) + (4*3*9+4)
  const std::size_t conv = 20 + 57 + 112;
  // heads: flat 2*4*4=32 -> 5 -> 5; 3*2*2=12 -> 6 -> 6; 4*1*1=4 -> 7 -> 7
  const std::size_t heads = (32 * 5 + 5 + 5 * 5 + 5) + (12 * 6 + 6 + 6 * 6 + 6) + (4 * 7 + 7 + 7 * 7 + 7);
  EXPECT_EQ(bb.parameter_count(), conv + heads);
}

TEST(Backbone, ZeroInputZeroWeightsGivesBias) {
  auto cfg = toy();
  Backbone bb(cfg, 3);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  ParamList ps;
  bb.collect(ps);
  for (auto& p : ps) {
    const bool bias = p.name.ends_with("bias");
    for (auto& x : p.tensor->storage()) x = bias ? n(rng) : 0.0;
  }
  Graph g;
  auto f = bb.extract(g, g.constant(Tensor({2, 1, 8, 8}, 0.0)));
  const Tensor& b2 = bb.head(0).output().bias();
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(f.levels[0].value().at(r, c), b2[c]);
  }
}

TEST(Backbone, ZeroInputRecomputedFromBiases) {
  auto cfg = toy();
  Backbone bb(cfg, 5);
  Graph g;
  auto f = bb.extract(g, g.constant(Tensor({1, 1, 8, 8}, 0.0)));
  // Zero image: conv output is the bias everywhere; relu and pooling keep it.
  const auto& cb = bb.block(0).bias;
  std::vector<double> flat;
  for (std::size_t c = 0; c < 2; ++c) {
    for (int i = 0; i < 16; ++i) flat.push_back(std::max(0.0, cb[c]));
  }
  auto& fc1 = bb.head(0).first();
  auto& fc2 = bb.head(0).output();
  std::vector<double> h(5);
  for (std::size_t j = 0; j < 5; ++j) {
    double acc = fc1.bias()[j];
    for (std::size_t k = 0; k < flat.size(); ++k) acc += flat[k] * fc1.weight().at(k, j);
    h[j] = std::max(0.0, acc);
  }
  for (std::size_t j = 0; j < 5; ++j) {
    double acc = fc2.bias()[j];
    for (std::size_t k = 0; k < 5; ++k) acc += h[k] * fc2.weight().at(k, j);
    EXPECT_NEAR(f.levels[0].value().at(0, j), acc, 1e-13);
  }
}

TEST(Backbone, DeeperBlocksDoNotAffectShallowLevels) {
  auto cfg = toy();
  Backbone bb(cfg, 9);
  const Tensor imgs = random_images(3, cfg, 10);
  Graph g1;
  auto before = bb.extract(g1, g1.constant(imgs));
  for (auto& w : bb.block(2).weight.storage()) w += 0.5;
  Graph g2;
  auto after = bb.extract(g2, g2.constant(imgs));
  EXPECT_EQ(before.levels[0].value(), after.levels[0].value());
  EXPECT_EQ(before.levels[1].value(), after.levels[1].value());
  EXPECT_NE(before.levels[2].value(), after.levels[2].value());
}

TEST(Backbone, GradientsReachShallowerBlocks) {
  auto cfg = toy();
  Backbone bb(cfg, 11);
  for (std::size_t l = 0; l < 3; ++l) {
    Graph g;
    auto f = bb.extract(g, g.constant(random_images(2, cfg, 12)));
    g.backward(sum(square(f.levels[l])));
    for (std::size_t b = 0; b < 3; ++b) {
      auto& w = bb.block(b).weight;
      double norm = 0;
      if (w.has_grad()) {
        for (double x : w.grad()) norm += x * x;
      }
      if (b <= l) {
        EXPECT_GT(norm, 0.0) << "level " << l << " block " << b;
      } else {
        EXPECT_EQ(norm, 0.0);
      }
      w.clear_grad();
    }
    ParamList ps;
    bb.collect(ps);
    for (auto& p : ps) p.tensor->clear_grad();
  }
}

TEST(Backbone, WantedLevelsSkipDeeperBlocks) {
  auto cfg = toy();
  Backbone bb(cfg, 13);
  Graph g;
  auto f = bb.extract(g, g.constant(random_images(2, cfg, 14)), {true, false, false});
  EXPECT_TRUE(f.has(0));
  EXPECT_FALSE(f.has(1));
  EXPECT_FALSE(f.has(2));
}

TEST(Backbone, RejectsPoolingBelowOnePixel) {
  auto cfg = toy();
  cfg.levels = 4;
  cfg.channels = {2, 2, 2, 2};
  cfg.embed_dims = {3, 3, 3, 3};
  try {
    Backbone bb(cfg, 1);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("block 4"), std::string::npos) << e.what();
  }
}

TEST(Backbone, RejectsWrongImageShape) {
  Backbone bb(toy(), 1);
  Graph g;
  EXPECT_THROW(bb.extract(g, g.constant(Tensor({1, 1, 6, 8}, 0.0))), ShapeError);
}

}  // namespace
}  // namespace hiermem
