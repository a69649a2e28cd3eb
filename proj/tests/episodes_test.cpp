#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "hiermem/episodes.hpp"
#include "hiermem/error.hpp"
#include "oracles.hpp"

using namespace hiermem;
namespace fs = std::filesystem;

namespace {

Dataset toy_dataset(std::size_t classes, std::size_t per_class) {
  Dataset d;
  d.images = Tensor({classes * per_class, 1, 2, 2});
  for (std::size_t c = 0; c < classes; ++c) {
    d.class_names.push_back("c" + std::to_string(c));
    for (std::size_t i = 0; i < per_class; ++i) d.labels.push_back(static_cast<int>(c));
  }
  for (std::size_t i = 0; i < d.images.numel(); ++i) d.images.storage()[i] = static_cast<double>(i);
  d.domain = "toy";
  return d;
}

SyntheticDomainConfig small_domain(double shift) {
  SyntheticDomainConfig c;
  c.shift = shift;
  c.image_size = 16;
  c.train_classes = 10;
  c.test_classes = 8;
  c.images_per_class = 20;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("hiermem_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(SampleEpisode, CountsAndDisjointness) {
  Dataset d = toy_dataset(8, 25);
  std::mt19937_64 rng(1);
  Episode ep = sample_episode(d, 5, 5, 15, rng, 7);
  EXPECT_EQ(ep.support_ids.size(), 25u);
  EXPECT_EQ(ep.query_ids.size(), 75u);
  EXPECT_EQ(ep.task_id, 7u);
  std::set<std::size_t> s(ep.support_ids.begin(), ep.support_ids.end());
  for (auto q : ep.query_ids) EXPECT_EQ(s.count(q), 0u);
  for (int k = 0; k < 5; ++k) {
    EXPECT_EQ(std::count(ep.support_labels.begin(), ep.support_labels.end(), k), 5);
    EXPECT_EQ(std::count(ep.query_labels.begin(), ep.query_labels.end(), k), 15);
  }
  for (std::size_t i = 0; i < ep.support_ids.size(); ++i) {
    EXPECT_EQ(d.labels[ep.support_ids[i]], ep.classes[ep.support_labels[i]]);
  }
  for (std::size_t i = 0; i < ep.query_ids.size(); ++i) {
    EXPECT_EQ(d.labels[ep.query_ids[i]], ep.classes[ep.query_labels[i]]);
  }
  // class-major support
  EXPECT_TRUE(std::is_sorted(ep.support_labels.begin(), ep.support_labels.end()));
}

TEST(SampleEpisode, ReproducibleWithSeed) {
  Dataset d = toy_dataset(8, 25);
  std::mt19937_64 a(5), b(5);
  Episode x = sample_episode(d, 3, 2, 4, a), y = sample_episode(d, 3, 2, 4, b);
  EXPECT_EQ(x.support_ids, y.support_ids);
  EXPECT_EQ(x.query_ids, y.query_ids);
  EXPECT_EQ(x.classes, y.classes);
}

TEST(SampleEpisode, ClassFrequencyUniformWithinThreeSigma) {
  const std::size_t classes = 10, way = 5, draws = 10000;
  Dataset d = toy_dataset(classes, 4);
  std::mt19937_64 rng(123);
  std::vector<double> hits(classes, 0.0);
  for (std::size_t t = 0; t < draws; ++t) {
    Episode ep = sample_episode(d, way, 1, 1, rng);
    for (int c : ep.classes) hits[c] += 1.0;
  }
  const double p = static_cast<double>(way) / classes;
  const double mean = draws * p, sd = std::sqrt(draws * p * (1 - p));
  for (std::size_t c = 0; c < classes; ++c) EXPECT_LE(std::abs(hits[c] - mean), 3 * sd) << "class " << c;
}

TEST(SampleEpisode, RejectsInsufficientData) {
  Dataset d = toy_dataset(4, 6);
  std::mt19937_64 rng(1);
  try {
    sample_episode(d, 5, 1, 1, rng);
    FAIL() << "expected ValueError";
  } catch (const ValueError& e) {
    EXPECT_NE(std::string(e.what()).find("5"), std::string::npos);
  }
  EXPECT_THROW(sample_episode(d, 2, 5, 5, rng), ValueError);
}

TEST(Synthetic, ZeroShiftTestParamsEqualTrain) {
  auto s = make_synthetic(small_domain(0.0));
  EXPECT_EQ(s.train_params, s.test_params);
  auto t = make_synthetic(small_domain(0.5));
  EXPECT_NE(t.train_params, t.test_params);
}

TEST(Synthetic, SameSeedSamePixelsAndShapes) {
  auto a = make_synthetic(small_domain(0.3));
  auto b = make_synthetic(small_domain(0.3));
  EXPECT_TRUE(std::ranges::equal(a.train.images.data(), b.train.images.data()));
  EXPECT_TRUE(std::ranges::equal(a.test.images.data(), b.test.images.data()));
  EXPECT_EQ(a.train.images.shape(), (Shape{10 * 20, 1, 16, 16}));
  EXPECT_EQ(a.test.num_classes(), 8u);
  auto cfg = small_domain(0.3);
  cfg.seed = 2;
  auto c = make_synthetic(cfg);
  EXPECT_FALSE(std::ranges::equal(a.train.images.data(), c.train.images.data()));
}

TEST(Synthetic, TrainDomainAndDictionaryIndependentOfShift) {
  auto a = make_synthetic(small_domain(0.0));
  for (double shift : {0.25, 1.0}) {
    auto b = make_synthetic(small_domain(shift));
    EXPECT_EQ(a.dictionary_bytes(), b.dictionary_bytes());
    EXPECT_TRUE(std::ranges::equal(a.train.images.data(), b.train.images.data()));
    EXPECT_EQ(a.test_classes, b.test_classes);
  }
}

TEST(Synthetic, TrainAndTestClassesAreDistinctPairs) {
  auto s = make_synthetic(small_domain(0.0));
  for (const auto& a : s.train_classes) {
    for (const auto& b : s.test_classes) EXPECT_FALSE(a == b);
  }
}

TEST(Synthetic, ShiftControlsLayoutReplacementRate) {
  for (double shift : {0.0, 0.5, 1.0}) {
    auto s = make_synthetic(small_domain(shift));
    const std::size_t pool = s.test_params.layouts.size();
    double replaced = 0;
    for (auto u : s.test_layout_used) replaced += u >= pool;
    const double n = static_cast<double>(s.test_layout_used.size());
    const double sd = std::sqrt(n * shift * (1 - shift));
    EXPECT_LE(std::abs(replaced - n * shift), 3 * sd + 1e-9) << "shift " << shift;
  }
}

TEST(Synthetic, LayoutTemplateMatcherAtChanceUnderFullShift) {
  // default 32 px images: cells are wide enough for the texture to average out
  auto cfg = small_domain(1.0);
  cfg.image_size = 32;
  auto s = make_synthetic(cfg);
  std::mt19937_64 rng(9);
  std::vector<double> acc;
  for (int t = 0; t < 400; ++t) {
    Episode ep = sample_episode(s.test, 5, 5, 10, rng);
    acc.push_back(layout_template_accuracy(s.test, ep, cfg.grid));
  }
  double m = 0, sd = 0;
  oracle::mean_sd(acc, m, sd);
  EXPECT_LE(std::abs(m - 0.2), 3 * sd / std::sqrt(acc.size()));

  // the same matcher does read the layout cue without shift
  cfg.shift = 0.0;
  auto s0 = make_synthetic(cfg);
  std::vector<double> acc0;
  for (int t = 0; t < 100; ++t) {
    Episode ep = sample_episode(s0.test, 5, 5, 10, rng);
    acc0.push_back(layout_template_accuracy(s0.test, ep, cfg.grid));
  }
  double m0 = 0, sd0 = 0;
  oracle::mean_sd(acc0, m0, sd0);
  EXPECT_GT(m0, 0.5);
}

TEST(Synthetic, RejectsInvalidShift) {
  EXPECT_THROW(make_synthetic(small_domain(-0.1)), ConfigError);
  EXPECT_THROW(make_synthetic(small_domain(1.5)), ConfigError);
}

TEST(SpecFile, RoundTripsAndRejectsUnknownKeys) {
  auto dir = fresh_dir("spec");
  auto cfg = small_domain(0.75);
  cfg.noise = 0.1234567890123;
  write_spec(dir / "data.spec", cfg);
  auto back = read_spec(dir / "data.spec");
  EXPECT_EQ(spec_entries(back), spec_entries(cfg));
  EXPECT_EQ(back.noise, cfg.noise);
  std::ofstream(dir / "bad.spec") << "shift = 0.5\nwobble = 3\n";
  EXPECT_THROW(read_spec(dir / "bad.spec"), ConfigError);
}

TEST(LoadFolders, TwoFoldersOfThree) {
  auto root = fresh_dir("folders");
  for (std::string cls : {"b_cls", "a_cls"}) {
    fs::create_directories(root / cls);
    for (int i = 0; i < 3; ++i) {
      Tensor img({1, 4, 3});
      for (std::size_t j = 0; j < img.numel(); ++j) img.storage()[j] = (cls[0] == 'a' ? 0.0 : 0.5) + 0.1 * i;
      write_pgm(root / cls / ("img" + std::to_string(2 - i) + ".pgm"), img);
    }
  }
  Dataset d = load_folders(root);
  EXPECT_EQ(d.size(), 6u);
  EXPECT_EQ(d.class_names, (std::vector<std::string>{"a_cls", "b_cls"}));
  EXPECT_EQ(d.images.shape(), (Shape{6, 1, 4, 3}));
  EXPECT_EQ(d.labels, (std::vector<int>{0, 0, 0, 1, 1, 1}));
  // img0 was written last with the largest intensity
  EXPECT_NEAR(d.images.data()[0], 0.2, 1.0 / 255.0);
  Dataset again = load_folders(root);
  EXPECT_TRUE(std::ranges::equal(d.images.data(), again.images.data()));
}

TEST(LoadFolders, ErrorsNameThePath) {
  auto root = fresh_dir("bad_folders");
  fs::create_directories(root / "x");
  std::ofstream(root / "x" / "broken.pgm") << "P2\n2 2\n255\n0 0 0 0\n";
  try {
    load_folders(root);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("broken.pgm"), std::string::npos);
  }
  fs::remove(root / "x" / "broken.pgm");
  try {
    load_folders(root);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("x"), std::string::npos);
  }
  write_pgm(root / "x" / "a.pgm", Tensor({2, 2}, 0.5));
  fs::create_directories(root / "y");
  write_pgm(root / "y" / "a.pgm", Tensor({3, 2}, 0.5));
  try {
    load_folders(root);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("a.pgm"), std::string::npos);
  }
}
