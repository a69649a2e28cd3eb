#include <gtest/gtest.h>

#include <random>
#include <cstring>
#include <sstream>

#include "hiermem/error.hpp"
#include "hiermem/tensor.hpp"

namespace hiermem {
namespace {

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.at(1, 2), 1.5);
}

TEST(Tensor, GradBufferMatchesShape) {
  Tensor t({3, 2});
  EXPECT_FALSE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.numel());
  t.grad()[0] = 2.0;
  t.zero_grad();
  EXPECT_EQ(t.grad()[0], 0.0);
}

TEST(Tensor, SerializationLayoutIsRankExtentsData) {
  Tensor t({2, 1}, std::vector<double>{1.0, -2.5});
  std::ostringstream os;
  write_tensor(os, t);
  const std::string bytes = os.str();
  ASSERT_EQ(bytes.size(), serialized_size(t));
  ASSERT_EQ(bytes.size(), 4u + 8u + 16u);
  EXPECT_EQ(static_cast<unsigned char>(bytes[0]), 2);  // rank, little-endian
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1);
  double v;
  std::memcpy(&v, bytes.data() + 20, 8);
  EXPECT_EQ(v, -2.5);
}

TEST(Tensor, RandomTensorsRoundTripBitExact) {
  std::mt19937_64 rng(7);
  std::uniform_int_distribution<std::size_t> ext(1, 4), rnk(1, 4);
  std::normal_distribution<double> val(0.0, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    Shape s(rnk(rng));
    for (auto& e : s) e = ext(rng);
    Tensor t(s);
    for (auto& v : t.storage()) v = val(rng);
    std::stringstream ss;
    write_tensor(ss, t);
    EXPECT_EQ(read_tensor(ss), t);
  }
}

TEST(Tensor, TruncatedBlobReportsOffset) {
  Tensor t({3}, std::vector<double>{1, 2, 3});
  std::ostringstream os;
  write_tensor(os, t);
  std::string bytes = os.str();
  bytes.resize(bytes.size() - 3);
  std::istringstream is(bytes);
  try {
    read_tensor(is);
    FAIL() << "expected IoError";
  } catch (const IoError& e) {
    EXPECT_GE(e.offset(), 8);
  }
}

}  // namespace
}  // namespace hiermem
