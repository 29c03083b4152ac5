#include <cmath>
#include <set>

#include <gtest/gtest.h>

#include <ncadiff/ncadiff.hpp>

using namespace ncadiff;

TEST(Stream, SameKeysReplay) {
  Stream a(42, StreamTag::Fire, {1, 2, 3}), b(42, StreamTag::Fire, {1, 2, 3});
  for (int i = 0; i < 100; ++i)
    EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Stream, DistinctKeysDiverge) {
  std::set<std::uint64_t> first;
  for (std::uint64_t k = 0; k < 64; ++k)
    first.insert(Stream(42, StreamTag::Fire, {k}).next_u64());
  first.insert(Stream(42, StreamTag::Noise, {0}).next_u64());
  first.insert(Stream(43, StreamTag::Fire, {0}).next_u64());
  EXPECT_EQ(first.size(), 66u);
}

TEST(Stream, MatchesStandardEngine) {
  // The engine is std::mt19937_64; its 10000th output is fixed by the standard.
  std::mt19937_64 e;
  e.discard(9999);
  EXPECT_EQ(e(), 9981545732273789042ULL);
}

TEST(Stream, UniformMoments) {
  Stream s(1, StreamTag::Synthetic);
  const int n = 200000;
  double sum = 0, sq = 0;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    sq += u * u;
  }
  const double mean = sum / n, var = sq / n - mean * mean;
  EXPECT_NEAR(mean, 0.5, 4 * std::sqrt(1.0 / 12 / n));
  EXPECT_NEAR(var, 1.0 / 12, 2e-3);
}

TEST(Stream, NormalMoments) {
  Stream s(2, StreamTag::Noise);
  const int n = 200000;
  double sum = 0, sq = 0, quart = 0;
  for (int i = 0; i < n; ++i) {
    const double z = s.normal();
    sum += z;
    sq += z * z;
    quart += z * z * z * z;
  }
  EXPECT_NEAR(sum / n, 0.0, 4 / std::sqrt(n));
  EXPECT_NEAR(sq / n, 1.0, 4 * std::sqrt(2.0 / n));
  EXPECT_NEAR(quart / n, 3.0, 0.1);
}

TEST(Stream, IntegerCoversRangeUniformly) {
  Stream s(3, StreamTag::Timestep);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto v = s.integer(1, 7);
    ASSERT_GE(v, 1);
    ASSERT_LE(v, 7);
    ++hist[static_cast<std::size_t>(v - 1)];
  }
  for (int h : hist)
    EXPECT_NEAR(h, 10000, 4 * std::sqrt(10000.0 * 6 / 7));
}

TEST(Tensor4, IndexingIsNchw) {
  Tensor4<float> t(2, 3, 4, 5);
  t(1, 2, 3, 4) = 7.0f;
  EXPECT_EQ(t.storage().back(), 7.0f);
  t(0, 1, 0, 0) = 1.0f;
  EXPECT_EQ(t.storage()[20], 1.0f);
  EXPECT_EQ(t.plane(), 20u);
}

TEST(Tensor4, SliceAndAssignChannels) {
  Tensor4<double> t(1, 4, 2, 2);
  for (std::size_t i = 0; i < t.size(); ++i)
    t.storage()[i] = static_cast<double>(i);
  const auto s = slice_channels(t, 1, 2);
  EXPECT_EQ(s.channels(), 2);
  EXPECT_EQ(s(0, 0, 0, 0), 4.0);
  EXPECT_EQ(s(0, 1, 1, 1), 11.0);
  Tensor4<double> z(1, 4, 2, 2);
  assign_channels(z, 2, s);
  EXPECT_EQ(z(0, 2, 0, 0), 4.0);
  EXPECT_EQ(z(0, 0, 0, 0), 0.0);
  EXPECT_THROW(slice_channels(t, 3, 2), ConfigError);
}

TEST(Tensor4, NegativeExtentRejected) { EXPECT_THROW(Tensor4<float>(1, -1, 2, 2), ConfigError); }
