#include "hypograd/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hypograd;

// Known-answer vectors published with the Random123 reference implementation.
TEST(Philox, KnownAnswerZero) {
  const auto r = philox4x32_10({0, 0, 0, 0}, {0, 0});
  EXPECT_EQ(r[0], 0x6627e8d5u);
  EXPECT_EQ(r[1], 0xe169c58du);
  EXPECT_EQ(r[2], 0xbc57ac4cu);
  EXPECT_EQ(r[3], 0x9b00dbd8u);
}

TEST(Philox, KnownAnswerAllOnes) {
  const auto r = philox4x32_10({0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu},
                               {0xffffffffu, 0xffffffffu});
  EXPECT_EQ(r[0], 0x408f276du);
  EXPECT_EQ(r[1], 0x41c83b0eu);
  EXPECT_EQ(r[2], 0xa20bc7c6u);
  EXPECT_EQ(r[3], 0x6d5451fdu);
}

TEST(Philox, KnownAnswerPiDigits) {
  const auto r = philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u},
                               {0xa4093822u, 0x299f31d0u});
  EXPECT_EQ(r[0], 0xd16cfe09u);
  EXPECT_EQ(r[1], 0x94fdccebu);
  EXPECT_EQ(r[2], 0x5001e420u);
  EXPECT_EQ(r[3], 0x24126ea1u);
}

TEST(Uniform, NeverZeroNeverAboveOne) {
  EXPECT_GT(uniform_open_closed(0, 0), 0.0);
  EXPECT_EQ(uniform_open_closed(0xffffffffu, 0xffffffffu), 1.0);
}

TEST(NormalStream, ReproducibleAndStreamSeparated) {
  NormalStream a(42, 7), b(42, 7), c(42, 8), e(43, 7), f(42, 7, 1);
  for (int i = 0; i < 100; ++i) {
    const double va = a.next();
    EXPECT_EQ(va, b.next());
    const double vc = c.next(), ve = e.next(), vf = f.next();
    EXPECT_NE(va, vc);
    EXPECT_NE(va, ve);
    EXPECT_NE(va, vf);
  }
}

TEST(NormalStream, FirstFourMoments) {
  NormalStream g(2024, 0);
  const int n = 400000;
  double s1 = 0, s2 = 0, s3 = 0, s4 = 0;
  for (int i = 0; i < n; ++i) {
    const double z = g.next();
    s1 += z;
    s2 += z * z;
    s3 += z * z * z;
    s4 += z * z * z * z;
  }
  s1 /= n;
  s2 /= n;
  s3 /= n;
  s4 /= n;
  // Standard errors: 1/sqrt(n), sqrt(2/n), sqrt(15/n), sqrt(96/n).
  EXPECT_NEAR(s1, 0.0, 5 * std::sqrt(1.0 / n));
  EXPECT_NEAR(s2, 1.0, 5 * std::sqrt(2.0 / n));
  EXPECT_NEAR(s3, 0.0, 5 * std::sqrt(15.0 / n));
  EXPECT_NEAR(s4, 3.0, 5 * std::sqrt(96.0 / n));
}

TEST(NormalStream, LagOneCorrelationSmall) {
  NormalStream g(99, 3);
  const int n = 200000;
  double prev = g.next(), acc = 0;
  for (int i = 0; i < n; ++i) {
    const double z = g.next();
    acc += z * prev;
    prev = z;
  }
  EXPECT_NEAR(acc / n, 0.0, 5.0 / std::sqrt(n));
}
