#include <gtest/gtest.h>

#include <random>

#include "stag/numkit.hpp"

namespace stag {
namespace {

ComplexVector random_complex(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  ComplexVector v(n);
  for (auto& x : v) x = Complex(g(rng), g(rng));
  return v;
}

RealVector random_real(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  RealVector v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

// Direct O(d^2) evaluation of the circular convolution sum.
RealVector direct_convolve(const RealVector& a, const RealVector& b) {
  const std::size_t d = a.size();
  RealVector c(d, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t i = 0; i < d; ++i) c[j] += a[i] * b[(j + d - i) % d];
  return c;
}

TEST(Fft, ImpulseTransformsToOnes) {
  const auto out = fft({1, 0, 0, 0}, FftDirection::forward);
  for (const auto& x : out) {
    EXPECT_NEAR(x.real(), 1.0, 1e-15);
    EXPECT_NEAR(x.imag(), 0.0, 1e-15);
  }
}

TEST(Fft, ConstantTransformsToDc) {
  const auto out = fft({1, 1, 1, 1}, FftDirection::forward);
  EXPECT_NEAR(out[0].real(), 4.0, 1e-15);
  for (std::size_t i = 1; i < 4; ++i) EXPECT_NEAR(std::abs(out[i]), 0.0, 1e-15);
}

TEST(Fft, RoundTripRecoversInput) {
  std::mt19937_64 rng(11);
  for (std::size_t n : {1u, 2u, 16u, 512u}) {
    const auto v = random_complex(n, rng);
    const auto back = fft(fft(v, FftDirection::forward), FftDirection::inverse);
    for (std::size_t i = 0; i < n; ++i) EXPECT_LT(std::abs(back[i] - v[i]), 1e-10);
  }
}

TEST(Fft, RejectsNonPowerOfTwo) {
  EXPECT_THROW(fft(ComplexVector(6), FftDirection::forward), InvalidLength);
  EXPECT_THROW(fft(ComplexVector(), FftDirection::inverse), InvalidLength);
}

TEST(Fft, Linearity) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> coef(-10, 10);
  for (int trial = 0; trial < 20; ++trial) {
    const auto u = random_complex(32, rng), v = random_complex(32, rng);
    const double a = coef(rng), b = coef(rng);
    ComplexVector mix(32);
    for (std::size_t i = 0; i < 32; ++i) mix[i] = a * u[i] + b * v[i];
    const auto fu = fft(u, FftDirection::forward), fv = fft(v, FftDirection::forward);
    const auto fm = fft(mix, FftDirection::forward);
    for (std::size_t i = 0; i < 32; ++i) EXPECT_LT(std::abs(fm[i] - (a * fu[i] + b * fv[i])), 1e-9);
  }
}

TEST(Fft, Parseval) {
  std::mt19937_64 rng(6);
  for (std::size_t n : {8u, 64u, 256u}) {
    const auto v = random_complex(n, rng);
    const auto f = fft(v, FftDirection::forward);
    double time = 0.0, freq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      time += std::norm(v[i]);
      freq += std::norm(f[i]);
    }
    EXPECT_NEAR(time, freq / static_cast<double>(n), 1e-9 * time);
  }
}

TEST(CircularConvolve, DeltaIsIdentity) {
  const RealVector v{0.5, -2, 3, 7};
  const auto c = circular_convolve(RealVector{1, 0, 0, 0}, v);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(c[i], v[i], 1e-14);
}

TEST(CircularConvolve, HandEvaluatedPair) {
  const auto c = circular_convolve(RealVector{1, 1}, RealVector{1, 1});
  EXPECT_NEAR(c[0], 2.0, 1e-14);
  EXPECT_NEAR(c[1], 2.0, 1e-14);
}

TEST(CircularConvolve, MatchesDirectSummation) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_real(16, rng), b = random_real(16, rng);
    const auto fast = circular_convolve(a, b);
    const auto slow = direct_convolve(a, b);
    for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(fast[i], slow[i], 1e-8);
  }
}

TEST(CircularConvolve, Commutative) {
  std::mt19937_64 rng(3);
  const auto a = random_real(64, rng), b = random_real(64, rng);
  const auto ab = circular_convolve(a, b), ba = circular_convolve(b, a);
  for (std::size_t i = 0; i < 64; ++i) EXPECT_NEAR(ab[i], ba[i], 1e-10);
}

TEST(CircularConvolve, RejectsBadLengths) {
  EXPECT_THROW(circular_convolve(RealVector(4), RealVector(8)), InvalidLength);
  EXPECT_THROW(circular_convolve(RealVector(3), RealVector(3)), InvalidLength);
}

TEST(CircularCorrelate, IsAdjointOfConvolution) {
  std::mt19937_64 rng(8);
  const auto a = random_real(32, rng), b = random_real(32, rng), g = random_real(32, rng);
  // <g, a * b> == <corr(g, b), a>
  EXPECT_NEAR(dot(g, circular_convolve(a, b)), dot(circular_correlate(g, b), a), 1e-10);
}

TEST(SymmetricEigen, DiagonalizesRandomSymmetric) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> g;
  Matrix a(6, 6);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = a(j, i) = g(rng);
  const auto eig = symmetric_eigen(a);
  for (std::size_t k = 0; k < 6; ++k) {
    RealVector v(6);
    for (std::size_t r = 0; r < 6; ++r) v[r] = eig.vectors(r, k);
    const auto av = matvec(a, v);
    for (std::size_t r = 0; r < 6; ++r) EXPECT_NEAR(av[r], eig.values[k] * v[r], 1e-10);
    if (k > 0) EXPECT_GE(eig.values[k - 1], eig.values[k]);
  }
}

}  // namespace
}  // namespace stag
