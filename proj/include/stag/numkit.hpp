#pragma once

// Dense numeric kernels shared by the pooling and temporal layers: vector
// helpers, a small row-major matrix, radix-2 FFT, circular convolution and a
// cyclic Jacobi eigensolver for symmetric matrices.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <deque>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stag/errors.hpp"

namespace stag {

using RealVector = std::vector<double>;
using Complex = std::complex<double>;
using ComplexVector = std::vector<Complex>;

enum class FftDirection { forward, inverse };

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

inline void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw InvalidLength(std::string(what) + ": length " + std::to_string(a) +
                        " does not match " + std::to_string(b));
  }
}

// ---------------------------------------------------------------------------
// Vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// y += alpha * x
inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
  require_same_length(x.size(), y.size(), "axpy");
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------------------
// Matrix

/// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  bool operator==(const Matrix&) const = default;
};

/// out = A x
inline RealVector matvec(const Matrix& a, std::span<const double> x) {
  require_same_length(a.cols, x.size(), "matvec");
  RealVector out(a.rows, 0.0);
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double* row = a.data.data() + r * a.cols;
    double s = 0.0;
    for (std::size_t c = 0; c < a.cols; ++c) s += row[c] * x[c];
    out[r] = s;
  }
  return out;
}

/// out += A^T g
inline void matvec_transposed_acc(const Matrix& a, std::span<const double> g, std::span<double> out) {
  require_same_length(a.rows, g.size(), "matvec_transposed");
  require_same_length(a.cols, out.size(), "matvec_transposed");
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double gr = g[r];
    if (gr == 0.0) continue;
    const double* row = a.data.data() + r * a.cols;
    for (std::size_t c = 0; c < a.cols; ++c) out[c] += gr * row[c];
  }
}

/// A += u v^T
inline void outer_acc(std::span<const double> u, std::span<const double> v, Matrix& a) {
  require_same_length(a.rows, u.size(), "outer_acc");
  require_same_length(a.cols, v.size(), "outer_acc");
  for (std::size_t r = 0; r < a.rows; ++r) {
    const double ur = u[r];
    if (ur == 0.0) continue;
    double* row = a.data.data() + r * a.cols;
    for (std::size_t c = 0; c < a.cols; ++c) row[c] += ur * v[c];
  }
}

/// Read-only view of N feature vectors of length `dim` stored back to back.
struct FeatureView {
  std::span<const double> data;
  std::size_t dim = 0;

  FeatureView() = default;
  FeatureView(std::span<const double> d, std::size_t n_dim) : data(d), dim(n_dim) {
    if (dim == 0 || data.size() % dim != 0) {
      throw InvalidLength("feature block of " + std::to_string(data.size()) +
                          " values is not a whole number of " + std::to_string(dim) + "-vectors");
    }
  }
  FeatureView(const Matrix& m) : FeatureView(std::span<const double>(m.data), m.cols) {}  // NOLINT

  std::size_t size() const { return dim == 0 ? 0 : data.size() / dim; }
  bool empty() const { return size() == 0; }
  std::span<const double> operator[](std::size_t i) const { return data.subspan(i * dim, dim); }
};

// ---------------------------------------------------------------------------
// FFT

namespace detail {

inline RealVector normal_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  RealVector v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

/// Plain complex product; std::complex's operator* takes the slow
/// Annex G path for inf/nan handling.
inline Complex cmul(Complex a, Complex b) {
  return Complex(a.real() * b.real() - a.imag() * b.imag(), a.real() * b.imag() + a.imag() * b.real());
}

/// exp(-2*pi*i*k/n) for k < n/2, cached per transform length.
inline const ComplexVector& twiddles(std::size_t n) {
  thread_local std::deque<std::pair<std::size_t, ComplexVector>> cache;
  for (const auto& [len, table] : cache) {
    if (len == n) return table;
  }
  ComplexVector table(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    table[k] = Complex(std::cos(angle), std::sin(angle));
  }
  cache.emplace_back(n, std::move(table));
  return cache.back().second;
}

}  // namespace detail

/// In-place iterative radix-2 Cooley-Tukey transform. The inverse includes the
/// 1/n scaling.
inline void fft_inplace(std::span<Complex> v, FftDirection direction) {
  const std::size_t n = v.size();
  if (!is_power_of_two(n)) {
    throw InvalidLength("fft: length " + std::to_string(n) + " is not a power of two");
  }
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(v[i], v[j]);
  }
  const ComplexVector& table = detail::twiddles(n);
  const bool inverse = direction == FftDirection::inverse;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    const std::size_t stride = n / len;
    for (std::size_t k = 0; k < half; ++k) {
      const Complex w = inverse ? std::conj(table[k * stride]) : table[k * stride];
      for (std::size_t i = k; i < n; i += len) {
        const Complex u = v[i];
        const Complex t = detail::cmul(w, v[i + half]);
        v[i] = u + t;
        v[i + half] = u - t;
      }
    }
  }
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(n);
    for (auto& x : v) x *= scale;
  }
}

inline ComplexVector fft(ComplexVector v, FftDirection direction) {
  fft_inplace(v, direction);
  return v;
}

inline ComplexVector fft_real(std::span<const double> v) {
  return fft(ComplexVector(v.begin(), v.end()), FftDirection::forward);
}

/// Real part of the inverse transform.
inline RealVector ifft_real(ComplexVector spectrum) {
  const ComplexVector t = fft(std::move(spectrum), FftDirection::inverse);
  RealVector out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t[i].real();
  return out;
}

/// c[j] = sum_i a[i] * b[(j - i) mod d], computed in the Fourier domain.
inline RealVector circular_convolve(std::span<const double> a, std::span<const double> b) {
  require_same_length(a.size(), b.size(), "circular_convolve");
  if (!is_power_of_two(a.size())) {
    throw InvalidLength("circular_convolve: length " + std::to_string(a.size()) +
                        " is not a power of two");
  }
  ComplexVector fa = fft_real(a);
  const ComplexVector fb = fft_real(b);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] = detail::cmul(fa[i], fb[i]);
  return ifft_real(std::move(fa));
}

/// r[i] = sum_j g[j] * b[(j - i) mod d]; the adjoint of convolution with b.
inline RealVector circular_correlate(std::span<const double> g, std::span<const double> b) {
  require_same_length(g.size(), b.size(), "circular_correlate");
  if (!is_power_of_two(g.size())) {
    throw InvalidLength("circular_correlate: length " + std::to_string(g.size()) +
                        " is not a power of two");
  }
  ComplexVector fg = fft_real(g);
  const ComplexVector fb = fft_real(b);
  for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = detail::cmul(fg[i], std::conj(fb[i]));
  return ifft_real(std::move(fg));
}

// ---------------------------------------------------------------------------
// Symmetric eigensolver

struct SymmetricEigen {
  RealVector values;  // non-increasing
  Matrix vectors;     // column k is the eigenvector of values[k]
};

/// Cyclic Jacobi rotations; adequate for the few-hundred-dimensional
/// covariance matrices PCA sees here.
inline SymmetricEigen symmetric_eigen(Matrix a, double tol = 1e-14, int max_sweeps = 100) {
  require_same_length(a.rows, a.cols, "symmetric_eigen");
  const std::size_t n = a.rows;
  Matrix v = Matrix::identity(n);
  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        total += a(i, j) * a(i, j);
        if (i != j) off += a(i, j) * a(i, j);
      }
    }
    if (off <= tol * tol * std::max(total, 1e-300)) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });
  SymmetricEigen out{RealVector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = a(order[k], order[k]);
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, k) = v(r, order[k]);
  }
  return out;
}

}  // namespace stag
