#pragma once

// Set-of-features -> vector poolers (count sketch, compact bilinear pooling,
// NetVLAD), PCA, and the power / L2 normalizers, each with its reverse-mode
// gradient.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stag/errors.hpp"
#include "stag/numkit.hpp"

namespace stag {

// ---------------------------------------------------------------------------
// Count sketch / compact bilinear pooling

struct SketchParams {
  std::size_t input_dim = 0;
  std::size_t sketch_dim = 0;
  std::uint64_t seed = 0;
  std::vector<std::uint32_t> h1, h2;
  std::vector<double> s1, s2;

  /// Draws both hash/sign pairs from a generator seeded with `seed`. The same
  /// (input_dim, sketch_dim, seed) always yields the same maps.
  static SketchParams make(std::size_t input_dim, std::size_t sketch_dim, std::uint64_t seed) {
    if (input_dim == 0) throw InvalidLength("sketch input dimension must be positive");
    if (!is_power_of_two(sketch_dim)) {
      throw InvalidLength("sketch dimension " + std::to_string(sketch_dim) + " is not a power of two");
    }
    SketchParams p;
    p.input_dim = input_dim;
    p.sketch_dim = sketch_dim;
    p.seed = seed;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<std::uint32_t> index(0, static_cast<std::uint32_t>(sketch_dim - 1));
    std::bernoulli_distribution coin(0.5);
    auto draw = [&](std::vector<std::uint32_t>& h, std::vector<double>& s) {
      h.resize(input_dim);
      s.resize(input_dim);
      for (std::size_t i = 0; i < input_dim; ++i) {
        h[i] = index(rng);
        s[i] = coin(rng) ? 1.0 : -1.0;
      }
    };
    draw(p.h1, p.s1);
    draw(p.h2, p.s2);
    return p;
  }
};

/// out[j] = sum over i with h[i] == j of s[i] * x[i]
inline RealVector count_sketch(std::span<const double> x, std::span<const std::uint32_t> h,
                               std::span<const double> s, std::size_t d) {
  require_same_length(x.size(), h.size(), "count_sketch hash map");
  require_same_length(x.size(), s.size(), "count_sketch sign map");
  RealVector out(d, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (h[i] >= d) throw InvalidLength("count_sketch: hash index out of range");
    out[h[i]] += s[i] * x[i];
  }
  return out;
}

/// Adjoint of count_sketch: out[i] = s[i] * g[h[i]].
inline RealVector count_sketch_adjoint(std::span<const double> g, std::span<const std::uint32_t> h,
                                       std::span<const double> s) {
  require_same_length(h.size(), s.size(), "count_sketch_adjoint");
  RealVector out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = s[i] * g[h[i]];
  return out;
}

namespace detail {

inline void check_cbp_input(FeatureView features, const SketchParams& params) {
  if (features.empty()) throw EmptyInput("cbp_pool needs at least one feature");
  require_same_length(features.dim, params.input_dim, "cbp_pool feature dimension");
}

/// Spectra of the two count sketches of x, obtained from one complex FFT of
/// p + i q.
inline void sketch_spectra(std::span<const double> x, const SketchParams& params, ComplexVector& work,
                           ComplexVector& fp, ComplexVector& fq) {
  const std::size_t d = params.sketch_dim;
  work.assign(d, Complex(0.0, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    work[params.h1[i]] += Complex(params.s1[i] * x[i], 0.0);
    work[params.h2[i]] += Complex(0.0, params.s2[i] * x[i]);
  }
  fft_inplace(work, FftDirection::forward);
  fp.resize(d);
  fq.resize(d);
  for (std::size_t k = 0; k < d; ++k) {
    const Complex z = work[k];
    const Complex zc = std::conj(work[(d - k) % d]);
    fp[k] = 0.5 * (z + zc);
    const Complex diff = z - zc;
    fq[k] = Complex(0.5 * diff.imag(), -0.5 * diff.real());
  }
}

}  // namespace detail

/// Tensor-sketch estimate of the summed self outer product of the features:
/// sum_n conv(count_sketch(x_n; h1, s1), count_sketch(x_n; h2, s2)).
inline RealVector cbp_pool(FeatureView features, const SketchParams& params) {
  detail::check_cbp_input(features, params);
  const std::size_t d = params.sketch_dim;
  ComplexVector acc(d, Complex(0.0, 0.0)), work, fp, fq;
  for (std::size_t n = 0; n < features.size(); ++n) {
    detail::sketch_spectra(features[n], params, work, fp, fq);
    for (std::size_t k = 0; k < d; ++k) acc[k] += detail::cmul(fp[k], fq[k]);
  }
  return ifft_real(std::move(acc));
}

/// Gradient of <grad_out, cbp_pool(features)> with respect to every feature;
/// row n of the result matches features[n].
inline Matrix cbp_backward(FeatureView features, const SketchParams& params, std::span<const double> grad_out) {
  detail::check_cbp_input(features, params);
  const std::size_t d = params.sketch_dim;
  require_same_length(grad_out.size(), d, "cbp_backward gradient");
  const ComplexVector g = fft_real(grad_out);
  Matrix out(features.size(), features.dim);
  ComplexVector work, fp, fq, both(d);
  for (std::size_t n = 0; n < features.size(); ++n) {
    detail::sketch_spectra(features[n], params, work, fp, fq);
    // Real part carries corr(g, q) (gradient w.r.t. the first sketch),
    // imaginary part corr(g, p).
    for (std::size_t k = 0; k < d; ++k) {
      const Complex a = detail::cmul(g[k], std::conj(fq[k]));
      const Complex b = detail::cmul(g[k], std::conj(fp[k]));
      both[k] = Complex(a.real() - b.imag(), a.imag() + b.real());
    }
    fft_inplace(both, FftDirection::inverse);
    auto row = out.row(n);
    for (std::size_t i = 0; i < features.dim; ++i) {
      row[i] = params.s1[i] * both[params.h1[i]].real() + params.s2[i] * both[params.h2[i]].imag();
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalizers

/// Signed power: sign(x) * |x|^sigma, elementwise.
inline RealVector power_normalize(std::span<const double> x, double sigma) {
  RealVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = std::abs(x[i]);
    out[i] = a == 0.0 ? 0.0 : std::copysign(std::pow(a, sigma), x[i]);
  }
  return out;
}

/// Undefined at 0 for sigma < 1; the gradient there is reported as 0.
inline RealVector power_normalize_backward(std::span<const double> x, double sigma, std::span<const double> grad_out) {
  require_same_length(x.size(), grad_out.size(), "power_normalize_backward");
  RealVector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double a = std::abs(x[i]);
    out[i] = a == 0.0 ? 0.0 : grad_out[i] * sigma * std::pow(a, sigma - 1.0);
  }
  return out;
}

inline constexpr double kL2Floor = 1e-12;

/// x / ||x||; vectors with norm at or below 1e-12 pass through unchanged.
inline RealVector l2_normalize(std::span<const double> x) {
  const double n = norm2(x);
  RealVector out(x.begin(), x.end());
  if (n > kL2Floor) {
    for (auto& v : out) v /= n;
  }
  return out;
}

inline RealVector l2_normalize_backward(std::span<const double> x, std::span<const double> grad_out) {
  require_same_length(x.size(), grad_out.size(), "l2_normalize_backward");
  const double n = norm2(x);
  RealVector out(grad_out.begin(), grad_out.end());
  if (n <= kL2Floor) return out;
  double proj = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) proj += x[i] * grad_out[i];
  proj /= n * n;
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (grad_out[i] - x[i] * proj) / n;
  return out;
}

// ---------------------------------------------------------------------------
// NetVLAD

struct NetVladParams {
  Matrix centers;   // C x D
  Matrix assign_w;  // C x D
  RealVector assign_b;

  std::size_t clusters() const { return centers.rows; }
  std::size_t dim() const { return centers.cols; }
  std::size_t output_dim() const { return centers.rows * centers.cols; }

  /// Soft assignment derived from the centers: w_c = 2*alpha*mu_c,
  /// b_c = -alpha*||mu_c||^2, which reduces to a scaled nearest-center rule.
  static NetVladParams from_centers(Matrix centers, double alpha) {
    NetVladParams p;
    p.assign_w = Matrix(centers.rows, centers.cols);
    p.assign_b.assign(centers.rows, 0.0);
    for (std::size_t c = 0; c < centers.rows; ++c) {
      const auto mu = centers.row(c);
      for (std::size_t i = 0; i < centers.cols; ++i) p.assign_w(c, i) = 2.0 * alpha * mu[i];
      p.assign_b[c] = -alpha * dot(mu, mu);
    }
    p.centers = std::move(centers);
    return p;
  }
};

struct NetVladGrads {
  Matrix features;
  Matrix centers;
  Matrix assign_w;
  RealVector assign_b;
};

/// Lloyd's algorithm from `clusters` distinct seeded samples. Empty clusters
/// keep their previous center.
inline Matrix kmeans(FeatureView samples, std::size_t clusters, std::uint64_t seed, int iterations = 20) {
  if (clusters == 0) throw InvalidConfig("kmeans needs at least one cluster");
  if (samples.size() < clusters) {
    throw EmptyInput("kmeans: " + std::to_string(samples.size()) + " samples for " +
                     std::to_string(clusters) + " clusters");
  }
  const std::size_t n = samples.size(), dim = samples.dim;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < clusters; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  Matrix centers(clusters, dim);
  for (std::size_t c = 0; c < clusters; ++c) {
    const auto s = samples[idx[c]];
    std::copy(s.begin(), s.end(), centers.row(c).begin());
  }
  std::vector<std::size_t> assign(n, 0);
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < clusters; ++c) {
        double dist = 0.0;
        const auto mu = centers.row(c);
        const auto x = samples[i];
        for (std::size_t k = 0; k < dim; ++k) dist += (x[k] - mu[k]) * (x[k] - mu[k]);
        if (dist < best) {
          best = dist;
          assign[i] = c;
        }
      }
    }
    Matrix sums(clusters, dim);
    std::vector<std::size_t> counts(clusters, 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, samples[i], sums.row(assign[i]));
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < clusters; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t k = 0; k < dim; ++k) centers(c, k) = sums(c, k) / static_cast<double>(counts[c]);
    }
  }
  return centers;
}

namespace detail {

struct NetVladForward {
  Matrix assign;   // N x C soft assignments
  Matrix vlad;     // C x D raw residual sums
  RealVector intra;  // concatenated intra-normalized blocks
  RealVector out;
};

inline NetVladForward netvlad_forward(FeatureView features, const NetVladParams& params) {
  if (features.empty()) throw EmptyInput("netvlad_pool needs at least one feature");
  require_same_length(features.dim, params.dim(), "netvlad_pool feature dimension");
  const std::size_t n = features.size(), nc = params.clusters(), dim = params.dim();
  NetVladForward f{Matrix(n, nc), Matrix(nc, dim), RealVector(nc * dim), {}};
  RealVector logits(nc);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = features[i];
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < nc; ++c) {
      logits[c] = dot(params.assign_w.row(c), x) + params.assign_b[c];
      top = std::max(top, logits[c]);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < nc; ++c) z += std::exp(logits[c] - top);
    for (std::size_t c = 0; c < nc; ++c) {
      const double a = std::exp(logits[c] - top) / z;
      f.assign(i, c) = a;
      auto v = f.vlad.row(c);
      const auto mu = params.centers.row(c);
      for (std::size_t k = 0; k < dim; ++k) v[k] += a * (x[k] - mu[k]);
    }
  }
  for (std::size_t c = 0; c < nc; ++c) {
    const RealVector block = l2_normalize(f.vlad.row(c));
    std::copy(block.begin(), block.end(), f.intra.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }
  f.out = l2_normalize(f.intra);
  return f;
}

}  // namespace detail

/// Soft-assignment VLAD: per-cluster residual sums, intra-normalized per block,
/// then L2-normalized as a whole. Output length clusters * dim.
inline RealVector netvlad_pool(FeatureView features, const NetVladParams& params) {
  return detail::netvlad_forward(features, params).out;
}

inline NetVladGrads netvlad_backward(FeatureView features, const NetVladParams& params,
                                     std::span<const double> grad_out) {
  const auto f = detail::netvlad_forward(features, params);
  require_same_length(grad_out.size(), params.output_dim(), "netvlad_backward gradient");
  const std::size_t n = features.size(), nc = params.clusters(), dim = params.dim();
  NetVladGrads g{Matrix(n, dim), Matrix(nc, dim), Matrix(nc, dim), RealVector(nc, 0.0)};

  const RealVector d_intra = l2_normalize_backward(f.intra, grad_out);
  Matrix d_vlad(nc, dim);
  for (std::size_t c = 0; c < nc; ++c) {
    const RealVector block = l2_normalize_backward(
        f.vlad.row(c), std::span<const double>(d_intra).subspan(c * dim, dim));
    std::copy(block.begin(), block.end(), d_vlad.row(c).begin());
  }

  RealVector d_assign(nc);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = features[i];
    auto dx = g.features.row(i);
    double weighted = 0.0;
    for (std::size_t c = 0; c < nc; ++c) {
      const double a = f.assign(i, c);
      const auto dv = d_vlad.row(c);
      const auto mu = params.centers.row(c);
      double da = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        da += dv[k] * (x[k] - mu[k]);
        dx[k] += a * dv[k];
        g.centers(c, k) -= a * dv[k];
      }
      d_assign[c] = da;
      weighted += a * da;
    }
    for (std::size_t c = 0; c < nc; ++c) {
      const double dz = f.assign(i, c) * (d_assign[c] - weighted);
      if (dz == 0.0) continue;
      g.assign_b[c] += dz;
      axpy(dz, x, g.assign_w.row(c));
      axpy(dz, params.assign_w.row(c), dx);
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
  RealVector mean;
  Matrix basis;  // D x r, orthonormal columns
  RealVector explained_variance;

  std::size_t input_dim() const { return basis.rows; }
  std::size_t reduced_dim() const { return basis.cols; }
};

/// Mean and top-r covariance eigenvectors of the samples, ordered by
/// non-increasing variance. Each column's sign is fixed so that its largest
/// component is positive.
inline PcaModel pca_fit(FeatureView samples, std::size_t r) {
  const std::size_t dim = samples.dim, n = samples.size();
  if (r == 0 || r > dim) {
    throw InvalidReduction("cannot reduce " + std::to_string(dim) + " dimensions to " + std::to_string(r));
  }
  if (n < r + 1) {
    throw InvalidReduction("need at least " + std::to_string(r + 1) + " samples, got " + std::to_string(n));
  }
  PcaModel model;
  model.mean.assign(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0, samples[i], model.mean);
  for (auto& m : model.mean) m /= static_cast<double>(n);

  Matrix cov(dim, dim);
  RealVector centered(dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = samples[i];
    for (std::size_t k = 0; k < dim; ++k) centered[k] = x[k] - model.mean[k];
    outer_acc(centered, centered, cov);
  }
  for (auto& v : cov.data) v /= static_cast<double>(n - 1);

  const SymmetricEigen eig = symmetric_eigen(std::move(cov));
  model.basis = Matrix(dim, r);
  model.explained_variance.assign(eig.values.begin(), eig.values.begin() + static_cast<std::ptrdiff_t>(r));
  for (std::size_t k = 0; k < r; ++k) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < dim; ++i) {
      if (std::abs(eig.vectors(i, k)) > std::abs(eig.vectors(arg, k))) arg = i;
    }
    const double sign = eig.vectors(arg, k) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < dim; ++i) model.basis(i, k) = sign * eig.vectors(i, k);
  }
  return model;
}

/// basis^T (x - mean)
inline RealVector pca_transform(std::span<const double> x, const PcaModel& model) {
  require_same_length(x.size(), model.input_dim(), "pca_transform");
  const std::size_t dim = model.input_dim(), r = model.reduced_dim();
  RealVector out(r, 0.0);
  for (std::size_t i = 0; i < dim; ++i) {
    const double c = x[i] - model.mean[i];
    if (c == 0.0) continue;
    const auto row = model.basis.row(i);
    for (std::size_t k = 0; k < r; ++k) out[k] += c * row[k];
  }
  return out;
}

/// Applies pca_transform to every feature of the set.
inline Matrix pca_transform_set(FeatureView features, const PcaModel& model) {
  Matrix out(features.size(), model.reduced_dim());
  for (std::size_t n = 0; n < features.size(); ++n) {
    const RealVector y = pca_transform(features[n], model);
    std::copy(y.begin(), y.end(), out.row(n).begin());
  }
  return out;
}

/// mean + basis y
inline RealVector pca_reconstruct(std::span<const double> y, const PcaModel& model) {
  require_same_length(y.size(), model.reduced_dim(), "pca_reconstruct");
  RealVector out = model.mean;
  for (std::size_t i = 0; i < model.input_dim(); ++i) out[i] += dot(model.basis.row(i), y);
  return out;
}

}  // namespace stag
