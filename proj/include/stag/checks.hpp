#pragma once

// Finite-difference suite over every hand-written backward pass, on small
// random instances. Shared by the `gradcheck` command and the tests.

#include <algorithm>
#include <chrono>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "stag/gradcheck.hpp"
#include "stag/optim.hpp"
#include "stag/pipeline.hpp"
#include "stag/pooling.hpp"
#include "stag/temporal.hpp"

namespace stag {

struct ComponentCheck {
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  double seconds = 0.0;
  bool passed = true;
  std::string error;  // set when a check threw
};

struct GradSuiteOptions {
  std::size_t instances = 20;
  std::uint64_t seed = 1;
  double tolerance = 1e-4;
  /// Test hook: perturbs the analytic gradient of the named component.
  std::string corrupt;
};

inline const std::vector<std::string>& gradient_components() {
  static const std::vector<std::string> names{"cbp", "power_norm", "l2_norm", "netvlad", "rnn_vanilla", "rnn_lstm",
                                              "composed"};
  return names;
}

namespace detail {

inline Matrix normal_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  m.data = normal_vector(rows * cols, rng, scale);
  return m;
}

inline void append(RealVector& out, std::span<const double> v) { out.insert(out.end(), v.begin(), v.end()); }

// Each instance is a scalar loss r . f(x) with a random cotangent r.
using InstanceFn = std::function<DifferentiableFn(std::mt19937_64&, RealVector&)>;

inline InstanceFn cbp_instance() {
  return [](std::mt19937_64& rng, RealVector& x0) -> DifferentiableFn {
    std::uniform_int_distribution<std::size_t> dim(1, 8), count(1, 5);
    const std::size_t d = dim(rng), n = count(rng);
    const std::size_t ds = std::size_t{1} << std::uniform_int_distribution<int>(0, 4)(rng);
    const auto p = SketchParams::make(d, ds, rng());
    const RealVector r = normal_vector(ds, rng);
    x0 = normal_vector(n * d, rng);
    return [=](std::span<const double> x) {
      const FeatureView f(x, d);
      return ValueAndGrad{dot(r, cbp_pool(f, p)), cbp_backward(f, p, r).data};
    };
  };
}

inline InstanceFn power_norm_instance() {
  return [](std::mt19937_64& rng, RealVector& x0) -> DifferentiableFn {
    // |x| > 1e-3, away from the kink at zero
    std::uniform_real_distribution<double> mag(2e-3, 3.0);
    std::bernoulli_distribution neg(0.5);
    x0.resize(10);
    for (auto& v : x0) v = (neg(rng) ? -1.0 : 1.0) * mag(rng);
    const RealVector r = normal_vector(10, rng);
    return [=](std::span<const double> x) {
      return ValueAndGrad{dot(r, power_normalize(x, 0.5)), power_normalize_backward(x, 0.5, r)};
    };
  };
}

inline InstanceFn l2_norm_instance() {
  return [](std::mt19937_64& rng, RealVector& x0) -> DifferentiableFn {
    const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
    x0 = normal_vector(n, rng);
    const RealVector r = normal_vector(n, rng);
    return [=](std::span<const double> x) {
      return ValueAndGrad{dot(r, l2_normalize(x)), l2_normalize_backward(x, r)};
    };
  };
}

inline InstanceFn netvlad_instance() {
  return [](std::mt19937_64& rng, RealVector& x0) -> DifferentiableFn {
    // two or more features: with one, the assignment gradient is exactly zero
    std::uniform_int_distribution<std::size_t> dim(1, 8), clusters(1, 4), count(2, 6);
    const std::size_t d = dim(rng), c = clusters(rng), n = count(rng);
    NetVladParams base;
    base.centers = normal_matrix(c, d, rng);
    base.assign_w = normal_matrix(c, d, rng, 0.5);
    base.assign_b = normal_vector(c, rng, 0.5);
    const RealVector r = normal_vector(c * d, rng);
    x0 = normal_vector(n * d, rng);
    append(x0, base.centers.data);
    append(x0, base.assign_w.data);
    append(x0, base.assign_b);
    return [=](std::span<const double> x) {
      NetVladParams p = base;
      std::size_t off = n * d;
      std::copy_n(x.begin() + off, c * d, p.centers.data.begin());
      off += c * d;
      std::copy_n(x.begin() + off, c * d, p.assign_w.data.begin());
      off += c * d;
      std::copy_n(x.begin() + off, c, p.assign_b.begin());
      const FeatureView f(x.first(n * d), d);
      const auto g = netvlad_backward(f, p, r);
      ValueAndGrad vg{dot(r, netvlad_pool(f, p)), g.features.data};
      append(vg.grad, g.centers.data);
      append(vg.grad, g.assign_w.data);
      append(vg.grad, g.assign_b);
      return vg;
    };
  };
}

inline InstanceFn rnn_instance(CellType cell) {
  return [cell](std::mt19937_64& rng, RealVector& x0) -> DifferentiableFn {
    std::uniform_int_distribution<std::size_t> small(1, 8);
    const std::size_t d = small(rng), h = small(rng), steps = small(rng);
    // The training initializer; heavier weights saturate tanh and leave
    // gradients (~1e-9) below what central differences can resolve.
    RnnParams base = RnnParams::init(cell, d, h, rng());
    base.bias = normal_vector(base.bias.size(), rng, 0.3);
    const RealVector r = normal_vector(h, rng);
    x0 = base.w_in.data;
    append(x0, base.w_rec.data);
    append(x0, base.bias);
    append(x0, normal_vector(steps * d, rng));
    return [=](std::span<const double> x) {
      RnnParams p = base;
      std::size_t off = 0;
      for (auto* v : {&p.w_in.data, &p.w_rec.data, &p.bias}) {
        std::copy_n(x.begin() + off, v->size(), v->begin());
        off += v->size();
      }
      const auto f = rnn_forward(FeatureView(x.subspan(off), d), p);
      const auto g = rnn_backward(f.tape, p, r);
      ValueAndGrad vg{dot(r, f.output), g.w_in.data};
      append(vg.grad, g.w_rec.data);
      append(vg.grad, g.bias);
      append(vg.grad, g.inputs.data);
      return vg;
    };
  };
}

// BCE over a small batch through every trainable pipeline shape, with the
// parameters perturbed away from their initialization.
inline InstanceFn composed_instance() {
  return [](std::mt19937_64& rng, RealVector& x0) -> DifferentiableFn {
    static const char* const kPresets[] = {"cbp+rnn+cbp", "rnn+cbp", "cbp+rnn+netvlad", "netvlad"};
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, 4)(rng);
    PipelineConfig c = PipelineConfig::preset(kPresets[pick % 4]);
    if (pick == 4) c.cell = CellType::lstm;
    c.grid_dim = 16;
    c.hidden_dim = 4;
    c.video_dim = 8;
    c.netvlad_clusters = c.passes_features_through() ? 2 : 3;
    c.grids_per_interval = 3;
    c.stride = 2;
    c.seed = rng();
    std::vector<LocalFeatureSequence> videos;
    for (std::size_t i = 0; i < 4; ++i) {
      auto s = LocalFeatureSequence::zeros(20, 3, 6);
      s.video_id = "v" + std::to_string(i);
      s.values = normal_vector(s.values.size(), rng);
      s.label = i % 2 ? Label::fake : Label::real;
      videos.push_back(std::move(s));
    }
    const auto model = initialize_model(c, 6, videos);
    auto obj = std::make_shared<AggregatorObjective>(model, videos);
    std::vector<AggregatorSample> batch;
    std::uniform_int_distribution<std::size_t> pv(0, 3);
    for (int b = 0; b < 3; ++b) {
      AggregatorSample s{pv(rng), {}};
      const auto& st = obj->feasible_starts(s.video);
      std::uniform_int_distribution<std::size_t> ps(0, st.size() - 1);
      for (std::size_t k = 0; k < (obj->uses_bags() ? 3u : 1u); ++k) s.starts.push_back(st[ps(rng)]);
      batch.push_back(std::move(s));
    }
    x0 = obj->initial_parameters();
    std::normal_distribution<double> g(0.0, 0.3);
    for (auto& v : x0) v += g(rng);
    return [obj, batch](std::span<const double> p) { return obj->evaluate(p, batch); };
  };
}

inline InstanceFn instance_for(const std::string& name) {
  if (name == "cbp") return cbp_instance();
  if (name == "power_norm") return power_norm_instance();
  if (name == "l2_norm") return l2_norm_instance();
  if (name == "netvlad") return netvlad_instance();
  if (name == "rnn_vanilla") return rnn_instance(CellType::vanilla);
  if (name == "rnn_lstm") return rnn_instance(CellType::lstm);
  if (name == "composed") return composed_instance();
  throw InvalidConfig("unknown gradient component '" + name + "'");
}

}  // namespace detail

inline ComponentCheck check_component(const std::string& name, const GradSuiteOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  ComponentCheck out;
  out.name = name;
  const auto make = detail::instance_for(name);
  const auto& names = gradient_components();
  const auto pos = std::find(names.begin(), names.end(), name);
  std::mt19937_64 rng(derive_seed(opts.seed, static_cast<std::uint64_t>(pos - names.begin())));
  try {
    for (std::size_t i = 0; i < opts.instances; ++i) {
      RealVector x0;
      DifferentiableFn fn = make(rng, x0);
      if (opts.corrupt == name) {
        fn = [inner = std::move(fn)](std::span<const double> x) {
          ValueAndGrad vg = inner(x);
          if (!vg.grad.empty()) vg.grad[0] += 1e-2 * std::abs(vg.grad[0]) + 1e-3;
          return vg;
        };
      }
      out.max_rel_error = std::max(out.max_rel_error, grad_check(fn, x0).max_rel_error);
      ++out.instances;
    }
    out.passed = out.max_rel_error < opts.tolerance;
  } catch (const Error& e) {
    out.passed = false;
    out.error = e.what();
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

inline std::vector<ComponentCheck> run_gradient_suite(const GradSuiteOptions& opts = {}) {
  if (!opts.corrupt.empty()) {
    const auto& names = gradient_components();
    if (std::find(names.begin(), names.end(), opts.corrupt) == names.end()) {
      throw InvalidConfig("unknown gradient component '" + opts.corrupt + "'");
    }
  }
  std::vector<ComponentCheck> out;
  for (const auto& name : gradient_components()) out.push_back(check_component(name, opts));
  return out;
}

}  // namespace stag
