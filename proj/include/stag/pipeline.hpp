#pragma once

// Video pipeline: per-subject normalization, T-frame grids, K-grid intervals
// encoded by grid pooling and the recurrent model, and the video-level pooled
// representation. Every ablation combination (optional PCA -> grid pooler ->
// optional RNN -> video pooler) is a PipelineConfig.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stag/binio.hpp"
#include "stag/errors.hpp"
#include "stag/numkit.hpp"
#include "stag/pooling.hpp"
#include "stag/temporal.hpp"

namespace stag {

// ---------------------------------------------------------------------------
// Labels

enum class Emotion : std::uint8_t { anger, happiness, surprise, disgust, contentment, sadness };
enum class Label : std::uint8_t { real, fake };

inline constexpr std::array<Emotion, 6> kAllEmotions{Emotion::anger,   Emotion::happiness,   Emotion::surprise,
                                                      Emotion::disgust, Emotion::contentment, Emotion::sadness};

inline std::string_view to_string(Emotion e) {
  static constexpr std::array<std::string_view, 6> names{"anger",   "happiness",   "surprise",
                                                         "disgust", "contentment", "sadness"};
  return names[static_cast<std::size_t>(e)];
}

inline std::optional<Emotion> parse_emotion(std::string_view s) {
  for (Emotion e : kAllEmotions) {
    if (to_string(e) == s) return e;
  }
  return std::nullopt;
}

inline std::string_view to_string(Label l) { return l == Label::real ? "real" : "fake"; }

inline std::optional<Label> parse_label(std::string_view s) {
  if (s == "real") return Label::real;
  if (s == "fake") return Label::fake;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Local feature sequences

/// F frames of M local feature vectors of dimension D, stored frame-major,
/// then position-major.
struct LocalFeatureSequence {
  std::string video_id;
  std::string subject_id;
  Emotion emotion = Emotion::anger;
  Label label = Label::real;
  double fps = 100.0;
  std::size_t frame_count = 0;
  std::size_t positions = 0;
  std::size_t dim = 0;
  RealVector values;

  static LocalFeatureSequence zeros(std::size_t frames, std::size_t positions, std::size_t dim) {
    LocalFeatureSequence s;
    s.frame_count = frames;
    s.positions = positions;
    s.dim = dim;
    s.values.assign(frames * positions * dim, 0.0);
    return s;
  }

  double& at(std::size_t frame, std::size_t position, std::size_t k) {
    return values[(frame * positions + position) * dim + k];
  }
  double at(std::size_t frame, std::size_t position, std::size_t k) const {
    return values[(frame * positions + position) * dim + k];
  }

  /// All local features of `count` consecutive frames as one set.
  FeatureView frames(std::size_t start, std::size_t count) const {
    const std::size_t stride = positions * dim;
    return FeatureView(std::span<const double>(values).subspan(start * stride, count * stride), dim);
  }

  void validate() const {
    if (positions == 0 || dim == 0) throw InvalidLength("sequence needs positive M and D");
    if (values.size() != frame_count * positions * dim) {
      throw InvalidLength("sequence " + video_id + " holds " + std::to_string(values.size()) +
                          " values, expected F*M*D = " + std::to_string(frame_count * positions * dim));
    }
  }

  bool operator==(const LocalFeatureSequence&) const = default;
};

// ---------------------------------------------------------------------------
// Configuration

enum class GridPooler : std::uint8_t { cbp = 0, none = 1 };
enum class VideoPooler : std::uint8_t { cbp = 0, netvlad = 1, mean = 2 };
enum class SubjectNorm : std::uint8_t { per_position = 0, global = 1, none = 2 };

struct PipelineConfig {
  bool use_pca = false;
  std::size_t pca_dim = 128;
  GridPooler grid_pooler = GridPooler::cbp;
  bool use_rnn = true;
  CellType cell = CellType::vanilla;
  VideoPooler video_pooler = VideoPooler::cbp;
  std::size_t frames_per_grid = 3;     // T
  std::size_t grids_per_interval = 5;  // K
  std::size_t stride = 5;              // frames between dense interval starts
  std::size_t grid_dim = 512;          // d_g
  std::size_t hidden_dim = 128;        // H
  std::size_t video_dim = 512;         // d_v
  std::size_t netvlad_clusters = 32;
  double netvlad_alpha = 10.0;
  double sigma = 0.5;
  bool final_l2 = true;
  SubjectNorm subject_norm = SubjectNorm::per_position;
  std::uint64_t seed = 1;
  std::size_t input_dim = 0;  // raw D, fixed when a model is initialized

  std::size_t interval_frames() const { return frames_per_grid * grids_per_interval; }

  /// Grid pooling and RNN both off: intervals hand their raw local features
  /// straight to the video pooler.
  bool passes_features_through() const { return grid_pooler == GridPooler::none && !use_rnn; }

  bool has_trainable_aggregator() const { return use_rnn || video_pooler == VideoPooler::netvlad; }

  void validate() const {
    auto fail = [](const std::string& why) { throw InvalidConfig(why); };
    if (frames_per_grid == 0 || grids_per_interval == 0 || stride == 0) fail("T, K and stride must be positive");
    if (grid_pooler == GridPooler::none && frames_per_grid != 1) fail("grid_pooler=none requires T=1");
    if (grid_pooler == GridPooler::cbp && !is_power_of_two(grid_dim)) fail("grid sketch dimension must be a power of two");
    if (video_pooler == VideoPooler::cbp && !is_power_of_two(video_dim)) fail("video sketch dimension must be a power of two");
    if (use_rnn && hidden_dim == 0) fail("hidden dimension must be positive");
    if (video_pooler == VideoPooler::netvlad && netvlad_clusters == 0) fail("NetVLAD needs at least one cluster");
    if (use_pca && pca_dim == 0) fail("PCA dimension must be positive");
    if (!(sigma > 0.0 && sigma <= 1.0)) fail("power-normalization exponent must lie in (0, 1]");
  }

  /// One of the ablation combinations by name, e.g. "cbp+rnn+cbp",
  /// "pca+rnn+cbp", "netvlad", or "mean". Unlisted fields keep their defaults.
  static PipelineConfig preset(std::string_view name) {
    PipelineConfig c;
    std::string rest(name);
    if (rest.starts_with("pca+")) {
      c.use_pca = true;
      rest = rest.substr(4);
    }
    auto pass_through = [&](VideoPooler vp) {
      c.grid_pooler = GridPooler::none;
      c.use_rnn = false;
      c.frames_per_grid = 1;
      c.grids_per_interval = 1;
      c.stride = 1;
      c.video_pooler = vp;
    };
    if (rest == "cbp") {
      pass_through(VideoPooler::cbp);
    } else if (rest == "netvlad") {
      pass_through(VideoPooler::netvlad);
    } else if (rest == "mean") {
      // Subtracting each video's mean would zero the mean-pooled descriptor.
      pass_through(VideoPooler::mean);
      c.subject_norm = SubjectNorm::none;
    } else if (rest == "rnn+cbp") {
      c.grid_pooler = GridPooler::none;
      c.frames_per_grid = 1;
    } else if (rest == "cbp+rnn+cbp") {
    } else if (rest == "cbp+rnn+netvlad") {
      c.video_pooler = VideoPooler::netvlad;
    } else {
      throw InvalidConfig("unknown pipeline '" + std::string(name) + "'");
    }
    return c;
  }

  /// Canonical preset name, or "custom" when the flags match none.
  std::string name() const {
    std::string prefix = use_pca ? "pca+" : "";
    if (passes_features_through()) {
      switch (video_pooler) {
        case VideoPooler::cbp: return prefix + "cbp";
        case VideoPooler::netvlad: return prefix + "netvlad";
        case VideoPooler::mean: return prefix + "mean";
      }
    }
    if (!use_rnn) return "custom";
    if (grid_pooler == GridPooler::none && video_pooler == VideoPooler::cbp) return prefix + "rnn+cbp";
    if (grid_pooler == GridPooler::cbp && video_pooler == VideoPooler::cbp) return prefix + "cbp+rnn+cbp";
    if (grid_pooler == GridPooler::cbp && video_pooler == VideoPooler::netvlad) return prefix + "cbp+rnn+netvlad";
    return "custom";
  }

  bool operator==(const PipelineConfig&) const = default;
};

/// The ablation matrix in reporting order.
inline const std::vector<std::string>& ablation_presets() {
  static const std::vector<std::string> names{"cbp",         "pca+cbp",         "netvlad",         "pca+netvlad",
                                              "rnn+cbp",     "pca+rnn+cbp",     "cbp+rnn+cbp",     "pca+cbp+rnn+cbp",
                                              "cbp+rnn+netvlad", "pca+cbp+rnn+netvlad"};
  return names;
}

/// splitmix64 of (seed, stream): independent generator seeds per component.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t {
  kGridSketchStream = 1,
  kVideoSketchStream = 2,
  kRnnInitStream = 3,
  kNetVladStream = 4,
  kProjectionStream = 5,
  kPcaSampleStream = 6,
  kTrainingStream = 7,
};

// ---------------------------------------------------------------------------
// Per-video preprocessing, grids and intervals

/// Subtracts the per-video temporal mean from every local feature: one mean per
/// spatial position, or one shared mean in SubjectNorm::global mode.
/// SubjectNorm::none is the identity.
inline LocalFeatureSequence subject_normalize(const LocalFeatureSequence& seq,
                                              SubjectNorm mode = SubjectNorm::per_position) {
  seq.validate();
  LocalFeatureSequence out = seq;
  if (seq.frame_count == 0 || mode == SubjectNorm::none) return out;
  const std::size_t groups = mode == SubjectNorm::per_position ? seq.positions : 1;
  Matrix mean(groups, seq.dim);
  for (std::size_t f = 0; f < seq.frame_count; ++f)
    for (std::size_t m = 0; m < seq.positions; ++m)
      for (std::size_t k = 0; k < seq.dim; ++k) mean(m % groups, k) += seq.at(f, m, k);
  const double count = static_cast<double>(seq.frame_count * (seq.positions / groups));
  for (auto& v : mean.data) v /= count;
  for (std::size_t f = 0; f < seq.frame_count; ++f)
    for (std::size_t m = 0; m < seq.positions; ++m)
      for (std::size_t k = 0; k < seq.dim; ++k) out.at(f, m, k) -= mean(m % groups, k);
  return out;
}

/// A window of consecutive frames, [start, start + length).
struct Interval {
  std::size_t start = 0;
  std::size_t length = 0;
  bool operator==(const Interval&) const = default;
};

/// Splits a K*T-frame interval into K grids of T*M local features each.
inline std::vector<FeatureView> assemble_grids(const LocalFeatureSequence& seq, Interval interval,
                                               std::size_t grids_per_interval, std::size_t frames_per_grid) {
  if (interval.length != grids_per_interval * frames_per_grid) {
    throw InvalidInterval("interval of " + std::to_string(interval.length) + " frames, expected K*T = " +
                          std::to_string(grids_per_interval * frames_per_grid));
  }
  if (interval.start + interval.length > seq.frame_count) {
    throw InvalidInterval("interval [" + std::to_string(interval.start) + ", " +
                          std::to_string(interval.start + interval.length) + ") exceeds " +
                          std::to_string(seq.frame_count) + " frames");
  }
  std::vector<FeatureView> grids;
  grids.reserve(grids_per_interval);
  for (std::size_t k = 0; k < grids_per_interval; ++k) {
    grids.push_back(seq.frames(interval.start + k * frames_per_grid, frames_per_grid));
  }
  return grids;
}

struct DenseSampling {};
struct RandomSampling {
  std::size_t count = 0;
  std::uint64_t seed = 0;
};
using SamplingMode = std::variant<DenseSampling, RandomSampling>;

/// Dense mode: starts 0, stride, 2*stride, ... while the interval fits.
/// Random mode: `count` starts drawn uniformly, with replacement, from the
/// same feasible set. Trailing frames that cannot complete an interval are
/// dropped.
inline std::vector<Interval> sample_intervals(std::size_t frame_count, const PipelineConfig& config,
                                              const SamplingMode& mode = DenseSampling{}) {
  const std::size_t len = config.interval_frames();
  if (frame_count < len) {
    throw VideoTooShort(std::to_string(frame_count) + " frames, but one interval needs K*T = " + std::to_string(len));
  }
  const std::size_t feasible = (frame_count - len) / config.stride + 1;
  std::vector<Interval> out;
  if (std::holds_alternative<DenseSampling>(mode)) {
    out.reserve(feasible);
    for (std::size_t i = 0; i < feasible; ++i) out.push_back(Interval{i * config.stride, len});
  } else {
    const auto& r = std::get<RandomSampling>(mode);
    std::mt19937_64 rng(r.seed);
    std::uniform_int_distribution<std::size_t> pick(0, feasible - 1);
    out.reserve(r.count);
    for (std::size_t i = 0; i < r.count; ++i) out.push_back(Interval{pick(rng) * config.stride, len});
  }
  return out;
}

/// Wall-clock span of one interval in seconds.
inline double interval_seconds(const PipelineConfig& config, double fps) {
  return static_cast<double>(config.interval_frames()) / fps;
}

// ---------------------------------------------------------------------------
// Model

/// Every parameter the pipeline needs at inference. Sketch maps are not
/// stored; they are regenerated from the seeds in the config.
struct PipelineModel {
  PipelineConfig config;
  std::optional<PcaModel> pca;
  std::optional<SketchParams> grid_sketch;
  std::optional<RnnParams> rnn;
  std::optional<SketchParams> video_sketch;
  std::optional<NetVladParams> netvlad;
  std::optional<Matrix> projection;  // NetVLAD output -> d_v

  /// Local feature dimension after the optional PCA.
  std::size_t local_dim() const { return config.use_pca ? config.pca_dim : config.input_dim; }

  std::size_t grid_output_dim() const {
    return config.grid_pooler == GridPooler::cbp ? config.grid_dim : local_dim();
  }

  std::size_t interval_output_dim() const {
    if (config.use_rnn) return config.hidden_dim;
    if (config.passes_features_through()) return local_dim();
    return grid_output_dim();
  }

  std::size_t video_output_dim() const {
    switch (config.video_pooler) {
      case VideoPooler::cbp: return config.video_dim;
      case VideoPooler::mean: return interval_output_dim();
      case VideoPooler::netvlad: {
        const std::size_t raw = config.netvlad_clusters * interval_output_dim();
        return projection ? projection->rows : raw;
      }
    }
    return 0;
  }

  /// Rebuilds the seed-determined sketch maps from the config.
  void regenerate_sketches() {
    grid_sketch.reset();
    video_sketch.reset();
    if (config.grid_pooler == GridPooler::cbp) {
      grid_sketch = SketchParams::make(local_dim(), config.grid_dim, derive_seed(config.seed, kGridSketchStream));
    }
    if (config.video_pooler == VideoPooler::cbp) {
      video_sketch = SketchParams::make(interval_output_dim(), config.video_dim,
                                        derive_seed(config.seed, kVideoSketchStream));
    }
  }
};

/// Subject normalization followed by the optional PCA projection of every
/// local feature.
inline LocalFeatureSequence prepare_sequence(const LocalFeatureSequence& seq, const PipelineModel& model) {
  require_same_length(seq.dim, model.config.input_dim, "sequence feature dimension");
  LocalFeatureSequence out = subject_normalize(seq, model.config.subject_norm);
  if (model.pca) {
    const Matrix reduced = pca_transform_set(FeatureView(out.values, out.dim), *model.pca);
    out.dim = model.pca->reduced_dim();
    out.values = reduced.data;
  }
  return out;
}

/// y_k for one grid: L2-normalized CBP of its T*M features, or (without grid
/// pooling, T = 1) the mean of the frame's M features.
inline RealVector grid_representation(FeatureView grid, const PipelineModel& model) {
  if (model.config.grid_pooler == GridPooler::cbp) return l2_normalize(cbp_pool(grid, *model.grid_sketch));
  RealVector mean(grid.dim, 0.0);
  for (std::size_t n = 0; n < grid.size(); ++n) axpy(1.0, grid[n], mean);
  for (auto& v : mean) v /= static_cast<double>(grid.size());
  return mean;
}

/// K x grid_dim matrix of grid representations for one interval of a
/// prepared sequence.
inline Matrix interval_grids(const LocalFeatureSequence& prepared, Interval interval, const PipelineModel& model) {
  const auto grids = assemble_grids(prepared, interval, model.config.grids_per_interval, model.config.frames_per_grid);
  Matrix out(grids.size(), model.grid_output_dim());
  for (std::size_t k = 0; k < grids.size(); ++k) {
    const RealVector y = grid_representation(grids[k], model);
    std::copy(y.begin(), y.end(), out.row(k).begin());
  }
  return out;
}

/// Interval representation from precomputed grid representations: o_K of the
/// RNN, or the mean of the K grid vectors when the RNN is off.
inline RealVector encode_grids(const Matrix& grids, const PipelineModel& model) {
  if (model.config.use_rnn) return rnn_forward(grids, *model.rnn).output;
  RealVector mean(grids.cols, 0.0);
  for (std::size_t k = 0; k < grids.rows; ++k) axpy(1.0, grids.row(k), mean);
  for (auto& v : mean) v /= static_cast<double>(grids.rows);
  return mean;
}

/// Rows of interval representations contributed by one interval: a single
/// row normally, or every raw local feature for pass-through configs.
inline Matrix encode_interval(const LocalFeatureSequence& prepared, Interval interval, const PipelineModel& model) {
  if (model.config.passes_features_through()) {
    if (interval.start + interval.length > prepared.frame_count) throw InvalidInterval("interval exceeds the video");
    const FeatureView f = prepared.frames(interval.start, interval.length);
    Matrix out(f.size(), f.dim);
    std::copy(f.data.begin(), f.data.end(), out.data.begin());
    return out;
  }
  const RealVector o = encode_grids(interval_grids(prepared, interval, model), model);
  Matrix out(1, o.size());
  out.data = o;
  return out;
}

struct IntervalGrads {
  std::optional<RnnGrads> rnn;
  Matrix features;  // gradient w.r.t. the interval's prepared local features
};

/// Reverse mode through one interval encoding (single-row configs only):
/// gradients of <grad_out, encode_interval(...)> w.r.t. RNN parameters and
/// every local feature of the interval.
inline IntervalGrads encode_interval_backward(const LocalFeatureSequence& prepared, Interval interval,
                                              const PipelineModel& model, std::span<const double> grad_out) {
  if (model.config.passes_features_through()) {
    throw InvalidConfig("pass-through configs have no interval encoder to differentiate");
  }
  const auto& cfg = model.config;
  const auto grids = assemble_grids(prepared, interval, cfg.grids_per_interval, cfg.frames_per_grid);
  const Matrix ys = interval_grids(prepared, interval, model);
  IntervalGrads out;
  Matrix dys(ys.rows, ys.cols);
  if (cfg.use_rnn) {
    const auto fwd = rnn_forward(ys, *model.rnn);
    RnnGrads g = rnn_backward(fwd.tape, *model.rnn, grad_out);
    dys = g.inputs;
    out.rnn = std::move(g);
  } else {
    require_same_length(grad_out.size(), ys.cols, "encode_interval_backward gradient");
    for (std::size_t k = 0; k < ys.rows; ++k)
      for (std::size_t i = 0; i < ys.cols; ++i) dys(k, i) = grad_out[i] / static_cast<double>(ys.rows);
  }
  const std::size_t per_grid = cfg.frames_per_grid * prepared.positions;
  out.features = Matrix(per_grid * grids.size(), prepared.dim);
  for (std::size_t k = 0; k < grids.size(); ++k) {
    Matrix dfeat;
    if (cfg.grid_pooler == GridPooler::cbp) {
      const RealVector raw = cbp_pool(grids[k], *model.grid_sketch);
      const RealVector draw = l2_normalize_backward(raw, dys.row(k));
      dfeat = cbp_backward(grids[k], *model.grid_sketch, draw);
    } else {
      dfeat = Matrix(grids[k].size(), grids[k].dim);
      for (std::size_t n = 0; n < dfeat.rows; ++n)
        for (std::size_t i = 0; i < dfeat.cols; ++i) dfeat(n, i) = dys(k, i) / static_cast<double>(dfeat.rows);
    }
    std::copy(dfeat.data.begin(), dfeat.data.end(), out.features.data.begin() + static_cast<std::ptrdiff_t>(k * per_grid * prepared.dim));
  }
  return out;
}

/// Stacked interval representations for the given intervals.
inline Matrix encode_intervals(const LocalFeatureSequence& prepared, std::span<const Interval> intervals,
                               const PipelineModel& model) {
  Matrix out(0, model.interval_output_dim());
  for (const Interval& iv : intervals) {
    const Matrix rows = encode_interval(prepared, iv, model);
    out.data.insert(out.data.end(), rows.data.begin(), rows.data.end());
    out.rows += rows.rows;
  }
  return out;
}

/// Video pooler output before the power / L2 normalization.
inline RealVector pool_video_raw(const Matrix& reps, const PipelineModel& model) {
  if (reps.rows == 0) throw EmptyInput("no interval representations to pool");
  switch (model.config.video_pooler) {
    case VideoPooler::cbp: return cbp_pool(reps, *model.video_sketch);
    case VideoPooler::mean: {
      RealVector mean(reps.cols, 0.0);
      for (std::size_t r = 0; r < reps.rows; ++r) axpy(1.0, reps.row(r), mean);
      for (auto& v : mean) v /= static_cast<double>(reps.rows);
      return mean;
    }
    case VideoPooler::netvlad: {
      RealVector v = netvlad_pool(reps, *model.netvlad);
      return model.projection ? matvec(*model.projection, v) : v;
    }
  }
  return {};
}

/// Power normalization followed by the optional L2 normalization.
inline RealVector finalize_representation(std::span<const double> raw, const PipelineConfig& config) {
  RealVector v = power_normalize(raw, config.sigma);
  return config.final_l2 ? l2_normalize(v) : v;
}

struct VideoRepresentation {
  RealVector values;
  std::string video_id;
  Emotion emotion = Emotion::anger;
  Label label = Label::real;
};

inline VideoRepresentation encode_video(const LocalFeatureSequence& seq, const PipelineModel& model) {
  const LocalFeatureSequence prepared = prepare_sequence(seq, model);
  const auto intervals = sample_intervals(prepared.frame_count, model.config);
  const Matrix reps = encode_intervals(prepared, intervals, model);
  return VideoRepresentation{finalize_representation(pool_video_raw(reps, model), model.config), seq.video_id,
                             seq.emotion, seq.label};
}

// ---------------------------------------------------------------------------
// Initialization

namespace detail {

/// Up to `limit` rows drawn without replacement (seeded) from `all`.
inline Matrix subsample_rows(const Matrix& all, std::size_t limit, std::uint64_t seed) {
  if (all.rows <= limit) return all;
  std::vector<std::size_t> idx(all.rows);
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < limit; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(limit));
  Matrix out(limit, all.cols);
  for (std::size_t i = 0; i < limit; ++i) std::copy(all.row(idx[i]).begin(), all.row(idx[i]).end(), out.row(i).begin());
  return out;
}

}  // namespace detail

struct InitOptions {
  std::size_t pca_sample_limit = 20000;
  std::size_t kmeans_sample_limit = 5000;
  int kmeans_iterations = 20;
};

/// Builds a model for `config` over raw local features of dimension
/// `input_dim`. PCA and the NetVLAD centers (k-means) are fitted on the
/// training sequences; everything else is seeded.
inline PipelineModel initialize_model(PipelineConfig config, std::size_t input_dim,
                                      std::span<const LocalFeatureSequence> training, const InitOptions& opts = {}) {
  config.input_dim = input_dim;
  config.validate();
  if (input_dim == 0) throw InvalidConfig("input dimension must be positive");
  PipelineModel model;
  model.config = config;

  if (config.use_pca) {
    Matrix pool(0, input_dim);
    for (const auto& seq : training) {
      const auto norm = subject_normalize(seq, config.subject_norm);
      pool.data.insert(pool.data.end(), norm.values.begin(), norm.values.end());
      pool.rows += norm.frame_count * norm.positions;
    }
    const Matrix sample = detail::subsample_rows(pool, opts.pca_sample_limit, derive_seed(config.seed, kPcaSampleStream));
    model.pca = pca_fit(sample, config.pca_dim);
  }
  if (config.use_rnn) {
    model.rnn = RnnParams::init(config.cell, model.grid_output_dim(), config.hidden_dim,
                                derive_seed(config.seed, kRnnInitStream));
  }
  model.regenerate_sketches();

  if (config.video_pooler == VideoPooler::netvlad) {
    Matrix reps(0, model.interval_output_dim());
    for (const auto& seq : training) {
      const auto prepared = prepare_sequence(seq, model);
      const auto intervals = sample_intervals(prepared.frame_count, config);
      const Matrix r = encode_intervals(prepared, intervals, model);
      reps.data.insert(reps.data.end(), r.data.begin(), r.data.end());
      reps.rows += r.rows;
    }
    const Matrix sample = detail::subsample_rows(reps, opts.kmeans_sample_limit, derive_seed(config.seed, kNetVladStream));
    model.netvlad = NetVladParams::from_centers(
        kmeans(sample, config.netvlad_clusters, derive_seed(config.seed, kNetVladStream) + 1, opts.kmeans_iterations),
        config.netvlad_alpha);
    const std::size_t raw = model.netvlad->output_dim();
    if (raw > config.video_dim) {
      Matrix proj(config.video_dim, raw);
      std::mt19937_64 rng(derive_seed(config.seed, kProjectionStream));
      std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(raw)));
      for (auto& v : proj.data) v = g(rng);
      model.projection = std::move(proj);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Model file: "STAG", u32 version, config block, u32 tensor count, then per
// tensor (u32 name length, name, u32 rank, u32 dims..., f64 payload).

inline constexpr std::uint32_t kModelFormatVersion = 1;
inline constexpr std::string_view kModelMagic = "STAG";

struct Tensor {
  std::vector<std::uint32_t> dims;
  RealVector data;

  static Tensor from(const Matrix& m) {
    return Tensor{{static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)}, m.data};
  }
  static Tensor from(const RealVector& v) { return Tensor{{static_cast<std::uint32_t>(v.size())}, v}; }

  Matrix matrix(const std::string& name) const {
    if (dims.size() != 2) throw ModelFormatError("tensor " + name + " is not a matrix");
    Matrix m(dims[0], dims[1]);
    m.data = data;
    return m;
  }
};

using TensorMap = std::map<std::string, Tensor>;

namespace detail {

inline void write_config(binio::Writer& w, const PipelineConfig& c) {
  binio::Writer block;
  block.u8(c.use_pca);
  block.u32(static_cast<std::uint32_t>(c.pca_dim));
  block.u8(static_cast<std::uint8_t>(c.grid_pooler));
  block.u8(c.use_rnn);
  block.u8(static_cast<std::uint8_t>(c.cell));
  block.u8(static_cast<std::uint8_t>(c.video_pooler));
  block.u32(static_cast<std::uint32_t>(c.frames_per_grid));
  block.u32(static_cast<std::uint32_t>(c.grids_per_interval));
  block.u32(static_cast<std::uint32_t>(c.stride));
  block.u32(static_cast<std::uint32_t>(c.grid_dim));
  block.u32(static_cast<std::uint32_t>(c.hidden_dim));
  block.u32(static_cast<std::uint32_t>(c.video_dim));
  block.u32(static_cast<std::uint32_t>(c.netvlad_clusters));
  block.f64(c.netvlad_alpha);
  block.f64(c.sigma);
  block.u8(c.final_l2);
  block.u8(static_cast<std::uint8_t>(c.subject_norm));
  block.u64(c.seed);
  block.u32(static_cast<std::uint32_t>(c.input_dim));
  w.u32(static_cast<std::uint32_t>(block.size()));
  w.raw(std::string_view(block.bytes().data(), block.size()));
}

inline constexpr std::uint32_t kConfigBlockSize = 1 + 4 + 4 * 1 + 7 * 4 + 8 + 8 + 1 + 1 + 8 + 4;

inline PipelineConfig read_config(binio::Reader& r) {
  const std::uint32_t size = r.u32();
  if (r.ok() && size != kConfigBlockSize) {
    throw ModelFormatError("config block of " + std::to_string(size) + " bytes, expected " +
                           std::to_string(kConfigBlockSize));
  }
  PipelineConfig c;
  c.use_pca = r.u8() != 0;
  c.pca_dim = r.u32();
  const auto grid = r.u8();
  c.use_rnn = r.u8() != 0;
  const auto cell = r.u8();
  const auto video = r.u8();
  c.frames_per_grid = r.u32();
  c.grids_per_interval = r.u32();
  c.stride = r.u32();
  c.grid_dim = r.u32();
  c.hidden_dim = r.u32();
  c.video_dim = r.u32();
  c.netvlad_clusters = r.u32();
  c.netvlad_alpha = r.f64();
  c.sigma = r.f64();
  c.final_l2 = r.u8() != 0;
  const auto norm = r.u8();
  c.seed = r.u64();
  c.input_dim = r.u32();
  if (!r.ok()) throw ModelFormatError("truncated config block");
  if (grid > 1 || cell > 1 || video > 2 || norm > 2) throw ModelFormatError("invalid enum value in config block");
  c.grid_pooler = static_cast<GridPooler>(grid);
  c.cell = static_cast<CellType>(cell);
  c.video_pooler = static_cast<VideoPooler>(video);
  c.subject_norm = static_cast<SubjectNorm>(norm);
  try {
    c.validate();
  } catch (const InvalidConfig& e) {
    throw ModelFormatError(std::string("stored config is invalid: ") + e.what());
  }
  return c;
}

}  // namespace detail

/// Serializes a config and named tensors into the model container format.
inline std::vector<char> encode_container(const PipelineConfig& config, const TensorMap& tensors) {
  binio::Writer w;
  w.raw(kModelMagic);
  w.u32(kModelFormatVersion);
  detail::write_config(w, config);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.raw(name);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    for (double v : t.data) w.f64(v);
  }
  return w.bytes();
}

struct Container {
  PipelineConfig config;
  TensorMap tensors;
};

inline Container decode_container(std::vector<char> bytes) {
  binio::Reader r(std::move(bytes));
  if (r.raw(4) != kModelMagic) throw ModelFormatError("bad magic, not a model file");
  const std::uint32_t version = r.u32();
  if (!r.ok()) throw ModelFormatError("truncated header");
  if (version != kModelFormatVersion) {
    throw ModelFormatError("model format version " + std::to_string(version) + " found, this build reads version " +
                           std::to_string(kModelFormatVersion));
  }
  Container c;
  c.config = detail::read_config(r);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count && r.ok(); ++i) {
    const std::uint32_t name_len = r.u32();
    if (name_len > r.remaining()) throw ModelFormatError("truncated tensor name");
    std::string name = r.raw(name_len);
    Tensor t;
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw ModelFormatError("tensor " + name + " has implausible rank " + std::to_string(rank));
    std::size_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      n *= t.dims.back();
    }
    if (!r.ok() || n * 8 > r.remaining()) throw ModelFormatError("truncated payload for tensor " + name);
    t.data.resize(n);
    for (auto& v : t.data) v = r.f64();
    c.tensors.emplace(std::move(name), std::move(t));
  }
  if (!r.ok()) throw ModelFormatError("truncated tensor table");
  if (r.remaining() != 0) throw ModelFormatError(std::to_string(r.remaining()) + " trailing bytes after tensors");
  return c;
}

inline TensorMap model_tensors(const PipelineModel& m) {
  TensorMap t;
  if (m.pca) {
    t["pca.mean"] = Tensor::from(m.pca->mean);
    t["pca.basis"] = Tensor::from(m.pca->basis);
    t["pca.variance"] = Tensor::from(m.pca->explained_variance);
  }
  if (m.rnn) {
    t["rnn.w_in"] = Tensor::from(m.rnn->w_in);
    t["rnn.w_rec"] = Tensor::from(m.rnn->w_rec);
    t["rnn.bias"] = Tensor::from(m.rnn->bias);
  }
  if (m.netvlad) {
    t["netvlad.centers"] = Tensor::from(m.netvlad->centers);
    t["netvlad.assign_w"] = Tensor::from(m.netvlad->assign_w);
    t["netvlad.assign_b"] = Tensor::from(m.netvlad->assign_b);
  }
  if (m.projection) t["video.projection"] = Tensor::from(*m.projection);
  return t;
}

inline const Tensor& require_tensor(const TensorMap& t, const std::string& name) {
  const auto it = t.find(name);
  if (it == t.end()) throw ModelFormatError("missing tensor " + name);
  return it->second;
}

inline PipelineModel model_from_container(const Container& c) {
  PipelineModel m;
  m.config = c.config;
  const auto& t = c.tensors;
  if (m.config.use_pca) {
    PcaModel p;
    p.mean = require_tensor(t, "pca.mean").data;
    p.basis = require_tensor(t, "pca.basis").matrix("pca.basis");
    p.explained_variance = require_tensor(t, "pca.variance").data;
    m.pca = std::move(p);
  }
  if (m.config.use_rnn) {
    RnnParams r;
    r.cell = m.config.cell;
    r.w_in = require_tensor(t, "rnn.w_in").matrix("rnn.w_in");
    r.w_rec = require_tensor(t, "rnn.w_rec").matrix("rnn.w_rec");
    r.bias = require_tensor(t, "rnn.bias").data;
    m.rnn = std::move(r);
  }
  if (m.config.video_pooler == VideoPooler::netvlad) {
    NetVladParams n;
    n.centers = require_tensor(t, "netvlad.centers").matrix("netvlad.centers");
    n.assign_w = require_tensor(t, "netvlad.assign_w").matrix("netvlad.assign_w");
    n.assign_b = require_tensor(t, "netvlad.assign_b").data;
    m.netvlad = std::move(n);
    if (t.contains("video.projection")) m.projection = require_tensor(t, "video.projection").matrix("video.projection");
  }
  m.regenerate_sketches();
  return m;
}

inline std::vector<char> encode_model(const PipelineModel& model) {
  return encode_container(model.config, model_tensors(model));
}

inline PipelineModel decode_model(std::vector<char> bytes) { return model_from_container(decode_container(std::move(bytes))); }

inline void save_model(const PipelineModel& model, const std::filesystem::path& path) {
  binio::write_file_atomic(path, encode_model(model));
}

inline PipelineModel load_model(const std::filesystem::path& path) {
  std::vector<char> bytes;
  if (!binio::read_file(path, bytes)) throw ModelFormatError("cannot open " + path.string());
  return decode_model(std::move(bytes));
}

}  // namespace stag
