#pragma once

// Adam with a staircase learning-rate schedule, and the per-emotion training
// loop for the learnable aggregator (RNN and/or NetVLAD) under a disposable
// logistic head. Intervals are sampled at random from the training videos as
// augmentation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stag/errors.hpp"
#include "stag/gradcheck.hpp"
#include "stag/numkit.hpp"
#include "stag/pipeline.hpp"
#include "stag/pooling.hpp"
#include "stag/temporal.hpp"

namespace stag {

// ---------------------------------------------------------------------------
// Adam

/// Staircase decay: base * decay^floor(t / every).
inline double lr_schedule(std::uint64_t t, double base = 0.001, std::uint64_t every = 40000, double decay = 0.1) {
  return base * std::pow(decay, static_cast<double>(t / every));
}

struct AdamState {
  RealVector m;
  RealVector v;
  std::uint64_t t = 0;  // completed steps
  double alpha = 0.001;
  double beta1 = 0.7;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t decay_every = 40000;
  double decay = 0.1;

  static AdamState for_size(std::size_t n) {
    AdamState s;
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
    return s;
  }

  double current_lr() const { return lr_schedule(t, alpha, decay_every, decay); }
};

/// One bias-corrected Adam update of `params` in place; the step size is the
/// schedule evaluated at the number of steps already taken.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state) {
  require_same_length(grads.size(), params.size(), "adam_step gradient");
  if (state.m.empty() && state.v.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  require_same_length(state.m.size(), params.size(), "adam_step state");
  require_same_length(state.v.size(), params.size(), "adam_step state");
  const double lr = state.current_lr();
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
    const double mhat = state.m[i] / c1;
    const double vhat = state.v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

// ---------------------------------------------------------------------------
// Training records

struct TrainRecord {
  std::uint64_t iter = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  bool operator==(const TrainRecord&) const = default;
};

inline std::string format_double(double v, int digits = 9) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

inline std::string train_records_csv(std::span<const TrainRecord> records) {
  std::string out = "iter,train_loss,val_loss,lr\n";
  for (const auto& r : records) {
    out += std::to_string(r.iter) + ',' + format_double(r.train_loss) + ',' + format_double(r.val_loss) + ',' +
           format_double(r.lr) + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregator objective

struct TrainOptions {
  std::uint64_t max_iters = 3000;
  std::size_t batch_size = 64;
  std::uint64_t eval_every = 500;
  std::size_t patience = 10;
  std::size_t bag_size = 8;         // intervals per NetVLAD training bag
  std::size_t val_limit = 512;      // validation samples
  double base_lr = 0.001;
  double beta1 = 0.7;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t decay_every = 40000;
  double decay = 0.1;
  std::uint64_t seed = 0;  // 0: derive from the pipeline seed
};

/// Logistic head z = w.x + b; real is the positive class.
struct LinearHead {
  RealVector w;
  double b = 0.0;
};

/// Binary cross-entropy with logits and its derivative in z.
inline double bce_with_logit(double z, double y, double* dz = nullptr) {
  if (dz) *dz = 1.0 / (1.0 + std::exp(-z)) - y;
  return std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
}

inline double label_target(Label l) { return l == Label::real ? 1.0 : 0.0; }

/// A training example: one interval (RNN head) or a bag of intervals from
/// one video (NetVLAD head).
struct AggregatorSample {
  std::size_t video = 0;
  std::vector<std::size_t> starts;
};

/// Loss of the disposable head over sampled intervals as a function of a flat
/// parameter vector [rnn.w_in, rnn.w_rec, rnn.bias, netvlad.centers,
/// netvlad.assign_w, netvlad.assign_b, head.w, head.b] (absent blocks skipped).
class AggregatorObjective {
 public:
  AggregatorObjective(PipelineModel model, std::span<const LocalFeatureSequence> videos) : model_(std::move(model)) {
    const auto& cfg = model_.config;
    bags_ = cfg.video_pooler == VideoPooler::netvlad;
    if (!cfg.has_trainable_aggregator()) throw InvalidConfig("pipeline " + cfg.name() + " has nothing to train");
    head_dim_ = bags_ ? model_.video_output_dim() : model_.interval_output_dim();
    for (const auto& seq : videos) add_video(seq);
  }

  const PipelineModel& model() const { return model_; }
  std::size_t video_count() const { return labels_.size(); }
  Label label(std::size_t video) const { return labels_[video]; }
  bool uses_bags() const { return bags_; }
  const std::vector<std::size_t>& feasible_starts(std::size_t video) const { return starts_[video]; }

  std::size_t parameter_count() const {
    std::size_t n = head_dim_ + 1;
    if (model_.rnn) n += model_.rnn->w_in.data.size() + model_.rnn->w_rec.data.size() + model_.rnn->bias.size();
    if (bags_) n += model_.netvlad->centers.data.size() * 2 + model_.netvlad->assign_b.size();
    return n;
  }

  /// Current aggregator parameters with a zero head.
  RealVector initial_parameters() const {
    RealVector theta;
    theta.reserve(parameter_count());
    auto put = [&](const RealVector& v) { theta.insert(theta.end(), v.begin(), v.end()); };
    if (model_.rnn) {
      put(model_.rnn->w_in.data);
      put(model_.rnn->w_rec.data);
      put(model_.rnn->bias);
    }
    if (bags_) {
      put(model_.netvlad->centers.data);
      put(model_.netvlad->assign_w.data);
      put(model_.netvlad->assign_b);
    }
    theta.resize(parameter_count(), 0.0);
    return theta;
  }

  /// Writes the aggregator part of theta into `model` (the head is dropped).
  void unpack(std::span<const double> theta, PipelineModel& model, LinearHead* head = nullptr) const {
    require_same_length(theta.size(), parameter_count(), "aggregator parameters");
    std::size_t at = 0;
    auto take = [&](RealVector& v) {
      std::copy(theta.begin() + static_cast<std::ptrdiff_t>(at), theta.begin() + static_cast<std::ptrdiff_t>(at + v.size()),
                v.begin());
      at += v.size();
    };
    if (model.rnn) {
      take(model.rnn->w_in.data);
      take(model.rnn->w_rec.data);
      take(model.rnn->bias);
    }
    if (bags_) {
      take(model.netvlad->centers.data);
      take(model.netvlad->assign_w.data);
      take(model.netvlad->assign_b);
    }
    if (head) {
      head->w.assign(theta.begin() + static_cast<std::ptrdiff_t>(at), theta.begin() + static_cast<std::ptrdiff_t>(at + head_dim_));
      head->b = theta[at + head_dim_];
    }
  }

  /// Mean BCE over `batch`, with its gradient in theta when requested.
  ValueAndGrad evaluate(std::span<const double> theta, std::span<const AggregatorSample> batch, bool want_grad = true) {
    if (batch.empty()) throw EmptyInput("empty training batch");
    LinearHead head;
    unpack(theta, model_, &head);
    std::optional<RnnGrads> grnn;
    if (want_grad && model_.rnn) grnn = RnnGrads::zeros_like(*model_.rnn);
    std::optional<NetVladGrads> gnv;
    if (want_grad && bags_) {
      const auto& nv = *model_.netvlad;
      gnv = NetVladGrads{Matrix(), Matrix(nv.centers.rows, nv.centers.cols), Matrix(nv.assign_w.rows, nv.assign_w.cols),
                         RealVector(nv.assign_b.size(), 0.0)};
    }
    RealVector ghead(head_dim_ + 1, 0.0);
    const double scale = 1.0 / static_cast<double>(batch.size());
    double loss = 0.0;
    for (const auto& s : batch) {
      loss += bags_ ? bag_term(s, head, scale, grnn, gnv, ghead, want_grad)
                    : interval_term(s, head, scale, grnn, ghead, want_grad);
    }
    ValueAndGrad out{loss * scale, {}};
    if (!want_grad) return out;
    out.grad.reserve(theta.size());
    auto put = [&](const RealVector& v) { out.grad.insert(out.grad.end(), v.begin(), v.end()); };
    if (grnn) {
      put(grnn->w_in.data);
      put(grnn->w_rec.data);
      put(grnn->bias);
    }
    if (gnv) {
      put(gnv->centers.data);
      put(gnv->assign_w.data);
      put(gnv->assign_b);
    }
    put(ghead);
    return out;
  }

 private:
  void add_video(const LocalFeatureSequence& seq) {
    const auto& cfg = model_.config;
    LocalFeatureSequence prepared = prepare_sequence(seq, model_);
    std::vector<std::size_t> starts;
    for (const auto& iv : sample_intervals(prepared.frame_count, cfg)) starts.push_back(iv.start);
    Matrix grids;
    if (!cfg.passes_features_through()) {
      // grid representations at every frame offset some interval uses
      grids = Matrix(prepared.frame_count, model_.grid_output_dim());
      std::vector<char> done(prepared.frame_count, 0);
      for (std::size_t s : starts) {
        for (std::size_t k = 0; k < cfg.grids_per_interval; ++k) {
          const std::size_t f = s + k * cfg.frames_per_grid;
          if (done[f]) continue;
          const RealVector y = grid_representation(prepared.frames(f, cfg.frames_per_grid), model_);
          std::copy(y.begin(), y.end(), grids.row(f).begin());
          done[f] = 1;
        }
      }
      prepared.values.clear();
      prepared.values.shrink_to_fit();
    }
    labels_.push_back(seq.label);
    starts_.push_back(std::move(starts));
    grids_.push_back(std::move(grids));
    prepared_.push_back(std::move(prepared));
  }

  Matrix interval_inputs(std::size_t video, std::size_t start) const {
    const auto& cfg = model_.config;
    Matrix ys(cfg.grids_per_interval, model_.grid_output_dim());
    for (std::size_t k = 0; k < ys.rows; ++k) {
      const auto src = grids_[video].row(start + k * cfg.frames_per_grid);
      std::copy(src.begin(), src.end(), ys.row(k).begin());
    }
    return ys;
  }

  double interval_term(const AggregatorSample& s, const LinearHead& head, double scale, std::optional<RnnGrads>& grnn,
                       RealVector& ghead, bool want_grad) {
    const Matrix ys = interval_inputs(s.video, s.starts.front());
    const auto fwd = rnn_forward(ys, *model_.rnn);
    const double z = dot(head.w, fwd.output) + head.b;
    double dz = 0.0;
    const double loss = bce_with_logit(z, label_target(labels_[s.video]), &dz);
    if (want_grad) {
      dz *= scale;
      axpy(dz, fwd.output, std::span<double>(ghead).first(head_dim_));
      ghead[head_dim_] += dz;
      RealVector dout(head.w.size());
      for (std::size_t i = 0; i < dout.size(); ++i) dout[i] = dz * head.w[i];
      rnn_backward_acc(fwd.tape, *model_.rnn, dout, *grnn);
    }
    return loss;
  }

  double bag_term(const AggregatorSample& s, const LinearHead& head, double scale, std::optional<RnnGrads>& grnn,
                  std::optional<NetVladGrads>& gnv, RealVector& ghead, bool want_grad) {
    const auto& cfg = model_.config;
    std::vector<RnnTape> tapes;
    Matrix reps(0, model_.interval_output_dim());
    for (std::size_t start : s.starts) {
      if (cfg.use_rnn) {
        auto fwd = rnn_forward(interval_inputs(s.video, start), *model_.rnn);
        reps.data.insert(reps.data.end(), fwd.output.begin(), fwd.output.end());
        ++reps.rows;
        tapes.push_back(std::move(fwd.tape));
      } else if (cfg.passes_features_through()) {
        const FeatureView f = prepared_[s.video].frames(start, cfg.interval_frames());
        reps.data.insert(reps.data.end(), f.data.begin(), f.data.end());
        reps.rows += f.size();
      } else {
        const RealVector o = encode_grids(interval_inputs(s.video, start), model_);
        reps.data.insert(reps.data.end(), o.begin(), o.end());
        ++reps.rows;
      }
    }
    const RealVector v = netvlad_pool(reps, *model_.netvlad);
    const RealVector p = model_.projection ? matvec(*model_.projection, v) : v;
    const double z = dot(head.w, p) + head.b;
    double dz = 0.0;
    const double loss = bce_with_logit(z, label_target(labels_[s.video]), &dz);
    if (want_grad) {
      dz *= scale;
      axpy(dz, p, std::span<double>(ghead).first(head_dim_));
      ghead[head_dim_] += dz;
      RealVector dp(head.w.size());
      for (std::size_t i = 0; i < dp.size(); ++i) dp[i] = dz * head.w[i];
      RealVector dv = dp;
      if (model_.projection) {
        dv.assign(v.size(), 0.0);
        matvec_transposed_acc(*model_.projection, dp, dv);
      }
      const NetVladGrads g = netvlad_backward(reps, *model_.netvlad, dv);
      axpy(1.0, g.centers.data, gnv->centers.data);
      axpy(1.0, g.assign_w.data, gnv->assign_w.data);
      axpy(1.0, g.assign_b, gnv->assign_b);
      for (std::size_t j = 0; j < tapes.size(); ++j) rnn_backward_acc(tapes[j], *model_.rnn, g.features.row(j), *grnn);
    }
    return loss;
  }

  PipelineModel model_;
  bool bags_ = false;
  std::size_t head_dim_ = 0;
  std::vector<Label> labels_;
  std::vector<std::vector<std::size_t>> starts_;
  std::vector<Matrix> grids_;
  std::vector<LocalFeatureSequence> prepared_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  PipelineModel model;
  std::vector<TrainRecord> records;
  std::uint64_t iterations = 0;  // Adam steps taken; 0 when nothing is trainable
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
};

inline void require_both_labels(std::span<const LocalFeatureSequence> videos, const std::string& what) {
  bool real = false, fake = false;
  for (const auto& v : videos) (v.label == Label::real ? real : fake) = true;
  if (!real || !fake) {
    throw DegenerateLabels(what + ": training data holds only " + (real ? "real" : fake ? "fake" : "no") + " videos");
  }
}

namespace detail {

inline AggregatorSample draw_sample(const AggregatorObjective& obj, std::mt19937_64& rng, std::size_t bag) {
  std::uniform_int_distribution<std::size_t> pick_video(0, obj.video_count() - 1);
  AggregatorSample s;
  s.video = pick_video(rng);
  const auto& starts = obj.feasible_starts(s.video);
  std::uniform_int_distribution<std::size_t> pick_start(0, starts.size() - 1);
  const std::size_t n = obj.uses_bags() ? bag : 1;
  for (std::size_t i = 0; i < n; ++i) s.starts.push_back(starts[pick_start(rng)]);
  return s;
}

/// Fixed validation samples: every dense interval (or one bag per video and
/// repeat), subsampled deterministically to `limit`.
inline std::vector<AggregatorSample> validation_samples(const AggregatorObjective& obj, std::size_t limit,
                                                        std::size_t bag, std::uint64_t seed) {
  std::vector<AggregatorSample> all;
  std::mt19937_64 rng(seed);
  if (obj.uses_bags()) {
    for (std::size_t rep = 0; rep < 4; ++rep)
      for (std::size_t v = 0; v < obj.video_count(); ++v) {
        const auto& starts = obj.feasible_starts(v);
        std::uniform_int_distribution<std::size_t> pick(0, starts.size() - 1);
        AggregatorSample s{v, {}};
        for (std::size_t i = 0; i < bag; ++i) s.starts.push_back(starts[pick(rng)]);
        all.push_back(std::move(s));
      }
  } else {
    for (std::size_t v = 0; v < obj.video_count(); ++v)
      for (std::size_t start : obj.feasible_starts(v)) all.push_back(AggregatorSample{v, {start}});
  }
  if (all.size() > limit) {
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(limit);
  }
  return all;
}

}  // namespace detail

/// Trains the RNN and/or NetVLAD parameters of an initialized model on the
/// given videos with Adam, mini-batches of random intervals and early
/// stopping on the validation loss. Returns the best parameters seen (by
/// validation loss when a validation set is given, else the last ones).
/// Pipelines without learnable aggregator parameters are returned untouched
/// without taking a single step.
inline TrainResult train_aggregator(PipelineModel model, std::span<const LocalFeatureSequence> train,
                                    std::span<const LocalFeatureSequence> val, const TrainOptions& opts = {}) {
  TrainResult result;
  if (train.empty()) throw EmptyInput("no training videos");
  require_both_labels(train, "train_aggregator");
  if (!model.config.has_trainable_aggregator()) {
    result.model = std::move(model);
    return result;
  }
  const std::uint64_t seed = opts.seed != 0 ? opts.seed : derive_seed(model.config.seed, kTrainingStream);
  AggregatorObjective objective(model, train);
  std::optional<AggregatorObjective> val_objective;
  std::vector<AggregatorSample> val_samples;
  if (!val.empty()) {
    val_objective.emplace(model, val);
    val_samples = detail::validation_samples(*val_objective, opts.val_limit, opts.bag_size, derive_seed(seed, 1));
  }

  RealVector theta = objective.initial_parameters();
  RealVector best = theta;
  AdamState adam = AdamState::for_size(theta.size());
  adam.alpha = opts.base_lr;
  adam.beta1 = opts.beta1;
  adam.beta2 = opts.beta2;
  adam.eps = opts.eps;
  adam.decay_every = opts.decay_every;
  adam.decay = opts.decay;

  std::mt19937_64 rng(derive_seed(seed, 2));
  std::vector<AggregatorSample> batch(opts.batch_size);
  double running = 0.0;
  std::size_t running_n = 0;
  std::size_t stale = 0;
  double best_val = std::numeric_limits<double>::infinity();
  for (std::uint64_t it = 1; it <= opts.max_iters; ++it) {
    for (auto& s : batch) s = detail::draw_sample(objective, rng, opts.bag_size);
    const double lr = adam.current_lr();
    const ValueAndGrad vg = objective.evaluate(theta, batch);
    if (!std::isfinite(vg.value) || !all_finite(vg.grad)) {
      throw NumericalError("non-finite training loss at iteration " + std::to_string(it));
    }
    adam_step(theta, vg.grad, adam);
    result.iterations = it;
    running += vg.value;
    ++running_n;
    if (it % opts.eval_every == 0 || it == opts.max_iters) {
      double val_loss = std::numeric_limits<double>::quiet_NaN();
      if (val_objective) val_loss = val_objective->evaluate(theta, val_samples, false).value;
      result.records.push_back(TrainRecord{it, running / static_cast<double>(running_n), val_loss, lr});
      running = 0.0;
      running_n = 0;
      if (!val_objective) {
        best = theta;
      } else if (val_loss < best_val) {
        best_val = val_loss;
        best = theta;
        stale = 0;
      } else if (++stale >= opts.patience) {
        break;
      }
    }
  }
  objective.unpack(best, model);
  result.model = std::move(model);
  if (val_objective) result.best_val_loss = best_val;
  return result;
}

}  // namespace stag
