#pragma once

// End-to-end per-emotion workflow: initialize the pipeline on an emotion's
// training videos, train its aggregator, embed, fit the SVM, and score
// held-out videos.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stag/classify.hpp"
#include "stag/optim.hpp"
#include "stag/pipeline.hpp"

namespace stag {

struct EmotionModel {
  Emotion emotion = Emotion::anger;
  PipelineModel aggregator;
  SvmModel svm;
  std::vector<TrainRecord> records;
  std::uint64_t iterations = 0;
};

struct FitOptions {
  TrainOptions train;
  InitOptions init;
  double svm_c = 1.0;
};

inline std::vector<LocalFeatureSequence> of_emotion(std::span<const LocalFeatureSequence> all, Emotion e) {
  std::vector<LocalFeatureSequence> out;
  for (const auto& s : all) {
    if (s.emotion == e) out.push_back(s);
  }
  return out;
}

inline Matrix embed_all(std::span<const LocalFeatureSequence> videos, const PipelineModel& model) {
  Matrix x(videos.size(), model.video_output_dim());
  for (std::size_t i = 0; i < videos.size(); ++i) {
    const RealVector v = encode_video(videos[i], model).values;
    std::copy(v.begin(), v.end(), x.row(i).begin());
  }
  return x;
}

/// Fits one emotion's aggregator and SVM from its training (and optional
/// validation) videos. DegenerateLabels names the emotion.
inline EmotionModel fit_emotion(const PipelineConfig& config, Emotion emotion,
                                std::span<const LocalFeatureSequence> train, std::span<const LocalFeatureSequence> val,
                                const FitOptions& opts = {}) {
  const std::string name(to_string(emotion));
  if (train.empty()) throw EmptyInput("no training videos for emotion " + name);
  try {
    require_both_labels(train, "emotion " + name);
  } catch (const DegenerateLabels& e) {
    throw DegenerateLabels(e.what());
  }
  PipelineConfig cfg = config;
  cfg.seed = derive_seed(config.seed, 1000 + static_cast<std::uint64_t>(emotion));
  EmotionModel out;
  out.emotion = emotion;
  PipelineModel init = initialize_model(cfg, train.front().dim, train, opts.init);
  TrainResult tr = train_aggregator(std::move(init), train, val, opts.train);
  out.aggregator = std::move(tr.model);
  out.records = std::move(tr.records);
  out.iterations = tr.iterations;
  const Matrix x = embed_all(train, out.aggregator);
  std::vector<Label> y;
  for (const auto& s : train) y.push_back(s.label);
  out.svm = svm_train(x, y, opts.svm_c);
  return out;
}

inline Prediction predict_video(const EmotionModel& m, const LocalFeatureSequence& seq) {
  const VideoRepresentation rep = encode_video(seq, m.aggregator);
  const double margin = m.svm.margin(rep.values);
  return Prediction{seq.video_id, seq.emotion, margin >= 0.0 ? Label::real : Label::fake, seq.label, margin};
}

/// Fits all six emotions and evaluates on `heldout`.
struct ExperimentResult {
  std::vector<EmotionModel> models;
  std::vector<Prediction> predictions;
  EvaluationReport report;
};

inline ExperimentResult run_experiment(const PipelineConfig& config, std::span<const LocalFeatureSequence> train,
                                       std::span<const LocalFeatureSequence> val,
                                       std::span<const LocalFeatureSequence> heldout, const FitOptions& opts = {}) {
  ExperimentResult r;
  for (Emotion e : kAllEmotions) {
    const auto tr = of_emotion(train, e);
    const auto va = of_emotion(val, e);
    r.models.push_back(fit_emotion(config, e, tr, va, opts));
    for (const auto& s : of_emotion(heldout, e)) r.predictions.push_back(predict_video(r.models.back(), s));
  }
  r.report = evaluate(r.predictions);
  return r;
}

}  // namespace stag
