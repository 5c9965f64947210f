#pragma once

// Linear SVM (one per emotion) and the challenge evaluation statistic: mean
// per-emotion real/fake accuracy, plus ranking average precision over SVM
// margins as a secondary number.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "stag/errors.hpp"
#include "stag/numkit.hpp"
#include "stag/pipeline.hpp"

namespace stag {

/// Decision w.x + b; non-negative margins (ties included) are "real".
struct SvmModel {
  RealVector w;
  double b = 0.0;
  double C = 1.0;

  double margin(std::span<const double> x) const {
    require_same_length(x.size(), w.size(), "svm input");
    return dot(w, x) + b;
  }
  bool operator==(const SvmModel&) const = default;
};

inline Label svm_predict(const SvmModel& model, std::span<const double> x) {
  return model.margin(x) >= 0.0 ? Label::real : Label::fake;
}

inline double label_sign(Label l) { return l == Label::real ? 1.0 : -1.0; }

/// 1/2 |w|^2 + C * sum hinge(1 - y (w.x + b))
inline double svm_primal_objective(const SvmModel& m, const Matrix& x, std::span<const Label> y) {
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows; ++i) loss += std::max(0.0, 1.0 - label_sign(y[i]) * m.margin(x.row(i)));
  return 0.5 * dot(m.w, m.w) + m.C * loss;
}

struct SvmTrainInfo {
  std::vector<double> dual_objective;  // after every epoch of n pair updates
  std::size_t updates = 0;
  bool converged = false;
  double primal_objective = 0.0;
};

struct SvmOptions {
  double tolerance = 1e-9;  // maximal KKT violation at exit
  std::size_t max_epochs = 20000;
};

namespace detail {

/// Exact minimizer in b of the primal for fixed w. With both classes present
/// the hinge sum is convex, piecewise linear, and grows on both sides, so its
/// minimum sits on the kinks b = y_i - w.x_i; a flat bottom spanning several
/// kinks resolves to its midpoint.
inline double best_bias(std::span<const double> scores, std::span<const Label> y) {
  auto hinge_sum = [&](double b) {
    double s = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) s += std::max(0.0, 1.0 - label_sign(y[i]) * (scores[i] + b));
    return s;
  };
  std::vector<double> kinks(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) kinks[i] = label_sign(y[i]) - scores[i];
  std::sort(kinks.begin(), kinks.end());
  kinks.erase(std::unique(kinks.begin(), kinks.end()), kinks.end());
  RealVector values(kinks.size());
  for (std::size_t i = 0; i < kinks.size(); ++i) values[i] = hinge_sum(kinks[i]);
  const double best = *std::min_element(values.begin(), values.end());
  const double slack = 1e-12 * std::max(1.0, best);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < kinks.size(); ++i) {
    if (values[i] <= best + slack) {
      lo = std::min(lo, kinks[i]);
      hi = std::max(hi, kinks[i]);
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Trains min 1/2 |w|^2 + C sum hinge with an SMO solver on the dual
/// (second-order working-set selection, unregularized bias), then sets b by
/// exact line minimization of the primal. The dual objective is checked to be
/// non-increasing after every epoch; a violation raises NumericalError.
inline SvmModel svm_train(const Matrix& x, std::span<const Label> labels, double C = 1.0, SvmTrainInfo* info = nullptr,
                          const SvmOptions& opts = {}) {
  const std::size_t n = x.rows;
  require_same_length(labels.size(), n, "svm labels");
  if (n == 0) throw EmptyInput("svm_train needs samples");
  if (!(C > 0.0)) throw InvalidConfig("SVM penalty C must be positive");
  if (std::none_of(labels.begin(), labels.end(), [](Label l) { return l == Label::real; }) ||
      std::none_of(labels.begin(), labels.end(), [](Label l) { return l == Label::fake; })) {
    throw DegenerateLabels("svm_train needs both real and fake samples");
  }
  if (!all_finite(x.data)) throw NumericalError("non-finite SVM input");

  RealVector y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = label_sign(labels[i]);
  Matrix k(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) k(i, j) = k(j, i) = dot(x.row(i), x.row(j));
  auto q = [&](std::size_t i, std::size_t j) { return y[i] * y[j] * k(i, j); };
  constexpr double tau = 1e-12;

  RealVector alpha(n, 0.0), grad(n, -1.0);  // grad of 1/2 a'Qa - e'a
  auto dual = [&] {
    double f = 0.0;
    for (std::size_t i = 0; i < n; ++i) f += alpha[i] * (grad[i] - 1.0);
    return 0.5 * f;
  };
  SvmTrainInfo local;
  SvmTrainInfo& rec = info ? *info : local;
  rec = SvmTrainInfo{};
  double last = dual();
  const std::size_t max_updates = opts.max_epochs * n;
  for (std::size_t it = 0; it < max_updates; ++it) {
    // maximal violating pair with second-order choice of j
    double gmax = -std::numeric_limits<double>::infinity(), gmax2 = gmax;
    std::size_t i = n, j = n;
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] > 0 ? alpha[t] < C : alpha[t] > 0.0) {
        const double v = -y[t] * grad[t];
        if (v >= gmax) {
          gmax = v;
          i = t;
        }
      }
    }
    double best_obj = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n && i < n; ++t) {
      if (!(y[t] > 0 ? alpha[t] > 0.0 : alpha[t] < C)) continue;
      const double v = -y[t] * grad[t];
      gmax2 = std::max(gmax2, -v);
      const double diff = gmax - v;
      if (diff <= 0.0) continue;
      double quad = k(i, i) + k(t, t) - 2.0 * k(i, t);
      if (quad <= 0.0) quad = tau;
      const double obj = -diff * diff / quad;
      if (obj <= best_obj) {
        best_obj = obj;
        j = t;
      }
    }
    if (i == n || j == n || gmax + gmax2 < opts.tolerance) {
      rec.converged = true;
      break;
    }

    const double ai = alpha[i], aj = alpha[j];
    if (y[i] != y[j]) {
      double quad = k(i, i) + k(j, j) + 2.0 * q(i, j);
      if (quad <= 0.0) quad = tau;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0.0) {
        if (alpha[j] < 0.0) {
          alpha[j] = 0.0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = -diff;
      }
      if (diff > 0.0) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = C - diff;
        }
      } else if (alpha[j] > C) {
        alpha[j] = C;
        alpha[i] = C + diff;
      }
    } else {
      double quad = k(i, i) + k(j, j) - 2.0 * q(i, j);
      if (quad <= 0.0) quad = tau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > C) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = sum - C;
        }
      } else if (alpha[j] < 0.0) {
        alpha[j] = 0.0;
        alpha[i] = sum;
      }
      if (sum > C) {
        if (alpha[j] > C) {
          alpha[j] = C;
          alpha[i] = sum - C;
        }
      } else if (alpha[i] < 0.0) {
        alpha[i] = 0.0;
        alpha[j] = sum;
      }
    }
    const double di = alpha[i] - ai, dj = alpha[j] - aj;
    for (std::size_t t = 0; t < n; ++t) grad[t] += q(i, t) * di + q(j, t) * dj;
    ++rec.updates;
    if (rec.updates % n == 0) {
      const double f = dual();
      if (f > last + 1e-12 * std::max(1.0, std::abs(last))) {
        throw NumericalError("SVM dual objective increased from " + std::to_string(last) + " to " + std::to_string(f));
      }
      rec.dual_objective.push_back(f);
      last = f;
    }
  }
  const double f = dual();
  if (f > last + 1e-12 * std::max(1.0, std::abs(last))) throw NumericalError("SVM dual objective increased");
  rec.dual_objective.push_back(f);

  SvmModel model;
  model.C = C;
  model.w.assign(x.cols, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (alpha[i] != 0.0) axpy(alpha[i] * y[i], x.row(i), model.w);
  }
  RealVector scores(n);
  for (std::size_t i = 0; i < n; ++i) scores[i] = dot(model.w, x.row(i));
  model.b = detail::best_bias(scores, labels);
  rec.primal_objective = svm_primal_objective(model, x, labels);
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Prediction {
  std::string video_id;
  Emotion emotion = Emotion::anger;
  Label predicted = Label::real;
  Label truth = Label::real;
  double margin = 0.0;
};

struct EvaluationReport {
  std::array<double, 6> accuracy{};
  std::array<std::size_t, 6> videos{};
  std::array<double, 6> average_precision{};  // secondary: ranking AP of margins
  double overall = 0.0;
  double mean_average_precision = 0.0;
};

/// Mean of a set of per-emotion accuracies.
inline double mean_accuracy(const std::array<double, 6>& acc) {
  return std::accumulate(acc.begin(), acc.end(), 0.0) / 6.0;
}

/// Average precision of "real" when videos are ranked by decreasing margin
/// (ties broken by video id); NaN without any real video.
inline double ranking_average_precision(std::vector<const Prediction*> preds) {
  std::sort(preds.begin(), preds.end(), [](const Prediction* a, const Prediction* b) {
    if (a->margin != b->margin) return a->margin > b->margin;
    return a->video_id < b->video_id;
  });
  double hits = 0.0, sum = 0.0;
  for (std::size_t r = 0; r < preds.size(); ++r) {
    if (preds[r]->truth == Label::real) {
      hits += 1.0;
      sum += hits / static_cast<double>(r + 1);
    }
  }
  return hits > 0.0 ? sum / hits : std::numeric_limits<double>::quiet_NaN();
}

inline EvaluationReport evaluate(std::span<const Prediction> predictions) {
  EvaluationReport rep;
  std::array<std::vector<const Prediction*>, 6> by;
  for (const auto& p : predictions) by[static_cast<std::size_t>(p.emotion)].push_back(&p);
  double ap_sum = 0.0;
  std::size_t ap_n = 0;
  for (std::size_t e = 0; e < 6; ++e) {
    if (by[e].empty()) {
      throw IncompleteEvaluation("no videos for emotion " + std::string(to_string(kAllEmotions[e])));
    }
    std::size_t correct = 0;
    for (const auto* p : by[e]) correct += p->predicted == p->truth;
    rep.videos[e] = by[e].size();
    rep.accuracy[e] = static_cast<double>(correct) / static_cast<double>(by[e].size());
    rep.average_precision[e] = ranking_average_precision(by[e]);
    if (std::isfinite(rep.average_precision[e])) {
      ap_sum += rep.average_precision[e];
      ++ap_n;
    }
  }
  rep.overall = mean_accuracy(rep.accuracy);
  rep.mean_average_precision = ap_n ? ap_sum / static_cast<double>(ap_n) : std::numeric_limits<double>::quiet_NaN();
  return rep;
}

inline std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

/// Aligned two-column table, one row per emotion and an "Average" row.
inline std::string format_report_table(const EvaluationReport& rep) {
  std::string out;
  char line[96];
  std::snprintf(line, sizeof line, "%-12s %12s\n", "Emotion", "Accuracy (%)");
  out += line;
  for (std::size_t e = 0; e < 6; ++e) {
    std::string name(to_string(kAllEmotions[e]));
    name[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(name[0])));
    std::snprintf(line, sizeof line, "%-12s %12s\n", name.c_str(), percent(rep.accuracy[e]).c_str());
    out += line;
  }
  std::snprintf(line, sizeof line, "%-12s %12s\n", "Average", percent(rep.overall).c_str());
  out += line;
  return out;
}

inline std::string report_csv(const EvaluationReport& rep) {
  std::string out = "emotion,accuracy\n";
  char buf[64];
  for (std::size_t e = 0; e < 6; ++e) {
    std::snprintf(buf, sizeof buf, "%.6f", rep.accuracy[e]);
    out += std::string(to_string(kAllEmotions[e])) + ',' + buf + '\n';
  }
  std::snprintf(buf, sizeof buf, "%.6f", rep.overall);
  out += std::string("average,") + buf + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// SVM file: the model container with tensors svm.w and svm.bias_c = [b, C],
// stamped with the pipeline config it was trained on.

inline void save_svm(const SvmModel& svm, const PipelineConfig& config, const std::filesystem::path& path) {
  TensorMap t;
  t["svm.w"] = Tensor::from(svm.w);
  t["svm.bias_c"] = Tensor::from(RealVector{svm.b, svm.C});
  binio::write_file_atomic(path, encode_container(config, t));
}

inline SvmModel load_svm(const std::filesystem::path& path, PipelineConfig* config = nullptr) {
  std::vector<char> bytes;
  if (!binio::read_file(path, bytes)) throw ModelFormatError("cannot open " + path.string());
  const Container c = decode_container(std::move(bytes));
  const Tensor& bc = require_tensor(c.tensors, "svm.bias_c");
  if (bc.data.size() != 2) throw ModelFormatError("svm.bias_c must hold two values");
  if (config) *config = c.config;
  return SvmModel{require_tensor(c.tensors, "svm.w").data, bc.data[0], bc.data[1]};
}

}  // namespace stag
