#pragma once

// Recurrent interval encoder: o_k, c_k = f(y_k, c_{k-1}) over the K grid
// representations of one interval, with exact backpropagation through time.
// The default cell is a vanilla tanh RNN (o_k = c_k); an LSTM cell sits
// behind the same interface.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stag/errors.hpp"
#include "stag/numkit.hpp"

namespace stag {

enum class CellType : std::uint32_t { vanilla = 0, lstm = 1 };

inline std::size_t gate_count(CellType cell) { return cell == CellType::lstm ? 4 : 1; }

/// Gate rows are stacked [input, forget, candidate, output] for the LSTM.
struct RnnParams {
  CellType cell = CellType::vanilla;
  Matrix w_in;   // (gates*H) x d_g
  Matrix w_rec;  // (gates*H) x H
  RealVector bias;

  std::size_t input_dim() const { return w_in.cols; }
  std::size_t hidden_dim() const { return w_rec.cols; }

  static RnnParams zeros(CellType cell, std::size_t input_dim, std::size_t hidden_dim) {
    if (input_dim == 0 || hidden_dim == 0) throw InvalidLength("RNN dimensions must be positive");
    const std::size_t rows = gate_count(cell) * hidden_dim;
    return RnnParams{cell, Matrix(rows, input_dim), Matrix(rows, hidden_dim), RealVector(rows, 0.0)};
  }

  /// Weights uniform in (-a, a) with a = 1/sqrt(fan_in); bias zero.
  static RnnParams init(CellType cell, std::size_t input_dim, std::size_t hidden_dim, std::uint64_t seed) {
    RnnParams p = zeros(cell, input_dim, hidden_dim);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u_in(-1.0 / std::sqrt(static_cast<double>(input_dim)),
                                                 1.0 / std::sqrt(static_cast<double>(input_dim)));
    std::uniform_real_distribution<double> u_rec(-1.0 / std::sqrt(static_cast<double>(hidden_dim)),
                                                  1.0 / std::sqrt(static_cast<double>(hidden_dim)));
    for (auto& v : p.w_in.data) v = u_in(rng);
    for (auto& v : p.w_rec.data) v = u_rec(rng);
    return p;
  }
};

struct RnnState {
  RealVector h;  // emitted output o_k
  RealVector c;  // cell state; identical to h for the vanilla cell

  static RnnState zero(std::size_t hidden_dim) {
    return RnnState{RealVector(hidden_dim, 0.0), RealVector(hidden_dim, 0.0)};
  }
};

struct RnnStepResult {
  RealVector output;
  RnnState state;
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Gate pre-activations W_in y + W_rec h + b.
inline RealVector rnn_preactivation(std::span<const double> y, const RnnState& prev, const RnnParams& params) {
  require_same_length(y.size(), params.input_dim(), "rnn_step input");
  require_same_length(prev.h.size(), params.hidden_dim(), "rnn_step state");
  RealVector z = matvec(params.w_in, y);
  const RealVector r = matvec(params.w_rec, prev.h);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += r[i] + params.bias[i];
  return z;
}

/// On return z holds the activated gates (LSTM) or is left as is (vanilla).
inline RnnState rnn_activate(RealVector& z, const RnnState& prev, CellType cell) {
  const std::size_t hd = prev.h.size();
  RnnState next{RealVector(hd), RealVector(hd)};
  if (cell == CellType::vanilla) {
    for (std::size_t i = 0; i < hd; ++i) next.h[i] = next.c[i] = std::tanh(z[i]);
    return next;
  }
  for (std::size_t i = 0; i < hd; ++i) {
    const double ig = sigmoid(z[i]);
    const double fg = sigmoid(z[hd + i]);
    const double gg = std::tanh(z[2 * hd + i]);
    const double og = sigmoid(z[3 * hd + i]);
    z[i] = ig;
    z[hd + i] = fg;
    z[2 * hd + i] = gg;
    z[3 * hd + i] = og;
    next.c[i] = fg * prev.c[i] + ig * gg;
    next.h[i] = og * std::tanh(next.c[i]);
  }
  return next;
}

}  // namespace detail

inline RnnStepResult rnn_step(std::span<const double> y, const RnnState& prev, const RnnParams& params) {
  RealVector z = detail::rnn_preactivation(y, prev, params);
  RnnState next = detail::rnn_activate(z, prev, params.cell);
  RealVector out = next.h;
  return RnnStepResult{std::move(out), std::move(next)};
}

/// Everything BPTT needs: inputs, the per-step states and (for the LSTM) the
/// activated gates.
struct RnnTape {
  CellType cell = CellType::vanilla;
  Matrix inputs;               // K x d_g
  std::vector<RnnState> states;  // K + 1 entries; states[0] is the zero state
  std::vector<RealVector> gates;  // K entries, LSTM only

  std::size_t steps() const { return inputs.rows; }
  const RealVector& output() const { return states.back().h; }
};

struct RnnForward {
  RealVector output;  // o_K
  RnnTape tape;
};

/// Runs the cell over the grid sequence from the zero state.
inline RnnForward rnn_forward(FeatureView grids, const RnnParams& params) {
  if (grids.empty()) throw EmptyInput("rnn_forward needs at least one grid");
  require_same_length(grids.dim, params.input_dim(), "rnn_forward grid dimension");
  const std::size_t steps = grids.size();
  RnnTape tape;
  tape.cell = params.cell;
  tape.inputs = Matrix(steps, grids.dim);
  std::copy(grids.data.begin(), grids.data.end(), tape.inputs.data.begin());
  tape.states.reserve(steps + 1);
  tape.states.push_back(RnnState::zero(params.hidden_dim()));
  for (std::size_t k = 0; k < steps; ++k) {
    RealVector z = detail::rnn_preactivation(grids[k], tape.states.back(), params);
    RnnState next = detail::rnn_activate(z, tape.states.back(), params.cell);
    if (params.cell == CellType::lstm) tape.gates.push_back(std::move(z));
    tape.states.push_back(std::move(next));
  }
  RealVector out = tape.states.back().h;
  return RnnForward{std::move(out), std::move(tape)};
}

struct RnnGrads {
  Matrix w_in;
  Matrix w_rec;
  RealVector bias;
  Matrix inputs;  // empty unless input gradients were requested

  static RnnGrads zeros_like(const RnnParams& p) {
    return RnnGrads{Matrix(p.w_in.rows, p.w_in.cols), Matrix(p.w_rec.rows, p.w_rec.cols),
                    RealVector(p.bias.size(), 0.0), Matrix()};
  }
};

/// Accumulates the gradients of <grad_out, o_K> into `grads`. Input gradients
/// are written only when `grads.inputs` has been sized K x d_g.
inline void rnn_backward_acc(const RnnTape& tape, const RnnParams& params, std::span<const double> grad_out,
                             RnnGrads& grads) {
  const std::size_t hd = params.hidden_dim();
  require_same_length(grad_out.size(), hd, "rnn_backward gradient");
  require_same_length(tape.inputs.cols, params.input_dim(), "rnn_backward tape");
  if (tape.states.size() != tape.steps() + 1 || tape.cell != params.cell) {
    throw InvalidLength("rnn_backward: tape does not match the parameters");
  }
  const bool want_inputs = grads.inputs.rows == tape.steps() && grads.inputs.cols == params.input_dim();
  const std::size_t rows = gate_count(params.cell) * hd;

  RealVector dh(grad_out.begin(), grad_out.end());
  RealVector dc(hd, 0.0);
  RealVector dz(rows);
  for (std::size_t k = tape.steps(); k-- > 0;) {
    const RnnState& prev = tape.states[k];
    const RnnState& cur = tape.states[k + 1];
    if (params.cell == CellType::vanilla) {
      for (std::size_t i = 0; i < hd; ++i) dz[i] = dh[i] * (1.0 - cur.h[i] * cur.h[i]);
    } else {
      const RealVector& g = tape.gates[k];
      for (std::size_t i = 0; i < hd; ++i) {
        const double ig = g[i], fg = g[hd + i], gg = g[2 * hd + i], og = g[3 * hd + i];
        const double tc = std::tanh(cur.c[i]);
        const double dci = dc[i] + dh[i] * og * (1.0 - tc * tc);
        dz[i] = dci * gg * ig * (1.0 - ig);
        dz[hd + i] = dci * prev.c[i] * fg * (1.0 - fg);
        dz[2 * hd + i] = dci * ig * (1.0 - gg * gg);
        dz[3 * hd + i] = dh[i] * tc * og * (1.0 - og);
        dc[i] = dci * fg;
      }
    }
    for (std::size_t i = 0; i < rows; ++i) grads.bias[i] += dz[i];
    outer_acc(dz, tape.inputs.row(k), grads.w_in);
    outer_acc(dz, prev.h, grads.w_rec);
    if (want_inputs) matvec_transposed_acc(params.w_in, dz, grads.inputs.row(k));
    std::fill(dh.begin(), dh.end(), 0.0);
    matvec_transposed_acc(params.w_rec, dz, dh);
  }
}

inline RnnGrads rnn_backward(const RnnTape& tape, const RnnParams& params, std::span<const double> grad_out) {
  RnnGrads g = RnnGrads::zeros_like(params);
  g.inputs = Matrix(tape.steps(), params.input_dim());
  rnn_backward_acc(tape, params, grad_out, g);
  return g;
}


}  // namespace stag
