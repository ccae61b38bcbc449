#pragma once

// Layer library: dense layers, LSTM cells and sequences, the bidirectional
// encoder and the decoder pre-net. Layers operate on Vars bound from a
// ParameterStore; the add_*_params helpers create and initialize the tensors.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "ssnt/autodiff.hpp"

namespace ssnt {

/// Initialization used across the model: uniform(-0.05, 0.05) for weights
/// and biases, normal(0, 1) for embeddings, +1 on forget-gate biases.
class ParamInit {
 public:
  explicit ParamInit(std::uint64_t seed) : rng_(seed) {}

  Tensor uniform(Shape shape, double limit = 0.05) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (double& v : t.data()) v = dist(rng_);
    return t;
  }

  Tensor normal(Shape shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data()) v = dist(rng_);
    return t;
  }

 private:
  std::mt19937_64 rng_;
};

struct DenseParams {
  Var weight;  // out × in
  Var bias;    // out
};

inline void add_dense_params(ParameterStore& store, ParamInit& init, const std::string& prefix,
                             std::size_t in, std::size_t out) {
  store.add(prefix + ".weight", init.uniform({out, in}));
  store.add(prefix + ".bias", init.uniform({out}));
}

inline DenseParams bind_dense(const BoundParameters& p, const std::string& prefix) {
  return {p[prefix + ".weight"], p[prefix + ".bias"]};
}

/// x·Wᵀ + b for a batch of row vectors.
inline Var linear(Var x, const DenseParams& layer) {
  return broadcast_add(matmul(x, layer.weight, /*transpose_b=*/true), layer.bias);
}

// ---------------------------------------------------------------------------
// LSTM

/// Gate order along the 4h axis is [input, forget, cell, output].
struct LstmCellParams {
  Var w_ih;  // 4h × d
  Var w_hh;  // 4h × h
  Var bias;  // 4h
  std::size_t hidden = 0;
};

struct LstmState {
  Var h;  // 1 × h
  Var c;  // 1 × h
};

inline void add_lstm_params(ParameterStore& store, ParamInit& init, const std::string& prefix,
                            std::size_t input, std::size_t hidden) {
  if (input == 0 || hidden == 0) throw ConfigError("lstm '" + prefix + "': sizes must be positive");
  store.add(prefix + ".w_ih", init.uniform({4 * hidden, input}));
  store.add(prefix + ".w_hh", init.uniform({4 * hidden, hidden}));
  Tensor bias = init.uniform({4 * hidden});
  for (std::size_t k = hidden; k < 2 * hidden; ++k) bias[k] = 1.0;
  store.add(prefix + ".bias", std::move(bias));
}

inline LstmCellParams bind_lstm(const BoundParameters& p, const std::string& prefix) {
  LstmCellParams cell{p[prefix + ".w_ih"], p[prefix + ".w_hh"], p[prefix + ".bias"], 0};
  cell.hidden = cell.w_hh.shape().at(1);
  if (cell.w_hh.shape().at(0) != 4 * cell.hidden || cell.w_ih.shape().at(0) != 4 * cell.hidden ||
      cell.bias.value().numel() != 4 * cell.hidden) {
    throw ShapeError("lstm '" + prefix + "': inconsistent parameter shapes");
  }
  return cell;
}

inline LstmState lstm_zero_state(Tape& tape, std::size_t hidden) {
  return {tape.constant(Tensor({1, hidden})), tape.constant(Tensor({1, hidden}))};
}

/// One step given the already-projected input x·W_ihᵀ + b (1 × 4h).
inline LstmState lstm_step_projected(const LstmCellParams& cell, Var x_proj, const LstmState& s) {
  const std::size_t h = cell.hidden;
  if (x_proj.shape() != Shape{1, 4 * h}) {
    throw ShapeError("lstm_step: projected input " + shape_str(x_proj.shape()) + " expected " +
                     shape_str({1, 4 * h}));
  }
  if (s.h.shape() != Shape{1, h} || s.c.shape() != Shape{1, h}) {
    throw ShapeError("lstm_step: state shape " + shape_str(s.h.shape()) + " expected " +
                     shape_str({1, h}));
  }
  Var gates = add(x_proj, matmul(s.h, cell.w_hh, true));
  Var i = sigmoid(slice(gates, 1, 0, h));
  Var f = sigmoid(slice(gates, 1, h, 2 * h));
  Var g = tanh(slice(gates, 1, 2 * h, 3 * h));
  Var o = sigmoid(slice(gates, 1, 3 * h, 4 * h));
  Var c = add(mul(f, s.c), mul(i, g));
  return {mul(o, tanh(c)), c};
}

/// h' = o ⊙ tanh(c'), c' = f ⊙ c + i ⊙ tanh(g), for a single 1 × d input.
inline LstmState lstm_step(const LstmCellParams& cell, Var x, const LstmState& s) {
  const Shape& ws = cell.w_ih.shape();
  if (x.shape() != Shape{1, ws.at(1)}) {
    throw ShapeError("lstm_step: input " + shape_str(x.shape()) + " does not match w_ih " +
                     shape_str(ws));
  }
  return lstm_step_projected(cell, broadcast_add(matmul(x, cell.w_ih, true), cell.bias), s);
}

/// Runs a cell over the rows of `inputs` (T × d). Output rows stay in input
/// time order even when `reverse` consumes the sequence back to front.
inline Var lstm_sequence(const LstmCellParams& cell, Var inputs, bool reverse = false) {
  if (inputs.shape().size() != 2) {
    throw ShapeError("lstm_sequence: inputs must be T x d, got " + shape_str(inputs.shape()));
  }
  const std::size_t T = inputs.shape()[0];
  Var proj = broadcast_add(matmul(inputs, cell.w_ih, true), cell.bias);
  LstmState s = lstm_zero_state(inputs.tape(), cell.hidden);
  std::vector<Var> rows(T);
  for (std::size_t k = 0; k < T; ++k) {
    const std::size_t t = reverse ? T - 1 - k : k;
    s = lstm_step_projected(cell, slice(proj, 0, t, t + 1), s);
    rows[t] = s.h;
  }
  return T == 1 ? rows[0] : concat(rows, 0);
}

struct BiLstmParams {
  LstmCellParams fwd;
  LstmCellParams bwd;
};

/// Row t is [forward state at t, backward state at t].
inline Var bilstm_apply(const BiLstmParams& p, Var inputs) {
  if (inputs.shape().size() != 2) {
    throw ShapeError("bilstm_apply: inputs must be T x d, got " + shape_str(inputs.shape()));
  }
  return concat({lstm_sequence(p.fwd, inputs, false), lstm_sequence(p.bwd, inputs, true)}, 1);
}

// ---------------------------------------------------------------------------
// Pre-net

struct PrenetParams {
  DenseParams fc1;
  DenseParams fc2;
  double rate = 0.0;
};

/// relu(W₂·drop(relu(W₁·y + b₁)) + b₂) with dropout after each relu when
/// `apply_dropout` is set. Accepts a batch of rows.
inline Var prenet_apply(const PrenetParams& p, Var y_prev, bool apply_dropout) {
  const double rate = apply_dropout ? p.rate : 0.0;
  Var h = dropout(relu(linear(y_prev, p.fc1)), rate);
  return dropout(relu(linear(h, p.fc2)), rate);
}

// ---------------------------------------------------------------------------
// Encoder

struct EncoderParams {
  Var embedding;  // V × e
  std::vector<DenseParams> ff;
  BiLstmParams bilstm;
};

inline void add_encoder_params(ParameterStore& store, ParamInit& init, std::size_t vocab,
                               std::size_t embed, std::size_t n_ff, std::size_t hidden) {
  store.add("encoder.embedding", init.normal({vocab, embed}));
  for (std::size_t k = 0; k < n_ff; ++k) {
    add_dense_params(store, init, "encoder.ff" + std::to_string(k), embed, embed);
  }
  add_lstm_params(store, init, "encoder.bilstm.fwd", embed, hidden);
  add_lstm_params(store, init, "encoder.bilstm.bwd", embed, hidden);
}

inline EncoderParams bind_encoder(const BoundParameters& p, std::size_t n_ff) {
  EncoderParams e;
  e.embedding = p["encoder.embedding"];
  for (std::size_t k = 0; k < n_ff; ++k) e.ff.push_back(bind_dense(p, "encoder.ff" + std::to_string(k)));
  e.bilstm = {bind_lstm(p, "encoder.bilstm.fwd"), bind_lstm(p, "encoder.bilstm.bwd")};
  return e;
}

/// Embedding lookup, feed-forward tanh stack, then the BiLSTM. Returns I × 2h.
inline Var encode(const EncoderParams& p, const std::vector<std::size_t>& symbols) {
  if (symbols.empty()) throw ShapeError("encode: empty symbol sequence");
  const std::size_t vocab = p.embedding.shape()[0];
  for (std::size_t pos = 0; pos < symbols.size(); ++pos) {
    if (symbols[pos] >= vocab) {
      throw ShapeError("encode: symbol id " + std::to_string(symbols[pos]) + " at position " +
                       std::to_string(pos + 1) + " is outside the vocabulary of size " +
                       std::to_string(vocab));
    }
  }
  Var x = embedding_gather(p.embedding, symbols);
  for (const auto& layer : p.ff) x = tanh(linear(x, layer));
  return bilstm_apply(p.bilstm, x);
}

}  // namespace ssnt
