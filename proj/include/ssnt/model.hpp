#pragma once

// The SSNT acoustic model: encoder over input symbols, autoregressive decoder
// over output feature groups, and a joint network that scores every
// (input position, output group) cell with an Emit probability and a
// Gaussian mean. The trellis over those cells gives the marginal likelihood.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <string_view>
#include <vector>

#include "ssnt/fields.hpp"
#include "ssnt/nnet.hpp"
#include "ssnt/trellis.hpp"

namespace ssnt {

enum class VarianceMode { kLearned, kFixed };

inline std::string field_to_string(VarianceMode m) { return m == VarianceMode::kLearned ? "learned" : "fixed"; }
inline bool field_from_string(std::string_view s, VarianceMode& out) {
  if (s == "learned") {
    out = VarianceMode::kLearned;
  } else if (s == "fixed") {
    out = VarianceMode::kFixed;
  } else {
    return false;
  }
  return true;
}

struct ModelConfig {
  std::size_t vocab_size = 0;  // embedding rows; symbol ids must be < vocab_size
  std::size_t embed_dim = 16;
  std::size_t n_ff = 1;
  std::size_t enc_hidden = 16;
  std::size_t prenet1 = 16;
  std::size_t prenet2 = 16;
  double prenet_dropout = 0.0;
  bool prenet_dropout_inference = false;
  std::size_t dec_layers = 1;
  std::size_t dec_hidden = 32;
  double lstm_dropout = 0.0;
  std::size_t joint_dim = 32;
  std::size_t n_joint_layers = 1;
  std::size_t feature_dim = 0;
  std::size_t reduction = 1;
  VarianceMode variance_mode = VarianceMode::kLearned;
  double variance = 1.0;  // used when variance_mode is fixed

  static void fields(auto& self, auto&& v) {
    v("vocab_size", self.vocab_size);
    v("embed_dim", self.embed_dim);
    v("n_ff", self.n_ff);
    v("enc_hidden", self.enc_hidden);
    v("prenet1", self.prenet1);
    v("prenet2", self.prenet2);
    v("prenet_dropout", self.prenet_dropout);
    v("prenet_dropout_inference", self.prenet_dropout_inference);
    v("dec_layers", self.dec_layers);
    v("dec_hidden", self.dec_hidden);
    v("lstm_dropout", self.lstm_dropout);
    v("joint_dim", self.joint_dim);
    v("n_joint_layers", self.n_joint_layers);
    v("feature_dim", self.feature_dim);
    v("reduction", self.reduction);
    v("variance_mode", self.variance_mode);
    v("variance", self.variance);
  }

  std::size_t group_dim() const { return feature_dim * reduction; }
  std::size_t enc_dim() const { return 2 * enc_hidden; }

  void validate() const {
    auto positive = [](std::size_t v, const char* key) {
      if (v == 0) throw ConfigError(std::string("model config: '") + key + "' must be positive");
    };
    positive(vocab_size, "vocab_size");
    positive(embed_dim, "embed_dim");
    positive(enc_hidden, "enc_hidden");
    positive(prenet1, "prenet1");
    positive(prenet2, "prenet2");
    positive(dec_layers, "dec_layers");
    positive(dec_hidden, "dec_hidden");
    positive(joint_dim, "joint_dim");
    positive(n_joint_layers, "n_joint_layers");
    positive(feature_dim, "feature_dim");
    if (reduction != 1 && reduction != 2) throw ConfigError("model config: 'reduction' must be 1 or 2");
    if (!(prenet_dropout >= 0.0 && prenet_dropout < 1.0)) {
      throw ConfigError("model config: 'prenet_dropout' must be in [0,1)");
    }
    if (!(lstm_dropout >= 0.0 && lstm_dropout < 1.0)) {
      throw ConfigError("model config: 'lstm_dropout' must be in [0,1)");
    }
    if (variance_mode == VarianceMode::kFixed && !(variance > 0.0)) {
      throw ConfigError("model config: 'variance' must be positive in fixed mode");
    }
  }
};

inline constexpr const char* kLogVarianceParam = "emission.log_var";

/// Creates every parameter the config implies. Deterministic in `seed`.
inline ParameterStore init_parameters(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterStore store;
  ParamInit init(seed);
  add_encoder_params(store, init, cfg.vocab_size, cfg.embed_dim, cfg.n_ff, cfg.enc_hidden);
  add_dense_params(store, init, "decoder.prenet.fc1", cfg.feature_dim, cfg.prenet1);
  add_dense_params(store, init, "decoder.prenet.fc2", cfg.prenet1, cfg.prenet2);
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) {
    add_lstm_params(store, init, "decoder.lstm" + std::to_string(l), l == 0 ? cfg.prenet2 : cfg.dec_hidden,
                    cfg.dec_hidden);
  }
  for (std::size_t l = 0; l < cfg.n_joint_layers; ++l) {
    add_dense_params(store, init, "joint.fc" + std::to_string(l),
                     l == 0 ? cfg.dec_hidden + cfg.enc_dim() : cfg.joint_dim, cfg.joint_dim);
  }
  add_dense_params(store, init, "joint.emit", cfg.joint_dim, 1);
  add_dense_params(store, init, "joint.mean", cfg.joint_dim, cfg.group_dim());
  if (cfg.variance_mode == VarianceMode::kLearned) store.add(kLogVarianceParam, Tensor({1}, 0.0));
  return store;
}

/// Checks that `store` holds exactly the parameters `cfg` implies, with matching shapes.
inline void check_parameter_shapes(const ModelConfig& cfg, const ParameterStore& store) {
  ParameterStore want = init_parameters(cfg, 0);
  if (want.size() != store.size()) {
    throw ConfigError("parameter count " + std::to_string(store.size()) + " does not match the " +
                      std::to_string(want.size()) + " implied by the model config");
  }
  for (const auto& [name, t] : want) {
    if (!store.contains(name)) throw ConfigError("missing parameter '" + name + "'");
    if (store.at(name).shape() != t.shape()) {
      throw ConfigError("parameter '" + name + "' has shape " + shape_str(store.at(name).shape()) +
                        ", expected " + shape_str(t.shape()));
    }
  }
}

/// Layer views of a bound parameter set.
struct ModelParams {
  EncoderParams encoder;
  PrenetParams prenet;
  std::vector<LstmCellParams> decoder;
  std::vector<DenseParams> joint;
  DenseParams emit_head;
  DenseParams mean_head;
  Var log_var;  // learned log σ², or a constant in fixed mode
};

inline ModelParams bind_model(const ModelConfig& cfg, const BoundParameters& p, Tape& tape) {
  ModelParams m;
  m.encoder = bind_encoder(p, cfg.n_ff);
  m.prenet = {bind_dense(p, "decoder.prenet.fc1"), bind_dense(p, "decoder.prenet.fc2"), cfg.prenet_dropout};
  for (std::size_t l = 0; l < cfg.dec_layers; ++l) m.decoder.push_back(bind_lstm(p, "decoder.lstm" + std::to_string(l)));
  for (std::size_t l = 0; l < cfg.n_joint_layers; ++l) m.joint.push_back(bind_dense(p, "joint.fc" + std::to_string(l)));
  m.emit_head = bind_dense(p, "joint.emit");
  m.mean_head = bind_dense(p, "joint.mean");
  m.log_var = cfg.variance_mode == VarianceMode::kLearned
                  ? p[kLogVarianceParam]
                  : tape.constant(Tensor({1}, std::log(cfg.variance)));
  return m;
}

// ---------------------------------------------------------------------------
// Feature grouping

/// Output frames grouped r at a time. Short final groups are right-padded by
/// repeating the last frame; `mask` is 0 on those padded entries.
struct FeatureGroups {
  std::size_t frames = 0;  // J
  std::size_t groups = 0;  // J' = ceil(J / r)
  Tensor values;           // J' × (D·r)
  Tensor mask;             // J' × (D·r)
  std::vector<double> real_dims;  // per group: number of unmasked entries
};

inline FeatureGroups group_features(const Tensor& y, std::size_t reduction) {
  if (y.rank() != 2) throw ShapeError("features must be J x D, got " + shape_str(y.shape()));
  const std::size_t J = y.dim(0), D = y.dim(1), r = reduction;
  FeatureGroups g;
  g.frames = J;
  g.groups = (J + r - 1) / r;
  g.values = Tensor({g.groups, D * r});
  g.mask = Tensor({g.groups, D * r});
  g.real_dims.assign(g.groups, 0.0);
  for (std::size_t j = 0; j < g.groups; ++j)
    for (std::size_t k = 0; k < r; ++k) {
      const std::size_t f = j * r + k;
      const bool real = f < J;
      for (std::size_t d = 0; d < D; ++d) {
        g.values(j, k * D + d) = y(real ? f : J - 1, d);
        g.mask(j, k * D + d) = real ? 1.0 : 0.0;
      }
      if (real) g.real_dims[j] += static_cast<double>(D);
    }
  return g;
}

/// Inverse of grouping for generated output: J' × (D·r) back to (J'·r) × D.
inline Tensor ungroup_features(const Tensor& groups, std::size_t feature_dim) {
  const std::size_t r = groups.dim(1) / feature_dim;
  return groups.reshaped({groups.dim(0) * r, feature_dim});
}

// ---------------------------------------------------------------------------
// Decoder

/// Teacher-forced decoder input: row 0 is the all-zero go frame, row j is the
/// last frame of group j-1.
inline Tensor teacher_forcing_inputs(const Tensor& y, std::size_t reduction) {
  const std::size_t J = y.dim(0), D = y.dim(1);
  const std::size_t groups = (J + reduction - 1) / reduction;
  Tensor in({groups, D});
  for (std::size_t j = 1; j < groups; ++j)
    for (std::size_t d = 0; d < D; ++d) in(j, d) = y(j * reduction - 1, d);
  return in;
}

/// Top-layer decoder states under teacher forcing, J' × h_dec.
inline Var decoder_states(const ModelConfig& cfg, const ModelParams& m, Tape& tape, const Tensor& y,
                          bool training) {
  if (y.rank() != 2 || y.dim(1) != cfg.feature_dim) {
    throw ShapeError("decoder_states: features must be J x " + std::to_string(cfg.feature_dim) + ", got " +
                     shape_str(y.shape()));
  }
  Var x = prenet_apply(m.prenet, tape.constant(teacher_forcing_inputs(y, cfg.reduction)), training);
  for (std::size_t l = 0; l < m.decoder.size(); ++l) {
    if (l > 0 && training) x = dropout(x, cfg.lstm_dropout);
    x = lstm_sequence(m.decoder[l], x);
  }
  return x;
}

/// One autoregressive decoder step from the previous output frame (1 × D).
struct DecoderStepper {
  const ModelConfig* cfg;
  const ModelParams* model;
  std::vector<LstmState> states;

  DecoderStepper(const ModelConfig& c, const ModelParams& m, Tape& tape) : cfg(&c), model(&m) {
    for (std::size_t l = 0; l < c.dec_layers; ++l) states.push_back(lstm_zero_state(tape, c.dec_hidden));
  }

  Var step(Var prev_frame, bool prenet_dropout) {
    Var x = prenet_apply(model->prenet, prev_frame, prenet_dropout);
    for (std::size_t l = 0; l < states.size(); ++l) {
      states[l] = lstm_step(model->decoder[l], x, states[l]);
      x = states[l].h;
    }
    return x;
  }
};

// ---------------------------------------------------------------------------
// Joint network

struct JointVars {
  Var emit_logit;  // n
  Var mean;        // n × (D·r)
};

/// Scores the listed cells. cells[k] = (input row i, decoder row j).
inline JointVars joint_cells(const ModelConfig& cfg, const ModelParams& m, Var enc, Var dec,
                             const std::vector<std::pair<std::size_t, std::size_t>>& cells) {
  const std::size_t hd = cfg.dec_hidden;
  if (enc.shape().size() != 2 || enc.shape()[1] != cfg.enc_dim() || dec.shape().size() != 2 ||
      dec.shape()[1] != hd) {
    throw ShapeError("joint: encoder " + shape_str(enc.shape()) + " / decoder " + shape_str(dec.shape()) +
                     " do not match the model config");
  }
  const DenseParams& first = m.joint.front();
  Var dec_part = matmul(dec, slice(first.weight, 1, 0, hd), true);
  Var enc_part = broadcast_add(matmul(enc, slice(first.weight, 1, hd, hd + cfg.enc_dim()), true), first.bias);
  std::vector<std::size_t> rows_i, rows_j;
  rows_i.reserve(cells.size());
  rows_j.reserve(cells.size());
  for (auto [i, j] : cells) {
    rows_i.push_back(i);
    rows_j.push_back(j);
  }
  Var t = tanh(add(embedding_gather(enc_part, rows_i), embedding_gather(dec_part, rows_j)));
  for (std::size_t l = 1; l < m.joint.size(); ++l) t = tanh(linear(t, m.joint[l]));
  Var logit = reshape(linear(t, m.emit_head), {cells.size()});
  return {logit, linear(t, m.mean_head)};
}

/// All I × J' cells in row-major order.
inline std::vector<std::pair<std::size_t, std::size_t>> all_cells(std::size_t I, std::size_t J) {
  std::vector<std::pair<std::size_t, std::size_t>> cells;
  cells.reserve(I * J);
  for (std::size_t i = 0; i < I; ++i)
    for (std::size_t j = 0; j < J; ++j) cells.emplace_back(i, j);
  return cells;
}

/// Value-level joint outputs over the full grid.
struct JointCellOutputs {
  std::size_t I = 0;
  std::size_t J = 0;
  Tensor emit_prob;  // I × J'
  Tensor mean;       // (I·J') × (D·r), row i·J' + j
};

inline JointCellOutputs joint_grid(const ModelConfig& cfg, const ModelParams& m, Var enc, Var dec) {
  const std::size_t I = enc.shape()[0], J = dec.shape()[0];
  JointVars jv = joint_cells(cfg, m, enc, dec, all_cells(I, J));
  JointCellOutputs out{I, J, Tensor({I, J}), jv.mean.value()};
  for (std::size_t k = 0; k < I * J; ++k) out.emit_prob[k] = detail::stable_sigmoid(jv.emit_logit.value()[k]);
  return out;
}

/// log p(Emit) and log p(Shift) = log1p(-p(Emit)) for every cell.
inline std::pair<Tensor, Tensor> transition_log_probs(const JointCellOutputs& grid) {
  Tensor le(grid.emit_prob.shape()), ls(grid.emit_prob.shape());
  for (std::size_t k = 0; k < le.numel(); ++k) {
    const double p = grid.emit_prob[k];
    if (!(p > 0.0 && p < 1.0)) throw Error("transition_log_probs: Emit probability outside (0,1)");
    le[k] = std::log(p);
    ls[k] = std::log1p(-p);
  }
  return {le, ls};
}

/// Isotropic Gaussian log-density of one group.
inline double emission_logdensity(std::span<const double> y, std::span<const double> mean, double variance) {
  if (y.size() != mean.size()) throw ShapeError("emission_logdensity: dimension mismatch");
  if (!(variance > 0.0)) throw Error("emission_logdensity: variance must be positive");
  double ss = 0.0;
  for (std::size_t k = 0; k < y.size(); ++k) ss += (y[k] - mean[k]) * (y[k] - mean[k]);
  return -0.5 * static_cast<double>(y.size()) * std::log(2.0 * std::numbers::pi * variance) - ss / (2.0 * variance);
}

// ---------------------------------------------------------------------------
// Full graph

/// Every intermediate of one teacher-forced likelihood evaluation.
struct SsntGraph {
  Var enc;             // I × 2h_enc
  Var dec;             // J' × h_dec
  JointVars joint;     // per cell, row-major I × J'
  Var log_emit;        // I × J'
  Var log_emit_prob;   // I × J'
  Var log_shift_prob;  // I × J'
  ForwardVars forward;
  Var nll;             // scalar, -log α(I, J')
  std::size_t I = 0;
  std::size_t groups = 0;
  std::size_t frames = 0;
};

inline std::size_t group_count(std::size_t frames, std::size_t reduction) {
  return (frames + reduction - 1) / reduction;
}

inline SsntGraph build_graph(const ModelConfig& cfg, const BoundParameters& params, Tape& tape,
                             const std::vector<std::size_t>& symbols, const Tensor& y, bool training) {
  if (y.rank() != 2 || y.dim(0) == 0) throw ShapeError("features must be a non-empty J x D matrix");
  SsntGraph g;
  g.I = symbols.size();
  g.frames = y.dim(0);
  g.groups = group_count(g.frames, cfg.reduction);
  if (g.I > g.groups) {
    throw Error("utterance has " + std::to_string(g.I) + " symbols but only " + std::to_string(g.groups) +
                " decoder steps; reduce the reduction factor or check the data");
  }
  ModelParams m = bind_model(cfg, params, tape);
  g.enc = encode(m.encoder, symbols);
  g.dec = decoder_states(cfg, m, tape, y, training);
  const auto cells = all_cells(g.I, g.groups);
  g.joint = joint_cells(cfg, m, g.enc, g.dec, cells);

  const FeatureGroups fg = group_features(y, cfg.reduction);
  const std::size_t n = cells.size(), width = cfg.group_dim();
  Tensor targets({n, width}), mask({n, width}), counts({n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = cells[k].second;
    for (std::size_t d = 0; d < width; ++d) {
      targets(k, d) = fg.values(j, d);
      mask(k, d) = fg.mask(j, d);
    }
    counts[k] = fg.real_dims[j];
  }
  Var diff = mul(sub(tape.constant(std::move(targets)), g.joint.mean), tape.constant(std::move(mask)));
  Var sq = sum(mul(diff, diff), 1);
  Var inv_var = exp(neg(m.log_var));
  Var log_norm = add(m.log_var, tape.constant(Tensor::scalar(std::log(2.0 * std::numbers::pi))));
  Var dens = mul(add(mul(sq, inv_var), mul(tape.constant(std::move(counts)), log_norm)),
                 tape.constant(Tensor::scalar(-0.5)));
  g.log_emit = reshape(dens, {g.I, g.groups});
  g.log_emit_prob = reshape(log_sigmoid(g.joint.emit_logit), {g.I, g.groups});
  g.log_shift_prob = reshape(log_sigmoid(neg(g.joint.emit_logit)), {g.I, g.groups});
  g.forward = forward_pass(g.log_emit, g.log_emit_prob, g.log_shift_prob);
  g.nll = neg(g.forward.log_likelihood);
  return g;
}

/// Negative log-likelihood of one utterance as a differentiable scalar.
inline Var nll(const ModelConfig& cfg, const BoundParameters& params, Tape& tape,
               const std::vector<std::size_t>& symbols, const Tensor& y, bool training) {
  return build_graph(cfg, params, tape, symbols, y, training).nll;
}

/// Value of the NLL with dropout off.
inline double nll_value(const ModelConfig& cfg, const ParameterStore& store, const std::vector<std::size_t>& symbols,
                        const Tensor& y) {
  Tape tape;
  return nll(cfg, store.bind(tape, /*requires_grad=*/false), tape, symbols, y, false).value().item();
}

/// TrellisGrid values from a built graph.
inline TrellisGrid trellis_of(const SsntGraph& g) {
  return {g.I, g.groups, g.log_emit.value(), g.log_emit_prob.value(), g.log_shift_prob.value()};
}

}  // namespace ssnt
