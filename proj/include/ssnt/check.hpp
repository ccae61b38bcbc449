#pragma once

// Built-in self-test suites: trellis oracles and invariants (quick), plus a
// full-model gradient check and an overfit run (full).

#include <chrono>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ssnt/data.hpp"
#include "ssnt/model.hpp"
#include "ssnt/train.hpp"
#include "ssnt/trellis.hpp"

namespace ssnt {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

using BackwardFn = std::function<Tensor(const TrellisGrid&)>;

/// Forward pass against path enumeration on random grids with I in [1,4] and
/// J in [I,7].
inline SuiteResult check_oracle(std::size_t grids = 50, std::uint64_t seed = 0, double tol = 1e-9) {
  SuiteResult r{"oracle", true, "", 0.0};
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t n = 0; n < grids; ++n) {
    const std::size_t I = 1 + rng() % 4, J = I + rng() % (8 - I);
    const TrellisGrid g = random_grid(I, J, rng);
    worst = std::max(worst, std::abs(forward_pass(g).log_likelihood - brute_force_likelihood(g)));
  }
  r.passed = worst <= tol;
  r.detail = std::to_string(grids) + " grids, max |forward - enumeration| = " + format_double(worst);
  return r;
}

/// logsumexp_i(alpha + beta) equals the log-likelihood in every column and
/// posterior columns sum to one, on random grids with I <= 10 and J <= 40.
inline SuiteResult check_identity(std::size_t grids = 20, std::uint64_t seed = 1, const BackwardFn& backward = backward_pass,
                                  double tol = 1e-8) {
  SuiteResult r{"identity", true, "", 0.0};
  std::mt19937_64 rng(seed);
  double worst = 0.0, worst_sum = 0.0;
  for (std::size_t n = 0; n < grids; ++n) {
    const std::size_t I = 1 + rng() % 10, J = I + rng() % (41 - I);
    const TrellisGrid g = random_grid(I, J, rng);
    const ForwardResult f = forward_pass(g);
    const Tensor beta = backward(g);
    for (std::size_t j = 0; j < J; ++j) {
      double col = kNegInf, mass = 0.0;
      for (std::size_t i = 0; i < I; ++i) {
        col = log_add(col, f.log_alpha(i, j) + beta(i, j));
        const double s = f.log_alpha(i, j) + beta(i, j);
        if (s != kNegInf) mass += std::exp(s - f.log_likelihood);
      }
      const double err = std::isfinite(col) ? std::abs(col - f.log_likelihood) : std::numeric_limits<double>::infinity();
      worst = std::max(worst, err);
      worst_sum = std::max(worst_sum, std::abs(mass - 1.0));
    }
  }
  r.passed = worst <= tol && worst_sum <= 1e-10;
  r.detail = std::to_string(grids) + " grids, max column deviation = " + format_double(worst) +
             ", max |sum gamma - 1| = " + format_double(worst_sum);
  return r;
}

/// The smallest full model: V=3, all hidden sizes 4, D=2, r=1.
inline ModelConfig gradient_check_config() {
  ModelConfig c;
  c.vocab_size = 3;
  c.embed_dim = 4;
  c.n_ff = 1;
  c.enc_hidden = 4;
  c.prenet1 = 4;
  c.prenet2 = 4;
  c.dec_layers = 1;
  c.dec_hidden = 4;
  c.joint_dim = 4;
  c.feature_dim = 2;
  c.reduction = 1;
  return c;
}

/// Central differences (h=1e-5) over every parameter of a seed-0 model on
/// I=3, J=5.
inline SuiteResult check_model_gradient(double tol = 1e-4, GradCheckResult* out = nullptr) {
  SuiteResult r{"gradient", true, "", 0.0};
  const ModelConfig c = gradient_check_config();
  const ParameterStore s = init_parameters(c, 0);
  const std::vector<std::size_t> x{0, 2, 1};
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  Tensor y({5, 2});
  for (double& v : y.data()) v = nd(rng);
  auto f = [&](Tape& tape, const BoundParameters& p) { return nll(c, p, tape, x, y, false); };
  GradCheckResult g = grad_check(f, s, 1e-5, tol);
  r.passed = g.max_relative_error <= tol;
  r.detail = std::to_string(g.entries) + " entries, max relative error = " + format_double(g.max_relative_error) +
             " at " + g.worst_entry + ", " + std::to_string(g.failing) + " above tolerance, max error where " +
             "the difference quotient resolves the gradient = " + format_double(g.max_resolved_error);
  if (out) *out = g;
  return r;
}

/// 50 Adam steps on a single synthetic utterance must halve the per-frame NLL.
inline SuiteResult check_overfit() {
  SuiteResult r{"overfit", true, "", 0.0};
  CorpusConfig cc;
  cc.K = 3;
  cc.D = 2;
  cc.d_min = 2;
  cc.d_max = 3;
  cc.sigma_n = 0.1;
  cc.L_min = 2;
  cc.L_max = 3;
  cc.n_train = 1;
  cc.n_val = cc.n_test = 0;
  cc.pad_frames = 1;
  cc.seed = 1;
  Corpus corpus = generate_corpus(cc);
  ModelConfig m = gradient_check_config();
  m.vocab_size = corpus.vocab.model_vocab_size();
  m.dec_hidden = 8;
  m.joint_dim = 8;
  TrainConfig t;
  t.lr = 0.05;
  t.max_steps = 50;
  t.epochs = 0;
  TrainResult res = train_loop(m, t, corpus.train, {});
  const double first = res.metrics.front().train_nll, last = res.metrics.back().train_nll;
  r.passed = last < first - 0.5 * std::abs(first);
  r.detail = "per-frame NLL " + format_double(first) + " -> " + format_double(last) + " over " + std::to_string(res.metrics.size()) + " steps";
  return r;
}

enum class CheckLevel { kQuick, kFull };

inline std::vector<SuiteResult> run_checks(CheckLevel level) {
  std::vector<std::pair<std::string, std::function<SuiteResult()>>> suites{
      {"oracle", [] { return check_oracle(); }}, {"identity", [] { return check_identity(); }}};
  if (level == CheckLevel::kFull) {
    suites.emplace_back("gradient", [] { return check_model_gradient(); });
    suites.emplace_back("overfit", [] { return check_overfit(); });
  }
  std::vector<SuiteResult> out;
  for (const auto& [name, suite] : suites) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r;
    try {
      r = suite();
    } catch (const std::exception& e) {
      r.name = name;
      r.passed = false;
      r.detail = std::string("exception: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace ssnt
