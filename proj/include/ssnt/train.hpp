#pragma once

// Adam training of the marginal NLL over a corpus, with checkpoints and a
// metrics log.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "ssnt/checkpoint.hpp"
#include "ssnt/data.hpp"
#include "ssnt/model.hpp"

namespace ssnt {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double clip = 5.0;  // global gradient norm; 0 disables clipping
  std::uint64_t seed = 0;
  std::size_t checkpoint_interval = 0;  // steps; 0 writes only the final checkpoint
  std::size_t validation_interval = 0;  // steps; 0 validates only at the final step
  std::size_t max_steps = 0;            // 0 = epochs decide
  std::size_t threads = 1;              // 0 = hardware concurrency

  static void fields(auto& self, auto&& v) {
    v("lr", self.lr);
    v("beta1", self.beta1);
    v("beta2", self.beta2);
    v("eps", self.eps);
    v("epochs", self.epochs);
    v("batch_size", self.batch_size);
    v("clip", self.clip);
    v("seed", self.seed);
    v("checkpoint_interval", self.checkpoint_interval);
    v("validation_interval", self.validation_interval);
    v("max_steps", self.max_steps);
    v("threads", self.threads);
  }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train config: 'lr' must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ConfigError("train config: 'beta1' must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("train config: 'beta2' must be in [0,1)");
    if (!(eps > 0.0)) throw ConfigError("train config: 'eps' must be positive");
    if (!(clip >= 0.0)) throw ConfigError("train config: 'clip' must be non-negative");
    if (batch_size == 0) throw ConfigError("train config: 'batch_size' must be positive");
    if (epochs == 0 && max_steps == 0) throw ConfigError("train config: 'epochs' or 'max_steps' must be positive");
  }
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::size_t step = 0;
  GradientMap m;
  GradientMap v;
};

/// Global L2 norm over all gradient entries. Throws if any entry is NaN.
inline double global_norm(const GradientMap& grads) {
  double ss = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.data()) {
      if (std::isnan(x)) throw Error("NaN gradient for parameter '" + name + "'");
      ss += x * x;
    }
  return std::sqrt(ss);
}

/// Scales all gradients by clip / norm when the global norm exceeds clip.
/// Returns the norm before clipping.
inline double clip_gradients(GradientMap& grads, double clip) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw Error("non-finite gradient norm");
  if (clip > 0.0 && norm > clip) {
    const double s = clip / norm;
    for (auto& [_, g] : grads)
      for (double& x : g.data()) x *= s;
  }
  return norm;
}

/// One bias-corrected Adam update with global-norm clipping first.
/// Parameters without a gradient entry are left alone.
inline void adam_step(ParameterStore& store, GradientMap grads, AdamState& state, const TrainConfig& cfg) {
  clip_gradients(grads, cfg.clip);
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [name, param] : store) {
    auto it = grads.find(name);
    if (it == grads.end()) continue;
    const Tensor& g = it->second;
    if (g.shape() != param.shape()) throw ShapeError("gradient for '" + name + "' has the wrong shape");
    auto [mi, _m] = state.m.try_emplace(name, param.shape());
    auto [vi, _v] = state.v.try_emplace(name, param.shape());
    Tensor &m = mi->second, &v = vi->second;
    for (std::size_t k = 0; k < param.numel(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      param[k] -= cfg.lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + cfg.eps);
    }
  }
}

inline void store_adam_state(const AdamState& s, ParameterStore& out) {
  for (const auto& [name, t] : s.m) out.add(std::string(kOptimizerPrefix) + "m." + name, t);
  for (const auto& [name, t] : s.v) out.add(std::string(kOptimizerPrefix) + "v." + name, t);
}

inline AdamState adam_state_from(const ParameterStore& entries, std::size_t step) {
  AdamState s;
  s.step = step;
  const std::string pm = std::string(kOptimizerPrefix) + "m.", pv = std::string(kOptimizerPrefix) + "v.";
  for (const auto& [name, t] : entries) {
    if (name.rfind(pm, 0) == 0) s.m.emplace(name.substr(pm.size()), t);
    if (name.rfind(pv, 0) == 0) s.v.emplace(name.substr(pv.size()), t);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Determinism helpers

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

/// Dropout stream of one utterance in one epoch.
inline std::uint64_t utterance_seed(std::uint64_t seed, std::string_view id, std::size_t epoch) {
  return splitmix64(splitmix64(seed ^ hash_string(id)) + epoch);
}

/// Runs fn(k) for k in [0, n) on up to `threads` workers. Exceptions are
/// rethrown in index order after all workers finish.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t k = t; k < n; k += threads) {
        try {
          fn(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Evaluation helpers

/// Sum of NLL and of frame counts over a set of utterances, dropout off.
inline std::pair<double, double> corpus_nll(const ModelConfig& cfg, const ParameterStore& params,
                                            const std::vector<const Utterance*>& utts, std::size_t threads) {
  std::vector<double> nll(utts.size());
  parallel_for(utts.size(), threads, [&](std::size_t k) {
    nll[k] = nll_value(cfg, params, utts[k]->symbols, utts[k]->features);
  });
  double total = 0.0, frames = 0.0;
  for (std::size_t k = 0; k < utts.size(); ++k) {
    total += nll[k];
    frames += static_cast<double>(utts[k]->features.rows());
  }
  return {total, frames};
}

inline bool trainable(const ModelConfig& cfg, const Utterance& u) {
  return u.symbols.size() <= group_count(u.features.rows(), cfg.reduction);
}

// ---------------------------------------------------------------------------
// Training loop

struct MetricRow {
  std::size_t step = 0;
  double train_nll = 0.0;  // per frame, this step's batch
  double val_nll = std::nan("");
  double seconds = 0.0;
};

inline std::string metrics_header() { return "step,train_nll,val_nll,seconds\n"; }

inline std::string metrics_row(const MetricRow& r) {
  return std::to_string(r.step) + ',' + format_double(r.train_nll) + ',' +
         (std::isnan(r.val_nll) ? std::string() : format_double(r.val_nll)) + ',' + format_double(r.seconds) +
         '\n';
}

struct TrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::ostream* log = nullptr;
  const Checkpoint* resume = nullptr;
  Vocabulary vocab;
};

struct TrainResult {
  ModelBundle model;
  AdamState optimizer;
  std::vector<MetricRow> metrics;
  std::vector<std::string> skipped;
};

inline Checkpoint training_checkpoint(const ModelBundle& m, const AdamState& opt) {
  Checkpoint c = make_checkpoint(m);
  store_adam_state(opt, c.params);
  return c;
}

inline TrainResult train_loop(const ModelConfig& mcfg, const TrainConfig& tcfg, const std::vector<Utterance>& train,
                              const std::vector<Utterance>& val, const TrainOptions& opts = {}) {
  mcfg.validate();
  tcfg.validate();
  auto log = [&](const std::string& s) {
    if (opts.log) *opts.log << s << '\n';
  };

  TrainResult res;
  std::vector<const Utterance*> usable, val_usable;
  for (const auto& u : train) {
    if (trainable(mcfg, u)) {
      usable.push_back(&u);
    } else {
      res.skipped.push_back(u.id);
      log("warning: skipping '" + u.id + "': " + std::to_string(u.symbols.size()) + " symbols but only " +
          std::to_string(group_count(u.features.rows(), mcfg.reduction)) + " decoder steps");
    }
  }
  for (const auto& u : val)
    if (trainable(mcfg, u)) val_usable.push_back(&u);
  if (usable.empty()) throw Error("training corpus is empty");

  res.model.config = mcfg;
  res.model.vocab = opts.vocab;
  std::size_t start = 0;
  if (opts.resume) {
    ParameterStore opt_entries;
    ModelBundle b = bundle_from_checkpoint(*opts.resume, &opt_entries);
    if (config_to_kv(b.config) != config_to_kv(mcfg)) throw ConfigError("resume checkpoint has a different model config");
    res.model.params = std::move(b.params);
    start = b.step;
    res.optimizer = adam_state_from(opt_entries, start);
  } else {
    res.model.params = init_parameters(mcfg, tcfg.seed);
  }

  const std::size_t per_epoch = (usable.size() + tcfg.batch_size - 1) / tcfg.batch_size;
  std::size_t total = per_epoch * tcfg.epochs;
  if (tcfg.max_steps > 0) total = tcfg.epochs > 0 ? std::min(total, tcfg.max_steps) : tcfg.max_steps;

  const bool files = !opts.out_dir.empty();
  std::string metrics_text = metrics_header();
  if (files && opts.resume && std::filesystem::exists(opts.out_dir / "metrics.csv")) {
    const std::string previous = read_text_file(opts.out_dir / "metrics.csv");
    auto lines = split_lines(previous);
    for (std::size_t k = 1; k < lines.size(); ++k) {
      std::size_t step = 0;
      const auto comma = lines[k].find(',');
      if (field_from_string(lines[k].substr(0, comma), step) && step <= start) {
        metrics_text += std::string(lines[k]) + '\n';
      }
    }
  }
  auto save = [&](std::size_t step) {
    round_to_f32(res.model.params);
    for (auto* moments : {&res.optimizer.m, &res.optimizer.v})
      for (auto& [_, t] : *moments)
        for (double& x : t.data()) x = static_cast<double>(static_cast<float>(x));
    res.model.step = step;
    if (files) {
      save_checkpoint(training_checkpoint(res.model, res.optimizer),
                      opts.out_dir / ("ckpt_" + std::to_string(step) + ".bin"));
      write_text_file(opts.out_dir / "metrics.csv", metrics_text);
    }
  };

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  for (std::size_t step = start + 1; step <= total; ++step) {
    const std::size_t epoch = (step - 1) / per_epoch, batch = (step - 1) % per_epoch;
    if (epoch != order_epoch) {
      order.resize(usable.size());
      std::iota(order.begin(), order.end(), 0);
      std::mt19937_64 rng(splitmix64(tcfg.seed + 0x5eedULL) ^ splitmix64(epoch));
      std::shuffle(order.begin(), order.end(), rng);
      order_epoch = epoch;
    }
    const std::size_t lo = batch * tcfg.batch_size, hi = std::min(lo + tcfg.batch_size, usable.size());
    const std::size_t n = hi - lo;
    std::vector<GradientMap> grads(n);
    std::vector<double> losses(n);
    parallel_for(n, tcfg.threads, [&](std::size_t k) {
      const Utterance& u = *usable[order[lo + k]];
      Tape tape(utterance_seed(tcfg.seed, u.id, epoch));
      auto bound = res.model.params.bind(tape);
      Var loss = nll(mcfg, bound, tape, u.symbols, u.features, true);
      losses[k] = loss.value().item();
      grads[k] = backward(loss, bound);
    });
    double frames = 0.0, loss_sum = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      frames += static_cast<double>(usable[order[lo + k]]->features.rows());
      loss_sum += losses[k];
    }
    GradientMap sum = std::move(grads[0]);
    for (std::size_t k = 1; k < n; ++k) accumulate_gradients(sum, grads[k]);
    for (auto& [_, g] : sum)
      for (double& x : g.data()) x /= frames;
    adam_step(res.model.params, std::move(sum), res.optimizer, tcfg);

    MetricRow row;
    row.step = step;
    row.train_nll = loss_sum / frames;
    const bool last = step == total;
    if (!val_usable.empty() &&
        (last || (tcfg.validation_interval > 0 && step % tcfg.validation_interval == 0))) {
      auto [v, f] = corpus_nll(mcfg, res.model.params, val_usable, tcfg.threads);
      row.val_nll = v / f;
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.metrics.push_back(row);
    metrics_text += metrics_row(row);
    if (opts.log && (step == start + 1 || last || step % 50 == 0)) {
      log("step " + std::to_string(step) + "/" + std::to_string(total) + " train_nll " + format_double(row.train_nll) +
          (std::isnan(row.val_nll) ? "" : " val_nll " + format_double(row.val_nll)));
    }
    if (last || (tcfg.checkpoint_interval > 0 && step % tcfg.checkpoint_interval == 0)) save(step);
  }
  if (start >= total) save(start);
  return res;
}

}  // namespace ssnt
