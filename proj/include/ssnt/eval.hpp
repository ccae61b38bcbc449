#pragma once

// Corpus-level evaluation and teacher-forced alignment analysis.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ssnt/data.hpp"
#include "ssnt/decode.hpp"
#include "ssnt/model.hpp"
#include "ssnt/train.hpp"
#include "ssnt/trellis.hpp"

namespace ssnt {

/// Frame-level path from a group-level path: frame f belongs to group f / r.
inline std::vector<std::size_t> frames_from_groups(const std::vector<std::size_t>& z, std::size_t frames,
                                                   std::size_t r) {
  std::vector<std::size_t> out(frames);
  for (std::size_t f = 0; f < frames; ++f) out[f] = z.at(f / r);
  return out;
}

/// 0-based first frame of every symbol after the first.
inline std::vector<std::size_t> boundaries(const std::vector<std::size_t>& frame_symbol) {
  std::vector<std::size_t> b;
  for (std::size_t f = 1; f < frame_symbol.size(); ++f)
    if (frame_symbol[f] != frame_symbol[f - 1]) b.push_back(f);
  return b;
}

/// Number of boundaries of `ref` matched by `pred` within ±tolerance frames.
/// Both paths are monotone frame paths over the same symbols.
inline std::size_t boundaries_within(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& ref,
                                     std::size_t tolerance) {
  const auto bp = boundaries(pred), br = boundaries(ref);
  if (bp.size() != br.size()) throw Error("boundaries_within: paths cover different symbol counts");
  std::size_t hits = 0;
  for (std::size_t k = 0; k < br.size(); ++k) {
    const std::size_t d = bp[k] > br[k] ? bp[k] - br[k] : br[k] - bp[k];
    hits += d <= tolerance;
  }
  return hits;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

enum class SymbolClass { kPad, kPause, kRegular };

inline SymbolClass symbol_class(const Vocabulary& vocab, std::size_t id) {
  const std::string& t = vocab.token(id);
  if (t == kBeginPad || t == kEndPad) return SymbolClass::kPad;
  if (t == kPause) return SymbolClass::kPause;
  return SymbolClass::kRegular;
}

/// Relative duration errors |pred - ref| / ref per symbol occurrence, split
/// into pause and regular occurrences. Pads are skipped.
struct DurationErrors {
  std::vector<double> regular;
  std::vector<double> pause;
};

/// Scores the first `reached` positions (all when 0).
inline void add_duration_errors(const Vocabulary& vocab, const std::vector<std::size_t>& symbols,
                                const std::vector<std::size_t>& ref, const std::vector<std::size_t>& pred,
                                DurationErrors& out, std::size_t reached = 0) {
  const std::size_t n = reached == 0 ? symbols.size() : std::min(reached, symbols.size());
  for (std::size_t i = 0; i < n; ++i) {
    const SymbolClass c = symbol_class(vocab, symbols[i]);
    if (c == SymbolClass::kPad) continue;
    const double e = std::abs(static_cast<double>(pred.at(i)) - static_cast<double>(ref.at(i))) /
                     static_cast<double>(ref.at(i));
    (c == SymbolClass::kPause ? out.pause : out.regular).push_back(e);
  }
}

// ---------------------------------------------------------------------------
// Teacher-forced alignment

struct AlignmentAnalysis {
  Tensor gamma;                          // I × groups
  AlignmentPath best;                    // per group
  std::vector<std::size_t> best_frames;  // per frame
  double log_likelihood = 0.0;
};

inline AlignmentAnalysis analyze_alignment(const ModelConfig& cfg, const ParameterStore& params,
                                           const std::vector<std::size_t>& symbols, const Tensor& y) {
  Tape tape;
  SsntGraph g = build_graph(cfg, params.bind(tape, false), tape, symbols, y, false);
  const TrellisGrid grid = trellis_of(g);
  ForwardBackwardResult fb = forward_backward(grid);
  AlignmentAnalysis a;
  a.gamma = std::move(fb.gamma);
  a.log_likelihood = fb.log_likelihood;
  a.best = best_path(grid).path;
  a.best_frames = frames_from_groups(a.best.z, y.rows(), cfg.reduction);
  return a;
}

inline std::string gamma_csv(const Tensor& gamma) { return features_to_csv(gamma); }

inline std::string best_path_csv(const AlignmentPath& p) {
  std::string out = "group_index,input_position\n";
  for (std::size_t j = 0; j < p.z.size(); ++j) out += std::to_string(j + 1) + ',' + std::to_string(p.z[j]) + '\n';
  return out;
}

/// ASCII PGM heatmap: one row per input position, one column per group,
/// 255 at the largest posterior.
inline std::string gamma_pgm(const Tensor& gamma) {
  const std::size_t I = gamma.rows(), J = gamma.cols();
  double peak = 0.0;
  for (double v : gamma.data()) peak = std::max(peak, v);
  std::string out = "P2\n" + std::to_string(J) + ' ' + std::to_string(I) + "\n255\n";
  for (std::size_t i = 0; i < I; ++i) {
    for (std::size_t j = 0; j < J; ++j) {
      const long v = peak > 0.0 ? std::lround(255.0 * gamma(i, j) / peak) : 0;
      out += std::to_string(v);
      out += j + 1 < J ? ' ' : '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus evaluation

struct EvalOptions {
  std::size_t threads = 1;
  std::size_t boundary_tolerance = 2;
  std::size_t limit_factor = 3;  // decode group limit as a multiple of the reference group count
  DecodeConfig decode;           // mode and seed; the limit is set per utterance
};

struct EvalReport {
  std::size_t utterances = 0;
  std::size_t skipped = 0;  // too short for teacher forcing
  double frames = 0.0;
  double nll_per_frame = 0.0;
  std::size_t boundaries = 0;
  std::size_t boundary_hits = 0;
  std::size_t terminated = 0;
  double mean_groups = 0.0;
  double decode_mse = 0.0;  // decoded frames against the occupied symbol's prototype
  double median_duration_error = std::numeric_limits<double>::quiet_NaN();
  double median_pause_duration_error = std::numeric_limits<double>::quiet_NaN();
  std::size_t pause_occurrences = 0;

  double boundary_accuracy() const { return boundaries ? static_cast<double>(boundary_hits) / boundaries : 0.0; }
  double termination_rate() const { return utterances ? static_cast<double>(terminated) / utterances : 0.0; }
};

/// Teacher-forced NLL and best-path boundaries, then a free-running decode
/// per utterance for termination, durations and prototype MSE. Durations
/// cover every position a decode reached; the last position of a decode that
/// hit the group limit is counted up to the limit.
inline EvalReport evaluate(const ModelConfig& cfg, const ParameterStore& params, const Vocabulary& vocab,
                           const Tensor& prototypes, const std::vector<Utterance>& utts, const EvalOptions& opt = {}) {
  struct PerUtt {
    bool usable = false;
    double nll = 0.0;
    std::size_t boundaries = 0, hits = 0;
    DecodeResult dec;
    double sq = 0.0, count = 0.0;
    DurationErrors dur;
  };
  std::vector<PerUtt> res(utts.size());
  parallel_for(utts.size(), opt.threads, [&](std::size_t k) {
    const Utterance& u = utts[k];
    PerUtt& r = res[k];
    r.usable = trainable(cfg, u);
    if (!r.usable) return;
    AlignmentAnalysis a = analyze_alignment(cfg, params, u.symbols, u.features);
    r.nll = -a.log_likelihood;
    r.boundaries = u.symbols.size() - 1;
    r.hits = boundaries_within(a.best_frames, u.frame_symbol, opt.boundary_tolerance);

    DecodeConfig d = opt.decode;
    d.r = 0;
    d.max_groups = opt.limit_factor * group_count(u.features.rows(), cfg.reduction);
    r.dec = synthesize(cfg, params, u.symbols, d);
    const std::size_t D = cfg.feature_dim;
    for (std::size_t f = 0; f < r.dec.y_hat.rows(); ++f) {
      const std::size_t sym = u.symbols[r.dec.alignment.z[f / cfg.reduction] - 1];
      for (std::size_t c = 0; c < D; ++c) {
        const double e = r.dec.y_hat(f, c) - prototypes(sym - 1, c);
        r.sq += e * e;
      }
      r.count += static_cast<double>(D);
    }
    std::vector<std::size_t> pred(u.symbols.size(), 0);
    for (std::size_t z : r.dec.alignment.z) pred[z - 1] += cfg.reduction;
    add_duration_errors(vocab, u.symbols, durations_from_alignment(u.frame_symbol, u.symbols.size()), pred, r.dur,
                        r.dec.alignment.z.back());
  });

  EvalReport rep;
  DurationErrors dur;
  double nll = 0.0, sq = 0.0, count = 0.0, groups = 0.0;
  for (std::size_t k = 0; k < utts.size(); ++k) {
    const PerUtt& r = res[k];
    if (!r.usable) {
      ++rep.skipped;
      continue;
    }
    ++rep.utterances;
    nll += r.nll;
    rep.frames += static_cast<double>(utts[k].features.rows());
    rep.boundaries += r.boundaries;
    rep.boundary_hits += r.hits;
    rep.terminated += r.dec.terminated;
    groups += static_cast<double>(r.dec.alignment.z.size());
    sq += r.sq;
    count += r.count;
    dur.regular.insert(dur.regular.end(), r.dur.regular.begin(), r.dur.regular.end());
    dur.pause.insert(dur.pause.end(), r.dur.pause.begin(), r.dur.pause.end());
  }
  if (rep.utterances == 0) throw Error("evaluate: no usable utterances");
  rep.nll_per_frame = nll / rep.frames;
  rep.mean_groups = groups / static_cast<double>(rep.utterances);
  rep.decode_mse = count > 0.0 ? sq / count : 0.0;
  rep.median_duration_error = median(dur.regular);
  rep.median_pause_duration_error = median(dur.pause);
  rep.pause_occurrences = dur.pause.size();
  return rep;
}

inline std::string format_report(const EvalReport& r) {
  auto num = [](double v) { return std::isnan(v) ? std::string("n/a") : format_double(v); };
  std::string out;
  out += "utterances: " + std::to_string(r.utterances) + "\n";
  if (r.skipped) out += "skipped (too short): " + std::to_string(r.skipped) + "\n";
  out += "nll_per_frame: " + num(r.nll_per_frame) + "\n";
  out += "boundary_accuracy: " + num(r.boundary_accuracy()) + " (" + std::to_string(r.boundary_hits) + "/" +
         std::to_string(r.boundaries) + ")\n";
  out += "termination_rate: " + num(r.termination_rate()) + " (" + std::to_string(r.terminated) + "/" +
         std::to_string(r.utterances) + ")\n";
  out += "mean_groups: " + num(r.mean_groups) + "\n";
  out += "decode_mse: " + num(r.decode_mse) + "\n";
  out += "median_duration_error: " + num(r.median_duration_error) + "\n";
  out += "median_pause_duration_error: " + num(r.median_pause_duration_error) + " (" +
         std::to_string(r.pause_occurrences) + " pauses)\n";
  return out;
}

}  // namespace ssnt
