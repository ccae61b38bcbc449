#pragma once

// Autoregressive synthesis: alternate a stay/advance decision on the input
// position with emitting the mean of the Gaussian at the new position.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "ssnt/data.hpp"
#include "ssnt/model.hpp"

namespace ssnt {

enum class DecodeMode { kGreedy, kSample };

inline std::string field_to_string(DecodeMode m) { return m == DecodeMode::kGreedy ? "greedy" : "sample"; }
inline bool field_from_string(std::string_view s, DecodeMode& out) {
  if (s == "greedy") {
    out = DecodeMode::kGreedy;
  } else if (s == "sample") {
    out = DecodeMode::kSample;
  } else {
    return false;
  }
  return true;
}

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  std::uint64_t seed = 0;
  std::size_t max_groups = 0;              // J_max; 0 = max_groups_per_symbol * I
  std::size_t max_groups_per_symbol = 10;
  std::size_t r = 0;                       // 0 = the model's reduction factor

  static void fields(auto& self, auto&& v) {
    v("mode", self.mode);
    v("seed", self.seed);
    v("max_groups", self.max_groups);
    v("max_groups_per_symbol", self.max_groups_per_symbol);
    v("r", self.r);
  }

  std::size_t limit(std::size_t I) const { return max_groups > 0 ? max_groups : max_groups_per_symbol * I; }
};

/// Probability of advancing from position c given p(Emit) at (c, j) and at
/// (c+1, j): advance weight p_shift·p_emit_next against stay weight p_emit.
inline double advance_probability(double p_emit_stay, double p_shift_stay, double p_emit_next) {
  const double adv = p_shift_stay * p_emit_next;
  const double denom = p_emit_stay + adv;
  return denom > 0.0 ? adv / denom : 0.0;
}

struct DecodeResult {
  Tensor y_hat;                      // (groups·r) × D
  AlignmentPath alignment;           // per group, 1-based input position
  std::vector<double> advance_prob;  // per group; 0 for the first group and at position I
  bool terminated = false;           // alignment reached I within the group limit
  bool stopped = false;              // the end gate fired before the limit
};

inline DecodeResult synthesize(const ModelConfig& cfg, const ParameterStore& params,
                               const std::vector<std::size_t>& symbols, const DecodeConfig& dcfg) {
  if (symbols.empty()) throw Error("synthesize: empty symbol sequence");
  if (dcfg.r != 0 && dcfg.r != cfg.reduction) {
    throw ConfigError("decode r=" + std::to_string(dcfg.r) + " differs from the model's reduction factor " +
                      std::to_string(cfg.reduction));
  }
  const std::size_t I = symbols.size(), D = cfg.feature_dim, width = cfg.group_dim();
  const std::size_t limit = dcfg.limit(I);
  if (limit < I) throw ConfigError("decode group limit " + std::to_string(limit) + " is below I=" + std::to_string(I));

  Tape tape(dcfg.seed);
  auto bound = params.bind(tape, false);
  ModelParams m = bind_model(cfg, bound, tape);
  Var enc = encode(m.encoder, symbols);
  DecoderStepper stepper(cfg, m, tape);
  std::mt19937_64 rng(dcfg.seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  DecodeResult res;
  std::vector<double> frames;
  Var prev = tape.constant(Tensor({1, D}));
  std::size_t c = 1;
  for (std::size_t j = 1; j <= limit; ++j) {
    Var dec = stepper.step(prev, cfg.prenet_dropout_inference);
    std::vector<std::pair<std::size_t, std::size_t>> cells{{c - 1, 0}};
    if (c < I) cells.emplace_back(c, 0);
    JointVars jv = joint_cells(cfg, m, enc, dec, cells);
    const Tensor& logits = jv.emit_logit.value();
    double p = 0.0;
    std::size_t slot = 0;
    if (j > 1 && c < I) {
      const double stay = detail::stable_sigmoid(logits[0]);
      p = advance_probability(stay, detail::stable_sigmoid(-logits[0]), detail::stable_sigmoid(logits[1]));
      const bool advance = dcfg.mode == DecodeMode::kSample ? unif(rng) < p : p > 0.5;
      if (advance) {
        ++c;
        slot = 1;
      }
    }
    const Tensor& mean = jv.mean.value();
    std::vector<double> group(mean.data().begin() + slot * width, mean.data().begin() + (slot + 1) * width);
    frames.insert(frames.end(), group.begin(), group.end());
    prev = tape.constant(Tensor({1, D}, std::vector<double>(group.end() - D, group.end())));
    res.alignment.z.push_back(c);
    res.advance_prob.push_back(p);

    if (c == I) {
      res.terminated = true;
      const double p_stop = detail::stable_sigmoid(-logits[slot]);
      const bool stop = dcfg.mode == DecodeMode::kSample ? unif(rng) < p_stop : p_stop > 0.5;
      if (stop) {
        res.stopped = true;
        break;
      }
    }
  }
  const std::size_t groups = res.alignment.z.size();
  res.y_hat = Tensor({groups * cfg.reduction, D}, std::move(frames));
  return res;
}

inline std::string alignment_export_csv(const DecodeResult& r) {
  std::string out = "group_index,input_position,advance_prob\n";
  for (std::size_t j = 0; j < r.alignment.z.size(); ++j) {
    out += std::to_string(j + 1) + ',' + std::to_string(r.alignment.z[j]) + ',' + format_double(r.advance_prob[j]) +
           '\n';
  }
  return out;
}

inline void export_alignment(const DecodeResult& r, const fs::path& path) {
  write_text_file(path, alignment_export_csv(r));
}

struct AlignmentRow {
  std::size_t group = 0;
  std::size_t position = 0;
  double advance_prob = 0.0;
};

inline std::vector<AlignmentRow> parse_alignment_csv(std::string_view text, const std::string& where) {
  std::vector<AlignmentRow> rows;
  std::size_t lineno = 0;
  for (std::string_view line : split_lines(text)) {
    ++lineno;
    if (lineno == 1 || line.empty()) continue;
    AlignmentRow r;
    const std::size_t a = line.find(','), b = a == line.npos ? line.npos : line.find(',', a + 1);
    if (b == line.npos || !field_from_string(line.substr(0, a), r.group) ||
        !field_from_string(line.substr(a + 1, b - a - 1), r.position) ||
        !field_from_string(line.substr(b + 1), r.advance_prob)) {
      throw IoError(where + ":" + std::to_string(lineno) + ": malformed alignment row");
    }
    rows.push_back(r);
  }
  return rows;
}

}  // namespace ssnt
