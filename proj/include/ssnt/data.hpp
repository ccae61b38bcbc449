#pragma once

// Synthetic corpus with known alignments, plus the on-disk formats: feature
// CSVs, transcripts, vocabulary and reference alignments.

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "ssnt/fields.hpp"
#include "ssnt/tensor.hpp"

namespace ssnt {

namespace fs = std::filesystem;

inline constexpr const char* kBeginPad = "<sil_b>";
inline constexpr const char* kEndPad = "<sil_e>";
inline constexpr const char* kPause = "<pau>";

struct CorpusConfig {
  std::size_t K = 0;  // regular symbols; the two pad symbols (and the pause) come on top
  std::size_t D = 0;
  std::size_t d_min = 0;
  std::size_t d_max = 0;
  double sigma_n = 0.0;
  std::size_t L_min = 0;
  std::size_t L_max = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;
  std::size_t pad_frames = 2;
  double pause = 0.0;  // chance of a pause after each non-final symbol; 0 disables the pause symbol
  std::uint64_t seed = 0;

  void validate() const {
    if (K < 1) throw ConfigError("data config: 'K' must be at least 1");
    if (D < 1) throw ConfigError("data config: 'D' must be at least 1");
    if (d_min < 1 || d_max < d_min) throw ConfigError("data config: need 1 <= 'd_min' <= 'd_max'");
    if (!(sigma_n >= 0.0)) throw ConfigError("data config: 'sigma_n' must be non-negative");
    if (L_min < 1 || L_max < L_min) throw ConfigError("data config: need 1 <= 'L_min' <= 'L_max'");
    if (!(pause >= 0.0 && pause <= 1.0)) throw ConfigError("data config: 'pause' must be in [0,1]");
  }

  static void fields(auto& self, auto&& v) {
    v("K", self.K);
    v("D", self.D);
    v("d_min", self.d_min);
    v("d_max", self.d_max);
    v("sigma_n", self.sigma_n);
    v("L_min", self.L_min);
    v("L_max", self.L_max);
    v("n_train", self.n_train);
    v("n_val", self.n_val);
    v("n_test", self.n_test);
    v("pad_frames", self.pad_frames);
    v("pause", self.pause);
    v("seed", self.seed);
  }
};

// ---------------------------------------------------------------------------
// Feature CSV

/// Shortest text that reads back to the same double (17 significant digits).
inline std::string format_double(double v) { return field_to_string(v); }

inline void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = end + 1;
  }
  return lines;
}
std::vector<std::string_view> split_lines(std::string&&) = delete;  // views would dangle

inline std::string features_to_csv(const Tensor& y) {
  if (y.rank() != 2) throw ShapeError("features must be J x D, got " + shape_str(y.shape()));
  std::string out;
  for (std::size_t j = 0; j < y.rows(); ++j) {
    for (std::size_t d = 0; d < y.cols(); ++d) {
      if (d) out += ',';
      out += format_double(y(j, d));
    }
    out += '\n';
  }
  return out;
}

inline Tensor features_from_csv(std::string_view text, const std::string& where) {
  std::vector<double> values;
  std::size_t width = 0, rows = 0, lineno = 0;
  for (std::string_view line : split_lines(text)) {
    ++lineno;
    if (line.empty()) continue;
    std::size_t count = 0, pos = 0;
    while (true) {
      std::size_t comma = line.find(',', pos);
      std::string_view field = line.substr(pos, comma == std::string_view::npos ? line.npos : comma - pos);
      while (!field.empty() && field.front() == ' ') field.remove_prefix(1);
      while (!field.empty() && field.back() == ' ') field.remove_suffix(1);
      double v = 0.0;
      auto res = std::from_chars(field.data(), field.data() + field.size(), v);
      if (field.empty() || res.ec != std::errc() || res.ptr != field.data() + field.size()) {
        throw IoError(where + ":" + std::to_string(lineno) + ": malformed number '" + std::string(field) + "'");
      }
      values.push_back(v);
      ++count;
      if (comma == std::string_view::npos) break;
      pos = comma + 1;
    }
    if (rows == 0) {
      width = count;
    } else if (count != width) {
      throw IoError(where + ":" + std::to_string(lineno) + ": ragged row with " + std::to_string(count) +
                    " values, expected " + std::to_string(width));
    }
    ++rows;
  }
  if (rows == 0) throw IoError(where + ": empty feature file");
  return Tensor({rows, width}, std::move(values));
}

inline void write_features(const Tensor& y, const fs::path& path) { write_text_file(path, features_to_csv(y)); }

inline Tensor read_features(const fs::path& path) { return features_from_csv(read_text_file(path), path.string()); }

// ---------------------------------------------------------------------------
// Vocabulary and transcripts

/// Token list where id = line number starting at 1.
struct Vocabulary {
  std::vector<std::string> tokens;
  std::map<std::string, std::size_t, std::less<>> ids;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> toks) : tokens(std::move(toks)) {
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      if (!ids.emplace(tokens[k], k + 1).second) throw IoError("vocabulary: duplicate token '" + tokens[k] + "'");
    }
  }
  std::size_t size() const { return tokens.size(); }
  /// Embedding rows needed: ids run 1..size, row 0 is unused.
  std::size_t model_vocab_size() const { return tokens.size() + 1; }
  const std::string& token(std::size_t id) const { return tokens.at(id - 1); }
  bool contains(std::string_view tok) const { return ids.find(tok) != ids.end(); }
  std::size_t id(std::string_view tok) const {
    auto it = ids.find(tok);
    if (it == ids.end()) throw ConfigError("unknown token '" + std::string(tok) + "'");
    return it->second;
  }
};

inline Vocabulary read_vocab(const fs::path& path) {
  std::vector<std::string> toks;
  const std::string text = read_text_file(path);
  for (std::string_view line : split_lines(text)) {
    if (!line.empty()) toks.emplace_back(line);
  }
  if (toks.empty()) throw IoError(path.string() + ": empty vocabulary");
  return Vocabulary(std::move(toks));
}

inline void write_vocab(const Vocabulary& v, const fs::path& path) {
  std::string out;
  for (const auto& t : v.tokens) out += t + '\n';
  write_text_file(path, out);
}

inline std::vector<std::string_view> split_tokens(std::string_view s) {
  std::vector<std::string_view> toks;
  std::size_t pos = 0;
  while (pos < s.size()) {
    while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
    std::size_t end = pos;
    while (end < s.size() && s[end] != ' ' && s[end] != '\t') ++end;
    if (end > pos) toks.push_back(s.substr(pos, end - pos));
    pos = end;
  }
  return toks;
}

/// Maps tokens to ids; unknown tokens raise ConfigError naming the token.
inline std::vector<std::size_t> tokens_to_ids(const Vocabulary& vocab, std::string_view text) {
  std::vector<std::size_t> ids;
  for (auto tok : split_tokens(text)) ids.push_back(vocab.id(tok));
  return ids;
}

struct TranscriptEntry {
  std::string id;
  std::vector<std::size_t> symbols;
};

inline std::vector<TranscriptEntry> transcripts_from_text(std::string_view text, const Vocabulary& vocab,
                                                          const std::string& where) {
  std::vector<TranscriptEntry> out;
  std::set<std::string, std::less<>> seen;
  std::size_t lineno = 0;
  for (std::string_view line : split_lines(text)) {
    ++lineno;
    if (line.empty()) continue;
    const std::string loc = where + ":" + std::to_string(lineno);
    const std::size_t tab = line.find('\t');
    if (tab == std::string_view::npos) throw IoError(loc + ": expected 'id<TAB>tokens'");
    TranscriptEntry e{std::string(line.substr(0, tab)), {}};
    if (e.id.empty()) throw IoError(loc + ": empty utterance id");
    if (!seen.insert(e.id).second) throw IoError(loc + ": duplicate utterance id '" + e.id + "'");
    for (auto tok : split_tokens(line.substr(tab + 1))) {
      if (!vocab.contains(tok)) throw ConfigError(loc + ": unknown token '" + std::string(tok) + "'");
      e.symbols.push_back(vocab.id(tok));
    }
    if (e.symbols.empty()) throw IoError(loc + ": utterance '" + e.id + "' has no tokens");
    out.push_back(std::move(e));
  }
  return out;
}

inline std::vector<TranscriptEntry> read_transcripts(const fs::path& path, const Vocabulary& vocab) {
  return transcripts_from_text(read_text_file(path), vocab, path.string());
}

// ---------------------------------------------------------------------------
// Reference alignments: per frame, the 1-based position in the symbol sequence.

inline std::string alignment_to_csv(const std::vector<std::size_t>& frame_symbol) {
  std::string out = "frame,symbol_index\n";
  for (std::size_t f = 0; f < frame_symbol.size(); ++f) {
    out += std::to_string(f + 1) + ',' + std::to_string(frame_symbol[f]) + '\n';
  }
  return out;
}

inline std::vector<std::size_t> read_reference_alignment(const fs::path& path) {
  std::vector<std::size_t> out;
  std::size_t lineno = 0;
  const std::string text = read_text_file(path);
  for (std::string_view line : split_lines(text)) {
    ++lineno;
    if (line.empty() || lineno == 1) continue;
    const std::size_t comma = line.find(',');
    std::size_t frame = 0, sym = 0;
    const char* end = line.data() + line.size();
    auto r1 = std::from_chars(line.data(), line.data() + (comma == line.npos ? line.size() : comma), frame);
    auto r2 = comma == line.npos ? std::from_chars_result{nullptr, std::errc::invalid_argument}
                                 : std::from_chars(line.data() + comma + 1, end, sym);
    if (r1.ec != std::errc() || r2.ec != std::errc() || r2.ptr != end || frame != out.size() + 1) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed alignment row");
    }
    out.push_back(sym);
  }
  if (out.empty()) throw IoError(path.string() + ": empty alignment");
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

struct Utterance {
  std::string id;
  std::vector<std::size_t> symbols;
  Tensor features;                         // J × D
  std::vector<std::size_t> frame_symbol;   // J entries in 1..I; empty when unknown
};

/// Symbol index for every frame (1-based) to per-symbol frame counts.
inline std::vector<std::size_t> durations_from_alignment(const std::vector<std::size_t>& frame_symbol,
                                                         std::size_t I) {
  std::vector<std::size_t> d(I, 0);
  for (std::size_t s : frame_symbol) d.at(s - 1) += 1;
  return d;
}

/// The generator's vocabulary for a config: pads, regular symbols s1..sK, then the pause.
inline Vocabulary corpus_vocabulary(const CorpusConfig& cfg) {
  std::vector<std::string> toks{kBeginPad, kEndPad};
  for (std::size_t k = 1; k <= cfg.K; ++k) toks.push_back("s" + std::to_string(k));
  if (cfg.pause > 0.0) toks.emplace_back(kPause);
  return Vocabulary(std::move(toks));
}

struct Corpus {
  Vocabulary vocab;
  Tensor prototypes;  // one row per vocabulary id (row id-1)
  std::vector<Utterance> train, val, test;
};

/// Pure function of the config. Pads and the pause share a constant silence
/// prototype (the zero vector); regular symbols get N(0, 1) prototypes.
inline Corpus generate_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  Corpus c{corpus_vocabulary(cfg), Tensor({1, 1}), {}, {}, {}};
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> unit;
  c.prototypes = Tensor({c.vocab.size(), cfg.D});
  for (std::size_t k = 1; k <= cfg.K; ++k) {
    const std::size_t row = c.vocab.id("s" + std::to_string(k)) - 1;
    for (std::size_t d = 0; d < cfg.D; ++d) c.prototypes(row, d) = unit(rng);
  }
  const std::size_t begin = c.vocab.id(kBeginPad), end = c.vocab.id(kEndPad);
  const std::size_t pause = cfg.pause > 0.0 ? c.vocab.id(kPause) : 0;

  auto draw = [&](const std::string& id) {
    std::uniform_int_distribution<std::size_t> len(cfg.L_min, cfg.L_max), sym(1, cfg.K), dur(cfg.d_min, cfg.d_max),
        mult(3, 5);
    std::bernoulli_distribution add_pause(cfg.pause);
    Utterance u{id, {}, Tensor({1, 1}), {}};
    std::vector<std::size_t> durs;
    u.symbols.push_back(begin);
    durs.push_back(cfg.pad_frames);
    const std::size_t L = len(rng);
    for (std::size_t n = 0; n < L; ++n) {
      u.symbols.push_back(c.vocab.id("s" + std::to_string(sym(rng))));
      durs.push_back(dur(rng));
      if (pause && n + 1 < L && add_pause(rng)) {
        u.symbols.push_back(pause);
        const std::size_t base = dur(rng);
        durs.push_back(base * mult(rng));
      }
    }
    u.symbols.push_back(end);
    durs.push_back(cfg.pad_frames);
    // Zero pad frames would leave a symbol with no frames; pads always get one.
    for (std::size_t& d : durs) d = std::max<std::size_t>(d, 1);

    std::size_t J = 0;
    for (std::size_t d : durs) J += d;
    u.features = Tensor({J, cfg.D});
    std::normal_distribution<double> noise(0.0, cfg.sigma_n > 0.0 ? cfg.sigma_n : 1.0);
    std::size_t f = 0;
    for (std::size_t i = 0; i < u.symbols.size(); ++i)
      for (std::size_t n = 0; n < durs[i]; ++n, ++f) {
        u.frame_symbol.push_back(i + 1);
        for (std::size_t d = 0; d < cfg.D; ++d) {
          u.features(f, d) = c.prototypes(u.symbols[i] - 1, d) + (cfg.sigma_n > 0.0 ? noise(rng) : 0.0);
        }
      }
    return u;
  };
  auto split = [&](const char* name, std::size_t n, std::vector<Utterance>& out) {
    for (std::size_t k = 0; k < n; ++k) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_%05zu", name, k + 1);
      out.push_back(draw(id));
    }
  };
  split("train", cfg.n_train, c.train);
  split("val", cfg.n_val, c.val);
  split("test", cfg.n_test, c.test);
  return c;
}

inline void write_corpus(const Corpus& c, const fs::path& dir) {
  write_vocab(c.vocab, dir / "vocab.txt");
  write_features(c.prototypes, dir / "prototypes.csv");
  auto split = [&](const char* name, const std::vector<Utterance>& utts) {
    std::string tsv;
    for (const auto& u : utts) {
      tsv += u.id + '\t';
      for (std::size_t i = 0; i < u.symbols.size(); ++i) {
        if (i) tsv += ' ';
        tsv += c.vocab.token(u.symbols[i]);
      }
      tsv += '\n';
      write_features(u.features, dir / "feats" / (u.id + ".csv"));
      write_text_file(dir / "align" / (u.id + ".csv"), alignment_to_csv(u.frame_symbol));
    }
    write_text_file(dir / name / "transcripts.tsv", tsv);
  };
  split("train", c.train);
  split("val", c.val);
  split("test", c.test);
}

/// Loads one split. Reference alignments are read when present.
inline std::vector<Utterance> load_split(const fs::path& dir, const std::string& split, const Vocabulary& vocab) {
  std::vector<Utterance> out;
  for (auto& e : read_transcripts(dir / split / "transcripts.tsv", vocab)) {
    Utterance u{e.id, std::move(e.symbols), read_features(dir / "feats" / (e.id + ".csv")), {}};
    const fs::path align = dir / "align" / (e.id + ".csv");
    if (fs::exists(align)) {
      u.frame_symbol = read_reference_alignment(align);
      if (u.frame_symbol.size() != u.features.rows()) {
        throw IoError(align.string() + ": " + std::to_string(u.frame_symbol.size()) + " rows but " +
                      std::to_string(u.features.rows()) + " feature frames");
      }
    }
    out.push_back(std::move(u));
  }
  return out;
}

struct CorpusStats {
  std::size_t utterances = 0;
  std::size_t frames = 0;
  double mean_I = 0.0;
  double mean_J = 0.0;
};

inline CorpusStats corpus_stats(const std::vector<const std::vector<Utterance>*>& splits) {
  CorpusStats s;
  std::size_t symbols = 0;
  for (const auto* split : splits)
    for (const auto& u : *split) {
      ++s.utterances;
      s.frames += u.features.rows();
      symbols += u.symbols.size();
    }
  if (s.utterances) {
    s.mean_I = static_cast<double>(symbols) / static_cast<double>(s.utterances);
    s.mean_J = static_cast<double>(s.frames) / static_cast<double>(s.utterances);
  }
  return s;
}

}  // namespace ssnt
