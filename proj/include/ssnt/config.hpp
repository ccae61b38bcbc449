#pragma once

// INI run configuration with [model], [train], [data] and [decode] sections.
// Every key must name a field of the matching config struct.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>

#include "ssnt/data.hpp"
#include "ssnt/decode.hpp"
#include "ssnt/model.hpp"
#include "ssnt/train.hpp"

namespace ssnt {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  CorpusConfig data;
  DecodeConfig decode;
  std::map<std::string, std::set<std::string>> present;  // section -> keys given in the file

  bool has(const std::string& section, const std::string& key) const {
    auto it = present.find(section);
    return it != present.end() && it->second.count(key) > 0;
  }

  void require(const std::string& section, std::initializer_list<const char*> keys) const {
    for (const char* k : keys)
      if (!has(section, k)) throw ConfigError("missing key '" + std::string(k) + "' in section [" + section + "]");
  }
};

namespace detail {

template <class Config>
void apply_section(const std::string& name, const boost::property_tree::ptree& section, const std::string& where,
                   Config& cfg, std::set<std::string>& keys) {
  KeyValues kv;
  for (const auto& [key, node] : section) {
    if (!node.empty()) throw ConfigError(where + ": nested entry '" + key + "' in section [" + name + "]");
    if (!config_has_key<Config>(key)) throw ConfigError(where + ": unknown key '" + key + "' in section [" + name + "]");
    kv[key] = node.data();
    keys.insert(key);
  }
  try {
    config_from_kv(cfg, kv);
  } catch (const ConfigError& e) {
    throw ConfigError(where + ": [" + name + "] " + e.what());
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text, const std::string& where) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(where + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig rc;
  for (const auto& [name, section] : tree) {
    if (section.empty()) throw ConfigError(where + ": key '" + name + "' outside of any section");
    auto& keys = rc.present[name];
    if (name == "model") {
      detail::apply_section(name, section, where, rc.model, keys);
    } else if (name == "train") {
      detail::apply_section(name, section, where, rc.train, keys);
    } else if (name == "data") {
      detail::apply_section(name, section, where, rc.data, keys);
    } else if (name == "decode") {
      detail::apply_section(name, section, where, rc.decode, keys);
    } else {
      throw ConfigError(where + ": unknown section [" + name + "]");
    }
  }
  return rc;
}

inline RunConfig load_run_config(const fs::path& path) { return parse_run_config(read_text_file(path), path.string()); }

/// Keys gen-data needs; pad_frames and pause have defaults.
inline void require_corpus_keys(const RunConfig& rc) {
  rc.require("data", {"K", "D", "d_min", "d_max", "sigma_n", "L_min", "L_max", "n_train", "n_val", "n_test", "seed"});
}

/// Fills vocab_size and feature_dim from the corpus when the file leaves them
/// out, and rejects explicit values that disagree with it.
inline ModelConfig resolve_model_config(const RunConfig& rc, const Vocabulary& vocab, std::size_t feature_dim) {
  ModelConfig m = rc.model;
  if (!rc.has("model", "vocab_size")) {
    m.vocab_size = vocab.model_vocab_size();
  } else if (m.vocab_size != vocab.model_vocab_size()) {
    throw ConfigError("model vocab_size " + std::to_string(m.vocab_size) + " does not match the corpus vocabulary (" +
                      std::to_string(vocab.model_vocab_size()) + ")");
  }
  if (!rc.has("model", "feature_dim")) {
    m.feature_dim = feature_dim;
  } else if (m.feature_dim != feature_dim) {
    throw ConfigError("model feature_dim " + std::to_string(m.feature_dim) + " does not match the corpus features (" +
                      std::to_string(feature_dim) + ")");
  }
  m.validate();
  return m;
}

inline std::string run_config_to_ini(const RunConfig& rc) {
  std::string out;
  auto section = [&](const std::string& name, const KeyValues& kv) {
    out += "[" + name + "]\n";
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    out += "\n";
  };
  section("model", config_to_kv(rc.model));
  section("train", config_to_kv(rc.train));
  section("data", config_to_kv(rc.data));
  section("decode", config_to_kv(rc.decode));
  return out;
}

}  // namespace ssnt
