#pragma once

// Binary checkpoint: "SSNTCKPT", u32 version, length-prefixed key=value
// block, parameter table with f32 data, trailing CRC32. All integers and
// floats are little-endian.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "ssnt/data.hpp"
#include "ssnt/model.hpp"

namespace ssnt {

inline constexpr char kCheckpointMagic[8] = {'S', 'S', 'N', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  KeyValues meta;
  ParameterStore params;
};

/// Rounds every entry to the nearest f32 so a saved store reloads unchanged.
inline void round_to_f32(ParameterStore& store) {
  for (auto& [_, t] : store)
    for (double& v : t.data()) v = static_cast<double>(static_cast<float>(v));
}

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  void u32(std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    bytes(b, 4);
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<unsigned char>& buffer() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n, std::string where) : p_(p), n_(n), where_(std::move(where)) {}
  void need(std::size_t k) {
    if (n_ - pos_ < k) throw IoError(where_ + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    const unsigned char* b = p_ + pos_;
    pos_ += 4;
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), len);
    pos_ += len;
    return s;
  }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
  std::string where_;
};

inline std::uint32_t crc32_of(const unsigned char* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(::crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace detail

inline std::vector<unsigned char> serialize_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  std::string block;
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw Error("checkpoint metadata key '" + k + "' contains '=' or a newline");
    }
    block += k + '=' + v + '\n';
  }
  w.str(block);
  w.u32(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.data()) w.f32(static_cast<float>(v));
  }
  auto& buf = w.buffer();
  const std::uint32_t crc = detail::crc32_of(buf.data(), buf.size());
  w.u32(crc);
  return std::move(buf);
}

inline Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes, const std::string& where) {
  if (bytes.size() < sizeof kCheckpointMagic + 8 ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw IoError(where + ": not a checkpoint file (bad magic)");
  }
  const std::size_t body = bytes.size() - 4;
  detail::ByteReader tail(bytes.data() + body, 4, where);
  if (tail.u32() != detail::crc32_of(bytes.data(), body)) {
    throw IoError(where + ": CRC mismatch, checkpoint is corrupt");
  }
  detail::ByteReader r(bytes.data() + sizeof kCheckpointMagic, body - sizeof kCheckpointMagic, where);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError(where + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  const std::string block = r.str();
  for (std::string_view line : split_lines(block)) {
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) throw IoError(where + ": malformed metadata line");
    ckpt.meta[std::string(line.substr(0, eq))] = std::string(line.substr(eq + 1));
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t n = 0; n < count; ++n) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      shape.push_back(r.u32());
      if (shape.back() == 0) throw IoError(where + ": parameter '" + name + "' has a zero extent");
      numel *= shape.back();
    }
    r.need(numel * 4);
    std::vector<double> data(numel);
    for (double& v : data) v = r.f32();
    ckpt.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) throw IoError(where + ": trailing bytes after parameter table");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const auto bytes = serialize_checkpoint(ckpt);
  write_text_file(path, std::string(bytes.begin(), bytes.end()));
}

inline Checkpoint load_checkpoint(const fs::path& path) {
  const std::string text = read_text_file(path);
  return deserialize_checkpoint(std::vector<unsigned char>(text.begin(), text.end()), path.string());
}

// ---------------------------------------------------------------------------
// Model checkpoints: model config under "model.", vocabulary tokens under
// "vocab", parameters by name. Optimizer state, when present, lives in the
// parameter table under "adam.".

inline constexpr const char* kOptimizerPrefix = "adam.";

struct ModelBundle {
  ModelConfig config;
  Vocabulary vocab;
  ParameterStore params;  // model parameters only
  std::size_t step = 0;
};

inline Checkpoint make_checkpoint(const ModelBundle& m) {
  Checkpoint c;
  c.meta = config_to_kv(m.config, "model.");
  std::string vocab;
  for (const auto& t : m.vocab.tokens) vocab += (vocab.empty() ? "" : " ") + t;
  c.meta["vocab"] = vocab;
  c.meta["step"] = std::to_string(m.step);
  c.params = m.params;
  return c;
}

/// Splits a checkpoint into the model bundle and the remaining (optimizer) entries.
inline ModelBundle bundle_from_checkpoint(const Checkpoint& c, ParameterStore* optimizer = nullptr) {
  ModelBundle m;
  try {
    config_from_kv(m.config, c.meta, "model.");
    m.config.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint model config: ") + e.what());
  }
  auto it = c.meta.find("vocab");
  if (it == c.meta.end()) throw IoError("checkpoint has no vocabulary");
  std::vector<std::string> toks;
  for (auto t : split_tokens(it->second)) toks.emplace_back(t);
  m.vocab = Vocabulary(std::move(toks));
  if (auto s = c.meta.find("step"); s != c.meta.end()) field_from_string(s->second, m.step);
  for (const auto& [name, t] : c.params) {
    if (name.rfind(kOptimizerPrefix, 0) == 0) {
      if (optimizer) optimizer->add(name, t);
    } else {
      m.params.add(name, t);
    }
  }
  try {
    check_parameter_shapes(m.config, m.params);
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint does not match its model config: ") + e.what());
  }
  return m;
}

inline ModelBundle load_model(const fs::path& path, ParameterStore* optimizer = nullptr) {
  return bundle_from_checkpoint(load_checkpoint(path), optimizer);
}

}  // namespace ssnt
