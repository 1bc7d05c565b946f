#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slil/asr.hpp"
#include "slil/corpus.hpp"
#include "slil/lid.hpp"

namespace slil {

// ---------------------------------------------------------------------------
// Checkpoint file format
// ---------------------------------------------------------------------------
//
//   bytes 0-7   magic "SLILCKPT"
//   u32         format version (1)
//   u8          stage tag 'L' (language id) | 'A' (recognizer)
//   u32         config entry count, then per entry:
//     u16 + bytes   key
//     u16 + bytes   value
//   u32         vocabulary size, then per token: u16 + bytes
//   u32         parameter count, then per parameter:
//     u16 + bytes   name (layer path, e.g. "enc0.wx")
//     u32           rank, then u32 per dimension
//     f64 * numel   row-major values
//   u64         FNV-1a hash of every preceding byte
//
// All integers and floats little-endian. Values are stored at full double
// precision so a save/load cycle reproduces the model bit-exactly.

namespace detail {

inline uint64_t fnv1a(const char* data, size_t n, uint64_t h = 14695981039346656037ull) {
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ull;
  }
  return h;
}

template <typename T>
T read_le_ck(std::istream& is, uint64_t& offset, const std::string& what) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw IoError("checkpoint truncated while reading " + what + " at byte offset " +
                  std::to_string(offset));
  }
  offset += sizeof(T);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

inline std::string read_string_ck(std::istream& is, uint64_t& offset, const std::string& what) {
  uint16_t n = read_le_ck<uint16_t>(is, offset, what + " length");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (is.gcount() != static_cast<std::streamsize>(n)) {
    throw IoError("checkpoint truncated while reading " + what + " at byte offset " +
                  std::to_string(offset));
  }
  offset += n;
  return s;
}

inline void write_string_ck(std::ostream& os, const std::string& s) {
  if (s.size() > 0xffff) throw IoError("checkpoint string too long: '" + s + "'");
  write_le<uint16_t>(os, static_cast<uint16_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

}  // namespace detail

/// One saved parameter: layer path, shape, and row-major values.
struct SavedParam {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<double> values;
};

/// In-memory image of a checkpoint file.
struct Checkpoint {
  char stage = 'L';  // 'L' language id, 'A' recognizer
  std::vector<std::pair<std::string, std::string>> config;
  std::vector<std::string> vocab;
  std::vector<SavedParam> params;

  const std::string& config_value(const std::string& key) const {
    for (const auto& [k, v] : config) {
      if (k == key) return v;
    }
    throw IoError("checkpoint is missing config key '" + key + "'");
  }
};

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ostringstream body(std::ios::binary);
  body.write("SLILCKPT", 8);
  detail::write_le<uint32_t>(body, 1);
  detail::write_le<uint8_t>(body, static_cast<uint8_t>(ck.stage));
  detail::write_le<uint32_t>(body, static_cast<uint32_t>(ck.config.size()));
  for (const auto& [k, v] : ck.config) {
    detail::write_string_ck(body, k);
    detail::write_string_ck(body, v);
  }
  detail::write_le<uint32_t>(body, static_cast<uint32_t>(ck.vocab.size()));
  for (const std::string& t : ck.vocab) detail::write_string_ck(body, t);
  detail::write_le<uint32_t>(body, static_cast<uint32_t>(ck.params.size()));
  for (const SavedParam& p : ck.params) {
    detail::write_string_ck(body, p.name);
    detail::write_le<uint32_t>(body, static_cast<uint32_t>(p.shape.size()));
    int64_t numel = 1;
    for (int64_t d : p.shape) {
      detail::write_le<uint32_t>(body, static_cast<uint32_t>(d));
      numel *= d;
    }
    if (numel != static_cast<int64_t>(p.values.size())) {
      throw IoError("checkpoint parameter '" + p.name + "': shape does not match value count");
    }
    for (double v : p.values) detail::write_le<double>(body, v);
  }
  std::string bytes = body.str();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  detail::write_le<uint64_t>(os, detail::fnv1a(bytes.data(), bytes.size()));
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream raw;
  raw << file.rdbuf();
  std::string bytes = raw.str();
  if (bytes.size() < 8 + 4 + 1 + 8) {
    throw IoError("checkpoint '" + path + "': file too short to be a checkpoint");
  }
  size_t body_size = bytes.size() - 8;
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + body_size, 8);
  uint64_t actual = detail::fnv1a(bytes.data(), body_size);
  if (stored != actual) {
    throw IoError("checkpoint '" + path + "': checksum mismatch, file is corrupted");
  }

  std::istringstream is(bytes.substr(0, body_size), std::ios::binary);
  uint64_t offset = 0;
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, "SLILCKPT", 8) != 0) {
    throw IoError("checkpoint '" + path + "': bad magic at byte offset 0");
  }
  offset = 8;
  uint32_t version = detail::read_le_ck<uint32_t>(is, offset, "version");
  if (version != 1) {
    throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  uint8_t stage = detail::read_le_ck<uint8_t>(is, offset, "stage tag");
  if (stage != 'L' && stage != 'A') {
    throw IoError("checkpoint '" + path + "': unknown stage tag at byte offset 12");
  }
  ck.stage = static_cast<char>(stage);
  uint32_t n_config = detail::read_le_ck<uint32_t>(is, offset, "config entry count");
  for (uint32_t i = 0; i < n_config; ++i) {
    std::string k = detail::read_string_ck(is, offset, "config key");
    std::string v = detail::read_string_ck(is, offset, "config value");
    ck.config.emplace_back(std::move(k), std::move(v));
  }
  uint32_t n_vocab = detail::read_le_ck<uint32_t>(is, offset, "vocabulary size");
  for (uint32_t i = 0; i < n_vocab; ++i) {
    ck.vocab.push_back(detail::read_string_ck(is, offset, "vocabulary token"));
  }
  uint32_t n_params = detail::read_le_ck<uint32_t>(is, offset, "parameter count");
  for (uint32_t i = 0; i < n_params; ++i) {
    SavedParam p;
    p.name = detail::read_string_ck(is, offset, "parameter name");
    uint32_t rank = detail::read_le_ck<uint32_t>(is, offset, "parameter rank");
    int64_t numel = 1;
    for (uint32_t d = 0; d < rank; ++d) {
      p.shape.push_back(detail::read_le_ck<uint32_t>(is, offset, "parameter dimension"));
      numel *= p.shape.back();
    }
    p.values.resize(static_cast<size_t>(numel));
    for (double& v : p.values) {
      v = detail::read_le_ck<double>(is, offset, "parameter value");
    }
    ck.params.push_back(std::move(p));
  }
  return ck;
}

namespace detail {

inline std::vector<SavedParam> pack_params(
    const std::vector<std::pair<std::string, Tensor>>& named) {
  std::vector<SavedParam> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) {
    SavedParam p;
    p.name = name;
    p.shape = t.shape();
    p.values.assign(t.data().begin(), t.data().end());
    out.push_back(std::move(p));
  }
  return out;
}

/// Copies saved values into live parameters, matching strictly by name and
/// shape. Order in the file does not matter; extras or gaps are errors.
inline void unpack_params(const std::vector<SavedParam>& saved,
                          const std::vector<std::pair<std::string, Tensor>>& named) {
  if (saved.size() != named.size()) {
    throw IoError("checkpoint holds " + std::to_string(saved.size()) + " parameters, model has " +
                  std::to_string(named.size()));
  }
  for (const auto& [name, t] : named) {
    const SavedParam* found = nullptr;
    for (const SavedParam& p : saved) {
      if (p.name == name) {
        found = &p;
        break;
      }
    }
    if (!found) throw IoError("checkpoint is missing parameter '" + name + "'");
    if (found->shape != t.shape()) {
      throw IoError("checkpoint parameter '" + name + "': shape " + shape_str(found->shape) +
                    " does not match model shape " + shape_str(t.shape()));
    }
    Tensor live = t;  // copies alias the same storage
    auto w = live.mutable_values();
    std::copy(found->values.begin(), found->values.end(), w.begin());
  }
}

}  // namespace detail

/// Order-sensitive digest of a parameter set (names, shapes, and exact value
/// bits). Lets stage two prove it left the stage-one model untouched.
inline uint64_t param_hash(const std::vector<std::pair<std::string, Tensor>>& named) {
  uint64_t h = 14695981039346656037ull;
  for (const auto& [name, t] : named) {
    h = detail::fnv1a(name.data(), name.size(), h);
    for (int64_t d : t.shape()) {
      char buf[8];
      std::memcpy(buf, &d, 8);
      h = detail::fnv1a(buf, 8, h);
    }
    for (double v : t.data()) {
      char buf[8];
      std::memcpy(buf, &v, 8);
      h = detail::fnv1a(buf, 8, h);
    }
  }
  return h;
}

inline void save_lid(const std::string& path, const LidModel& m) {
  Checkpoint ck;
  ck.stage = 'L';
  ck.config = {{"feature_dim", std::to_string(m.feature_dim)},
               {"channels", std::to_string(m.cfg.channels)},
               {"hidden", std::to_string(m.cfg.hidden)}};
  ck.params = detail::pack_params(m.named_parameters());
  write_checkpoint(path, ck);
}

inline LidModel load_lid(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.stage != 'L') {
    throw IoError("checkpoint '" + path + "': expected a language-id checkpoint, found stage '" +
                  std::string(1, ck.stage) + "'");
  }
  LidConfig cfg;
  cfg.channels = std::stoll(ck.config_value("channels"));
  cfg.hidden = std::stoll(ck.config_value("hidden"));
  Rng rng{0};
  LidModel m = LidModel::init(std::stoll(ck.config_value("feature_dim")), cfg, rng);
  detail::unpack_params(ck.params, m.named_parameters());
  return m;
}

inline void save_asr(const std::string& path, const AsrModel& m, const Vocabulary& vocab) {
  Checkpoint ck;
  ck.stage = 'A';
  ck.config = {{"feature_dim", std::to_string(m.cfg.feature_dim)},
               {"hidden", std::to_string(m.cfg.hidden)},
               {"layers", std::to_string(m.cfg.layers)},
               {"vocab_size", std::to_string(m.cfg.vocab_size)},
               {"mode", to_string(m.cfg.cond.mode)},
               {"position", to_string(m.cfg.cond.position)},
               {"se_reduction", std::to_string(m.cfg.se_reduction)},
               {"film_hidden", std::to_string(m.cfg.film_hidden)}};
  ck.vocab = vocab.tokens;
  ck.params = detail::pack_params(m.named_parameters());
  write_checkpoint(path, ck);
}

struct LoadedAsr {
  AsrModel model;
  Vocabulary vocab;
};

inline LoadedAsr load_asr(const std::string& path) {
  Checkpoint ck = read_checkpoint(path);
  if (ck.stage != 'A') {
    throw IoError("checkpoint '" + path + "': expected a recognizer checkpoint, found stage '" +
                  std::string(1, ck.stage) + "'");
  }
  AsrConfig cfg;
  cfg.feature_dim = std::stoll(ck.config_value("feature_dim"));
  cfg.hidden = std::stoll(ck.config_value("hidden"));
  cfg.layers = std::stoll(ck.config_value("layers"));
  cfg.vocab_size = std::stoll(ck.config_value("vocab_size"));
  cfg.cond.mode = cond_mode_from(ck.config_value("mode"));
  cfg.cond.position = cond_position_from(ck.config_value("position"));
  cfg.se_reduction = std::stoll(ck.config_value("se_reduction"));
  cfg.film_hidden = std::stoll(ck.config_value("film_hidden"));
  if (ck.vocab.size() != static_cast<size_t>(cfg.vocab_size)) {
    throw IoError("checkpoint '" + path + "': vocabulary size " +
                  std::to_string(ck.vocab.size()) + " does not match vocab_size " +
                  std::to_string(cfg.vocab_size));
  }
  LoadedAsr out{AsrModel{}, Vocabulary{}};
  Rng rng{0};
  out.model = AsrModel::init(cfg, rng);
  detail::unpack_params(ck.params, out.model.named_parameters());
  if (ck.vocab.size() < 2 || ck.vocab[0] != "<blank>" || ck.vocab[1] != "<unk>") {
    throw IoError("checkpoint '" + path + "': vocabulary must start with <blank>, <unk>");
  }
  out.vocab = Vocabulary::build({ck.vocab.begin() + 2, ck.vocab.end()});
  return out;
}

}  // namespace slil
