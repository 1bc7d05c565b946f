#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "slil/conditioning.hpp"
#include "slil/losses.hpp"
#include "slil/random.hpp"
#include "slil/tensor.hpp"

namespace slil {

inline char lang_char(int lang) {
  switch (lang) {
    case 0: return 'A';
    case 1: return 'B';
    case 2: return 'M';
  }
  throw ConfigError("unknown language id " + std::to_string(lang));
}

inline int lang_from_char(char c) {
  switch (c) {
    case 'A': return 0;
    case 'B': return 1;
    case 'M': return 2;
  }
  throw IoError(std::string("unknown language tag '") + c + "'");
}

struct Utterance {
  Tensor features;              // [T, F]
  std::vector<int> transcript;  // vocabulary ids
  int lang = 0;                 // 0=A, 1=B, 2=MIXED

  int64_t duration() const { return features.dim(0); }
};

struct CorpusSplit {
  std::vector<Utterance> train, dev, test;
  uint64_t seed = 0;
};

struct CorpusConfig {
  int64_t train_count = 600;
  int64_t dev_count = 120;
  int64_t test_count = 120;
  double ratio_a = 0.47;  // remaining share is MIXED
  double ratio_b = 0.26;
  int64_t min_tokens = 2;
  int64_t max_tokens = 12;
  int64_t frames_per_token = 4;
  int64_t feature_dim = 16;
  double noise_sigma = 0.3;
  double collision_prob = 0.5;  // draw rate of the language's ambiguous token

  void validate() const {
    if (train_count < 1 || dev_count < 1 || test_count < 1) {
      throw ConfigError("corpus: each split needs at least one utterance");
    }
    if (min_tokens < 2 || max_tokens > 20 || min_tokens > max_tokens) {
      throw ConfigError("corpus: token length range must sit inside [2,20]");
    }
    if (ratio_a <= 0 || ratio_b <= 0 || ratio_a + ratio_b >= 1.0) {
      throw ConfigError("corpus: language ratios must be positive and sum below 1");
    }
    if (frames_per_token < 1) throw ConfigError("corpus: frames_per_token must be >= 1");
    if (feature_dim < 12) {
      throw ConfigError("corpus: feature_dim must be >= 12 to hold the template layout");
    }
    if (noise_sigma < 0) throw ConfigError("corpus: noise_sigma must be >= 0");
    if (collision_prob < 0 || collision_prob >= 1.0) {
      throw ConfigError("corpus: collision_prob must be in [0,1)");
    }
  }

  struct LangCounts {
    int64_t a, b, mixed;
  };
  LangCounts lang_counts(int64_t total) const {
    LangCounts c{};
    c.a = static_cast<int64_t>(ratio_a * static_cast<double>(total) + 0.5);
    c.b = static_cast<int64_t>(ratio_b * static_cast<double>(total) + 0.5);
    c.mixed = total - c.a - c.b;
    return c;
  }
};

/// Token inventory and rendering transform for one language.
struct LanguageSpec {
  std::string name;
  std::vector<int> tokens;         // full inventory (unique + shared), vocab ids
  std::vector<int> unique_tokens;  // tokens no other language uses
  int collision_token = 0;         // shared token whose rendering is ambiguous
  std::vector<double> shared_offset;  // affine distortion applied to shared templates
};

/// The synthetic acoustic model: per-token templates plus per-language
/// distortion of shared-token templates.
///
/// Templates are scaled coordinate vectors, so all distinct renderings sit
/// at L2 distance >= sqrt(2)*amplitude from each other. Language B renders
/// shared tokens translated by amplitude*(e8 - e9), which lands B's "s1"
/// exactly on A's "s0" rendering: the one deliberate cross-language
/// collision an unconditioned decoder cannot resolve.
struct CorpusModel {
  Vocabulary vocab;
  int64_t feature_dim = 16;
  double amplitude = 1.5;
  std::vector<std::vector<double>> templates;  // indexed by vocab id
  std::vector<int> shared_tokens;
  LanguageSpec lang_a, lang_b;

  static CorpusModel make_default(int64_t feature_dim = 16) {
    if (feature_dim < 12) {
      throw ConfigError("corpus model: feature_dim must be >= 12");
    }
    CorpusModel m;
    m.feature_dim = feature_dim;
    m.vocab = Vocabulary::build(
        {"a0", "a1", "a2", "a3", "b0", "b1", "b2", "b3", "s0", "s1", "s2", "s3"});
    m.templates.assign(static_cast<size_t>(m.vocab.size()),
                       std::vector<double>(static_cast<size_t>(feature_dim), 0.0));
    // Regular tokens start at id 2 (blank, unk reserved); token i maps to
    // coordinate i in feature space.
    for (int i = 0; i < 12; ++i) {
      m.templates[static_cast<size_t>(2 + i)][static_cast<size_t>(i)] = m.amplitude;
    }
    for (const char* s : {"s0", "s1", "s2", "s3"}) m.shared_tokens.push_back(m.vocab.id(s));

    m.lang_a.name = "A";
    m.lang_a.unique_tokens = {m.vocab.id("a0"), m.vocab.id("a1"), m.vocab.id("a2"),
                              m.vocab.id("a3")};
    m.lang_a.tokens = m.lang_a.unique_tokens;
    m.lang_a.tokens.insert(m.lang_a.tokens.end(), m.shared_tokens.begin(),
                           m.shared_tokens.end());
    m.lang_a.collision_token = m.vocab.id("s0");
    m.lang_a.shared_offset.assign(static_cast<size_t>(feature_dim), 0.0);

    m.lang_b.name = "B";
    m.lang_b.unique_tokens = {m.vocab.id("b0"), m.vocab.id("b1"), m.vocab.id("b2"),
                              m.vocab.id("b3")};
    m.lang_b.tokens = m.lang_b.unique_tokens;
    m.lang_b.tokens.insert(m.lang_b.tokens.end(), m.shared_tokens.begin(),
                           m.shared_tokens.end());
    m.lang_b.collision_token = m.vocab.id("s1");
    // Translation sending template(s1) onto template(s0).
    m.lang_b.shared_offset.assign(static_cast<size_t>(feature_dim), 0.0);
    m.lang_b.shared_offset[8] = m.amplitude;
    m.lang_b.shared_offset[9] = -m.amplitude;
    return m;
  }

  bool is_shared(int token) const {
    for (int s : shared_tokens) {
      if (s == token) return true;
    }
    return false;
  }

  const LanguageSpec& lang(int lang_id) const {
    if (lang_id == 0) return lang_a;
    if (lang_id == 1) return lang_b;
    throw ConfigError("corpus model: rendering language must be A or B");
  }

  /// Noiseless feature vector for a token spoken in language A or B.
  std::vector<double> rendering(int token, int lang_id) const {
    if (token < 2 || token >= vocab.size()) {
      throw ConfigError("corpus model: token id out of range");
    }
    std::vector<double> r = templates[static_cast<size_t>(token)];
    if (is_shared(token)) {
      const auto& off = lang(lang_id).shared_offset;
      for (size_t f = 0; f < r.size(); ++f) r[f] += off[f];
    }
    return r;
  }
};

namespace detail {

/// Per-frame language of each transcript position (pure utterances render
/// every token in their language; MIXED alternates run languages).
struct DrawnUtterance {
  std::vector<int> tokens;
  std::vector<int> frame_lang;  // rendering language per token position
};

inline DrawnUtterance draw_pure(const CorpusModel& model, const CorpusConfig& cfg,
                                int lang_id, Rng& rng) {
  const LanguageSpec& spec = model.lang(lang_id);
  int64_t m = cfg.min_tokens + rng.below(cfg.max_tokens - cfg.min_tokens + 1);
  DrawnUtterance d;
  d.tokens.reserve(static_cast<size_t>(m));
  std::vector<int> others;
  for (int t : spec.tokens) {
    if (t != spec.collision_token) others.push_back(t);
  }
  bool has_evidence = false;
  for (int64_t i = 0; i < m; ++i) {
    int tok;
    if (rng.uniform() < cfg.collision_prob) {
      tok = spec.collision_token;
    } else {
      tok = others[static_cast<size_t>(rng.below(static_cast<int64_t>(others.size())))];
      has_evidence = true;
    }
    d.tokens.push_back(tok);
  }
  // Every utterance must carry at least one language-distinctive rendering,
  // otherwise neither the LID nor any decoder could tell A from B.
  if (!has_evidence) {
    d.tokens.back() = others[static_cast<size_t>(rng.below(static_cast<int64_t>(others.size())))];
  }
  d.frame_lang.assign(d.tokens.size(), lang_id);
  return d;
}

inline DrawnUtterance draw_mixed(const CorpusModel& model, const CorpusConfig& cfg,
                                 Rng& rng) {
  int64_t m = cfg.min_tokens + rng.below(cfg.max_tokens - cfg.min_tokens + 1);
  DrawnUtterance d;
  int lang = static_cast<int>(rng.below(2));
  bool saw[2] = {false, false};
  while (static_cast<int64_t>(d.tokens.size()) < m) {
    int64_t run = 1 + rng.below(3);
    const auto& uniq = model.lang(lang).unique_tokens;
    for (int64_t i = 0; i < run && static_cast<int64_t>(d.tokens.size()) < m; ++i) {
      d.tokens.push_back(uniq[static_cast<size_t>(rng.below(static_cast<int64_t>(uniq.size())))]);
      d.frame_lang.push_back(lang);
      saw[lang] = true;
    }
    lang = 1 - lang;
  }
  // A MIXED label requires tokens from both languages; with m >= 2 at most
  // one run fills the utterance, so patch the tail token if needed.
  if (!saw[0] || !saw[1]) {
    int missing = saw[0] ? 1 : 0;
    const auto& uniq = model.lang(missing).unique_tokens;
    d.tokens.back() = uniq[static_cast<size_t>(rng.below(static_cast<int64_t>(uniq.size())))];
    d.frame_lang.back() = missing;
  }
  return d;
}

/// Renders a drawn utterance to features; values pass through float so that
/// the on-disk 32-bit format round-trips bit-exactly.
inline Utterance render(const CorpusModel& model, const CorpusConfig& cfg,
                        const DrawnUtterance& d, int label, Rng& rng) {
  int64_t m = static_cast<int64_t>(d.tokens.size());
  int64_t T = m * cfg.frames_per_token;
  int64_t F = cfg.feature_dim;
  std::vector<double> feat(static_cast<size_t>(T * F));
  for (int64_t i = 0; i < m; ++i) {
    auto r = model.rendering(d.tokens[static_cast<size_t>(i)],
                             d.frame_lang[static_cast<size_t>(i)]);
    for (int64_t j = 0; j < cfg.frames_per_token; ++j) {
      int64_t t = i * cfg.frames_per_token + j;
      for (int64_t f = 0; f < F; ++f) {
        double v = r[static_cast<size_t>(f)] + cfg.noise_sigma * rng.normal();
        feat[static_cast<size_t>(t * F + f)] = static_cast<double>(static_cast<float>(v));
      }
    }
  }
  Utterance u;
  u.features = Tensor::from({T, F}, std::move(feat));
  u.transcript = d.tokens;
  u.lang = label;
  return u;
}

}  // namespace detail

/// Deterministic corpus generation: utterance i of split s derives its own
/// RNG stream from (seed, s, i), so any utterance can be regenerated in
/// isolation and the whole corpus is bit-stable for a fixed seed.
inline CorpusSplit generate_corpus(const CorpusModel& model, const CorpusConfig& cfg,
                                   uint64_t seed) {
  cfg.validate();
  CorpusSplit out;
  out.seed = seed;
  std::set<std::pair<int, std::vector<int>>> seen_earlier;

  int64_t split_sizes[3] = {cfg.train_count, cfg.dev_count, cfg.test_count};
  for (int split = 0; split < 3; ++split) {
    auto counts = cfg.lang_counts(split_sizes[split]);
    std::vector<Utterance>& dst =
        split == 0 ? out.train : (split == 1 ? out.dev : out.test);
    int64_t index = 0;
    auto emit = [&](int label, int64_t n) {
      for (int64_t i = 0; i < n; ++i, ++index) {
        for (uint64_t attempt = 0;; ++attempt) {
          if (attempt > 1000) {
            throw Error("corpus generation: cannot find a fresh transcript");
          }
          uint64_t stream = mix_seed(seed, static_cast<uint64_t>(split) * 0x100000ull +
                                               static_cast<uint64_t>(index));
          Rng rng{mix_seed(stream, attempt)};
          detail::DrawnUtterance d =
              label == 2 ? detail::draw_mixed(model, cfg, rng)
                         : detail::draw_pure(model, cfg, label, rng);
          // Later splits must not repeat any earlier split's labeled
          // transcript (no train/test leakage).
          if (seen_earlier.count({label, d.tokens})) continue;
          dst.push_back(detail::render(model, cfg, d, label, rng));
          break;
        }
      }
    };
    emit(0, counts.a);
    emit(1, counts.b);
    emit(2, counts.mixed);
    for (const Utterance& u : dst) seen_earlier.insert({u.lang, u.transcript});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature file format
// ---------------------------------------------------------------------------
//
//   bytes 0-7   magic "SLILFEAT"
//   u32         format version (1)
//   u32         utterance count
//   per utterance:
//     u8        language tag 'A' | 'B' | 'M'
//     u16       transcript length m
//     u16 * m   token ids
//     u32       frame count T
//     u32       feature dim F
//     f32 * T*F row-major features
//
// All integers and floats little-endian.

namespace detail {

template <typename T>
void write_le(std::ostream& os, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  os.write(buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is, uint64_t& offset, const std::string& what) {
  char buf[sizeof(T)];
  is.read(buf, sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw IoError("feature file truncated while reading " + what + " at byte offset " +
                  std::to_string(offset));
  }
  offset += sizeof(T);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

}  // namespace detail

inline void write_features(const std::string& path, const std::vector<Utterance>& utts) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path + "' for writing");
  os.write("SLILFEAT", 8);
  detail::write_le<uint32_t>(os, 1);
  detail::write_le<uint32_t>(os, static_cast<uint32_t>(utts.size()));
  for (const Utterance& u : utts) {
    detail::write_le<uint8_t>(os, static_cast<uint8_t>(lang_char(u.lang)));
    detail::write_le<uint16_t>(os, static_cast<uint16_t>(u.transcript.size()));
    for (int tok : u.transcript) detail::write_le<uint16_t>(os, static_cast<uint16_t>(tok));
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(u.features.dim(0)));
    detail::write_le<uint32_t>(os, static_cast<uint32_t>(u.features.dim(1)));
    for (double v : u.features.data()) {
      detail::write_le<float>(os, static_cast<float>(v));
    }
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline std::vector<Utterance> read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path + "' for reading");
  uint64_t offset = 0;
  char magic[8];
  is.read(magic, 8);
  if (is.gcount() != 8 || std::memcmp(magic, "SLILFEAT", 8) != 0) {
    throw IoError("feature file '" + path + "': bad magic at byte offset 0");
  }
  offset = 8;
  uint32_t version = detail::read_le<uint32_t>(is, offset, "version");
  if (version != 1) {
    throw IoError("feature file '" + path + "': unsupported version " +
                  std::to_string(version));
  }
  uint32_t count = detail::read_le<uint32_t>(is, offset, "utterance count");
  std::vector<Utterance> utts;
  utts.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    uint64_t utt_offset = offset;
    uint8_t tag = detail::read_le<uint8_t>(is, offset, "language tag");
    int lang;
    try {
      lang = lang_from_char(static_cast<char>(tag));
    } catch (const IoError&) {
      throw IoError("feature file '" + path + "': unknown language tag at byte offset " +
                    std::to_string(utt_offset));
    }
    uint16_t m = detail::read_le<uint16_t>(is, offset, "transcript length");
    std::vector<int> transcript(m);
    for (uint16_t j = 0; j < m; ++j) {
      transcript[j] = detail::read_le<uint16_t>(is, offset, "token id");
    }
    uint32_t T = detail::read_le<uint32_t>(is, offset, "frame count");
    uint32_t F = detail::read_le<uint32_t>(is, offset, "feature dim");
    if (T == 0 || F == 0) {
      throw IoError("feature file '" + path + "': empty shape at byte offset " +
                    std::to_string(utt_offset));
    }
    std::vector<double> feat(static_cast<size_t>(T) * F);
    for (size_t k = 0; k < feat.size(); ++k) {
      feat[k] = static_cast<double>(detail::read_le<float>(is, offset, "feature value"));
    }
    Utterance u;
    u.features = Tensor::from({static_cast<int64_t>(T), static_cast<int64_t>(F)},
                              std::move(feat));
    u.transcript = std::move(transcript);
    u.lang = lang;
    utts.push_back(std::move(u));
  }
  return utts;
}

}  // namespace slil
