#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slil/asr.hpp"
#include "slil/corpus.hpp"
#include "slil/lid.hpp"
#include "slil/train.hpp"

namespace slil {

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------
//
// INI-style text with sections [corpus], [lid], [asr], [train], [eval].
// Grammar per line: blank, full-line comment (# or ;), [section], or
// key = value. Every key has a documented default; unknown sections,
// unknown keys, and duplicate keys are hard errors so typos cannot pass
// silently.

namespace detail {

struct IniEntry {
  std::string section, key, value;
  int line = 0;
};

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

inline std::vector<IniEntry> parse_ini(const std::string& text,
                                       std::vector<std::string>* sections_seen) {
  std::vector<IniEntry> entries;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']') {
        throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty()) {
        throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      }
      if (sections_seen) {
        for (const std::string& s : *sections_seen) {
          if (s == section) {
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate section [" +
                              section + "]");
          }
        }
        sections_seen->push_back(section);
      }
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + t + "'");
    }
    IniEntry e;
    e.section = section;
    e.key = trim(t.substr(0, eq));
    e.value = trim(t.substr(eq + 1));
    e.line = lineno;
    if (e.key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    if (e.section.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": key '" + e.key +
                        "' appears before any [section]");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

inline int64_t to_i64(const IniEntry& e) {
  try {
    size_t pos = 0;
    int64_t v = std::stoll(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(e.line) + ": [" + e.section + "] " + e.key +
                      ": cannot parse '" + e.value + "' as an integer");
  }
}

inline uint64_t to_u64(const IniEntry& e) {
  int64_t v = to_i64(e);
  if (v < 0) {
    throw ConfigError("config line " + std::to_string(e.line) + ": [" + e.section + "] " + e.key +
                      ": must be non-negative");
  }
  return static_cast<uint64_t>(v);
}

inline double to_f64(const IniEntry& e) {
  try {
    size_t pos = 0;
    double v = std::stod(e.value, &pos);
    if (pos != e.value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(e.line) + ": [" + e.section + "] " + e.key +
                      ": cannot parse '" + e.value + "' as a number");
  }
}

}  // namespace detail

/// Full run configuration with documented defaults; any key may be omitted.
struct RunConfig {
  CorpusConfig corpus;

  // Stage-one model and training.
  LidConfig lid;
  double lid_lr = 2e-3;
  int64_t lid_epochs = 20;
  int64_t lid_batch_size = 16;
  uint64_t lid_seed = 2;

  // Stage-two model and training (lr/epochs/batch_size/patience live inside).
  AsrConfig asr;
  uint64_t asr_seed = 2;

  uint64_t seed = 11;          // corpus generation stream
  int64_t ablation_seeds = 3;  // stage-two seeds asr_seed .. asr_seed+n-1

  int64_t eval_batch_size = 32;
  std::string eval_split = "test";

  // Which sections the source text actually declared (corpus generation
  // insists on an explicit [corpus] section).
  std::vector<std::string> sections_present;

  bool has_section(const std::string& name) const {
    for (const std::string& s : sections_present) {
      if (s == name) return true;
    }
    return false;
  }

  TrainConfig lid_train_config() const {
    TrainConfig tc;
    tc.epochs = lid_epochs;
    tc.batch_size = lid_batch_size;
    tc.lr = lid_lr;
    tc.seed = lid_seed;
    return tc;
  }

  /// Stage-two config with the data-derived widths filled in.
  AsrConfig asr_config(const CorpusModel& model) const {
    AsrConfig cfg = asr;
    cfg.feature_dim = corpus.feature_dim;
    cfg.vocab_size = model.vocab.size();
    return cfg;
  }

  void validate() const {
    corpus.validate();
    asr.validate();
    if (lid_epochs < 1 || asr.epochs < 1) throw ConfigError("config: epochs must be >= 1");
    if (lid_batch_size < 1 || asr.batch_size < 1 || eval_batch_size < 1) {
      throw ConfigError("config: batch sizes must be >= 1");
    }
    if (lid_lr <= 0 || asr.lr <= 0) throw ConfigError("config: learning rates must be positive");
    if (ablation_seeds < 1) throw ConfigError("config: ablation_seeds must be >= 1");
    if (eval_split != "dev" && eval_split != "test") {
      throw ConfigError("config: [eval] split must be 'dev' or 'test', got '" + eval_split + "'");
    }
  }

  static RunConfig from_text(const std::string& text) {
    RunConfig rc;
    std::vector<detail::IniEntry> entries = detail::parse_ini(text, &rc.sections_present);
    for (const std::string& s : rc.sections_present) {
      if (s != "corpus" && s != "lid" && s != "asr" && s != "train" && s != "eval") {
        throw ConfigError("config: unknown section [" + s + "]");
      }
    }
    std::set<std::pair<std::string, std::string>> seen;
    for (const detail::IniEntry& e : entries) {
      if (!seen.insert({e.section, e.key}).second) {
        throw ConfigError("config line " + std::to_string(e.line) + ": duplicate key '" + e.key +
                          "' in section [" + e.section + "]");
      }
      rc.apply(e);
    }
    rc.validate();
    return rc;
  }

  static RunConfig from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return from_text(ss.str());
  }

 private:
  void apply(const detail::IniEntry& e) {
    using detail::to_f64;
    using detail::to_i64;
    using detail::to_u64;
    auto unknown = [&]() -> ConfigError {
      return ConfigError("config line " + std::to_string(e.line) + ": unknown key '" + e.key +
                         "' in section [" + e.section + "]");
    };
    if (e.section == "corpus") {
      if (e.key == "train_count") corpus.train_count = to_i64(e);
      else if (e.key == "dev_count") corpus.dev_count = to_i64(e);
      else if (e.key == "test_count") corpus.test_count = to_i64(e);
      else if (e.key == "ratio_a") corpus.ratio_a = to_f64(e);
      else if (e.key == "ratio_b") corpus.ratio_b = to_f64(e);
      else if (e.key == "min_tokens") corpus.min_tokens = to_i64(e);
      else if (e.key == "max_tokens") corpus.max_tokens = to_i64(e);
      else if (e.key == "frames_per_token") corpus.frames_per_token = to_i64(e);
      else if (e.key == "feature_dim") corpus.feature_dim = to_i64(e);
      else if (e.key == "noise_sigma") corpus.noise_sigma = to_f64(e);
      else if (e.key == "collision_prob") corpus.collision_prob = to_f64(e);
      else throw unknown();
    } else if (e.section == "lid") {
      if (e.key == "channels") lid.channels = to_i64(e);
      else if (e.key == "hidden") lid.hidden = to_i64(e);
      else if (e.key == "lr") lid_lr = to_f64(e);
      else if (e.key == "epochs") lid_epochs = to_i64(e);
      else if (e.key == "batch_size") lid_batch_size = to_i64(e);
      else if (e.key == "seed") lid_seed = to_u64(e);
      else throw unknown();
    } else if (e.section == "asr") {
      if (e.key == "hidden") asr.hidden = to_i64(e);
      else if (e.key == "layers") asr.layers = to_i64(e);
      else if (e.key == "mode") asr.cond.mode = cond_mode_from(e.value);
      else if (e.key == "position") asr.cond.position = cond_position_from(e.value);
      else if (e.key == "se_reduction") asr.se_reduction = to_i64(e);
      else if (e.key == "film_hidden") asr.film_hidden = to_i64(e);
      else if (e.key == "lr") asr.lr = to_f64(e);
      else if (e.key == "epochs") asr.epochs = to_i64(e);
      else if (e.key == "batch_size") asr.batch_size = to_i64(e);
      else if (e.key == "patience") asr.patience = to_i64(e);
      else if (e.key == "seed") asr_seed = to_u64(e);
      else throw unknown();
    } else if (e.section == "train") {
      if (e.key == "seed") seed = to_u64(e);
      else if (e.key == "ablation_seeds") ablation_seeds = to_i64(e);
      else throw unknown();
    } else if (e.section == "eval") {
      if (e.key == "batch_size") eval_batch_size = to_i64(e);
      else if (e.key == "split") eval_split = e.value;
      else throw unknown();
    } else {
      throw ConfigError("config: unknown section [" + e.section + "]");
    }
  }
};

}  // namespace slil
