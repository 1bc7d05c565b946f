#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "slil/checkpoint.hpp"
#include "slil/config.hpp"
#include "slil/gradcheck.hpp"

namespace slil {

namespace detail {

inline void require_fresh(const std::string& path, bool overwrite) {
  if (!overwrite && std::filesystem::exists(path)) {
    throw IoError("output '" + path + "' already exists; pass --overwrite to replace it");
  }
}

inline void ensure_parent_dir(const std::string& path) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
}

inline std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

inline std::string cer_percent(const CerStats& s) {
  return s.reference_tokens == 0 ? "-" : fixed(100.0 * s.cer(), 2);
}

inline double elapsed_s(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

inline std::string corpus_split_path(const std::string& dir, const std::string& split) {
  return (std::filesystem::path(dir) / (split + ".slilfeat")).string();
}

inline CorpusSplit load_corpus_dir(const std::string& dir) {
  CorpusSplit c;
  c.train = read_features(corpus_split_path(dir, "train"));
  c.dev = read_features(corpus_split_path(dir, "dev"));
  c.test = read_features(corpus_split_path(dir, "test"));
  return c;
}

/// Generates the synthetic corpus and writes one feature file per split.
inline void cmd_corpus_gen(const RunConfig& rc, const std::string& out_dir, bool overwrite,
                           std::ostream& log) {
  if (!rc.has_section("corpus")) {
    throw ConfigError("corpus generation needs an explicit [corpus] section in the config");
  }
  for (const char* split : {"train", "dev", "test"}) {
    detail::require_fresh(corpus_split_path(out_dir, split), overwrite);
  }
  CorpusModel model = CorpusModel::make_default(rc.corpus.feature_dim);
  CorpusSplit corpus = generate_corpus(model, rc.corpus, rc.seed);
  std::filesystem::create_directories(out_dir);
  write_features(corpus_split_path(out_dir, "train"), corpus.train);
  write_features(corpus_split_path(out_dir, "dev"), corpus.dev);
  write_features(corpus_split_path(out_dir, "test"), corpus.test);
  log << "corpus: wrote " << corpus.train.size() << "/" << corpus.dev.size() << "/"
      << corpus.test.size() << " utterances (train/dev/test) to " << out_dir << "\n";
}

/// Stage one: trains the language identifier, writes checkpoint plus a
/// deterministic per-epoch log file next to it.
inline LidTrainStats cmd_train_lid(const RunConfig& rc, const std::string& corpus_dir,
                                   const std::string& out_ckpt, bool overwrite,
                                   std::ostream& log) {
  detail::require_fresh(out_ckpt, overwrite);
  CorpusSplit corpus = load_corpus_dir(corpus_dir);
  auto t0 = std::chrono::steady_clock::now();
  Rng rng{mix_seed(rc.lid_seed, 100)};
  LidModel m = LidModel::init(rc.corpus.feature_dim, rc.lid, rng);
  LidTrainStats stats = train_lid(m, corpus, rc.lid_train_config());

  detail::ensure_parent_dir(out_ckpt);
  save_lid(out_ckpt, m);
  std::ofstream lf(out_ckpt + ".log");
  if (!lf) throw IoError("cannot open '" + out_ckpt + ".log' for writing");
  for (size_t e = 0; e < stats.train_loss.size(); ++e) {
    lf << "epoch " << e << " train_ce " << detail::fixed(stats.train_loss[e], 6)
       << " dev_accuracy " << detail::fixed(stats.dev_accuracy[e], 6) << "\n";
  }
  lf << "best_epoch " << stats.best_epoch << " best_dev_accuracy "
     << detail::fixed(stats.best_dev_accuracy, 6) << "\n";
  log << "stage one: best dev accuracy " << detail::fixed(100.0 * stats.best_dev_accuracy, 2)
      << "% at epoch " << stats.best_epoch << " (" << stats.epochs_run << " epochs, "
      << detail::fixed(detail::elapsed_s(t0), 1) << "s); checkpoint " << out_ckpt << "\n";
  return stats;
}

/// Stage two: trains the recognizer against frozen stage-one codes and
/// proves the stage-one parameters came through unchanged.
inline AsrTrainStats cmd_train_asr(const RunConfig& rc, const std::string& corpus_dir,
                                   const std::string& lid_ckpt, const std::string& out_ckpt,
                                   bool overwrite, bool oracle_codes, std::ostream& log) {
  detail::require_fresh(out_ckpt, overwrite);
  CorpusSplit corpus = load_corpus_dir(corpus_dir);
  CorpusModel model = CorpusModel::make_default(rc.corpus.feature_dim);
  AsrConfig cfg = rc.asr_config(model);

  bool needs_lid = cfg.cond.mode != CondMode::none && !oracle_codes;
  if (needs_lid && lid_ckpt.empty()) {
    throw ConfigError("conditioning mode " + to_string(cfg.cond.mode) +
                      " needs a stage-one checkpoint (--lid)");
  }
  LidModel lid;
  uint64_t hash_before = 0;
  bool have_lid = !lid_ckpt.empty();
  if (have_lid) {
    lid = load_lid(lid_ckpt);
    hash_before = param_hash(lid.named_parameters());
  } else {
    Rng dummy{0};
    lid = LidModel::init(rc.corpus.feature_dim, LidConfig{1, 1}, dummy);
  }

  auto t0 = std::chrono::steady_clock::now();
  Rng rng{mix_seed(rc.asr_seed, 200)};
  AsrModel m = AsrModel::init(cfg, rng);
  AsrTrainStats stats = asr_train(m, corpus, lid, rc.asr_seed, oracle_codes);

  if (have_lid) {
    uint64_t hash_after = param_hash(lid.named_parameters());
    if (hash_after != hash_before) {
      throw Error("stage-one parameters changed during stage-two training (hash " +
                  std::to_string(hash_before) + " -> " + std::to_string(hash_after) + ")");
    }
  }

  detail::ensure_parent_dir(out_ckpt);
  save_asr(out_ckpt, m, model.vocab);
  std::ofstream lf(out_ckpt + ".log");
  if (!lf) throw IoError("cannot open '" + out_ckpt + ".log' for writing");
  lf << "mode " << to_string(cfg.cond.mode) << " position " << to_string(cfg.cond.position)
     << " params " << AsrModel::expected_param_count(cfg) << "\n";
  for (size_t e = 0; e < stats.train_loss.size(); ++e) {
    lf << "epoch " << e << " train_ctc " << detail::fixed(stats.train_loss[e], 6) << " dev_cer "
       << detail::fixed(stats.dev_cer[e], 6) << "\n";
  }
  lf << "best_epoch " << stats.best_epoch << " best_dev_cer "
     << detail::fixed(stats.best_dev_cer, 6) << "\n";
  if (have_lid) lf << "stage_one_hash " << std::to_string(hash_before) << " unchanged\n";
  log << "stage two (" << to_string(cfg.cond.mode) << "/" << to_string(cfg.cond.position)
      << "): best dev CER " << detail::fixed(100.0 * stats.best_dev_cer, 2) << "% at epoch "
      << stats.best_epoch << " (" << stats.epochs_run << " epochs, "
      << detail::fixed(detail::elapsed_s(t0), 1) << "s); checkpoint " << out_ckpt << "\n";
  return stats;
}

/// Corpus-level and per-language CER for one split.
struct EvalReport {
  std::string split;
  int64_t utterances = 0;
  CerStats overall;
  CerStats by_lang[3];
  int64_t lang_utterances[3] = {0, 0, 0};

  /// Deterministic text rendering; CERs as percentages to two decimals,
  /// alongside the exact integer counts they were computed from.
  std::string render() const {
    std::ostringstream os;
    os << "split " << split << "\n";
    os << "utterances " << utterances << "\n";
    os << "overall errors " << overall.edit_errors << " tokens " << overall.reference_tokens
       << " cer% " << detail::cer_percent(overall) << "\n";
    for (int l = 0; l < 3; ++l) {
      os << "lang " << lang_char(l) << " utterances " << lang_utterances[l] << " errors "
         << by_lang[l].edit_errors << " tokens " << by_lang[l].reference_tokens << " cer% "
         << detail::cer_percent(by_lang[l]) << "\n";
    }
    return os.str();
  }
};

/// Evaluates a saved recognizer (with its saved stage-one model, when the
/// mode needs codes) on the dev or test split of a corpus directory.
inline EvalReport cmd_evaluate(const RunConfig& rc, const std::string& corpus_dir,
                               const std::string& asr_ckpt, const std::string& lid_ckpt,
                               const std::string& split, bool oracle_codes) {
  if (split != "dev" && split != "test") {
    throw ConfigError("evaluate: split must be 'dev' or 'test', got '" + split + "'");
  }
  LoadedAsr loaded = load_asr(asr_ckpt);
  CorpusSplit corpus = load_corpus_dir(corpus_dir);
  const std::vector<Utterance>& data = split == "dev" ? corpus.dev : corpus.test;
  if (data.empty()) throw IoError("evaluate: split '" + split + "' is empty");

  // The recognizer's token inventory must be the corpus's.
  CorpusModel model = CorpusModel::make_default(loaded.model.cfg.feature_dim);
  if (loaded.vocab.tokens != model.vocab.tokens) {
    throw IoError("evaluate: checkpoint vocabulary does not match the corpus vocabulary");
  }
  for (const Utterance& u : data) {
    for (int tok : u.transcript) {
      if (tok < 0 || tok >= loaded.vocab.size()) {
        throw IoError("evaluate: corpus token id " + std::to_string(tok) +
                      " outside the checkpoint vocabulary");
      }
    }
  }

  std::vector<int> codes;
  if (loaded.model.cfg.cond.mode == CondMode::none) {
    codes.assign(data.size(), 0);
  } else if (oracle_codes) {
    codes = gold_codes(data);
  } else {
    if (lid_ckpt.empty()) {
      throw ConfigError("evaluate: conditioning mode " + to_string(loaded.model.cfg.cond.mode) +
                        " needs a stage-one checkpoint (--lid)");
    }
    LidModel lid = load_lid(lid_ckpt);
    codes = assign_codes(lid, data, rc.eval_batch_size);
  }

  EvalReport report;
  report.split = split;
  report.utterances = static_cast<int64_t>(data.size());
  for (const DurationBatch& b : make_batches(data, rc.eval_batch_size, 0, 0)) {
    auto hyps = asr_decode(loaded.model, stack_features(data, b.indices),
                           codes_for_batch(codes, b.indices));
    for (size_t i = 0; i < b.indices.size(); ++i) {
      const Utterance& u = data[static_cast<size_t>(b.indices[i])];
      int64_t errs = edit_distance(hyps[i], u.transcript);
      int64_t toks = static_cast<int64_t>(u.transcript.size());
      report.overall.edit_errors += errs;
      report.overall.reference_tokens += toks;
      report.by_lang[u.lang].edit_errors += errs;
      report.by_lang[u.lang].reference_tokens += toks;
      report.lang_utterances[u.lang] += 1;
    }
  }
  return report;
}

/// One conditioning variant's aggregate result over the seed list.
struct AblationRow {
  std::string name;  // none, append, M1..M6
  CondMode mode = CondMode::none;
  CondPosition position = CondPosition::before;
  double mean_dev_cer = 0.0;
  double mean_test_cer = 0.0;
  std::vector<double> test_cers;  // per seed
  int64_t param_count = 0;
  double train_time_s = 0.0;

  std::string position_label() const {
    bool positional = mode != CondMode::none && mode != CondMode::append;
    return positional ? to_string(position) : "-";
  }
};

struct AblationReport {
  std::vector<AblationRow> rows;
  std::vector<uint64_t> seeds;

  const AblationRow& row(const std::string& name) const {
    for (const AblationRow& r : rows) {
      if (r.name == name) return r;
    }
    throw ConfigError("ablation report has no row '" + name + "'");
  }

  /// Machine-readable form. The train_time_s column is wall time and is the
  /// one column that varies between otherwise identical runs.
  std::string to_tsv() const {
    std::ostringstream os;
    os << "config\tmode\tposition\tdev_cer%\ttest_cer%\tparams\ttrain_time_s\n";
    for (const AblationRow& r : rows) {
      os << r.name << "\t" << to_string(r.mode) << "\t" << r.position_label() << "\t"
         << detail::fixed(100.0 * r.mean_dev_cer, 2) << "\t"
         << detail::fixed(100.0 * r.mean_test_cer, 2) << "\t" << r.param_count << "\t"
         << detail::fixed(r.train_time_s, 1) << "\n";
    }
    return os.str();
  }

  std::string to_table() const {
    std::ostringstream os;
    auto line = [&](const std::string& a, const std::string& b, const std::string& c,
                    const std::string& d, const std::string& e, const std::string& f,
                    const std::string& g) {
      os << a;
      os << std::string(a.size() < 8 ? 8 - a.size() : 1, ' ') << b;
      os << std::string(b.size() < 9 ? 9 - b.size() : 1, ' ') << c;
      os << std::string(c.size() < 10 ? 10 - c.size() : 1, ' ') << d;
      os << std::string(d.size() < 10 ? 10 - d.size() : 1, ' ') << e;
      os << std::string(e.size() < 11 ? 11 - e.size() : 1, ' ') << f;
      os << std::string(f.size() < 9 ? 9 - f.size() : 1, ' ') << g << "\n";
    };
    os << "conditioning ablation, mean over " << seeds.size() << " seed(s)\n";
    line("config", "mode", "position", "dev_cer%", "test_cer%", "params", "time_s");
    for (const AblationRow& r : rows) {
      line(r.name, to_string(r.mode), r.position_label(),
           detail::fixed(100.0 * r.mean_dev_cer, 2), detail::fixed(100.0 * r.mean_test_cer, 2),
           std::to_string(r.param_count), detail::fixed(r.train_time_s, 1));
    }
    const AblationRow* m3 = nullptr;
    const AblationRow* m1 = nullptr;
    const AblationRow* base = nullptr;
    for (const AblationRow& r : rows) {
      if (r.name == "M3") m3 = &r;
      if (r.name == "M1") m1 = &r;
      if (r.name == "none") base = &r;
    }
    if (m3 && base) {
      bool ok = m3->mean_test_cer < base->mean_test_cer;
      os << "ordering: M3 (slil/before) mean test CER "
         << detail::fixed(100.0 * m3->mean_test_cer, 2) << "% " << (ok ? "<" : ">=")
         << " unconditioned " << detail::fixed(100.0 * base->mean_test_cer, 2) << "% -- "
         << (ok ? "conditioning resolves the shared-token ambiguity"
                : "UNEXPECTED: conditioning should beat the unconditioned baseline here")
         << "\n";
    }
    if (m3 && m1) {
      os << "ordering: M3 " << detail::fixed(100.0 * m3->mean_test_cer, 2) << "% "
         << (m3->mean_test_cer <= m1->mean_test_cer ? "<=" : ">") << " M1 "
         << detail::fixed(100.0 * m1->mean_test_cer, 2)
         << "% (film/before) -- informational only: at this corpus scale, noise can reorder"
            " nearby variants\n";
    }
    return os.str();
  }
};

/// Trains stage one once, then every conditioning variant over the seed
/// list, and aggregates the familiar eight-row comparison. When out_prefix
/// is non-empty, writes <prefix>.tsv and <prefix>.txt.
inline AblationReport cmd_ablate(const RunConfig& rc, const std::string& out_prefix,
                                 bool overwrite, std::ostream& log) {
  if (!out_prefix.empty()) {
    detail::require_fresh(out_prefix + ".tsv", overwrite);
    detail::require_fresh(out_prefix + ".txt", overwrite);
  }
  CorpusModel model = CorpusModel::make_default(rc.corpus.feature_dim);
  CorpusSplit corpus = generate_corpus(model, rc.corpus, rc.seed);

  auto t0 = std::chrono::steady_clock::now();
  Rng lrng{mix_seed(rc.lid_seed, 100)};
  LidModel lid = LidModel::init(rc.corpus.feature_dim, rc.lid, lrng);
  LidTrainStats lst = train_lid(lid, corpus, rc.lid_train_config());
  log << "stage one: dev accuracy " << detail::fixed(100.0 * lst.best_dev_accuracy, 2)
      << "% at epoch " << lst.best_epoch << " (" << detail::fixed(detail::elapsed_s(t0), 1)
      << "s)\n";

  struct Variant {
    const char* name;
    CondMode mode;
    CondPosition position;
  };
  const Variant variants[] = {
      {"none", CondMode::none, CondPosition::before},
      {"append", CondMode::append, CondPosition::before},
      {"M1", CondMode::film, CondPosition::before},
      {"M2", CondMode::film, CondPosition::after},
      {"M3", CondMode::slil, CondPosition::before},
      {"M4", CondMode::se_film, CondPosition::before},
      {"M5", CondMode::slil, CondPosition::after},
      {"M6", CondMode::se_film, CondPosition::after},
  };

  AblationReport report;
  for (int64_t s = 0; s < rc.ablation_seeds; ++s) {
    report.seeds.push_back(rc.asr_seed + static_cast<uint64_t>(s));
  }
  for (const Variant& v : variants) {
    AblationRow row;
    row.name = v.name;
    row.mode = v.mode;
    row.position = v.position;
    try {
      for (uint64_t seed : report.seeds) {
        AsrConfig cfg = rc.asr_config(model);
        cfg.cond.mode = v.mode;
        cfg.cond.position = v.position;
        auto tr0 = std::chrono::steady_clock::now();
        Rng rng{mix_seed(seed, 200)};
        AsrModel m = AsrModel::init(cfg, rng);
        AsrTrainStats st = asr_train(m, corpus, lid, seed);
        row.train_time_s += detail::elapsed_s(tr0);
        row.param_count = AsrModel::expected_param_count(cfg);

        std::vector<int> codes;
        if (cfg.cond.mode == CondMode::none) {
          codes.assign(corpus.test.size(), 0);
        } else {
          codes = assign_codes(lid, corpus.test, rc.eval_batch_size);
        }
        double test_cer = evaluate_asr(m, corpus.test, codes, rc.eval_batch_size).cer();
        row.mean_dev_cer += st.best_dev_cer;
        row.test_cers.push_back(test_cer);
        row.mean_test_cer += test_cer;
        log << "  " << row.name << " (" << to_string(v.mode) << "/" << row.position_label()
            << ") seed " << seed << ": dev CER " << detail::fixed(100.0 * st.best_dev_cer, 2)
            << "% test CER " << detail::fixed(100.0 * test_cer, 2) << "%\n";
      }
    } catch (const std::exception& e) {
      throw Error("ablation variant " + row.name + " (" + to_string(v.mode) + "/" +
                  row.position_label() + ") failed: " + e.what());
    }
    double n = static_cast<double>(report.seeds.size());
    row.mean_dev_cer /= n;
    row.mean_test_cer /= n;
    report.rows.push_back(std::move(row));
  }

  if (!out_prefix.empty()) {
    detail::ensure_parent_dir(out_prefix + ".tsv");
    std::ofstream tsv(out_prefix + ".tsv");
    std::ofstream txt(out_prefix + ".txt");
    if (!tsv || !txt) throw IoError("cannot write ablation report '" + out_prefix + "'");
    tsv << report.to_tsv();
    txt << report.to_table();
  }
  log << report.to_table();
  return report;
}

/// Finite-difference verification of every registered differentiable op.
inline GradCheckReport cmd_gradcheck(std::ostream& os) {
  GradCheckReport report = run_grad_checks(default_grad_checks());
  print_grad_report(report, os);
  return report;
}

}  // namespace slil
