#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "slil/conditioning.hpp"
#include "slil/corpus.hpp"
#include "slil/layers.hpp"
#include "slil/lid.hpp"
#include "slil/losses.hpp"
#include "slil/train.hpp"

namespace slil {

struct AsrConfig {
  int64_t feature_dim = 16;
  int64_t hidden = 64;  // conv output channels and recurrent width
  int64_t layers = 3;   // encoder depth L
  int64_t vocab_size = 14;
  ConditioningConfig cond;
  int64_t se_reduction = 8;
  int64_t film_hidden = 32;
  double lr = 1e-4;
  int64_t batch_size = 32;
  int64_t epochs = 40;
  int64_t patience = 0;

  void validate() const {
    if (layers < 1) throw ConfigError("asr: layers must be >= 1");
    if (hidden < 1 || feature_dim < 1) throw ConfigError("asr: widths must be positive");
    if (vocab_size < 2) throw ConfigError("asr: vocabulary must include blank plus a token");
  }
};

/// Stage-two CTC encoder. The convolution front-end halves the frame rate;
/// conditioning blocks, when configured, wrap each recurrent encoder layer
/// (never the convolutions), all modulating on one FilmParams pass.
///
/// The encoder is unidirectional on purpose: frames preceding the first
/// language-distinctive token carry no language evidence of their own, so an
/// unconditioned decoder has an irreducible handicap on the shared-token
/// collision that the language code removes.
struct AsrModel {
  AsrConfig cfg;
  Conv1d conv1, conv2;
  std::vector<GruLayer> encoder;
  std::optional<FilmGenerator> film;
  std::vector<SeBlock> se;
  Linear head;

  static AsrModel init(const AsrConfig& cfg, Rng& rng) {
    cfg.validate();
    AsrModel m;
    m.cfg = cfg;
    int64_t in = cfg.feature_dim + (cfg.cond.mode == CondMode::append ? LanguageCode::kDim : 0);
    m.conv1 = Conv1d(rng, in, cfg.hidden, 3, 1);
    m.conv2 = Conv1d(rng, cfg.hidden, cfg.hidden, 2, 2);
    for (int64_t l = 0; l < cfg.layers; ++l) {
      m.encoder.emplace_back(rng, cfg.hidden, cfg.hidden, false);
    }
    if (cfg.cond.uses_film()) {
      m.film = FilmGenerator(rng, LanguageCode::kDim, cfg.film_hidden, cfg.layers, cfg.hidden);
    }
    if (cfg.cond.uses_se()) {
      for (int64_t l = 0; l < cfg.layers; ++l) {
        m.se.emplace_back(rng, cfg.hidden, cfg.se_reduction);
      }
    }
    m.head = Linear(rng, cfg.hidden, cfg.vocab_size);
    return m;
  }

  /// Output frames for an input of duration T (two-conv arithmetic).
  int64_t out_length(int64_t T) const { return conv2.out_length(conv1.out_length(T)); }

  /// Total scalar parameter count, reproducible from the config alone.
  static int64_t expected_param_count(const AsrConfig& cfg) {
    int64_t F = cfg.feature_dim + (cfg.cond.mode == CondMode::append ? LanguageCode::kDim : 0);
    int64_t H = cfg.hidden, L = cfg.layers;
    int64_t n = H * F * 3 + H;  // conv1
    n += H * H * 2 + H;         // conv2
    n += L * (3 * H * (H + H + 2));  // gru: wx, bx, wh, bh
    if (cfg.cond.uses_film()) {
      int64_t G = cfg.film_hidden, D = LanguageCode::kDim;
      n += D * G + G + G * G + G;          // trunk
      n += 2 * (G * (L * H) + L * H);      // gamma and beta heads
    }
    if (cfg.cond.uses_se()) {
      int64_t R = H / cfg.se_reduction;
      n += L * (H * R + R + R * H + H);
    }
    n += H * cfg.vocab_size + cfg.vocab_size;  // head
    return n;
  }

  /// Log-probabilities [B, T', |V|] for features [B, T, F]. Codes are the
  /// one-hot language rows [B, 3]; required for every mode except none.
  Tensor forward(const Tensor& x, const Tensor& codes) const {
    if (cfg.cond.mode != CondMode::none && !codes.defined()) {
      throw ConfigError("asr forward: conditioning mode " + to_string(cfg.cond.mode) +
                        " needs a language code");
    }
    FilmParams fp;
    if (cfg.cond.uses_film()) fp = film->generate(codes);
    Tensor h = x;
    if (cfg.cond.mode == CondMode::append) h = append_onehot(h, codes);
    return run_encoder(h, fp);
  }

  /// Diagnostic path: run the encoder under externally fixed modulation
  /// parameters instead of generated ones (film/slil/se_film modes only).
  Tensor forward_forced(const Tensor& x, const FilmParams& fp) const {
    if (!cfg.cond.uses_film()) {
      throw ConfigError("asr forward_forced: mode " + to_string(cfg.cond.mode) +
                        " has no modulation parameters");
    }
    return run_encoder(x, fp);
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add = [&](const std::string& prefix, const std::vector<Tensor>& ps,
                   const std::vector<std::string>& names) {
      for (size_t i = 0; i < ps.size(); ++i) out.emplace_back(prefix + "." + names[i], ps[i]);
    };
    add("conv1", conv1.parameters(), {"w", "b"});
    add("conv2", conv2.parameters(), {"w", "b"});
    for (size_t l = 0; l < encoder.size(); ++l) {
      add("enc" + std::to_string(l), encoder[l].parameters(), {"wx", "bx", "wh", "bh"});
    }
    if (film) {
      add("film", film->parameters(),
          {"trunk1.w", "trunk1.b", "trunk2.w", "trunk2.b", "gamma.w", "gamma.b", "beta.w",
           "beta.b"});
    }
    for (size_t l = 0; l < se.size(); ++l) {
      add("se" + std::to_string(l), se[l].parameters(),
          {"reduce.w", "reduce.b", "recover.w", "recover.b"});
    }
    add("head", head.parameters(), {"w", "b"});
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }

 private:
  Tensor run_encoder(const Tensor& x, const FilmParams& fp) const {
    Tensor h = transpose12(x);
    h = relu(conv1.forward(h));
    h = relu(conv2.forward(h));
    h = transpose12(h);  // [B, T', H]
    for (size_t l = 0; l < encoder.size(); ++l) {
      if (cfg.cond.position == CondPosition::before) h = modulate(h, fp, l);
      h = encoder[l].forward(h);
      if (cfg.cond.position == CondPosition::after) h = modulate(h, fp, l);
    }
    return log_softmax(head.forward(h));
  }

  Tensor modulate(const Tensor& h, const FilmParams& fp, size_t l) const {
    int64_t li = static_cast<int64_t>(l);
    switch (cfg.cond.mode) {
      case CondMode::none:
      case CondMode::append:
        return h;
      case CondMode::film:
        return film_apply(h, fp.gamma_slice(li), fp.beta_slice(li));
      case CondMode::slil:
        return slil_apply(h, fp.gamma_slice(li), fp.beta_slice(li), se[l]);
      case CondMode::se_film:
        return se_film_apply(h, fp.gamma_slice(li), fp.beta_slice(li), se[l]);
    }
    throw ConfigError("asr forward: unknown conditioning mode");
  }
};

/// Greedy transcription of one utterance batch; codes as in forward.
inline std::vector<std::vector<int>> asr_decode(const AsrModel& m, const Tensor& x,
                                                const Tensor& codes) {
  Tensor lp = m.forward(x, codes);
  std::vector<std::vector<int>> out;
  int64_t B = lp.dim(0), Tp = lp.dim(1), V = lp.dim(2);
  for (int64_t b = 0; b < B; ++b) {
    out.push_back(greedy_decode(reshape(slice(lp, 0, b, 1), {Tp, V})));
  }
  return out;
}

/// Micro-averaged CER plus the raw counts it was built from.
struct CerStats {
  int64_t edit_errors = 0;
  int64_t reference_tokens = 0;
  double cer() const {
    if (reference_tokens == 0) throw ConfigError("CER undefined for empty reference set");
    return static_cast<double>(edit_errors) / static_cast<double>(reference_tokens);
  }
};

/// Language codes for a whole split. Either the frozen stage-one model's
/// predictions (the production path) or the gold labels (diagnostics only).
inline std::vector<int> assign_codes(const LidModel& lid, const std::vector<Utterance>& data,
                                     int64_t batch_size) {
  std::vector<int> codes(data.size());
  for (const DurationBatch& b : make_batches(data, batch_size, 0, 0)) {
    std::vector<int> pred = lid_predict(lid, stack_features(data, b.indices));
    for (size_t i = 0; i < b.indices.size(); ++i) {
      codes[static_cast<size_t>(b.indices[i])] = pred[i];
    }
  }
  return codes;
}

inline std::vector<int> gold_codes(const std::vector<Utterance>& data) {
  std::vector<int> codes(data.size());
  for (size_t i = 0; i < data.size(); ++i) codes[i] = data[i].lang;
  return codes;
}

inline Tensor codes_for_batch(const std::vector<int>& codes,
                              const std::vector<int64_t>& indices) {
  std::vector<LanguageCode> rows;
  rows.reserve(indices.size());
  for (int64_t i : indices) {
    rows.push_back(LanguageCode::from_class(codes[static_cast<size_t>(i)]));
  }
  return codes_tensor(rows);
}

/// Greedy-decode CER of a whole split under fixed per-utterance codes.
inline CerStats evaluate_asr(const AsrModel& m, const std::vector<Utterance>& data,
                             const std::vector<int>& codes, int64_t batch_size) {
  CerStats stats;
  for (const DurationBatch& b : make_batches(data, batch_size, 0, 0)) {
    auto hyps = asr_decode(m, stack_features(data, b.indices), codes_for_batch(codes, b.indices));
    for (size_t i = 0; i < b.indices.size(); ++i) {
      const Utterance& u = data[static_cast<size_t>(b.indices[i])];
      stats.edit_errors += edit_distance(hyps[i], u.transcript);
      stats.reference_tokens += static_cast<int64_t>(u.transcript.size());
    }
  }
  return stats;
}

struct AsrTrainStats {
  std::vector<double> train_loss;  // per epoch, mean batch CTC
  std::vector<double> dev_cer;     // per epoch
  int64_t best_epoch = -1;
  double best_dev_cer = 0.0;
  int64_t epochs_run = 0;
};

/// Stage-two training: CTC with Adam on LID-predicted codes (gold codes only
/// when oracle_codes is set). Restores the best dev-CER parameters; optional
/// patience stops after that many epochs without improvement.
inline AsrTrainStats asr_train(AsrModel& m, const CorpusSplit& corpus, const LidModel& lid,
                               uint64_t seed, bool oracle_codes = false) {
  const AsrConfig& cfg = m.cfg;
  std::vector<int> train_codes, dev_codes;
  if (cfg.cond.mode == CondMode::none) {
    train_codes.assign(corpus.train.size(), 0);
    dev_codes.assign(corpus.dev.size(), 0);
  } else if (oracle_codes) {
    train_codes = gold_codes(corpus.train);
    dev_codes = gold_codes(corpus.dev);
  } else {
    train_codes = assign_codes(lid, corpus.train, cfg.batch_size);
    dev_codes = assign_codes(lid, corpus.dev, cfg.batch_size);
  }

  std::vector<Tensor> params = m.parameters();
  Adam opt(params, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  AsrTrainStats stats;
  std::vector<std::vector<double>> best;
  int64_t since_best = 0;

  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    int64_t batches_run = 0;
    for (const DurationBatch& b : make_batches(corpus.train, cfg.batch_size, seed, epoch)) {
      Tensor x = stack_features(corpus.train, b.indices);
      Tensor codes = codes_for_batch(train_codes, b.indices);
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        Tensor lp = m.forward(x, codes);
        int64_t B = lp.dim(0), Tp = lp.dim(1), V = lp.dim(2);
        Tensor total;
        for (int64_t i = 0; i < B; ++i) {
          Tensor li = ctc_loss(reshape(slice(lp, 0, i, 1), {Tp, V}),
                               corpus.train[static_cast<size_t>(b.indices[i])].transcript);
          total = total.defined() ? add(total, li) : li;
        }
        loss = mul_scalar(total, 1.0 / static_cast<double>(B));
      }
      loss_sum += loss.value();
      ++batches_run;
      opt.zero_grad();
      backward(loss);
      opt.step();
    }
    stats.train_loss.push_back(loss_sum / static_cast<double>(batches_run));
    double dc = evaluate_asr(m, corpus.dev, dev_codes, cfg.batch_size).cer();
    stats.dev_cer.push_back(dc);
    stats.epochs_run = epoch + 1;
    if (stats.best_epoch < 0 || dc < stats.best_dev_cer) {
      stats.best_dev_cer = dc;
      stats.best_epoch = epoch;
      since_best = 0;
      best.clear();
      for (const Tensor& p : params) best.emplace_back(p.data().begin(), p.data().end());
    } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
      break;
    }
    if (dc == 0.0) break;
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    std::copy(best[i].begin(), best[i].end(), w.begin());
  }
  return stats;
}

/// End-to-end single-utterance inference: stage one predicts the code, stage
/// two decodes under it.
inline std::vector<int> transcribe(const AsrModel& m, const LidModel& lid,
                                   const Utterance& u) {
  Tensor x = reshape(u.features, {1, u.features.dim(0), u.features.dim(1)});
  Tensor codes;
  if (m.cfg.cond.mode != CondMode::none) {
    codes = codes_tensor({LanguageCode::from_class(lid_predict(lid, x)[0])});
  }
  return asr_decode(m, x, codes)[0];
}

}  // namespace slil
