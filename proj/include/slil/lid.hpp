#pragma once

#include <string>
#include <utility>
#include <vector>

#include "slil/conditioning.hpp"
#include "slil/corpus.hpp"
#include "slil/layers.hpp"
#include "slil/losses.hpp"
#include "slil/train.hpp"

namespace slil {

struct LidConfig {
  int64_t channels = 32;
  int64_t hidden = 64;
};

/// Stage-one sentence-level language identifier: three convolution layers,
/// five recurrent layers, time-average pooling, and a linear classifier over
/// the three language classes.
struct LidModel {
  int64_t feature_dim = 0;
  LidConfig cfg;
  Conv1d conv1, conv2, conv3;
  std::vector<GruLayer> grus;
  Linear head;

  static LidModel init(int64_t feature_dim, const LidConfig& cfg, Rng& rng) {
    LidModel m;
    m.feature_dim = feature_dim;
    m.cfg = cfg;
    m.conv1 = Conv1d(rng, feature_dim, cfg.channels, 3, 1);
    m.conv2 = Conv1d(rng, cfg.channels, cfg.channels, 3, 2);
    m.conv3 = Conv1d(rng, cfg.channels, cfg.channels, 2, 1);
    // Bidirectional stack: sparse language evidence anywhere in the utterance
    // reaches every pooled frame from both directions.
    m.grus.emplace_back(rng, cfg.channels, cfg.hidden, true);
    for (int i = 1; i < 5; ++i) {
      m.grus.emplace_back(rng, 2 * cfg.hidden, cfg.hidden, true);
    }
    m.head = Linear(rng, 2 * cfg.hidden, LanguageCode::kDim);
    return m;
  }

  /// Shortest input the convolution stack accepts.
  static int64_t min_duration() { return 7; }

  /// Class logits for a [B, T, F] feature batch -> [B, 3].
  Tensor logits(const Tensor& x) const {
    Tensor h = transpose12(x);  // [B, F, T]
    h = relu(conv1.forward(h));
    h = relu(conv2.forward(h));
    h = relu(conv3.forward(h));
    h = transpose12(h);  // [B, T', C]
    for (const GruLayer& g : grus) h = g.forward(h);
    return head.forward(mean(h, 1));
  }

  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    auto add = [&](const std::string& prefix, const std::vector<Tensor>& ps,
                   const std::vector<std::string>& names) {
      for (size_t i = 0; i < ps.size(); ++i) out.emplace_back(prefix + "." + names[i], ps[i]);
    };
    add("conv1", conv1.parameters(), {"w", "b"});
    add("conv2", conv2.parameters(), {"w", "b"});
    add("conv3", conv3.parameters(), {"w", "b"});
    for (size_t i = 0; i < grus.size(); ++i) {
      add("gru" + std::to_string(i), grus[i].parameters(),
          {"fwd.wx", "fwd.bx", "fwd.wh", "fwd.bh", "bwd.wx", "bwd.bx", "bwd.wh", "bwd.bh"});
    }
    add("head", head.parameters(), {"w", "b"});
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, p] : named_parameters()) out.push_back(p);
    return out;
  }
};

/// Hard one-hot language decisions for a feature batch; ties resolve toward
/// the lowest class id.
inline std::vector<int> lid_predict(const LidModel& m, const Tensor& x) {
  std::vector<int64_t> cls = max_argmax(m.logits(x), 1).argmax;  // [B]
  return std::vector<int>(cls.begin(), cls.end());
}

inline double lid_accuracy(const LidModel& m, const std::vector<Utterance>& data,
                           int64_t batch_size) {
  if (data.empty()) throw ConfigError("lid_accuracy: empty evaluation set");
  auto batches = make_batches(data, batch_size, 0, 0);
  int64_t hits = 0;
  for (const DurationBatch& b : batches) {
    std::vector<int> pred = lid_predict(m, stack_features(data, b.indices));
    for (size_t i = 0; i < b.indices.size(); ++i) {
      hits += pred[i] == data[static_cast<size_t>(b.indices[i])].lang;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

struct LidTrainStats {
  std::vector<double> train_loss;    // per epoch, mean batch CE
  std::vector<double> dev_accuracy;  // per epoch
  int64_t best_epoch = -1;
  double best_dev_accuracy = 0.0;
  int64_t epochs_run = 0;
};

/// Trains the LID on the train split, tracking dev accuracy per epoch and
/// restoring the best-dev parameters at the end. Stops early once dev
/// accuracy is perfect (more epochs cannot improve model selection).
inline LidTrainStats train_lid(LidModel& m, const CorpusSplit& corpus,
                               const TrainConfig& tc) {
  std::vector<Tensor> params = m.parameters();
  Adam opt(params, AdamConfig{tc.lr, 0.9, 0.999, 1e-8});
  LidTrainStats stats;
  std::vector<std::vector<double>> best;

  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    double loss_sum = 0.0;
    int64_t batches_run = 0;
    for (const DurationBatch& b : make_batches(corpus.train, tc.batch_size, tc.seed, epoch)) {
      Tensor x = stack_features(corpus.train, b.indices);
      std::vector<int> labels;
      for (int64_t i : b.indices) {
        labels.push_back(corpus.train[static_cast<size_t>(i)].lang);
      }
      Tape tape;
      Tensor loss;
      {
        TapeScope scope(tape);
        loss = ce_loss(log_softmax(m.logits(x)), labels);
      }
      loss_sum += loss.value();
      ++batches_run;
      opt.zero_grad();
      backward(loss);
      opt.step();
    }
    stats.train_loss.push_back(loss_sum / static_cast<double>(batches_run));
    double acc = lid_accuracy(m, corpus.dev, tc.batch_size);
    stats.dev_accuracy.push_back(acc);
    stats.epochs_run = epoch + 1;
    if (acc > stats.best_dev_accuracy || stats.best_epoch < 0) {
      stats.best_dev_accuracy = acc;
      stats.best_epoch = epoch;
      best.clear();
      for (const Tensor& p : params) best.emplace_back(p.data().begin(), p.data().end());
    }
    if (acc == 1.0) break;
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_values();
    std::copy(best[i].begin(), best[i].end(), w.begin());
  }
  return stats;
}

}  // namespace slil
