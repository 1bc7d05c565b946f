#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "slil/corpus.hpp"
#include "slil/random.hpp"
#include "slil/tensor.hpp"

namespace slil {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 5.0;  // global gradient-norm ceiling; 0 disables
};

/// Shared knobs for both training stages.
struct TrainConfig {
  int64_t epochs = 20;
  int64_t batch_size = 16;
  double lr = 1e-3;
  uint64_t seed = 1;
  int64_t patience = 0;  // 0 disables early stopping on the dev metric
};

/// Adam with bias correction. Parameters whose gradient is absent for a step
/// (layers skipped by the active configuration) keep their state untouched.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), 0.0);
      v_[i].assign(params_[i].size(), 0.0);
    }
  }

  void step() {
    ++t_;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double sq = 0.0;
      for (const Tensor& p : params_) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
      }
      double norm = std::sqrt(sq);
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_values();
      for (size_t k = 0; k < w.size(); ++k) {
        double gk = g[k] * scale;
        m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * gk;
        v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * gk * gk;
        double mh = m_[i][k] / bc1;
        double vh = v_[i][k] / bc2;
        w[k] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.clear_grad();
  }

  int64_t steps_taken() const { return t_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

/// Batches of utterance indices sharing one exact duration, so stacked
/// features are rectangular and need no padding or masking.
struct DurationBatch {
  int64_t duration = 0;
  std::vector<int64_t> indices;
};

/// Groups same-duration utterances into batches. Epoch 0 presents batches in
/// descending duration; later epochs shuffle batch membership and order from
/// (seed, epoch). With min_batch > 1 leftover singletons are rebalanced into
/// the previous batch or dropped, which keeps every batch valid for
/// batch-statistics layers.
inline std::vector<DurationBatch> make_batches(const std::vector<Utterance>& data,
                                               int64_t batch_size, uint64_t seed,
                                               int64_t epoch, int64_t min_batch = 1) {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (min_batch > batch_size) throw ConfigError("min_batch cannot exceed batch_size");
  std::map<int64_t, std::vector<int64_t>> groups;
  for (size_t i = 0; i < data.size(); ++i) {
    groups[data[i].duration()].push_back(static_cast<int64_t>(i));
  }
  Rng rng{mix_seed(seed, static_cast<uint64_t>(epoch) + 0x9e3779b9ull)};
  std::vector<DurationBatch> batches;
  for (auto& [dur, idx] : groups) {
    if (epoch > 0) rng.shuffle(idx);
    for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_size)) {
      DurationBatch b;
      b.duration = dur;
      size_t end = std::min(idx.size(), start + static_cast<size_t>(batch_size));
      b.indices.assign(idx.begin() + static_cast<int64_t>(start),
                       idx.begin() + static_cast<int64_t>(end));
      batches.push_back(std::move(b));
    }
    // Rebalance a too-small trailing batch.
    if (static_cast<int64_t>(batches.back().indices.size()) < min_batch &&
        batches.back().duration == dur) {
      DurationBatch tail = std::move(batches.back());
      batches.pop_back();
      if (!batches.empty() && batches.back().duration == dur &&
          static_cast<int64_t>(batches.back().indices.size()) > min_batch) {
        while (static_cast<int64_t>(tail.indices.size()) < min_batch &&
               static_cast<int64_t>(batches.back().indices.size()) > min_batch) {
          tail.indices.push_back(batches.back().indices.back());
          batches.back().indices.pop_back();
        }
        if (static_cast<int64_t>(tail.indices.size()) >= min_batch) {
          batches.push_back(std::move(tail));
        }
      }
      // else: the whole duration group is smaller than min_batch; drop it.
    }
  }
  if (epoch > 0) {
    rng.shuffle(batches);
  } else {
    std::reverse(batches.begin(), batches.end());  // longest utterances first
  }
  return batches;
}

/// Stacks same-duration utterances into a [B, T, F] tensor.
inline Tensor stack_features(const std::vector<Utterance>& data,
                             const std::vector<int64_t>& indices) {
  if (indices.empty()) throw ShapeError("cannot stack an empty batch");
  int64_t T = data[static_cast<size_t>(indices[0])].duration();
  int64_t F = data[static_cast<size_t>(indices[0])].features.dim(1);
  std::vector<double> out;
  out.reserve(static_cast<size_t>(static_cast<int64_t>(indices.size()) * T * F));
  for (int64_t i : indices) {
    const Utterance& u = data[static_cast<size_t>(i)];
    if (u.duration() != T || u.features.dim(1) != F) {
      throw ShapeError("stack_features requires equal-duration utterances");
    }
    auto d = u.features.data();
    out.insert(out.end(), d.begin(), d.end());
  }
  return Tensor::from({static_cast<int64_t>(indices.size()), T, F}, std::move(out));
}

/// One-hot language codes for a batch of utterances, as a [B, 3] tensor.
inline Tensor stack_codes(const std::vector<Utterance>& data,
                          const std::vector<int64_t>& indices) {
  std::vector<LanguageCode> codes;
  codes.reserve(indices.size());
  for (int64_t i : indices) {
    codes.push_back(LanguageCode::from_class(data[static_cast<size_t>(i)].lang));
  }
  return codes_tensor(codes);
}

}  // namespace slil
