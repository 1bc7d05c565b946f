#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <vector>

#include "slil/tensor.hpp"

namespace slil {

/// Token inventory with blank pinned at index 0 and unknown at index 1.
struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  static Vocabulary build(const std::vector<std::string>& regular) {
    Vocabulary v;
    v.tokens = {"<blank>", "<unk>"};
    for (const std::string& t : regular) v.tokens.push_back(t);
    for (size_t i = 0; i < v.tokens.size(); ++i) {
      auto [it, inserted] = v.index.emplace(v.tokens[i], static_cast<int>(i));
      if (!inserted) throw ConfigError("vocabulary: duplicate token '" + v.tokens[i] + "'");
    }
    return v;
  }

  int blank() const { return 0; }
  int unk() const { return 1; }
  int size() const { return static_cast<int>(tokens.size()); }

  int id(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? unk() : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || id >= size()) throw ConfigError("vocabulary: id out of range");
    return tokens[static_cast<size_t>(id)];
  }
};

/// Mean cross entropy over a batch of log-probability rows.
inline Tensor ce_loss(const Tensor& log_probs, const std::vector<int>& targets) {
  if (log_probs.rank() != 2) {
    throw ShapeError("ce_loss: expected [B,D] log-probs, got " + shape_str(log_probs.shape()));
  }
  int64_t B = log_probs.dim(0), D = log_probs.dim(1);
  if (static_cast<int64_t>(targets.size()) != B) {
    throw ShapeError("ce_loss: batch size mismatch");
  }
  for (int64_t b = 0; b < B; ++b) {
    double s = 0.0;
    for (int64_t d = 0; d < D; ++d) s += std::exp(log_probs.at({b, d}));
    if (std::abs(s - 1.0) > 1e-6) {
      throw NumericError("ce_loss: row " + std::to_string(b) + " is not normalized");
    }
    if (targets[static_cast<size_t>(b)] < 0 || targets[static_cast<size_t>(b)] >= D) {
      throw ConfigError("ce_loss: target class out of range");
    }
  }
  std::vector<double> mask(static_cast<size_t>(B * D), 0.0);
  for (int64_t b = 0; b < B; ++b) {
    mask[static_cast<size_t>(b * D + targets[static_cast<size_t>(b)])] = 1.0;
  }
  Tensor picked = mul(log_probs, Tensor::from({B, D}, std::move(mask)));
  return mul_scalar(sum_all(picked), -1.0 / static_cast<double>(B));
}

namespace detail {

constexpr double kLogZero = -std::numeric_limits<double>::infinity();

inline double logsumexp2(double a, double b) {
  if (a == kLogZero) return b;
  if (b == kLogZero) return a;
  double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

/// Blank-interleaved extended labels: _ t1 _ t2 _ ... _ tm _  (length 2m+1).
inline std::vector<int> ctc_extend(const std::vector<int>& target, int blank) {
  std::vector<int> ext(2 * target.size() + 1, blank);
  for (size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = target[i];
  return ext;
}

}  // namespace detail

/// Shortest frame count that admits any alignment of `target`: one frame per
/// token plus one separating blank per adjacent repeat.
inline int64_t ctc_min_frames(const std::vector<int>& target) {
  int64_t t = static_cast<int64_t>(target.size());
  for (size_t i = 1; i < target.size(); ++i) t += target[i] == target[i - 1];
  return t;
}

/// CTC negative log-likelihood of `target` under per-frame log scores
/// [T x V] with blank at index 0. Log-space alpha recursion forward; the
/// recorded gradient uses the alpha-beta occupancy decomposition.
inline Tensor ctc_loss(const Tensor& log_probs, const std::vector<int>& target) {
  if (log_probs.rank() != 2) {
    throw ShapeError("ctc_loss: expected [T,V] log scores, got " + shape_str(log_probs.shape()));
  }
  const int64_t T = log_probs.dim(0), V = log_probs.dim(1);
  if (V < 2) throw ShapeError("ctc_loss: vocabulary must include blank plus a token");
  for (int tok : target) {
    if (tok <= 0 || tok >= V) {
      throw ConfigError("ctc_loss: target token " + std::to_string(tok) +
                        " outside [1," + std::to_string(V - 1) + "]");
    }
  }
  if (T < ctc_min_frames(target)) {
    throw InfeasibleTargetError(
        "ctc_loss: target needs at least " + std::to_string(ctc_min_frames(target)) +
        " frames, got " + std::to_string(T));
  }

  const std::vector<int> ext = detail::ctc_extend(target, 0);
  const int64_t S = static_cast<int64_t>(ext.size());
  const double* lp = log_probs.data().data();
  auto score = [&](int64_t t, int64_t s) { return lp[t * V + ext[static_cast<size_t>(s)]]; };
  // A state can skip from s-2 when both are distinct non-blank labels.
  auto can_skip = [&](int64_t s) {
    return s >= 2 && ext[static_cast<size_t>(s)] != 0 &&
           ext[static_cast<size_t>(s)] != ext[static_cast<size_t>(s - 2)];
  };

  std::vector<double> alpha(static_cast<size_t>(T * S), detail::kLogZero);
  alpha[0] = score(0, 0);
  if (S > 1) alpha[1] = score(0, 1);
  for (int64_t t = 1; t < T; ++t) {
    for (int64_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = detail::logsumexp2(a, alpha[(t - 1) * S + s - 1]);
      if (can_skip(s)) a = detail::logsumexp2(a, alpha[(t - 1) * S + s - 2]);
      if (a != detail::kLogZero) alpha[t * S + s] = a + score(t, s);
    }
  }
  double log_p = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_p = detail::logsumexp2(log_p, alpha[(T - 1) * S + S - 2]);
  if (log_p == detail::kLogZero) {
    // Unreachable for feasible targets with finite scores; guard anyway.
    throw NumericError("ctc_loss: no alignment has positive probability");
  }

  bool tracked = detail::track({&log_probs});
  Tensor result = detail::finish("ctc_loss", {1}, {-log_p}, tracked, {&log_probs});
  if (tracked) {
    auto xd = log_probs.node();
    auto od = result.node();
    // Suffix scores excluding the emission at t: beta[t][s] = log-sum over
    // paths from state s covering frames t+1..T-1.
    active_tape()->record([xd, od, alpha = std::move(alpha), ext, T, V, S, log_p]() {
      if (od->grad.empty() || !xd->requires_grad) return;
      detail::ensure_grad(*xd);
      const double* lp = xd->values.data();
      auto score = [&](int64_t t, int64_t s) {
        return lp[t * V + ext[static_cast<size_t>(s)]];
      };
      auto can_skip = [&](int64_t s) {
        return s >= 2 && ext[static_cast<size_t>(s)] != 0 &&
               ext[static_cast<size_t>(s)] != ext[static_cast<size_t>(s - 2)];
      };
      std::vector<double> beta(static_cast<size_t>(T * S), detail::kLogZero);
      beta[(T - 1) * S + S - 1] = 0.0;
      if (S > 1) beta[(T - 1) * S + S - 2] = 0.0;
      for (int64_t t = T - 2; t >= 0; --t) {
        for (int64_t s = 0; s < S; ++s) {
          double b = beta[(t + 1) * S + s] == detail::kLogZero
                         ? detail::kLogZero
                         : beta[(t + 1) * S + s] + score(t + 1, s);
          if (s + 1 < S && beta[(t + 1) * S + s + 1] != detail::kLogZero) {
            b = detail::logsumexp2(b, beta[(t + 1) * S + s + 1] + score(t + 1, s + 1));
          }
          if (s + 2 < S && can_skip(s + 2) && beta[(t + 1) * S + s + 2] != detail::kLogZero) {
            b = detail::logsumexp2(b, beta[(t + 1) * S + s + 2] + score(t + 1, s + 2));
          }
          beta[t * S + s] = b;
        }
      }
      double g = od->grad[0];
      for (int64_t t = 0; t < T; ++t) {
        // Occupancy per vocabulary entry at frame t.
        std::vector<double> occ(static_cast<size_t>(V), detail::kLogZero);
        for (int64_t s = 0; s < S; ++s) {
          double a = alpha[t * S + s], b = beta[t * S + s];
          if (a == detail::kLogZero || b == detail::kLogZero) continue;
          auto& slot = occ[static_cast<size_t>(ext[static_cast<size_t>(s)])];
          slot = detail::logsumexp2(slot, a + b);
        }
        for (int64_t k = 0; k < V; ++k) {
          if (occ[static_cast<size_t>(k)] == detail::kLogZero) continue;
          xd->grad[t * V + k] -= g * std::exp(occ[static_cast<size_t>(k)] - log_p);
        }
      }
    });
  }
  return result;
}

/// Merges adjacent repeats, then removes blanks.
inline std::vector<int> ctc_collapse(const std::vector<int>& path, int blank = 0) {
  std::vector<int> out;
  int prev = -1;
  for (int tok : path) {
    if (tok != prev && tok != blank) out.push_back(tok);
    prev = tok;
  }
  return out;
}

/// Frame-wise argmax (ties toward the lowest index) followed by collapse.
inline std::vector<int> greedy_decode(const Tensor& log_probs) {
  if (log_probs.rank() != 2) {
    throw ShapeError("greedy_decode: expected [T,V], got " + shape_str(log_probs.shape()));
  }
  int64_t T = log_probs.dim(0), V = log_probs.dim(1);
  std::vector<int> path(static_cast<size_t>(T));
  const double* lp = log_probs.data().data();
  for (int64_t t = 0; t < T; ++t) {
    int best = 0;
    for (int64_t k = 1; k < V; ++k) {
      if (lp[t * V + k] > lp[t * V + best]) best = static_cast<int>(k);
    }
    path[static_cast<size_t>(t)] = best;
  }
  return ctc_collapse(path);
}

/// Unit-cost Levenshtein distance (two-row rolling DP).
inline int64_t edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  size_t n = b.size();
  std::vector<int64_t> prev(n + 1), cur(n + 1);
  for (size_t j = 0; j <= n; ++j) prev[j] = static_cast<int64_t>(j);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int64_t>(i);
    for (size_t j = 1; j <= n; ++j) {
      int64_t sub = prev[j - 1] + (a[i - 1] != b[j - 1]);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

/// Character error rate: edit distance over reference length.
inline double cer(const std::vector<int>& hypothesis, const std::vector<int>& reference) {
  if (reference.empty()) throw ConfigError("cer: reference must be non-empty");
  return static_cast<double>(edit_distance(hypothesis, reference)) /
         static_cast<double>(reference.size());
}

}  // namespace slil
