#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "slil/layers.hpp"
#include "slil/tensor.hpp"

namespace slil {

/// Sentence-level language class with its one-hot encoding.
struct LanguageCode {
  static constexpr int64_t kDim = 3;  // A, B, MIXED
  int cls = 0;

  static LanguageCode from_class(int cls) {
    if (cls < 0 || cls >= kDim) {
      throw ConfigError("language class out of range: " + std::to_string(cls));
    }
    return LanguageCode{cls};
  }

  std::vector<double> onehot() const {
    std::vector<double> v(kDim, 0.0);
    v[static_cast<size_t>(cls)] = 1.0;
    return v;
  }
};

/// Stacks per-utterance one-hot codes into a [B, D] tensor.
inline Tensor codes_tensor(const std::vector<LanguageCode>& codes) {
  if (codes.empty()) throw ShapeError("codes_tensor: empty batch");
  std::vector<double> v;
  v.reserve(codes.size() * LanguageCode::kDim);
  for (const LanguageCode& c : codes) {
    auto oh = c.onehot();
    v.insert(v.end(), oh.begin(), oh.end());
  }
  return Tensor::from({static_cast<int64_t>(codes.size()), LanguageCode::kDim},
                      std::move(v));
}

enum class CondMode { none, append, film, slil, se_film };
enum class CondPosition { before, after };

inline std::string to_string(CondMode m) {
  switch (m) {
    case CondMode::none: return "none";
    case CondMode::append: return "append";
    case CondMode::film: return "film";
    case CondMode::slil: return "slil";
    case CondMode::se_film: return "se_film";
  }
  throw ConfigError("unknown conditioning mode");
}

inline std::string to_string(CondPosition p) {
  return p == CondPosition::before ? "before" : "after";
}

inline CondMode cond_mode_from(const std::string& s) {
  if (s == "none") return CondMode::none;
  if (s == "append") return CondMode::append;
  if (s == "film") return CondMode::film;
  if (s == "slil") return CondMode::slil;
  if (s == "se_film") return CondMode::se_film;
  throw ConfigError("unknown conditioning mode '" + s + "'");
}

inline CondPosition cond_position_from(const std::string& s) {
  if (s == "before") return CondPosition::before;
  if (s == "after") return CondPosition::after;
  throw ConfigError("unknown conditioning position '" + s + "'");
}

struct ConditioningConfig {
  CondMode mode = CondMode::none;
  CondPosition position = CondPosition::before;

  bool uses_film() const {
    return mode == CondMode::film || mode == CondMode::slil || mode == CondMode::se_film;
  }
  bool uses_se() const { return mode == CondMode::slil || mode == CondMode::se_film; }
};

/// Per-layer modulation parameters for a batch: gamma and beta are
/// [B, L, C], every component strictly inside (-1, 1).
struct FilmParams {
  Tensor gamma;
  Tensor beta;
  int64_t layers = 0;
  int64_t channels = 0;

  /// [B, 1, C] slice for encoder layer l, ready to broadcast over time.
  Tensor gamma_slice(int64_t l) const { return slice(gamma, 1, l, 1); }
  Tensor beta_slice(int64_t l) const { return slice(beta, 1, l, 1); }
};

/// Generates FiLM parameters for all L encoder layers in one pass:
/// a = tanh(W_c tanh(W_d d + b_d) + b_c), then tanh-squashed linear heads
/// for gamma and beta.
struct FilmGenerator {
  Linear trunk1;  // D -> hidden
  Linear trunk2;  // hidden -> hidden
  Linear head_gamma;  // hidden -> L*C
  Linear head_beta;   // hidden -> L*C
  int64_t layers = 0;
  int64_t channels = 0;

  FilmGenerator() = default;
  FilmGenerator(Rng& rng, int64_t code_dim, int64_t hidden, int64_t L, int64_t C)
      : trunk1(rng, code_dim, hidden),
        trunk2(rng, hidden, hidden),
        head_gamma(rng, hidden, L * C),
        head_beta(rng, hidden, L * C),
        layers(L),
        channels(C) {}

  /// codes: [B, D] one-hot rows -> FilmParams with [B, L, C] gamma/beta.
  FilmParams generate(const Tensor& codes) const {
    if (codes.rank() != 2 || codes.dim(1) != trunk1.w.dim(0)) {
      throw ShapeError("film generator: expected codes [B," +
                       std::to_string(trunk1.w.dim(0)) + "], got " +
                       shape_str(codes.shape()));
    }
    int64_t B = codes.dim(0);
    Tensor a = tanh_op(trunk2.forward(tanh_op(trunk1.forward(codes))));
    Tensor g = tanh_op(head_gamma.forward(a));
    Tensor b = tanh_op(head_beta.forward(a));
    return FilmParams{reshape(g, {B, layers, channels}),
                      reshape(b, {B, layers, channels}), layers, channels};
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    append_params(p, trunk1.parameters());
    append_params(p, trunk2.parameters());
    append_params(p, head_gamma.parameters());
    append_params(p, head_beta.parameters());
    return p;
  }
};

/// x: [B, T, C]; gamma, beta broadcastable to it ([C], [1,1,C] or [B,1,C]).
/// Per-channel affine modulation shared across time.
inline Tensor film_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() != 3) throw ShapeError("film: expected [B,T,C], got " + shape_str(x.shape()));
  int64_t C = x.dim(2);
  if (gamma.dim(gamma.rank() - 1) != C || beta.dim(beta.rank() - 1) != C) {
    throw ShapeError("film: channel mismatch, x has " + std::to_string(C) + " channels");
  }
  return add(mul(x, gamma), beta);
}

/// Squeeze-and-excitation over time: gate = sigmoid(W2 relu(W1 mean_T(x)+b1)+b2),
/// output = gate (broadcast over T) * x.
struct SeBlock {
  Linear reduce;   // C -> C/r
  Linear recover;  // C/r -> C
  int64_t channels = 0;
  int64_t ratio = 0;

  SeBlock() = default;
  SeBlock(Rng& rng, int64_t C, int64_t r) : channels(C), ratio(r) {
    if (r < 1) throw ConfigError("se block: reduction ratio must be >= 1");
    if (C % r != 0) {
      throw ConfigError("se block: channels " + std::to_string(C) +
                        " not divisible by reduction ratio " + std::to_string(r));
    }
    reduce = Linear(rng, C, C / r);
    recover = Linear(rng, C / r, C);
  }

  Tensor gate(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(2) != channels) {
      throw ShapeError("se block: expected [B,T," + std::to_string(channels) +
                       "], got " + shape_str(x.shape()));
    }
    Tensor pooled = mean(x, 1);  // [B, C]
    return sigmoid(recover.forward(relu(reduce.forward(pooled))));
  }

  Tensor forward(const Tensor& x) const {
    int64_t B = x.dim(0);
    Tensor theta = gate(x);
    return mul(x, reshape(theta, {B, 1, channels}));
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    append_params(p, reduce.parameters());
    append_params(p, recover.parameters());
    return p;
  }
};

inline Tensor se_apply(const SeBlock& block, const Tensor& x) { return block.forward(x); }

/// FiLM first, SE second.
inline Tensor slil_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         const SeBlock& se) {
  return se.forward(film_apply(x, gamma, beta));
}

/// SE first, FiLM second (the reversed-composition ablation variant).
inline Tensor se_film_apply(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                            const SeBlock& se) {
  return film_apply(se.forward(x), gamma, beta);
}

/// Concatenates each utterance's one-hot code to every frame:
/// [B,T,C] + [B,D] -> [B,T,C+D].
inline Tensor append_onehot(const Tensor& x, const Tensor& codes) {
  if (x.rank() != 3 || codes.rank() != 2 || x.dim(0) != codes.dim(0)) {
    throw ShapeError("append: expected [B,T,C] features with [B,D] codes");
  }
  int64_t B = x.dim(0), T = x.dim(1), D = codes.dim(1);
  Tensor tiled = broadcast_to(reshape(codes, {B, 1, D}), {B, T, D});
  return concat({x, tiled}, 2);
}

}  // namespace slil
