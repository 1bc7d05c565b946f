#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slil/random.hpp"
#include "slil/tensor.hpp"

namespace slil {

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)], the scheme every layer
/// here uses for weights and biases.
inline Tensor uniform_init(Rng& rng, Shape shape, int64_t fan_in) {
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = (2.0 * rng.uniform() - 1.0) * bound;
  return Tensor::from(std::move(shape), std::move(v), /*requires_grad=*/true);
}

/// Applies a [in,out] weight over the last axis of [B,in] or [B,T,in].
inline Tensor linear_last(const Tensor& x, const Tensor& w, const Tensor& b) {
  int64_t in = w.dim(0), out = w.dim(1);
  if (x.dim(x.rank() - 1) != in) {
    throw ShapeError("linear: input features " + std::to_string(x.dim(x.rank() - 1)) +
                     " do not match weight " + shape_str(w.shape()));
  }
  if (x.rank() == 2) {
    return add(matmul(x, w), b);
  }
  if (x.rank() == 3) {
    int64_t B = x.dim(0), T = x.dim(1);
    Tensor flat = reshape(x, {B * T, in});
    return reshape(add(matmul(flat, w), b), {B, T, out});
  }
  throw ShapeError("linear: expects rank-2 or rank-3 input, got " + shape_str(x.shape()));
}

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]

  Linear() = default;
  Linear(Rng& rng, int64_t in, int64_t out)
      : w(uniform_init(rng, {in, out}, in)), b(uniform_init(rng, {out}, in)) {}

  Tensor forward(const Tensor& x) const { return linear_last(x, w, b); }
  std::vector<Tensor> parameters() const { return {w, b}; }
};

/// 1-D convolution over [B, Cin, T] with weight [Cout, Cin, K], valid
/// padding: T' = (T - K) / stride + 1. Built from gather + matmul so the
/// gradient comes from the tape.
struct Conv1d {
  Tensor w;  // [out, in, k]
  Tensor b;  // [out]
  int64_t stride = 1;

  Conv1d() = default;
  Conv1d(Rng& rng, int64_t in, int64_t out, int64_t k, int64_t stride_)
      : w(uniform_init(rng, {out, in, k}, in * k)),
        b(uniform_init(rng, {out}, in * k)),
        stride(stride_) {}

  int64_t out_length(int64_t T) const {
    int64_t k = w.dim(2);
    if (T < k) {
      throw ShapeError("conv1d: input length " + std::to_string(T) +
                       " shorter than kernel " + std::to_string(k));
    }
    return (T - k) / stride + 1;
  }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 3 || x.dim(1) != w.dim(1)) {
      throw ShapeError("conv1d: expected [B," + std::to_string(w.dim(1)) +
                       ",T], got " + shape_str(x.shape()));
    }
    int64_t B = x.dim(0), cin = x.dim(1), T = x.dim(2);
    int64_t cout = w.dim(0), k = w.dim(2);
    int64_t Tp = out_length(T);
    Tensor y;
    for (int64_t j = 0; j < k; ++j) {
      // Tap j of every window, flattened to [Cin, B*T'] for one matmul.
      Tensor tap = stride_slice(x, 2, j, stride, Tp);
      Tensor flat = reshape(permute(tap, {1, 0, 2}), {cin, B * Tp});
      Tensor wj = reshape(slice(w, 2, j, 1), {cout, cin});
      Tensor part = matmul(wj, flat);
      y = j == 0 ? part : add(y, part);
    }
    y = permute(reshape(y, {cout, B, Tp}), {1, 0, 2});
    return add(y, reshape(b, {cout, 1}));
  }

  std::vector<Tensor> parameters() const { return {w, b}; }
};

/// Per-channel batch normalization over [B, C, T]; statistics pool batch and
/// time. Training mode uses batch statistics (and refreshes the running
/// buffers); eval mode uses the running buffers. Variance is biased (1/n) in
/// both modes.
struct BatchNorm1d {
  Tensor gamma;  // [C]
  Tensor beta;   // [C]
  double eps = 1e-5;
  double momentum = 0.1;
  std::vector<double> running_mean;
  std::vector<double> running_var;

  BatchNorm1d() = default;
  explicit BatchNorm1d(int64_t channels)
      : gamma(Tensor::full({channels}, 1.0, true)),
        beta(Tensor::zeros({channels}, true)),
        running_mean(static_cast<size_t>(channels), 0.0),
        running_var(static_cast<size_t>(channels), 1.0) {}

  Tensor forward(const Tensor& x, bool training) {
    if (x.rank() != 3 || x.dim(1) != gamma.dim(0)) {
      throw ShapeError("batchnorm: expected [B," + std::to_string(gamma.dim(0)) +
                       ",T], got " + shape_str(x.shape()));
    }
    int64_t C = x.dim(1);
    Tensor m, v;
    if (training) {
      if (x.dim(0) < 2) {
        throw ShapeError("batchnorm: training mode needs batch size >= 2");
      }
      m = mean(mean(x, 2), 0);  // [C]
      Tensor centered = sub(x, reshape(m, {C, 1}));
      v = mean(mean(mul(centered, centered), 2), 0);
      for (int64_t c = 0; c < C; ++c) {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * m.data()[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * v.data()[c];
      }
    } else {
      m = Tensor::from({C}, running_mean);
      v = Tensor::from({C}, running_var);
    }
    // 1/sqrt(v + eps) written as exp(-log(v + eps)/2) to stay inside the op set.
    Tensor inv = exp_op(mul_scalar(log_op(add_scalar(v, eps)), -0.5));
    Tensor xhat = mul(sub(x, reshape(m, {C, 1})), reshape(inv, {C, 1}));
    return add(mul(xhat, reshape(gamma, {C, 1})), reshape(beta, {C, 1}));
  }

  std::vector<Tensor> parameters() const { return {gamma, beta}; }
};

/// GRU cell parameters for one direction; gate order r, z, n.
struct GruDirection {
  Tensor wx;  // [in, 3H]
  Tensor bx;  // [3H]
  Tensor wh;  // [H, 3H]
  Tensor bh;  // [3H]

  GruDirection() = default;
  GruDirection(Rng& rng, int64_t in, int64_t hidden)
      : wx(uniform_init(rng, {in, 3 * hidden}, in)),
        bx(uniform_init(rng, {3 * hidden}, in)),
        wh(uniform_init(rng, {hidden, 3 * hidden}, hidden)),
        bh(uniform_init(rng, {3 * hidden}, hidden)) {}

  /// x: [B, T, in] -> [B, T, H]; h0 = 0.
  Tensor run(const Tensor& x) const {
    int64_t B = x.dim(0), T = x.dim(1);
    int64_t H = wh.dim(0);
    // Input projections for every timestep in one matmul.
    Tensor xp = linear_last(x, wx, bx);  // [B, T, 3H]
    Tensor h = Tensor::zeros({B, H});
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(T));
    for (int64_t t = 0; t < T; ++t) {
      Tensor xt = reshape(slice(xp, 1, t, 1), {B, 3 * H});
      Tensor hp = add(matmul(h, wh), bh);  // [B, 3H]
      Tensor r = sigmoid(add(slice(xt, 1, 0, H), slice(hp, 1, 0, H)));
      Tensor z = sigmoid(add(slice(xt, 1, H, H), slice(hp, 1, H, H)));
      Tensor n = tanh_op(add(slice(xt, 1, 2 * H, H), mul(r, slice(hp, 1, 2 * H, H))));
      h = add(n, mul(z, sub(h, n)));  // (1-z)*n + z*h
      outs.push_back(reshape(h, {B, 1, H}));
    }
    return concat(outs, 1);
  }

  std::vector<Tensor> parameters() const { return {wx, bx, wh, bh}; }
};

/// GRU layer over [B, T, in]. Bidirectional runs an independent reversed
/// pass and concatenates channels, giving [B, T, 2H].
struct GruLayer {
  GruDirection fwd;
  GruDirection bwd;  // unused unless bidirectional
  bool bidirectional = false;

  GruLayer() = default;
  GruLayer(Rng& rng, int64_t in, int64_t hidden, bool bidir)
      : fwd(rng, in, hidden), bidirectional(bidir) {
    if (bidir) bwd = GruDirection(rng, in, hidden);
  }

  int64_t out_channels() const { return fwd.wh.dim(0) * (bidirectional ? 2 : 1); }

  Tensor forward(const Tensor& x) const {
    if (x.rank() != 3) throw ShapeError("gru: expected [B,T,C], got " + shape_str(x.shape()));
    Tensor f = fwd.run(x);
    if (!bidirectional) return f;
    Tensor r = flip(bwd.run(flip(x, 1)), 1);
    return concat({f, r}, 2);
  }

  std::vector<Tensor> parameters() const {
    auto p = fwd.parameters();
    if (bidirectional) {
      auto q = bwd.parameters();
      p.insert(p.end(), q.begin(), q.end());
    }
    return p;
  }
};

/// Inverted dropout; identity when not training or p == 0.
inline Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0,1)");
  if (!training || p == 0.0) return x;
  std::vector<double> mask(static_cast<size_t>(x.size()));
  double scale = 1.0 / (1.0 - p);
  for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : scale;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

inline void append_params(std::vector<Tensor>& into, const std::vector<Tensor>& from) {
  into.insert(into.end(), from.begin(), from.end());
}

inline int64_t param_count(const std::vector<Tensor>& params) {
  int64_t n = 0;
  for (const Tensor& p : params) n += p.size();
  return n;
}

}  // namespace slil
