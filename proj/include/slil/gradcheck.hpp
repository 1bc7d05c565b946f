#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "slil/asr.hpp"
#include "slil/conditioning.hpp"
#include "slil/layers.hpp"
#include "slil/lid.hpp"
#include "slil/losses.hpp"
#include "slil/random.hpp"
#include "slil/tensor.hpp"

namespace slil {

/// Central finite differences of a scalar loss against the tape's analytic
/// gradients, over every element of every listed parameter. `build` must
/// reconstruct the graph from the live parameter storage on each call.
/// Elements where both gradients sit below `floor` count as matching.
inline double fd_max_rel_error(const std::vector<Tensor>& params,
                               const std::function<Tensor()>& build, double eps = 1e-5,
                               double floor = 1e-6) {
  for (Tensor p : params) p.clear_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = build();
    }
    backward(loss);
    for (const Tensor& p : params) {
      if (p.has_grad()) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
      } else {
        analytic.emplace_back(p.size(), 0.0);
      }
    }
  }
  auto eval = [&]() { return build().value(); };
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto v = p.mutable_values();
    for (size_t i = 0; i < v.size(); ++i) {
      double saved = v[i];
      v[i] = saved + eps;
      double up = eval();
      v[i] = saved - eps;
      double down = eval();
      v[i] = saved;
      double numeric = (up - down) / (2.0 * eps);
      double a = analytic[pi][i];
      if (std::abs(a) < floor && std::abs(numeric) < floor) continue;
      double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

/// One registered differentiable operation: `instance` builds a fresh random
/// case and returns its finite-difference error.
struct GradCheckEntry {
  std::string op;
  std::function<double(Rng&)> instance;
};

struct GradCheckResult {
  std::string op;
  int64_t instances = 0;
  double max_rel_err = 0.0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradCheckResult> results;
  double tolerance = 0.0;

  bool all_pass() const {
    for (const GradCheckResult& r : results) {
      if (!r.pass) return false;
    }
    return !results.empty();
  }
};

namespace detail {

inline Tensor rand_leaf(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), /*requires_grad=*/true);
}

/// Magnitudes in [lo, hi] with random sign: keeps relu/abs-style kinks away
/// from the finite-difference step.
inline Tensor rand_leaf_signed(Rng& rng, Shape shape, double lo, double hi) {
  std::vector<double> v(static_cast<size_t>(numel(shape)));
  for (double& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v), /*requires_grad=*/true);
}

inline Tensor quad(const Tensor& y) { return sum_all(mul(y, y)); }

inline Tensor rand_codes(Rng& rng, int64_t B) {
  std::vector<LanguageCode> rows;
  for (int64_t b = 0; b < B; ++b) {
    rows.push_back(LanguageCode::from_class(static_cast<int>(rng.below(LanguageCode::kDim))));
  }
  return codes_tensor(rows);
}

}  // namespace detail

/// The registry backing the gradient-check command: every differentiable
/// operation in the library, from elementwise kernels up to the full
/// conditioned encoder under CTC, each checked on small random instances.
inline std::vector<GradCheckEntry> default_grad_checks() {
  using detail::quad;
  using detail::rand_leaf;
  using detail::rand_leaf_signed;
  std::vector<GradCheckEntry> v;

  v.push_back({"add_broadcast", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 4}, -1, 1);
                 Tensor b = rand_leaf(rng, {4}, -1, 1);
                 return fd_max_rel_error({a, b}, [=] { return quad(add(a, b)); });
               }});
  v.push_back({"sub", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {2, 3, 2}, -1, 1);
                 Tensor b = rand_leaf(rng, {2, 3, 2}, -1, 1);
                 return fd_max_rel_error({a, b}, [=] { return quad(sub(a, b)); });
               }});
  v.push_back({"mul_broadcast", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 4}, -1, 1);
                 Tensor b = rand_leaf(rng, {1, 4}, -1, 1);
                 return fd_max_rel_error({a, b}, [=] { return quad(mul(a, b)); });
               }});
  v.push_back({"scalar_affine", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {2, 5}, -1, 1);
                 return fd_max_rel_error(
                     {a}, [=] { return quad(neg(mul_scalar(add_scalar(a, 0.7), -1.3))); });
               }});
  v.push_back({"relu", [](Rng& rng) {
                 Tensor a = rand_leaf_signed(rng, {4, 5}, 0.2, 1.5);
                 return fd_max_rel_error({a}, [=] { return quad(relu(a)); });
               }});
  v.push_back({"sigmoid", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {4, 5}, -2, 2);
                 return fd_max_rel_error({a}, [=] { return quad(sigmoid(a)); });
               }});
  v.push_back({"tanh", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {4, 5}, -2, 2);
                 return fd_max_rel_error({a}, [=] { return quad(tanh_op(a)); });
               }});
  v.push_back({"exp", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 4}, -1, 1);
                 return fd_max_rel_error({a}, [=] { return quad(exp_op(a)); });
               }});
  v.push_back({"log", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 4}, 0.2, 3.0);
                 return fd_max_rel_error({a}, [=] { return sum_all(log_op(a)); });
               }});
  v.push_back({"log_softmax", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 5}, -2, 2);
                 std::vector<double> mask(15, 0.0);
                 for (int64_t b = 0; b < 3; ++b) {
                   mask[static_cast<size_t>(b * 5 + rng.below(5))] = 1.0;
                 }
                 Tensor m = Tensor::from({3, 5}, std::move(mask));
                 return fd_max_rel_error({a}, [=] { return sum_all(mul(log_softmax(a), m)); });
               }});
  v.push_back({"reductions", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 4, 2}, -1, 1);
                 return fd_max_rel_error({a}, [=] {
                   Tensor s = quad(sum(a, 1));
                   Tensor m = quad(mean(a, 0));
                   return add(add(s, m), mean_all(a));
                 });
               }});
  v.push_back({"reshape_permute", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {2, 3, 4}, -1, 1);
                 return fd_max_rel_error(
                     {a}, [=] { return quad(reshape(permute(a, {2, 0, 1}), {4, 6})); });
               }});
  v.push_back({"slice_concat_flip", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {2, 6, 3}, -1, 1);
                 return fd_max_rel_error({a}, [=] {
                   Tensor front = slice(a, 1, 0, 3);
                   Tensor back = flip(slice(a, 1, 3, 3), 1);
                   Tensor c = concat({front, back}, 1);
                   return quad(stride_slice(c, 1, 0, 2, 3));
                 });
               }});
  v.push_back({"matmul", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {3, 4}, -1, 1);
                 Tensor b = rand_leaf(rng, {4, 2}, -1, 1);
                 return fd_max_rel_error({a, b}, [=] { return quad(matmul(a, b)); });
               }});
  v.push_back({"linear", [](Rng& rng) {
                 Linear l(rng, 4, 3);
                 Tensor x2 = rand_leaf(rng, {2, 4}, -1, 1);
                 Tensor x3 = rand_leaf(rng, {2, 3, 4}, -1, 1);
                 std::vector<Tensor> params = l.parameters();
                 params.push_back(x2);
                 params.push_back(x3);
                 return fd_max_rel_error(
                     params, [=] { return add(quad(l.forward(x2)), quad(l.forward(x3))); });
               }});
  v.push_back({"conv1d_stride1", [](Rng& rng) {
                 Conv1d c(rng, 3, 4, 3, 1);
                 Tensor x = rand_leaf(rng, {2, 3, 7}, -1, 1);
                 std::vector<Tensor> params = c.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(params, [=] { return quad(c.forward(x)); });
               }});
  v.push_back({"conv1d_stride2", [](Rng& rng) {
                 Conv1d c(rng, 3, 4, 2, 2);
                 Tensor x = rand_leaf(rng, {2, 3, 8}, -1, 1);
                 std::vector<Tensor> params = c.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(params, [=] { return quad(c.forward(x)); });
               }});
  v.push_back({"batchnorm_training", [](Rng& rng) {
                 BatchNorm1d bn(3);
                 Tensor x = rand_leaf(rng, {3, 3, 4}, -1, 1);
                 // A symmetric loss is invariant to the normalization itself
                 // (gradients collapse toward roundoff), so weight the output
                 // with fixed random coefficients.
                 std::vector<double> cv(36);
                 for (double& e : cv) e = rng.uniform(-1, 1);
                 Tensor c = Tensor::from({3, 3, 4}, std::move(cv));
                 std::vector<Tensor> params = bn.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(params, [&bn, x, c]() mutable {
                   Tensor y = bn.forward(x, /*training=*/true);
                   return mean_all(mul(add(y, mul(y, y)), c));
                 });
               }});
  v.push_back({"gru", [](Rng& rng) {
                 GruLayer g(rng, 3, 4, /*bidir=*/false);
                 Tensor x = rand_leaf(rng, {2, 5, 3}, -1, 1);
                 std::vector<Tensor> params = g.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(params, [=] { return quad(g.forward(x)); });
               }});
  v.push_back({"gru_bidirectional", [](Rng& rng) {
                 GruLayer g(rng, 3, 3, /*bidir=*/true);
                 Tensor x = rand_leaf(rng, {2, 4, 3}, -1, 1);
                 std::vector<Tensor> params = g.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(params, [=] { return quad(g.forward(x)); });
               }});
  v.push_back({"cross_entropy", [](Rng& rng) {
                 Tensor a = rand_leaf(rng, {4, 5}, -2, 2);
                 std::vector<int> targets;
                 for (int i = 0; i < 4; ++i) targets.push_back(static_cast<int>(rng.below(5)));
                 return fd_max_rel_error(
                     {a}, [=] { return ce_loss(log_softmax(a), targets); });
               }});
  v.push_back({"ctc", [](Rng& rng) {
                 int64_t V = 3 + rng.below(2);
                 std::vector<int> target;
                 int64_t len = 1 + rng.below(3);
                 for (int64_t i = 0; i < len; ++i) {
                   target.push_back(1 + static_cast<int>(rng.below(V - 1)));
                 }
                 int64_t T = ctc_min_frames(target) + rng.below(3);
                 Tensor a = rand_leaf(rng, {T, V}, -2, 2);
                 return fd_max_rel_error(
                     {a}, [=] { return ctc_loss(log_softmax(a), target); });
               }});
  v.push_back({"film_generate", [](Rng& rng) {
                 FilmGenerator gen(rng, LanguageCode::kDim, 4, 2, 3);
                 Tensor codes = detail::rand_codes(rng, 2);
                 return fd_max_rel_error(gen.parameters(), [=] {
                   FilmParams fp = gen.generate(codes);
                   return add(quad(fp.gamma), quad(fp.beta));
                 });
               }});
  v.push_back({"film_apply", [](Rng& rng) {
                 Tensor x = rand_leaf(rng, {2, 4, 3}, -1, 1);
                 Tensor gamma = rand_leaf(rng, {2, 1, 3}, -0.9, 0.9);
                 Tensor beta = rand_leaf(rng, {2, 1, 3}, -0.9, 0.9);
                 return fd_max_rel_error({x, gamma, beta},
                                         [=] { return quad(film_apply(x, gamma, beta)); });
               }});
  v.push_back({"se_block", [](Rng& rng) {
                 SeBlock se(rng, 4, 2);
                 Tensor x = rand_leaf(rng, {2, 5, 4}, -1, 1);
                 std::vector<Tensor> params = se.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(params, [=] { return quad(se.forward(x)); });
               }});
  v.push_back({"slil_block", [](Rng& rng) {
                 SeBlock se(rng, 4, 2);
                 Tensor x = rand_leaf(rng, {2, 4, 4}, -1, 1);
                 Tensor gamma = rand_leaf(rng, {2, 1, 4}, -0.9, 0.9);
                 Tensor beta = rand_leaf(rng, {2, 1, 4}, -0.9, 0.9);
                 std::vector<Tensor> params = se.parameters();
                 params.push_back(x);
                 params.push_back(gamma);
                 params.push_back(beta);
                 return fd_max_rel_error(
                     params, [=] { return quad(slil_apply(x, gamma, beta, se)); });
               }});
  v.push_back({"se_film_block", [](Rng& rng) {
                 SeBlock se(rng, 4, 2);
                 Tensor x = rand_leaf(rng, {2, 4, 4}, -1, 1);
                 Tensor gamma = rand_leaf(rng, {2, 1, 4}, -0.9, 0.9);
                 Tensor beta = rand_leaf(rng, {2, 1, 4}, -0.9, 0.9);
                 std::vector<Tensor> params = se.parameters();
                 params.push_back(x);
                 params.push_back(gamma);
                 params.push_back(beta);
                 return fd_max_rel_error(
                     params, [=] { return quad(se_film_apply(x, gamma, beta, se)); });
               }});

  auto encoder_entry = [](const std::string& name, CondMode mode) {
    return GradCheckEntry{name, [mode](Rng& rng) {
      AsrConfig cfg;
      cfg.feature_dim = 4;
      cfg.hidden = 4;
      cfg.layers = 2;
      cfg.vocab_size = 4;
      cfg.cond.mode = mode;
      cfg.cond.position = rng.bernoulli(0.5) ? CondPosition::before : CondPosition::after;
      cfg.se_reduction = 2;
      cfg.film_hidden = 4;
      AsrModel m = AsrModel::init(cfg, rng);
      int64_t B = 2, T = 8;
      Tensor x = detail::rand_leaf(rng, {B, T, cfg.feature_dim}, -1, 1);
      Tensor codes = detail::rand_codes(rng, B);
      std::vector<std::vector<int>> targets;
      int64_t Tp = m.out_length(T);
      for (int64_t b = 0; b < B; ++b) {
        std::vector<int> t;
        int64_t len = 1 + rng.below(2);
        do {
          t.clear();
          for (int64_t i = 0; i < len; ++i) {
            t.push_back(1 + static_cast<int>(rng.below(cfg.vocab_size - 1)));
          }
        } while (ctc_min_frames(t) > Tp);
        targets.push_back(t);
      }
      std::vector<Tensor> params = m.parameters();
      params.push_back(x);
      return fd_max_rel_error(params, [=] {
        Tensor lp = m.forward(x, codes);
        Tensor total;
        for (int64_t b = 0; b < B; ++b) {
          Tensor li = ctc_loss(reshape(slice(lp, 0, b, 1), {lp.dim(1), lp.dim(2)}),
                               targets[static_cast<size_t>(b)]);
          total = total.defined() ? add(total, li) : li;
        }
        return mul_scalar(total, 1.0 / static_cast<double>(B));
      });
    }};
  };
  v.push_back(encoder_entry("encoder_ctc_none", CondMode::none));
  v.push_back(encoder_entry("encoder_ctc_append", CondMode::append));
  v.push_back(encoder_entry("encoder_ctc_film", CondMode::film));
  v.push_back(encoder_entry("encoder_ctc_slil", CondMode::slil));
  v.push_back(encoder_entry("encoder_ctc_se_film", CondMode::se_film));

  v.push_back({"lid_ce", [](Rng& rng) {
                 LidConfig cfg;
                 cfg.channels = 3;
                 cfg.hidden = 2;
                 LidModel m = LidModel::init(4, cfg, rng);
                 Tensor x = rand_leaf(rng, {2, LidModel::min_duration(), 4}, -1, 1);
                 std::vector<int> targets{static_cast<int>(rng.below(3)),
                                          static_cast<int>(rng.below(3))};
                 std::vector<Tensor> params = m.parameters();
                 params.push_back(x);
                 return fd_max_rel_error(
                     params, [=] { return ce_loss(log_softmax(m.logits(x)), targets); });
               }});
  return v;
}

/// Runs every entry on `instances` seeded random cases and grades the worst
/// relative error against `tolerance`.
inline GradCheckReport run_grad_checks(const std::vector<GradCheckEntry>& entries,
                                       int64_t instances = 20, double tolerance = 1e-4,
                                       uint64_t seed = 17) {
  GradCheckReport report;
  report.tolerance = tolerance;
  for (size_t e = 0; e < entries.size(); ++e) {
    GradCheckResult r;
    r.op = entries[e].op;
    r.instances = instances;
    for (int64_t i = 0; i < instances; ++i) {
      Rng rng{mix_seed(mix_seed(seed, e), static_cast<uint64_t>(i))};
      r.max_rel_err = std::max(r.max_rel_err, entries[e].instance(rng));
    }
    r.pass = r.max_rel_err <= tolerance;
    report.results.push_back(std::move(r));
  }
  return report;
}

inline void print_grad_report(const GradCheckReport& report, std::ostream& os) {
  os << std::left << std::setw(24) << "op" << std::setw(11) << "instances" << std::setw(14)
     << "max_rel_err" << "status\n";
  int64_t passed = 0;
  for (const GradCheckResult& r : report.results) {
    std::ostringstream err;
    err << std::scientific << std::setprecision(2) << r.max_rel_err;
    os << std::left << std::setw(24) << r.op << std::setw(11) << r.instances << std::setw(14)
       << err.str() << (r.pass ? "ok" : "FAIL") << "\n";
    passed += r.pass;
  }
  os << "gradient check: " << passed << "/" << report.results.size() << " ops within "
     << report.tolerance << "\n";
}

}  // namespace slil
