#include "slil/pipeline.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"

// End-to-end gate for the framework. Each test checks one release
// criterion and prints a single machine-greppable pass/fail line.

namespace {

using slil::AsrModel;
using slil::CondMode;
using slil::CondPosition;
using slil::CorpusModel;
using slil::CorpusSplit;
using slil::FilmParams;
using slil::LidModel;
using slil::Rng;
using slil::RunConfig;
using slil::SeBlock;
using slil::Tensor;

bool report(int idx, const std::string& label, bool pass, const std::string& detail) {
  std::printf("criterion %02d %-55s %s  [%s]\n", idx, label.c_str(), pass ? "PASS" : "FAIL",
              detail.c_str());
  std::fflush(stdout);
  return pass;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     sizeof(double) * static_cast<size_t>(a.size())) == 0;
}

std::string acceptance_dir(const std::string& name) {
  std::string dir = ::testing::TempDir() + "slil_acceptance_" + name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string file_bytes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

RunConfig small_run_config() {
  return RunConfig::from_text(R"(
[corpus]
train_count = 40
dev_count = 12
test_count = 12
max_tokens = 4

[lid]
channels = 8
hidden = 8
epochs = 2

[asr]
hidden = 8
layers = 2
se_reduction = 4
film_hidden = 8
mode = slil
position = before
lr = 0.003
epochs = 2
batch_size = 8

[eval]
batch_size = 8
)");
}

TEST(Acceptance, C01_GradientsMatchFiniteDifferences) {
  auto t0 = std::chrono::steady_clock::now();
  slil::GradCheckReport r = slil::run_grad_checks(slil::default_grad_checks());
  double secs = seconds_since(t0);
  double worst = 0.0;
  for (const auto& res : r.results) worst = std::max(worst, res.max_rel_err);
  std::ostringstream detail;
  detail << r.results.size() << " ops, max rel err " << worst << ", tol " << r.tolerance
         << ", " << slil::detail::fixed(secs, 1) << "s";
  EXPECT_TRUE(report(1, "autodiff gradients match finite differences",
                     r.all_pass() && secs < 60.0, detail.str()));
}

TEST(Acceptance, C02_CtcMatchesExhaustiveEnumeration) {
  Rng rng{41};
  double worst = 0.0;
  const int instances = 200;
  for (int i = 0; i < instances; ++i) {
    int64_t V = 2 + rng.below(3);  // alphabet of 2..4 including blank
    std::vector<int> target;
    int64_t len = rng.below(4);  // 0..3 tokens
    for (int64_t k = 0; k < len; ++k) target.push_back(1 + static_cast<int>(rng.below(V - 1)));
    int64_t lo = std::max<int64_t>(1, slil::ctc_min_frames(target));
    int64_t T = lo + rng.below(9 - lo);  // min feasible .. 8 frames
    std::vector<double> logits(static_cast<size_t>(T * V));
    for (double& v : logits) v = rng.uniform(-2.0, 2.0);
    Tensor lp = slil::log_softmax(Tensor::from({T, V}, std::move(logits)));
    std::vector<double> lpv(lp.data().begin(), lp.data().end());
    double got = slil::ctc_loss(lp, target).value();
    double want = oracle::ctc_brute_force_nll(lpv, T, V, target);
    worst = std::max(worst, std::abs(got - want));
  }
  std::ostringstream detail;
  detail << instances << " instances, max |nll diff| " << worst;
  EXPECT_TRUE(report(2, "ctc loss matches exhaustive path enumeration", worst <= 1e-8,
                     detail.str()));
}

TEST(Acceptance, C03_PathCollapseMatchesReference) {
  // _ = blank, X=1 Y=2 Z=3: both canonical paths collapse to XYZ.
  bool ok = slil::ctc_collapse({1, 0, 2, 2, 0, 3}) == std::vector<int>({1, 2, 3}) &&
            slil::ctc_collapse({0, 1, 2, 0, 3, 0}) == std::vector<int>({1, 2, 3}) &&
            slil::ctc_collapse({}) == std::vector<int>() &&
            slil::ctc_collapse({0, 0, 0}) == std::vector<int>();
  Rng rng{42};
  const int cases = 500;
  int agreed = 0;
  for (int i = 0; i < cases; ++i) {
    std::vector<int> path(static_cast<size_t>(rng.below(13)));
    for (int& v : path) v = static_cast<int>(rng.below(5));
    agreed += slil::ctc_collapse(path) == oracle::collapse_ref(path);
  }
  std::ostringstream detail;
  detail << "2 canonical cases, " << agreed << "/" << cases << " random paths";
  EXPECT_TRUE(report(3, "ctc path collapse removes repeats then blanks",
                     ok && agreed == cases, detail.str()));
}

TEST(Acceptance, C04_ErrorRateMatchesReferenceEditDistance) {
  Rng rng{43};
  const int cases = 300;
  int agreed = 0;
  for (int i = 0; i < cases; ++i) {
    std::vector<int> hyp(static_cast<size_t>(rng.below(11)));
    std::vector<int> ref(static_cast<size_t>(1 + rng.below(10)));
    for (int& v : hyp) v = static_cast<int>(rng.below(5));
    for (int& v : ref) v = static_cast<int>(rng.below(5));
    int64_t want = oracle::edit_distance_ref(hyp, ref);
    bool same = slil::edit_distance(hyp, ref) == want &&
                slil::cer(hyp, ref) ==
                    static_cast<double>(want) / static_cast<double>(ref.size());
    agreed += same;
  }
  std::vector<int> ref = {3, 1, 4, 1, 5};
  bool edges = slil::cer(ref, ref) == 0.0 && slil::cer({}, ref) == 1.0;
  std::ostringstream detail;
  detail << agreed << "/" << cases << " random pairs, identity and deletion edges "
         << (edges ? "ok" : "bad");
  EXPECT_TRUE(report(4, "character error rate matches reference edit distance",
                     agreed == cases && edges, detail.str()));
}

TEST(Acceptance, C05_IdentityModulationLeavesEncoderUnchanged) {
  const int probes = 10;
  int identical = 0;
  for (int p = 0; p < probes; ++p) {
    slil::AsrConfig cfg;
    cfg.feature_dim = 6;
    cfg.hidden = 8;
    cfg.layers = 2;
    cfg.vocab_size = 6;
    cfg.cond.mode = CondMode::film;
    cfg.cond.position = p % 2 == 0 ? CondPosition::before : CondPosition::after;
    cfg.film_hidden = 4;
    Rng rng{static_cast<uint64_t>(500 + p)};
    AsrModel film_model = AsrModel::init(cfg, rng);
    AsrModel plain = film_model;  // aliases the same weights
    plain.cfg.cond.mode = CondMode::none;

    int64_t B = 2, L = cfg.layers, C = cfg.hidden;
    FilmParams id;
    id.layers = L;
    id.channels = C;
    id.gamma = Tensor::from({B, L, C}, std::vector<double>(static_cast<size_t>(B * L * C), 1.0));
    id.beta = Tensor::from({B, L, C}, std::vector<double>(static_cast<size_t>(B * L * C), 0.0));

    Tensor x = slil::detail::rand_leaf(rng, {B, 9, cfg.feature_dim}, -1.0, 1.0);
    identical += bits_equal(film_model.forward_forced(x, id), plain.forward(x, Tensor{}));
  }
  std::ostringstream detail;
  detail << identical << "/" << probes << " probes bit-identical across both positions";
  EXPECT_TRUE(report(5, "unit-scale zero-shift modulation is a bit-exact no-op",
                     identical == probes, detail.str()));
}

TEST(Acceptance, C06_SqueezeExcitationGatingProperties) {
  Rng rng{77};
  SeBlock se(rng, 8, 4);
  Tensor x = slil::detail::rand_leaf(rng, {3, 5, 8}, -2.0, 2.0);

  Tensor g = se.gate(x);
  bool gates_open = g.shape() == slil::Shape({3, 8});
  for (double v : g.data()) gates_open = gates_open && v > 0.0 && v < 1.0;

  Tensor y = se.forward(x);
  bool contracts = y.shape() == x.shape();
  for (int64_t i = 0; i < x.size(); ++i) {
    contracts = contracts && std::abs(y.data()[i]) < std::abs(x.data()[i]) + 1e-300;
  }

  auto wz = se.recover.w.mutable_values();
  std::fill(wz.begin(), wz.end(), 0.0);
  auto bz = se.recover.b.mutable_values();
  std::fill(bz.begin(), bz.end(), 0.0);
  Tensor h = se.forward(x);
  bool halves = true;
  for (int64_t i = 0; i < x.size(); ++i) halves = halves && h.data()[i] == 0.5 * x.data()[i];

  std::ostringstream detail;
  detail << "gates in (0,1) " << (gates_open ? "ok" : "bad") << ", |out| <= |in| "
         << (contracts ? "ok" : "bad") << ", zeroed weights halve exactly "
         << (halves ? "ok" : "bad");
  EXPECT_TRUE(report(6, "channel gates squash, contract, and default to half",
                     gates_open && contracts && halves, detail.str()));
}

TEST(Acceptance, C07_LanguageIdentifierAccuracy) {
  auto t0 = std::chrono::steady_clock::now();
  RunConfig rc;  // desk-scale defaults
  CorpusModel model = CorpusModel::make_default(rc.corpus.feature_dim);
  CorpusSplit corpus = slil::generate_corpus(model, rc.corpus, rc.seed);
  Rng rng{slil::mix_seed(rc.lid_seed, 100)};
  LidModel m = LidModel::init(rc.corpus.feature_dim, rc.lid, rng);
  slil::LidTrainStats stats = slil::train_lid(m, corpus, rc.lid_train_config());
  double secs = seconds_since(t0);
  std::ostringstream detail;
  detail << "dev accuracy " << slil::detail::fixed(100.0 * stats.best_dev_accuracy, 2)
         << "% at epoch " << stats.best_epoch << " of " << rc.lid_epochs << ", "
         << slil::detail::fixed(secs, 1) << "s";
  EXPECT_TRUE(report(7, "sentence-level language id reaches 99% dev accuracy",
                     stats.best_dev_accuracy >= 0.99 && secs < 180.0, detail.str()));
}

TEST(Acceptance, C08_ConditioningBeatsUnconditionedBaseline) {
  auto t0 = std::chrono::steady_clock::now();
  RunConfig rc = RunConfig::from_text(R"(
[asr]
lr = 0.003
epochs = 40
patience = 12
)");
  std::cout << "running the 8-variant sweep (3 seeds each); per-run lines follow\n";
  slil::AblationReport r = slil::cmd_ablate(rc, "", false, std::cout);
  double secs = seconds_since(t0);

  double none_cer = r.row("none").mean_test_cer;
  double m1_cer = r.row("M1").mean_test_cer;
  double m3_cer = r.row("M3").mean_test_cer;
  bool beats_baseline = m3_cer < none_cer;
  bool in_budget = secs < 1800.0;

  std::ostringstream detail;
  detail << "gated+modulated " << slil::detail::fixed(100.0 * m3_cer, 2)
         << "% vs unconditioned " << slil::detail::fixed(100.0 * none_cer, 2) << "% test CER, "
         << slil::detail::fixed(secs, 1) << "s";
  EXPECT_TRUE(report(8, "conditioned recognizer beats unconditioned baseline",
                     beats_baseline && in_budget, detail.str()));
  // Non-blocking ordering: at this corpus scale nearby variants can swap.
  std::printf("criterion 08 (informational) full block <= modulation-only: %s (%s%% vs %s%%)\n",
              m3_cer <= m1_cer ? "holds" : "does not hold",
              slil::detail::fixed(100.0 * m3_cer, 2).c_str(),
              slil::detail::fixed(100.0 * m1_cer, 2).c_str());
  std::fflush(stdout);
}

TEST(Acceptance, C09_StageOneParametersFrozenDuringStageTwo) {
  RunConfig rc = small_run_config();
  CorpusModel model = CorpusModel::make_default(rc.corpus.feature_dim);
  CorpusSplit corpus = slil::generate_corpus(model, rc.corpus, rc.seed);
  Rng lrng{slil::mix_seed(rc.lid_seed, 100)};
  LidModel lid = LidModel::init(rc.corpus.feature_dim, rc.lid, lrng);
  slil::train_lid(lid, corpus, rc.lid_train_config());
  uint64_t before = slil::param_hash(lid.named_parameters());

  Rng arng{slil::mix_seed(rc.asr_seed, 200)};
  AsrModel asr = AsrModel::init(rc.asr_config(model), arng);
  slil::asr_train(asr, corpus, lid, rc.asr_seed);
  uint64_t after = slil::param_hash(lid.named_parameters());

  std::ostringstream detail;
  detail << "parameter digest " << before << (before == after ? " unchanged" : " CHANGED");
  EXPECT_TRUE(report(9, "stage-one parameters frozen during stage two", before == after,
                     detail.str()));
}

TEST(Acceptance, C10_ArtifactsAreReproducible) {
  RunConfig rc = small_run_config();
  std::ostringstream devnull;
  std::string d1 = acceptance_dir("repro1"), d2 = acceptance_dir("repro2");
  slil::cmd_corpus_gen(rc, d1, false, devnull);
  slil::cmd_corpus_gen(rc, d2, false, devnull);
  bool corpus_same = true;
  for (const char* split : {"train", "dev", "test"}) {
    corpus_same = corpus_same && file_bytes(slil::corpus_split_path(d1, split)) ==
                                     file_bytes(slil::corpus_split_path(d2, split));
  }

  slil::cmd_train_lid(rc, d1, d1 + "/lid.ckpt", false, devnull);
  slil::cmd_train_lid(rc, d2, d2 + "/lid.ckpt", false, devnull);
  slil::cmd_train_asr(rc, d1, d1 + "/lid.ckpt", d1 + "/asr.ckpt", false, false, devnull);
  slil::cmd_train_asr(rc, d2, d2 + "/lid.ckpt", d2 + "/asr.ckpt", false, false, devnull);
  bool ckpt_same = file_bytes(d1 + "/lid.ckpt") == file_bytes(d2 + "/lid.ckpt") &&
                   file_bytes(d1 + "/asr.ckpt") == file_bytes(d2 + "/asr.ckpt");

  slil::write_checkpoint(d1 + "/asr_copy.ckpt", slil::read_checkpoint(d1 + "/asr.ckpt"));
  bool rewrite_same = file_bytes(d1 + "/asr_copy.ckpt") == file_bytes(d1 + "/asr.ckpt");

  LidModel lid1 = slil::load_lid(d1 + "/lid.ckpt");
  LidModel lid2 = slil::load_lid(d2 + "/lid.ckpt");
  bool roundtrip_same = true;
  auto p1 = lid1.named_parameters(), p2 = lid2.named_parameters();
  for (size_t i = 0; i < p1.size(); ++i) {
    roundtrip_same = roundtrip_same && bits_equal(p1[i].second, p2[i].second);
  }

  std::string e1 =
      slil::cmd_evaluate(rc, d1, d1 + "/asr.ckpt", d1 + "/lid.ckpt", "test", false).render();
  std::string e2 =
      slil::cmd_evaluate(rc, d2, d2 + "/asr.ckpt", d2 + "/lid.ckpt", "test", false).render();
  bool eval_same = e1 == e2;

  std::ostringstream detail;
  detail << "corpus " << (corpus_same ? "ok" : "bad") << ", checkpoints "
         << (ckpt_same ? "ok" : "bad") << ", rewrite " << (rewrite_same ? "ok" : "bad")
         << ", reload " << (roundtrip_same ? "ok" : "bad") << ", eval report "
         << (eval_same ? "ok" : "bad");
  EXPECT_TRUE(report(10, "artifacts reproduce byte for byte across reruns",
                     corpus_same && ckpt_same && rewrite_same && roundtrip_same && eval_same,
                     detail.str()));
}

}  // namespace
