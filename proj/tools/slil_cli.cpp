#include <CLI11.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>

#include "slil/pipeline.hpp"

namespace {

struct Args {
  std::string config, corpus, out, lid, asr;
  std::string split = "";
  uint64_t seed = 0;
  bool seed_set = false;
  bool overwrite = false;
  bool oracle_codes = false;
};

slil::RunConfig load_config(const Args& a) {
  slil::RunConfig rc = a.config.empty() ? slil::RunConfig{} : slil::RunConfig::from_file(a.config);
  if (a.seed_set) rc.seed = a.seed;
  return rc;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"slil: two-stage multilingual CTC speech recognition"};
  app.require_subcommand(1);
  Args a;

  auto add_common = [&](CLI::App* sub, bool with_config = true) {
    if (with_config) sub->add_option("--config", a.config, "run configuration file");
    sub->add_flag("--overwrite", a.overwrite, "replace existing outputs");
  };

  CLI::App* gen = app.add_subcommand("corpus-gen", "generate the synthetic corpus");
  add_common(gen);
  gen->add_option("--out", a.out, "output directory for the feature files")->required();
  gen->add_option("--seed", a.seed, "override the corpus generation seed")
      ->each([&](const std::string&) { a.seed_set = true; });

  CLI::App* tlid = app.add_subcommand("train-lid", "train the stage-one language identifier");
  add_common(tlid);
  tlid->add_option("--corpus", a.corpus, "corpus directory from corpus-gen")->required();
  tlid->add_option("--out", a.out, "output checkpoint path")->required();

  CLI::App* tasr = app.add_subcommand("train-asr", "train the stage-two recognizer");
  add_common(tasr);
  tasr->add_option("--corpus", a.corpus, "corpus directory from corpus-gen")->required();
  tasr->add_option("--lid", a.lid, "stage-one checkpoint (required unless mode is none)");
  tasr->add_option("--out", a.out, "output checkpoint path")->required();
  tasr->add_flag("--oracle-codes", a.oracle_codes,
                 "diagnostic: condition on gold language labels instead of stage-one output");

  CLI::App* ev = app.add_subcommand("evaluate", "report CER of a saved recognizer");
  add_common(ev);
  ev->add_option("--corpus", a.corpus, "corpus directory from corpus-gen")->required();
  ev->add_option("--asr", a.asr, "stage-two checkpoint")->required();
  ev->add_option("--lid", a.lid, "stage-one checkpoint (required unless mode is none)");
  ev->add_option("--split", a.split, "evaluation split: dev or test");
  ev->add_option("--out", a.out, "also write the report to this file");
  ev->add_flag("--oracle-codes", a.oracle_codes,
               "diagnostic: condition on gold language labels instead of stage-one output");

  CLI::App* ab = app.add_subcommand("ablate", "run every conditioning variant and compare");
  add_common(ab);
  ab->add_option("--out", a.out, "report path prefix (writes <prefix>.tsv and <prefix>.txt)");
  ab->add_option("--seed", a.seed, "override the corpus generation seed")
      ->each([&](const std::string&) { a.seed_set = true; });

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference check of every operation");
  (void)gc;

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      slil::cmd_corpus_gen(load_config(a), a.out, a.overwrite, std::cout);
    } else if (tlid->parsed()) {
      slil::cmd_train_lid(load_config(a), a.corpus, a.out, a.overwrite, std::cout);
    } else if (tasr->parsed()) {
      slil::cmd_train_asr(load_config(a), a.corpus, a.lid, a.out, a.overwrite, a.oracle_codes,
                          std::cout);
    } else if (ev->parsed()) {
      slil::RunConfig rc = load_config(a);
      std::string split = a.split.empty() ? rc.eval_split : a.split;
      slil::EvalReport report =
          slil::cmd_evaluate(rc, a.corpus, a.asr, a.lid, split, a.oracle_codes);
      std::cout << report.render();
      if (!a.out.empty()) {
        slil::detail::require_fresh(a.out, a.overwrite);
        std::ofstream os(a.out);
        if (!os) throw slil::IoError("cannot open '" + a.out + "' for writing");
        os << report.render();
      }
    } else if (ab->parsed()) {
      slil::cmd_ablate(load_config(a), a.out, a.overwrite, std::cout);
    } else if (gc->parsed()) {
      slil::GradCheckReport report = slil::cmd_gradcheck(std::cout);
      return report.all_pass() ? 0 : 2;
    }
  } catch (const slil::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
