// cpolab: command-line front end for corpus generation, training, negative
// sampling, ranking, ensembling, evaluation and the numerical checks.
//
// Exit codes: 0 success, 1 validation error, 2 runtime error.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpolab/checkpoint.hpp"
#include "cpolab/config.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/ebm_checks.hpp"
#include "cpolab/error.hpp"
#include "cpolab/eval.hpp"
#include "cpolab/gradcheck.hpp"
#include "cpolab/markov.hpp"
#include "cpolab/negatives.hpp"
#include "cpolab/ranking.hpp"
#include "cpolab/train.hpp"

namespace fs = std::filesystem;
using namespace cpolab;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "experiment seed (overrides the config's)");
  cmd->add_option("--out", c.out, "output directory");
}

ConfigFile load(const Common& c) {
  ConfigFile cfg = c.config.empty() ? ConfigFile{} : load_config(c.config);
  if (c.seed) cfg.train.seed = *c.seed;
  return cfg;
}

std::vector<PreferenceGroup> load_groups(const std::string& path, int vocab_size) {
  std::istringstream in(read_file(path));
  std::vector<PreferenceGroup> groups;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    groups.push_back(parse_group(line, vocab_size));
  }
  return groups;
}

std::string format_groups(const std::vector<PreferenceGroup>& groups) {
  std::string out;
  for (const auto& g : groups) out += format_group(g) + '\n';
  return out;
}

void report(const std::string& what, const fs::path& path) { std::cout << what << ": " << path.string() << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive preference optimization toolkit"};
  app.require_subcommand(1);

  Common gc_common;
  std::size_t n_pairs = 5000;
  auto* gen_corpus = app.add_subcommand("gen-corpus", "sample a corpus from the synthetic Markov generator");
  add_common(gen_corpus, gc_common);
  gen_corpus->add_option("--n", n_pairs, "number of (prefix, continuation) pairs");

  Common mle_common;
  std::string mle_corpus, mle_init;
  auto* train_mle = app.add_subcommand("train-mle", "next-token (MLE) training");
  add_common(train_mle, mle_common);
  train_mle->add_option("--corpus", mle_corpus, "training corpus")->required()->check(CLI::ExistingFile);
  train_mle->add_option("--init", mle_init, "checkpoint to continue from")->check(CLI::ExistingFile);

  Common cpo_common;
  std::string cpo_corpus, cpo_ref, cpo_init, cpo_groups;
  auto* train_cpo = app.add_subcommand("train-cpo", "preference training (DPO / CPO / CPO_RANKED)");
  add_common(train_cpo, cpo_common);
  train_cpo->add_option("--corpus", cpo_corpus, "training corpus")->check(CLI::ExistingFile);
  train_cpo->add_option("--ref", cpo_ref, "frozen reference checkpoint")->required()->check(CLI::ExistingFile);
  train_cpo->add_option("--init", cpo_init, "starting checkpoint (default: the reference)")->check(CLI::ExistingFile);
  train_cpo->add_option("--groups", cpo_groups, "pre-generated group file (from gen-negatives)")
      ->check(CLI::ExistingFile);

  Common neg_common;
  std::string neg_corpus, neg_ref;
  int neg_group_batch = 16;
  int neg_max_new = 16;
  auto* gen_neg = app.add_subcommand("gen-negatives", "assemble one preference group per corpus pair");
  add_common(gen_neg, neg_common);
  gen_neg->add_option("--corpus", neg_corpus, "corpus")->required()->check(CLI::ExistingFile);
  gen_neg->add_option("--ref", neg_ref, "reference checkpoint")->required()->check(CLI::ExistingFile);
  gen_neg->add_option("--group-batch", neg_group_batch, "pseudo-batch size for batch negatives");
  gen_neg->add_option("--max-new", neg_max_new, "generation length for autoregressive negatives");

  Common rank_common;
  std::string rank_groups, rank_ref;
  auto* rank = app.add_subcommand("rank", "rank group candidates by embedding similarity to the ground truth");
  add_common(rank, rank_common);
  rank->add_option("--groups", rank_groups, "group file")->required()->check(CLI::ExistingFile);
  rank->add_option("--ref", rank_ref, "reference checkpoint")->required()->check(CLI::ExistingFile);

  Common ens_common;
  std::string ens_mle, ens_cpo;
  std::vector<double> alphas;
  auto* ensemble = app.add_subcommand("ensemble", "interpolate alpha * MLE + (1 - alpha) * CPO weights");
  add_common(ensemble, ens_common);
  ensemble->add_option("--mle", ens_mle, "MLE checkpoint")->required()->check(CLI::ExistingFile);
  ensemble->add_option("--cpo", ens_cpo, "CPO checkpoint")->required()->check(CLI::ExistingFile);
  ensemble->add_option("--alphas", alphas, "interpolation weights in [0, 1]")->required();

  Common eval_common;
  std::vector<std::string> eval_ckpts;
  std::string eval_corpus, eval_ref, eval_oracle;
  long eval_step = 0;
  auto* eval = app.add_subcommand("eval", "score checkpoints: reverse KL, oracle NLL, GT top-1, win rate");
  add_common(eval, eval_common);
  eval->add_option("--ckpt", eval_ckpts, "checkpoint(s) to evaluate")->required()->check(CLI::ExistingFile);
  eval->add_option("--corpus", eval_corpus, "held-out corpus")->required()->check(CLI::ExistingFile);
  eval->add_option("--ref", eval_ref, "reference checkpoint for implicit rewards")->required()->check(CLI::ExistingFile);
  eval->add_option("--oracle", eval_oracle, "transformer oracle checkpoint (default: the config's Markov generator)")
      ->check(CLI::ExistingFile);
  eval->add_option("--step", eval_step, "step recorded in the metrics");

  Common grad_common;
  std::string grad_objective = "all";
  int grad_coords = 100;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check of the training losses");
  add_common(gradcheck, grad_common);
  gradcheck->add_option("--objective", grad_objective, "MLE, DPO, CPO, CPO_RANKED or all");
  gradcheck->add_option("--coords", grad_coords, "random coordinates per objective");

  Common ebm_common;
  auto* ebm_check = app.add_subcommand("ebm-check", "brute-force checks of the RLHF optimum");
  add_common(ebm_check, ebm_common);

  Common exp_common;
  auto* experiment = app.add_subcommand("experiment", "end-to-end run: corpus, MLE, CPO, ensemble sweep, eval");
  add_common(experiment, exp_common);
  experiment->add_option("--alphas", alphas, "ensemble sweep");
  std::optional<long> mle_steps;
  std::optional<double> mle_lr;
  experiment->add_option("--mle-steps", mle_steps, "reference-stage steps (the config's steps apply to CPO)");
  experiment->add_option("--mle-lr", mle_lr, "reference-stage learning rate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen_corpus) {
      const auto cfg = load(gc_common);
      MarkovSpec spec = cfg.generator;
      require(n_pairs > 0, "--n must be positive");
      const MarkovChain chain(spec);
      const auto corpus =
          chain.sample_corpus(n_pairs, derive_seed(cfg.train.seed, stream::kCorpus), cfg.model.max_context);
      const fs::path out = fs::path(gc_common.out) / "corpus.txt";
      save_corpus(out, corpus);
      report("corpus", out);
    } else if (*train_mle) {
      auto cfg = load(mle_common);
      cfg.train.objective = Objective::kMle;
      const auto corpus = load_corpus(mle_corpus, cfg.model.vocab_size);
      Parameters init = mle_init.empty() ? init_parameters(cfg.model, derive_seed(cfg.train.seed, stream::kInit))
                                         : load_checkpoint(mle_init).params;
      if (!mle_init.empty()) cfg.model = load_checkpoint(mle_init).config;
      TrainContext ctx;
      ctx.record_interval = cfg.eval.interval;
      const auto res = train(cfg.train, cfg.model, corpus, std::move(init), ctx);
      const fs::path out(mle_common.out);
      save_checkpoint(out / "model.ckpt", cfg.model, res.params);
      detail::write_atomically(out / "metrics.jsonl", to_jsonl(res.metrics));
      report("checkpoint", out / "model.ckpt");
    } else if (*train_cpo) {
      auto cfg = load(cpo_common);
      require(cfg.train.objective != Objective::kMle, "train-cpo needs a preference objective in the config");
      const auto ref = load_checkpoint(cpo_ref);
      cfg.model = ref.config;
      const auto init = cpo_init.empty() ? ref : load_checkpoint(cpo_init);
      require(init.config == ref.config, "initial and reference checkpoints have different shapes");
      std::vector<Example> corpus;
      std::vector<PreferenceGroup> groups;
      if (!cpo_groups.empty()) {
        groups = load_groups(cpo_groups, cfg.model.vocab_size);
      } else {
        require(!cpo_corpus.empty(), "train-cpo needs --corpus or --groups");
        corpus = load_corpus(cpo_corpus, cfg.model.vocab_size);
      }
      TrainContext ctx;
      ctx.reference = &ref.params;
      ctx.cached_groups = groups;
      ctx.record_interval = cfg.eval.interval;
      ctx.max_new = cfg.eval.max_new;
      const auto res = train(cfg.train, cfg.model, corpus, init.params, ctx);
      const fs::path out(cpo_common.out);
      save_checkpoint(out / "model.ckpt", cfg.model, res.params);
      detail::write_atomically(out / "metrics.jsonl", to_jsonl(res.metrics));
      report("checkpoint", out / "model.ckpt");
    } else if (*gen_neg) {
      auto cfg = load(neg_common);
      const auto ref = load_checkpoint(neg_ref);
      const auto corpus = load_corpus(neg_corpus, ref.config.vocab_size);
      require(!corpus.empty(), "corpus is empty");
      cfg.train.sampler.validate(ref.config.vocab_size);
      NegativeSamplerConfig sampler = cfg.train.sampler;
      if (neg_common.seed) sampler.seed = *neg_common.seed;
      const auto groups = build_groups(corpus, neg_group_batch, sampler, ref.params, ref.config, neg_max_new);
      const fs::path out = fs::path(neg_common.out) / "groups.tsv";
      detail::write_atomically(out, format_groups(groups));
      report("groups", out);
    } else if (*rank) {
      const auto ref = load_checkpoint(rank_ref);
      auto groups = load_groups(rank_groups, ref.config.vocab_size);
      auto ranked = ordered_map(groups.size(), [&](std::size_t i) {
        PreferenceGroup g = groups[i];
        rank_group(g, ref.params, ref.config);
        return g;
      });
      const fs::path out = fs::path(rank_common.out) / "groups_ranked.tsv";
      detail::write_atomically(out, format_groups(ranked));
      report("ranked groups", out);
    } else if (*ensemble) {
      const auto mle = load_checkpoint(ens_mle);
      const auto cpo = load_checkpoint(ens_cpo);
      require(mle.config == cpo.config, "checkpoints have different shapes");
      for (double a : alphas) {
        const fs::path out = fs::path(ens_common.out) / ("ensemble_alpha_" + alpha_tag(a) + ".ckpt");
        save_checkpoint(out, mle.config, interpolate_parameters(a, mle.params, cpo.params));
        report("checkpoint", out);
      }
    } else if (*eval) {
      auto cfg = load(eval_common);
      const auto ref = load_checkpoint(eval_ref);
      const auto test = load_corpus(eval_corpus, ref.config.vocab_size);
      EvalConfig opts = cfg.eval;
      opts.seed = derive_seed(cfg.train.seed, stream::kEval);
      std::optional<OracleModel> oracle;
      if (eval_oracle.empty()) {
        require(cfg.generator.vocab_size == ref.config.vocab_size, "generator vocabulary differs from the model's");
        oracle.emplace(MarkovChain(cfg.generator));
      } else {
        auto o = load_checkpoint(eval_oracle);
        oracle.emplace(o.config, std::move(o.params));
      }
      const Evaluator evaluator(ref.config, std::move(*oracle), test, ref.params, cfg.train.sampler, opts);
      std::vector<MetricsRecord> records;
      for (const auto& path : eval_ckpts) {
        const auto ck = load_checkpoint(path);
        require(ck.config == ref.config, "checkpoint " + path + " does not match the reference shape");
        records.push_back(evaluator.evaluate(ck.params, eval_step));
        std::cout << path << ' ' << records.back().to_json().dump() << '\n';
      }
      detail::write_atomically(fs::path(eval_common.out) / "metrics.jsonl", to_jsonl(records));
    } else if (*gradcheck) {
      std::vector<Objective> objectives;
      if (grad_objective == "all") {
        objectives = {Objective::kMle, Objective::kDpo, Objective::kCpo, Objective::kCpoRanked};
      } else {
        objectives = {parse_objective(grad_objective)};
      }
      bool ok = true;
      for (auto o : objectives) {
        GradcheckOptions opt;
        opt.objective = o;
        opt.coords = grad_coords;
        opt.seed = grad_common.seed.value_or(0);
        const auto r = run_gradcheck(opt);
        const bool pass = r.max_rel_error < 1e-4;
        ok = ok && pass;
        std::printf("%-10s params=%zu coords=%zu max_rel_error=%.3e max_abs_error=%.3e %s\n", to_string(o).c_str(),
                    r.n_params, r.coords.size(), r.max_rel_error, r.max_abs_error, pass ? "PASS" : "FAIL");
      }
      if (!ok) throw RuntimeError("gradient check failed");
    } else if (*ebm_check) {
      EbmCheckOptions opt;
      opt.seed = ebm_common.seed.value_or(0);
      const auto r = run_ebm_checks(opt);
      const bool beats = r.optimum_beats_perturbations();
      const bool value = r.objective_gap() <= 1e-9;
      const bool bok = r.max_best_of_k_error <= 1e-10;
      std::printf("optimum beats %d/%d perturbed policies (best perturbed %.9f < %.9f) %s\n", r.perturbations_beaten,
                  r.n_perturbations, r.best_perturbed_value, r.optimum_value, beats ? "PASS" : "FAIL");
      std::printf("J(pi*) = %.12f, beta*log Z = %.12f, gap %.3e %s\n", r.optimum_value, r.beta_log_z,
                  r.objective_gap(), value ? "PASS" : "FAIL");
      std::printf("implicit-reward best-of-K max error %.3e %s\n", r.max_best_of_k_error, bok ? "PASS" : "FAIL");
      if (!(beats && value && bok)) throw RuntimeError("EBM check failed");
    } else if (*experiment) {
      const auto cfg = load(exp_common);
      ExperimentSpec spec = desk_experiment(cfg.train.seed);
      if (!exp_common.config.empty()) {
        spec.model = cfg.model;
        spec.generator = cfg.generator;
        spec.mle = cfg.train;
        spec.mle.objective = Objective::kMle;
        spec.cpo = cfg.train;
        spec.eval = cfg.eval;
      }
      if (mle_steps) spec.mle.steps = *mle_steps;
      if (mle_lr) spec.mle.lr = *mle_lr;
      if (!alphas.empty()) spec.alphas = alphas;
      const auto res = run_experiment(spec, exp_common.out);
      std::cout << "mle " << res.mle.to_json().dump() << '\n' << "cpo " << res.cpo.to_json().dump() << '\n';
      for (const auto& [a, m] : res.ensembles) std::cout << "alpha=" << alpha_tag(a) << ' ' << m.to_json().dump() << '\n';
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
