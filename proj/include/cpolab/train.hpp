#pragma once

// Optimization loop and the end-to-end experiment pipeline:
// MLE reference -> CPO fine-tune and MLE-continued baseline -> weight-space
// ensemble sweep, each model scored by the same evaluator.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cpolab/checkpoint.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/error.hpp"
#include "cpolab/eval.hpp"
#include "cpolab/markov.hpp"
#include "cpolab/model.hpp"
#include "cpolab/negatives.hpp"
#include "cpolab/objectives.hpp"
#include "cpolab/optim.hpp"
#include "cpolab/parallel.hpp"
#include "cpolab/random.hpp"
#include "cpolab/ranking.hpp"

namespace cpolab {

struct TrainConfig {
  double lr = 1e-5;
  double weight_decay = 0.05;
  int batch_size = 64;
  int steps = 1;
  Objective objective = Objective::kMle;
  CPOConfig cpo;
  NegativeSamplerConfig sampler;
  std::uint64_t seed = 0;

  /// CPO_RANKED, or CPO with use_ranking set.
  [[nodiscard]] bool ranked() const {
    return objective == Objective::kCpoRanked || (objective == Objective::kCpo && cpo.use_ranking);
  }
  [[nodiscard]] Objective effective_objective() const { return ranked() ? Objective::kCpoRanked : objective; }

  void validate(const ModelConfig& model) const {
    require(lr > 0.0, "lr must be positive");
    require(weight_decay >= 0.0, "weight_decay must be non-negative");
    require(batch_size >= 1, "batch_size must be positive");
    require(steps >= 1, "steps must be >= 1");
    if (objective == Objective::kMle) return;
    cpo.validate();
    sampler.validate(model.vocab_size);
    require(cpo.K == 1 + sampler.mix.total(), "cpo.K must equal 1 + the number of negatives in sampler.mix");
    if (objective == Objective::kDpo) require(cpo.K == 2, "DPO needs exactly one negative per group (K = 2)");
    require(batch_size >= sampler.mix.n_bn + 1, "batch_size too small for the requested batch negatives");
  }
};

struct EvalConfig {
  int interval = 0;  // steps between records during training; 0 = final step only
  int n_groups = 500;
  int n_win = 500;
  int n_rkl_prefixes = 200;
  int samples_per_prefix = 8;
  int topk = 50;
  int max_new = 16;
  int group_batch = 16;
  std::uint64_t seed = 0;
};

/// Attaches frozen reference scores (and, when ranked, the similarity
/// ranking) to a group.
inline ScoredGroup score_group(const PreferenceGroup& g, const Parameters& ref, const ModelConfig& cfg, bool ranked) {
  ScoredGroup out{g.prefix, g.candidates, {}, g.ranking};
  std::vector<EmbeddingVector> embeddings;
  for (std::size_t j = 0; j < g.K(); ++j) {
    const auto tr = forward_pair(ref, cfg, g.prefix, g.candidates[j]);
    out.ref_logprobs.push_back(continuation_logprob(tr, g.prefix.size(), g.candidates[j]));
    if (ranked && !g.ranking) {
      embeddings.push_back(embed_from_trace(tr, g.prefix.size(), g.candidates[j].size(), static_cast<int>(j)));
    }
  }
  if (ranked && !g.ranking) out.ranking = rank_by_similarity(embeddings);
  return out;
}

/// Builds preference groups for every example, chunking `examples` into
/// pseudo-batches of `group_batch` for batch negatives.
inline std::vector<PreferenceGroup> build_groups(std::span<const Example> examples, int group_batch,
                                                 const NegativeSamplerConfig& sampler, const Parameters& ref,
                                                 const ModelConfig& cfg, int max_new) {
  require(group_batch >= sampler.mix.n_bn + 1, "group batch too small for batch negatives");
  const auto gb = static_cast<std::size_t>(group_batch);
  return ordered_map(examples.size(), [&](std::size_t i) {
    const std::size_t start = std::min(i / gb * gb, examples.size() >= gb ? examples.size() - gb : 0);
    const auto chunk = examples.subspan(start, std::min(gb, examples.size() - start));
    return assemble_group(chunk, i - start, sampler, ref, cfg, i, max_new);
  });
}

/// Evaluation harness shared by every model of one experiment.
class Evaluator {
 public:
  Evaluator(ModelConfig cfg, OracleModel oracle, std::vector<Example> test, const Parameters& ref,
            const NegativeSamplerConfig& sampler, EvalConfig opts)
      : cfg_(cfg), oracle_(std::move(oracle)), test_(std::move(test)), opts_(opts) {
    require(!test_.empty(), "evaluation needs a non-empty test set");
    const auto n_groups = std::min(test_.size(), static_cast<std::size_t>(opts_.n_groups));
    NegativeSamplerConfig eval_sampler = sampler;
    eval_sampler.seed = derive_seed(opts_.seed, stream::kEval);
    const auto raw = build_groups(std::span(test_).first(n_groups), opts_.group_batch, eval_sampler, ref, cfg_,
                                  opts_.max_new);
    groups_ = ordered_map(raw.size(), [&](std::size_t i) { return score_group(raw[i], ref, cfg_, false); });
  }

  [[nodiscard]] const std::vector<ScoredGroup>& groups() const { return groups_; }
  [[nodiscard]] const OracleModel& oracle() const { return oracle_; }

  /// train_loss is passed through when given; otherwise the held-out
  /// next-token loss on the test pairs is reported in its place.
  [[nodiscard]] MetricsRecord evaluate(const Parameters& params, long step,
                                       std::optional<double> train_loss = std::nullopt) const {
    MetricsRecord r;
    r.step = step;
    r.train_loss = train_loss ? *train_loss : mle_loss(params, cfg_, test_);
    r.gt_top1_rate = gt_top1_rate(params, cfg_, groups_);

    const auto n_win = std::min(test_.size(), static_cast<std::size_t>(opts_.n_win));
    const auto win_pairs = std::span(test_).first(n_win);
    std::vector<TokenSequence> win_prefixes;
    for (const auto& ex : win_pairs) win_prefixes.push_back(ex.prefix);
    const auto greedy = greedy_generations(params, cfg_, win_prefixes, opts_.max_new);
    r.win_rate = win_rate_from_generations(oracle_, win_pairs, greedy);
    std::vector<std::vector<TokenSequence>> greedy_sets;
    for (const auto& g : greedy) greedy_sets.push_back({g});
    r.length_norm_nll = length_norm_nll(oracle_, win_prefixes, greedy_sets);

    const auto n_rkl = std::min(test_.size(), static_cast<std::size_t>(opts_.n_rkl_prefixes));
    std::vector<TokenSequence> rkl_prefixes;
    for (std::size_t i = 0; i < n_rkl; ++i) rkl_prefixes.push_back(test_[i].prefix);
    r.reverse_kl = reverse_kl_surrogate(params, cfg_, oracle_, rkl_prefixes, opts_.samples_per_prefix,
                                        derive_seed(opts_.seed, stream::kEval, 1), {opts_.topk, opts_.max_new});
    return r;
  }

 private:
  ModelConfig cfg_;
  OracleModel oracle_;
  std::vector<Example> test_;
  EvalConfig opts_;
  std::vector<ScoredGroup> groups_;
};

using EvalFn = std::function<MetricsRecord(const Parameters&, long step, double train_loss)>;

struct TrainContext {
  const Parameters* reference = nullptr;           // required for DPO / CPO
  std::span<const PreferenceGroup> cached_groups;  // used instead of on-the-fly negatives when non-empty
  int max_new = 16;                                // AN generation length
  int record_interval = 0;                         // 0 = final step only
  EvalFn evaluate;                                 // optional; train_loss-only records without it
};

struct TrainResult {
  Parameters params;
  std::vector<MetricsRecord> metrics;
};

namespace detail {

/// Epoch-shuffled index stream; each epoch is a fresh seeded permutation.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {}
  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng = make_rng(seed_, stream::kShuffle, epoch_++);
    std::shuffle(order_.begin(), order_.end(), rng);
    pos_ = 0;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Runs cfg.steps optimizer steps from `init`. MLE uses token-mean
/// next-token loss; DPO/CPO build one preference group per batch example
/// against the frozen reference and average group losses.
inline TrainResult train(const TrainConfig& cfg, const ModelConfig& model, std::span<const Example> corpus,
                         Parameters init, const TrainContext& ctx = {}) {
  cfg.validate(model);
  require(init.size() == parameter_count(model), "initial parameters do not match the model config");
  const bool preference = cfg.objective != Objective::kMle;
  const bool use_cache = preference && !ctx.cached_groups.empty();
  if (preference) {
    require(ctx.reference != nullptr, to_string(cfg.objective) + " training needs a frozen reference model");
  }
  const std::size_t pool = use_cache ? ctx.cached_groups.size() : corpus.size();
  require(pool > 0, "training needs a non-empty corpus");
  if (preference && !use_cache && cfg.sampler.mix.n_tn > 0) {
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      require(corpus[i].cont.size() >= 2,
              "corpus pair " + std::to_string(i) + " has a bare-EOS continuation; truncation negatives need a token");
    }
  }

  TrainResult result{std::move(init), {}};
  AdamState state;
  const AdamWOptions opt{cfg.lr, cfg.weight_decay};
  detail::BatchSampler sampler(pool, cfg.seed);
  const auto batch_size = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), pool);
  double loss_sum = 0.0;
  long loss_count = 0;

  for (long step = 1; step <= cfg.steps; ++step) {
    const auto idx = sampler.next(batch_size);
    LossAndGradient lg;
    if (!preference) {
      std::vector<Example> batch;
      for (auto i : idx) batch.push_back(corpus[i]);
      lg = mle_loss_and_gradient(result.params, model, batch);
    } else {
      const Parameters& ref = *ctx.reference;
      std::vector<Example> batch;
      if (!use_cache) {
        for (auto i : idx) batch.push_back(corpus[i]);
      }
      const auto groups = ordered_map(idx.size(), [&](std::size_t b) {
        if (use_cache) return score_group(ctx.cached_groups[idx[b]], ref, model, cfg.ranked());
        const auto salt = static_cast<std::uint64_t>(step) * batch_size + b;
        const auto g = assemble_group(batch, b, cfg.sampler, ref, model, salt, ctx.max_new);
        return score_group(g, ref, model, cfg.ranked());
      });
      for (const auto& g : groups) {
        require(g.candidates.size() == static_cast<std::size_t>(cfg.cpo.K), "group size does not match cpo.K");
      }
      lg = preference_loss_and_gradient(result.params, model, groups, cfg.effective_objective(), cfg.cpo.beta);
    }
    optimizer_step(result.params, lg.grad, state, opt);
    loss_sum += lg.loss;
    ++loss_count;

    const bool record = step == cfg.steps || (ctx.record_interval > 0 && step % ctx.record_interval == 0);
    if (record) {
      const double mean_loss = loss_sum / static_cast<double>(loss_count);
      if (ctx.evaluate) {
        result.metrics.push_back(ctx.evaluate(result.params, step, mean_loss));
      } else {
        MetricsRecord r;
        r.step = step;
        r.train_loss = mean_loss;
        result.metrics.push_back(r);
      }
      loss_sum = 0.0;
      loss_count = 0;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// End-to-end experiment.

struct ExperimentSpec {
  ModelConfig model;
  MarkovSpec generator;
  std::size_t n_train = 5000;
  std::size_t n_test = 500;
  TrainConfig mle;  // reference stage
  TrainConfig cpo;  // fine-tune stage; the MLE-continued baseline reuses it with objective MLE
  EvalConfig eval;
  std::vector<double> alphas{0.0, 0.1, 0.3, 0.5, 0.7, 0.9};
  std::uint64_t seed = 0;
  int log_interval = 100;
};

/// The desk-scale run: 5000 Markov pairs, 2000 MLE steps, then 500 steps of
/// ranked CPO with 3 BN, 5 MN and 3 TN negatives at beta = 5, batch 16.
/// Learning rates are desk-scale choices; the default 1e-5 barely moves a
/// model this small in 2000 steps.
inline ExperimentSpec desk_experiment(std::uint64_t seed) {
  ExperimentSpec s;
  s.seed = seed;
  s.mle.lr = 1e-3;
  s.mle.batch_size = 16;
  s.mle.steps = 2000;
  s.cpo.lr = 3e-4;
  s.cpo.batch_size = 16;
  s.cpo.steps = 500;
  s.cpo.objective = Objective::kCpoRanked;
  s.cpo.cpo.beta = 5.0;
  s.cpo.cpo.K = 12;
  s.cpo.cpo.use_ranking = true;
  s.cpo.sampler.mix = {3, 5, 3, 0};
  return s;
}

struct ExperimentResult {
  MetricsRecord mle;  // MLE-continued baseline
  MetricsRecord cpo;
  std::vector<std::pair<double, MetricsRecord>> ensembles;
};

inline std::string alpha_tag(double alpha) {
  std::ostringstream s;
  s << alpha;
  return s.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  detail::write_atomically(path, text);
}

/// Writes to out_dir: corpus_{train,test}.txt, {ref,mle,cpo}.ckpt,
/// ensemble_alpha_<a>.ckpt, train_{ref,mle,cpo}.jsonl (training logs) and
/// metrics_{mle,cpo,alpha_<a>}.jsonl (evaluation records).
inline ExperimentResult run_experiment(const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
  spec.model.validate();
  require(spec.generator.vocab_size == spec.model.vocab_size, "generator and model vocabularies differ");
  for (double a : spec.alphas) require(a >= 0.0 && a <= 1.0, "ensemble alphas must lie in [0, 1]");
  const MarkovChain chain(spec.generator);
  const auto max_total = static_cast<std::size_t>(spec.model.max_context);
  const auto train_set = chain.sample_corpus(spec.n_train, derive_seed(spec.seed, stream::kCorpus, 0), max_total);
  const auto test_set = chain.sample_corpus(spec.n_test, derive_seed(spec.seed, stream::kCorpus, 1), max_total);
  save_corpus(out_dir / "corpus_train.txt", train_set);
  save_corpus(out_dir / "corpus_test.txt", test_set);

  TrainConfig mle_cfg = spec.mle;
  mle_cfg.objective = Objective::kMle;
  mle_cfg.seed = derive_seed(spec.seed, stream::kShuffle, 0);
  TrainConfig cpo_cfg = spec.cpo;
  cpo_cfg.seed = derive_seed(spec.seed, stream::kShuffle, 1);
  cpo_cfg.sampler.seed = derive_seed(spec.seed, stream::kGroup, 0);
  TrainConfig cont_cfg = cpo_cfg;
  cont_cfg.objective = Objective::kMle;

  TrainContext log_ctx;
  log_ctx.record_interval = spec.log_interval;
  log_ctx.max_new = spec.eval.max_new;

  const auto init = init_parameters(spec.model, derive_seed(spec.seed, stream::kInit));
  auto ref = train(mle_cfg, spec.model, train_set, init, log_ctx);
  save_checkpoint(out_dir / "ref.ckpt", spec.model, ref.params);
  write_text(out_dir / "train_ref.jsonl", to_jsonl(ref.metrics));

  TrainContext cpo_ctx = log_ctx;
  cpo_ctx.reference = &ref.params;
  auto cpo = train(cpo_cfg, spec.model, train_set, ref.params, cpo_ctx);
  save_checkpoint(out_dir / "cpo.ckpt", spec.model, cpo.params);
  write_text(out_dir / "train_cpo.jsonl", to_jsonl(cpo.metrics));

  auto mle = train(cont_cfg, spec.model, train_set, ref.params, log_ctx);
  save_checkpoint(out_dir / "mle.ckpt", spec.model, mle.params);
  write_text(out_dir / "train_mle.jsonl", to_jsonl(mle.metrics));

  EvalConfig eval_cfg = spec.eval;
  eval_cfg.seed = derive_seed(spec.seed, stream::kEval);
  const Evaluator evaluator(spec.model, OracleModel(chain), test_set, ref.params, cpo_cfg.sampler, eval_cfg);

  ExperimentResult result;
  const long steps = spec.cpo.steps;
  result.mle = evaluator.evaluate(mle.params, steps);
  write_text(out_dir / "metrics_mle.jsonl", to_jsonl(std::span(&result.mle, 1)));
  result.cpo = evaluator.evaluate(cpo.params, steps);
  write_text(out_dir / "metrics_cpo.jsonl", to_jsonl(std::span(&result.cpo, 1)));
  for (double alpha : spec.alphas) {
    const auto blended = interpolate_parameters(alpha, mle.params, cpo.params);
    save_checkpoint(out_dir / ("ensemble_alpha_" + alpha_tag(alpha) + ".ckpt"), spec.model, blended);
    const auto rec = evaluator.evaluate(blended, steps);
    write_text(out_dir / ("metrics_alpha_" + alpha_tag(alpha) + ".jsonl"), to_jsonl(std::span(&rec, 1)));
    result.ensembles.emplace_back(alpha, rec);
  }
  return result;
}

}  // namespace cpolab
