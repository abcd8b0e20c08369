#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cpolab/config.hpp"
#include "cpolab/corpus.hpp"
#include "cpolab/optim.hpp"
#include "cpolab/parallel.hpp"
#include "cpolab/train.hpp"
#include "test_support.hpp"

using namespace cpolab;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("cpolab_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig small_model() { return {16, 8, 1, 2, 24}; }

MarkovSpec small_generator() {
  MarkovSpec g;
  g.vocab_size = 16;
  g.prefix_len = 3;
  g.max_cont_len = 6;
  g.branching = 3;
  return g;
}

TrainConfig small_cpo() {
  TrainConfig t;
  t.lr = 1e-3;
  t.batch_size = 6;
  t.steps = 3;
  t.objective = Objective::kCpo;
  t.cpo.K = 5;
  t.sampler.topk = 8;
  t.sampler.mix = {2, 1, 1, 0};
  return t;
}

}  // namespace

TEST(Optimizer, ZeroGradientZeroDecayIsNoOp) {
  auto p = init_parameters(cpolab::testing::tiny_model(), 1);
  const auto before = p;
  AdamState st;
  optimizer_step(p, std::vector<double>(p.size(), 0.0), st, {1e-3, 0.0});
  EXPECT_EQ(p, before);
}

TEST(Optimizer, DecayOnlyShrinksByFactor) {
  auto p = init_parameters(cpolab::testing::tiny_model(), 1);
  const auto before = p;
  AdamState st;
  optimizer_step(p, std::vector<double>(p.size(), 0.0), st, {1e-5, 0.05});
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_DOUBLE_EQ(p.flat()[i], before.flat()[i] * (1 - 5e-7));
}

TEST(Optimizer, OneStepHandTrace) {
  // Single scalar through the layout machinery: the out.b of a 2-token vocab.
  Parameters p(ParameterLayout{{"x", 0, 1, 1}}, {0.5});
  AdamState st;
  optimizer_step(p, std::vector<double>{1.0}, st, {0.1, 0.0});
  // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1 -> update 1 / (1 + 1e-8).
  EXPECT_NEAR(p.flat()[0], 0.5 - 0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);
  optimizer_step(p, std::vector<double>{-1.0}, st, {0.1, 0.0});
  const double m = 0.9 * 0.1 - 0.1;
  const double v = 0.999 * 0.001 + 0.001;
  const double upd = (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.999 * 0.999)) + 1e-8);
  EXPECT_NEAR(p.flat()[0], 0.5 - 0.1 / (1.0 + 1e-8) - 0.1 * upd, 1e-14);
  EXPECT_THROW(optimizer_step(p, std::vector<double>{1.0, 2.0}, st, {}), ValidationError);
}

TEST(Corpus, ParsesFormat) {
  const auto c = parse_corpus("1 2 3\t4 5 0\n\n7\t0\n");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].prefix, (TokenSequence{1, 2, 3}));
  EXPECT_EQ(c[0].cont, (TokenSequence{4, 5, 0}));
  EXPECT_TRUE(parse_corpus("").empty());
}

TEST(Corpus, ErrorsCarryLineNumbers) {
  try {
    parse_corpus("1 2\t3 0\n1 x\t3 0\n");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("corpus line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_corpus("1 2 3 0\n"), ValidationError);      // no tab
  EXPECT_THROW(parse_corpus("1 2\t3 4\n"), ValidationError);     // no EOS
  EXPECT_THROW(parse_corpus("1 0\t3 0\n"), ValidationError);     // EOS in prefix
  EXPECT_THROW(parse_corpus("1 2\t30 0\n", 16), ValidationError);  // out of range
}

TEST(Corpus, RoundTripOfRandomPairs) {
  Rng rng(1);
  std::vector<Example> c;
  for (int i = 0; i < 1000; ++i) {
    c.push_back({cpolab::testing::random_tokens(rng, 64, 1 + i % 5, false),
                 cpolab::testing::random_tokens(rng, 64, i % 7, true)});
  }
  const auto dir = scratch("corpus");
  save_corpus(dir / "c.txt", c);
  const auto back = load_corpus(dir / "c.txt", 64);
  ASSERT_EQ(back.size(), c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(back[i].prefix, c[i].prefix);
    EXPECT_EQ(back[i].cont, c[i].cont);
  }
}

TEST(Config, ParsesAllSections) {
  const auto c = parse_config(R"({"lr": 0.002, "steps": 7, "objective": "CPO_RANKED", "seed": 3,
    "cpo": {"beta": 2.5, "K": 4}, "sampler": {"topk": 5, "mix": {"n_bn": 1, "n_mn": 1, "n_tn": 1}},
    "model": {"vocab_size": 16, "d_model": 8}, "generator": {"vocab_size": 16}, "eval": {"n_groups": 10}})");
  EXPECT_EQ(c.train.lr, 0.002);
  EXPECT_EQ(c.train.steps, 7);
  EXPECT_EQ(c.train.objective, Objective::kCpoRanked);
  EXPECT_EQ(c.train.cpo.beta, 2.5);
  EXPECT_EQ(c.train.sampler.mix.n_bn, 1);
  EXPECT_EQ(c.train.sampler.mix.n_an, 0);
  EXPECT_EQ(c.model.d_model, 8);
  EXPECT_EQ(c.eval.n_groups, 10);
  EXPECT_EQ(parse_config(to_json(c.train).dump()).train.cpo.K, 4);
}

TEST(Config, RejectsUnknownKeysAndBadTypes) {
  EXPECT_THROW(parse_config(R"({"learning_rate": 1})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"cpo": {"gamma": 1}})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"lr": "fast"})"), ValidationError);
  EXPECT_THROW(parse_config(R"({"objective": "PPO"})"), ValidationError);
  EXPECT_THROW(parse_config("{"), ValidationError);
}

TEST(TrainConfig, Validation) {
  const auto m = small_model();
  TrainConfig t;
  t.steps = 0;
  EXPECT_THROW(t.validate(m), ValidationError);
  t = small_cpo();
  EXPECT_NO_THROW(t.validate(m));
  t.cpo.K = 6;
  EXPECT_THROW(t.validate(m), ValidationError);  // K != 1 + mix
  t = small_cpo();
  t.objective = Objective::kDpo;
  EXPECT_THROW(t.validate(m), ValidationError);  // DPO needs K = 2
  t.cpo.K = 2;
  t.sampler.mix = {1, 0, 0, 0};
  EXPECT_NO_THROW(t.validate(m));
  t = small_cpo();
  t.batch_size = 2;
  EXPECT_THROW(t.validate(m), ValidationError);  // 2 batch negatives need 3 rows
  t = small_cpo();
  t.lr = 0;
  EXPECT_THROW(t.validate(m), ValidationError);
}

TEST(Train, MleDescends) {
  const auto m = small_model();
  const std::vector<Example> corpus{{TokenSequence{1, 2}, TokenSequence{3, 4, 0}},
                                    {TokenSequence{5}, TokenSequence{6, 0}},
                                    {TokenSequence{7, 8, 9}, TokenSequence{10, 11, 12, 0}}};
  TrainConfig t;
  t.lr = 1e-2;
  t.steps = 200;
  t.batch_size = 3;
  const auto init = init_parameters(m, 1);
  const double before = mle_loss(init, m, corpus);
  const auto res = train(t, m, corpus, init);
  EXPECT_LT(mle_loss(res.params, m, corpus), before);
  ASSERT_EQ(res.metrics.size(), 1u);
  EXPECT_EQ(res.metrics[0].step, 200);
}

TEST(Train, PreferenceRequiresReferenceAndCorpus) {
  const auto m = small_model();
  const auto init = init_parameters(m, 1);
  const auto corpus = MarkovChain(small_generator()).sample_corpus(10, 1, 24);
  EXPECT_THROW(train(small_cpo(), m, corpus, init), ValidationError);
  TrainContext ctx;
  ctx.reference = &init;
  EXPECT_THROW(train(small_cpo(), m, std::vector<Example>{}, init, ctx), ValidationError);
  TrainConfig mle;
  EXPECT_THROW(train(mle, m, std::vector<Example>{}, init), ValidationError);
}

TEST(Train, CpoFirstStepLossAtReferenceIsLogK) {
  const auto m = small_model();
  const auto ref = init_parameters(m, 2, 0.1);
  const auto corpus = MarkovChain(small_generator()).sample_corpus(12, 1, 24);
  auto t = small_cpo();
  t.steps = 1;
  TrainContext ctx;
  ctx.reference = &ref;
  ctx.max_new = 4;
  const auto res = train(t, m, corpus, ref, ctx);
  EXPECT_NEAR(res.metrics[0].train_loss, std::log(5.0), 1e-12);
  t.objective = Objective::kCpoRanked;
  const auto ranked = train(t, m, corpus, ref, ctx);
  EXPECT_NEAR(ranked.metrics[0].train_loss, std::log(120.0), 1e-12);
}

TEST(Train, DeterministicAndThreadCountInvariant) {
  const auto m = small_model();
  const auto ref = init_parameters(m, 2, 0.1);
  const auto corpus = MarkovChain(small_generator()).sample_corpus(20, 1, 24);
  auto t = small_cpo();
  t.objective = Objective::kCpoRanked;
  t.sampler.mix = {2, 1, 1, 1};
  t.cpo.K = 6;
  TrainContext ctx;
  ctx.reference = &ref;
  ctx.max_new = 4;
  const auto ref_bytes = encode_checkpoint(m, ref);
  const auto a = train(t, m, corpus, ref, ctx);
  const auto b = train(t, m, corpus, ref, ctx);
  EXPECT_EQ(encode_checkpoint(m, a.params), encode_checkpoint(m, b.params));
  EXPECT_EQ(encode_checkpoint(m, ref), ref_bytes);  // reference untouched
  setenv("CPOLAB_THREADS", "3", 1);
  EXPECT_EQ(worker_count(), 3);
  const auto c = train(t, m, corpus, ref, ctx);
  unsetenv("CPOLAB_THREADS");
  EXPECT_EQ(encode_checkpoint(m, a.params), encode_checkpoint(m, c.params));
  EXPECT_EQ(a.metrics, c.metrics);
}

TEST(Train, CachedGroupsMatchOnTheFlyShape) {
  const auto m = small_model();
  const auto ref = init_parameters(m, 2, 0.1);
  const auto corpus = MarkovChain(small_generator()).sample_corpus(12, 1, 24);
  auto t = small_cpo();
  const auto groups = build_groups(corpus, 6, t.sampler, ref, m, 4);
  ASSERT_EQ(groups.size(), corpus.size());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    EXPECT_EQ(groups[i].candidates[0], corpus[i].cont);
    EXPECT_EQ(groups[i].K(), 5u);
  }
  TrainContext ctx;
  ctx.reference = &ref;
  ctx.cached_groups = groups;
  const auto res = train(t, m, {}, ref, ctx);
  EXPECT_EQ(res.metrics.back().step, 3);
}

TEST(Parallel, OrderedMapKeepsOrderAndRethrows) {
  const auto out = ordered_map(50, [](std::size_t i) { return static_cast<int>(i * i); }, 4);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(out[i], static_cast<int>(i * i));
  EXPECT_THROW(ordered_map(
                   10,
                   [](std::size_t i) {
                     if (i == 7) throw ValidationError("boom");
                     return 0;
                   },
                   3),
               ValidationError);
}

TEST(Experiment, SmallEndToEnd) {
  ExperimentSpec s;
  s.model = small_model();
  s.generator = small_generator();
  s.n_train = 30;
  s.n_test = 12;
  s.mle.lr = 3e-3;
  s.mle.steps = 5;
  s.mle.batch_size = 6;
  s.cpo = small_cpo();
  s.eval.n_groups = 6;
  s.eval.n_win = 6;
  s.eval.n_rkl_prefixes = 4;
  s.eval.samples_per_prefix = 2;
  s.eval.topk = 8;
  s.eval.max_new = 6;
  s.eval.group_batch = 6;
  s.alphas = {0.0, 0.5, 1.0};
  s.seed = 4;
  s.log_interval = 2;
  const auto dir = scratch("experiment");
  const auto res = run_experiment(s, dir);
  int metric_files = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().filename().string().starts_with("metrics_")) ++metric_files;
  }
  EXPECT_EQ(metric_files, 5);  // |sweep| + 2
  ASSERT_EQ(res.ensembles.size(), 3u);
  EXPECT_EQ(res.ensembles[0].second, res.cpo);
  EXPECT_EQ(res.ensembles[2].second, res.mle);
  EXPECT_EQ(read_file(dir / "metrics_alpha_1.jsonl"), read_file(dir / "metrics_mle.jsonl"));
  EXPECT_EQ(read_file(dir / "metrics_alpha_0.jsonl"), read_file(dir / "metrics_cpo.jsonl"));
  for (const char* f : {"ref.ckpt", "mle.ckpt", "cpo.ckpt", "train_ref.jsonl", "corpus_train.txt"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto rec = MetricsRecord::from_json(nlohmann::json::parse(read_file(dir / "metrics_cpo.jsonl")));
  EXPECT_EQ(rec, res.cpo);
  EXPECT_GE(rec.gt_top1_rate, 0.0);
  EXPECT_LE(rec.win_rate, 1.0);
}
