#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cpolab/gradcheck.hpp"
#include "cpolab/objectives.hpp"
#include "test_support.hpp"

using namespace cpolab;

namespace {

std::vector<double> random_ratios(std::mt19937_64& rng, std::size_t k, double scale = 2.0) {
  std::normal_distribution<double> n(0.0, scale);
  std::vector<double> r(k);
  for (auto& x : r) x = n(rng);
  return r;
}

double log_factorial(int k) { return std::lgamma(k + 1.0); }

}  // namespace

TEST(Objectives, DpoMatchesClosedForm) {
  // -log sigmoid(z) written out directly.
  const LogRatioGroup g{0.3, -0.2};
  const double z = 5.0 * (0.3 - -0.2);
  EXPECT_NEAR(dpo_pair_loss(g, 5.0), std::log(1.0 + std::exp(-z)), 1e-15);
  EXPECT_NEAR(dpo_pair_loss(LogRatioGroup{0.0, 0.0}, 5.0), std::log(2.0), 1e-15);
}

TEST(Objectives, DpoIsStableForLargeMargins) {
  EXPECT_NEAR(dpo_pair_loss(LogRatioGroup{200.0, -200.0}, 5.0), 0.0, 1e-300);
  EXPECT_NEAR(dpo_pair_loss(LogRatioGroup{-200.0, 200.0}, 5.0), 2000.0, 1e-9);
}

TEST(Objectives, CpoAtReferenceIsLogK) {
  for (int K : {2, 3, 12}) {
    const LogRatioGroup g(std::vector<double>(static_cast<std::size_t>(K), 0.0));
    EXPECT_NEAR(cpo_loss(g, 5.0), std::log(K), 1e-12);
    EXPECT_NEAR(cpo_ranked_loss(g, Ranking::identity(static_cast<std::size_t>(K)), 5.0), log_factorial(K), 1e-12);
  }
}

TEST(Objectives, CpoMatchesNaiveSoftmax) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 50; ++i) {
    const auto r = random_ratios(rng, 5);
    double z = 0;
    for (double x : r) z += std::exp(3.0 * x);
    EXPECT_NEAR(cpo_loss(LogRatioGroup(r), 3.0), -std::log(std::exp(3.0 * r[0]) / z), 1e-12);
  }
}

TEST(Objectives, RankedLossMatchesNaiveStagewiseProduct) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 50; ++i) {
    const auto r = random_ratios(rng, 4);
    Ranking tau{{2, 0, 3, 1}};
    double prob = 1.0;
    for (std::size_t k = 0; k < 4; ++k) {
      double z = 0;
      for (std::size_t j = k; j < 4; ++j) z += std::exp(2.0 * r[static_cast<std::size_t>(tau.tau[j])]);
      prob *= std::exp(2.0 * r[static_cast<std::size_t>(tau.tau[k])]) / z;
    }
    EXPECT_NEAR(cpo_ranked_loss(LogRatioGroup(r), tau, 2.0), -std::log(prob), 1e-12);
    EXPECT_EQ(plackett_luce_dpo_loss(LogRatioGroup(r), tau, 2.0), cpo_ranked_loss(LogRatioGroup(r), tau, 2.0));
  }
}

TEST(Objectives, KEqualsTwoReducesToDpo) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const LogRatioGroup g(random_ratios(rng, 2, 3.0));
    EXPECT_NEAR(cpo_loss(g, 5.0), dpo_pair_loss(g, 5.0), 1e-12);
    EXPECT_NEAR(cpo_ranked_loss(g, Ranking::identity(2), 5.0), dpo_pair_loss(g, 5.0), 1e-12);
  }
}

TEST(Objectives, PlackettLuceSumsToOneOverPermutations) {
  std::mt19937_64 rng(4);
  for (int K = 2; K <= 5; ++K) {
    const auto r = random_ratios(rng, static_cast<std::size_t>(K));
    Ranking tau = Ranking::identity(static_cast<std::size_t>(K));
    double total = 0;
    do {
      total += std::exp(-cpo_ranked_loss(LogRatioGroup(r), tau, 1.5));
    } while (std::next_permutation(tau.tau.begin(), tau.tau.end()));
    EXPECT_NEAR(total, 1.0, 1e-12) << "K=" << K;
  }
}

TEST(Objectives, ShiftInvariance) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    auto r = random_ratios(rng, 4);
    auto shifted = r;
    for (auto& x : shifted) x += 1.75;
    const Ranking tau{{1, 3, 0, 2}};
    EXPECT_NEAR(cpo_loss(LogRatioGroup(r), 5.0), cpo_loss(LogRatioGroup(shifted), 5.0), 1e-12);
    EXPECT_NEAR(cpo_ranked_loss(LogRatioGroup(r), tau, 5.0), cpo_ranked_loss(LogRatioGroup(shifted), tau, 5.0),
                1e-12);
  }
}

TEST(Objectives, RatioGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto r = random_ratios(rng, 5, 0.5);
  const Ranking tau{{4, 0, 2, 1, 3}};
  const auto cpo = cpo_loss_grad(LogRatioGroup(r), 2.0);
  const auto ranked = cpo_ranked_loss_grad(LogRatioGroup(r), tau, 2.0);
  const auto dpo = dpo_pair_loss_grad(LogRatioGroup{r[0], r[1]}, 2.0);
  const double h = 1e-6;
  for (std::size_t j = 0; j < r.size(); ++j) {
    auto up = r;
    auto down = r;
    up[j] += h;
    down[j] -= h;
    EXPECT_NEAR(cpo.grad[j], (cpo_loss(LogRatioGroup(up), 2.0) - cpo_loss(LogRatioGroup(down), 2.0)) / (2 * h), 1e-8);
    EXPECT_NEAR(ranked.grad[j],
                (cpo_ranked_loss(LogRatioGroup(up), tau, 2.0) - cpo_ranked_loss(LogRatioGroup(down), tau, 2.0)) /
                    (2 * h),
                1e-8);
    if (j < 2) {
      EXPECT_NEAR(dpo.grad[j],
                  (dpo_pair_loss(LogRatioGroup{up[0], up[1]}, 2.0) - dpo_pair_loss(LogRatioGroup{down[0], down[1]}, 2.0)) /
                      (2 * h),
                  1e-8);
    }
  }
}

TEST(Objectives, InvalidInputsRejected) {
  EXPECT_THROW(dpo_pair_loss(LogRatioGroup{1, 2, 3}, 5.0), ValidationError);
  EXPECT_THROW(cpo_loss(LogRatioGroup{1}, 5.0), ValidationError);
  EXPECT_THROW(cpo_loss(LogRatioGroup{1, NAN}, 5.0), ValidationError);
  EXPECT_THROW(cpo_ranked_loss(LogRatioGroup{1, 2, 3}, Ranking{{0, 0, 1}}, 5.0), ValidationError);
  EXPECT_THROW(cpo_ranked_loss(LogRatioGroup{1, 2, 3}, Ranking{{0, 1}}, 5.0), ValidationError);
  EXPECT_THROW((CPOConfig{0.0, 4, false}.validate()), ValidationError);
  EXPECT_THROW((CPOConfig{5.0, 1, false}.validate()), ValidationError);
  EXPECT_THROW(parse_objective("PPO"), ValidationError);
}

TEST(Objectives, ObjectiveNamesRoundTrip) {
  for (auto o : {Objective::kMle, Objective::kDpo, Objective::kCpo, Objective::kCpoRanked}) {
    EXPECT_EQ(parse_objective(to_string(o)), o);
  }
}

TEST(Objectives, ImplicitRewardAndBestOfK) {
  EXPECT_DOUBLE_EQ(implicit_reward(-3.0, -4.0, 5.0), 5.0);
  const std::vector<double> r{1.0, 1.0, 1.0, 1.0};
  for (double p : best_of_k_prob(r)) EXPECT_NEAR(p, 0.25, 1e-15);
  const std::vector<double> r2{std::log(3.0), 0.0};
  const auto p2 = best_of_k_prob(r2);
  EXPECT_NEAR(p2[0], 0.75, 1e-15);
  EXPECT_NEAR(p2[1], 0.25, 1e-15);
}

TEST(Objectives, CpoLossIsNegLogBestOfKOfImplicitRewards) {
  std::mt19937_64 rng(7);
  const auto r = random_ratios(rng, 6);
  std::vector<double> rewards;
  for (double x : r) rewards.push_back(5.0 * x);
  EXPECT_NEAR(cpo_loss(LogRatioGroup(r), 5.0), -std::log(best_of_k_prob(rewards)[0]), 1e-12);
}

TEST(ModelLosses, MleLossMatchesOracle) {
  const auto cfg = cpolab::testing::tiny_model();
  const auto p = init_parameters(cfg, 3, 0.3);
  const std::vector<Example> batch{{TokenSequence{1, 2}, TokenSequence{3, 0}},
                                   {TokenSequence{4}, TokenSequence{5, 6, 7, 0}}};
  const double expect = -(cpolab::testing::naive_sequence_logprob(p, cfg, batch[0].prefix, batch[0].cont) +
                          cpolab::testing::naive_sequence_logprob(p, cfg, batch[1].prefix, batch[1].cont)) /
                        6.0;
  EXPECT_NEAR(mle_loss(p, cfg, batch), expect, 1e-12);
  EXPECT_NEAR(mle_loss_and_gradient(p, cfg, batch).loss, expect, 1e-12);
  EXPECT_THROW(mle_loss(p, cfg, std::vector<Example>{}), ValidationError);
}

TEST(ModelLosses, PreferenceLossAtReferenceIsLogK) {
  const auto cfg = cpolab::testing::tiny_model();
  const auto p = init_parameters(cfg, 3, 0.3);
  ScoredGroup g{TokenSequence{1, 2}, {TokenSequence{3, 0}, TokenSequence{4, 0}, TokenSequence{5, 6, 0}}, {}, {}};
  for (const auto& c : g.candidates) g.ref_logprobs.push_back(sequence_logprob(p, cfg, g.prefix, c));
  g.ranking = Ranking::identity(3);
  const std::vector<ScoredGroup> groups{g};
  EXPECT_NEAR(preference_loss(p, cfg, groups, Objective::kCpo, 5.0), std::log(3.0), 1e-12);
  EXPECT_NEAR(preference_loss(p, cfg, groups, Objective::kCpoRanked, 5.0), std::log(6.0), 1e-12);
  g.ranking.reset();
  const std::vector<ScoredGroup> unranked{g};
  EXPECT_THROW(preference_loss(p, cfg, unranked, Objective::kCpoRanked, 5.0), ValidationError);
  EXPECT_THROW(preference_loss(p, cfg, unranked, Objective::kMle, 5.0), ValidationError);
}

TEST(ModelLosses, GradcheckAllObjectives) {
  for (auto o : {Objective::kMle, Objective::kDpo, Objective::kCpo, Objective::kCpoRanked}) {
    GradcheckOptions opt;
    opt.objective = o;
    opt.coords = 40;
    opt.seed = 11;
    const auto r = run_gradcheck(opt);
    EXPECT_GE(r.n_params, 500u);
    EXPECT_LT(r.max_rel_error, 1e-4) << to_string(o);
  }
}

TEST(ModelLosses, GradcheckRelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(gradcheck_relative_error(1.0, 1.0), 0.0);
  EXPECT_NEAR(gradcheck_relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  // Below the floor the comparison is absolute.
  EXPECT_NEAR(gradcheck_relative_error(1e-12, 2e-9), (2e-9 - 1e-12) / 1e-4, 1e-18);
}
