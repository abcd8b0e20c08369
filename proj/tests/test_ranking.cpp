#include <gtest/gtest.h>

#include <cmath>

#include "cpolab/ranking.hpp"
#include "test_support.hpp"

using namespace cpolab;
using cpolab::testing::tiny_model;

namespace {

EmbeddingVector ev(std::vector<double> v, int source = 0) { return {std::move(v), source}; }

}  // namespace

TEST(Ranking, CosineSimilarityBasics) {
  EXPECT_NEAR(cosine_similarity(ev({1, 0}), ev({0, 1})), 0.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(ev({1, 2}), ev({2, 4})), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(ev({1, 2}), ev({-1, -2})), -1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(ev({3, 4}), ev({4, 3})), 24.0 / 25.0, 1e-15);
  EXPECT_THROW(cosine_similarity(ev({1, 2}), ev({1, 2, 3})), ValidationError);
}

TEST(Ranking, ZeroVectorGivesZeroSimilarityAndWarns) {
  warnings_enabled() = false;
  const long before = warning_count();
  EXPECT_EQ(cosine_similarity(ev({0, 0}), ev({1, 2})), 0.0);
  EXPECT_EQ(warning_count(), before + 1);
  warnings_enabled() = true;
}

TEST(Ranking, OrdersByDescendingSimilarity) {
  const std::vector<EmbeddingVector> e{ev({1, 0}), ev({0, 1}), ev({1, 1}), ev({-1, 0}), ev({1, 0.1})};
  const auto r = rank_by_similarity(e);
  EXPECT_EQ(r.tau, (std::vector<int>{0, 4, 2, 1, 3}));
}

TEST(Ranking, GroundTruthFirstEvenWhenTied) {
  // Candidate 1 is a duplicate of the ground truth.
  const std::vector<EmbeddingVector> e{ev({1, 2}), ev({1, 2}), ev({2, 1})};
  const auto r = rank_by_similarity(e);
  EXPECT_EQ(r.tau[0], 0);
  EXPECT_EQ(r.tau, (std::vector<int>{0, 1, 2}));
}

TEST(Ranking, TiesKeepLowerIndexFirst) {
  const std::vector<EmbeddingVector> e{ev({1, 0}), ev({0, 1}), ev({0, -1}), ev({0, 2})};
  EXPECT_EQ(rank_by_similarity(e).tau, (std::vector<int>{0, 1, 2, 3}));
}

TEST(Ranking, EmbeddingIsMeanOfContinuationHiddenStates) {
  const auto cfg = tiny_model();
  const auto p = init_parameters(cfg, 8, 0.3);
  const TokenSequence prefix{1, 2, 3};
  const TokenSequence cont{4, 5, 0};
  const auto e = embed_sequence(p, cfg, prefix, cont);
  const auto ids = concat(prefix, cont.ids());
  const auto h = hidden_states(p, cfg, ids);
  for (int j = 0; j < cfg.d_model; ++j) {
    const double mean = (h(3, j) + h(4, j) + h(5, j)) / 3.0;
    EXPECT_NEAR(e.values[static_cast<std::size_t>(j)], mean, 1e-14);
  }
}

TEST(Ranking, RankGroupProducesValidPermutation) {
  const auto cfg = tiny_model();
  const auto p = init_parameters(cfg, 8, 0.3);
  PreferenceGroup g;
  g.prefix = TokenSequence{1, 2};
  g.candidates = {TokenSequence{3, 4, 0}, TokenSequence{3, 4, 0}, TokenSequence{9, 0}, TokenSequence{3, 5, 0}};
  g.provenance = {Provenance::kGt, Provenance::kBn, Provenance::kBn, Provenance::kMn};
  rank_group(g, p, cfg);
  ASSERT_TRUE(g.ranking.has_value());
  EXPECT_TRUE(g.ranking->is_valid(4));
  EXPECT_EQ(g.ranking->tau[0], 0);
  EXPECT_EQ(g.ranking->tau[1], 1);  // identical continuation, similarity 1
  std::vector<EmbeddingVector> wrong(3);
  EXPECT_THROW(rank_by_similarity(g, wrong), ValidationError);
}
