#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/logging.hpp"
#include "cpolab/model.hpp"
#include "cpolab/negatives.hpp"
#include "cpolab/objectives.hpp"

namespace cpolab {

struct EmbeddingVector {
  std::vector<double> values;
  int source = 0;  // candidate index
};

/// Mean of the hidden states at the continuation positions of a trace over
/// prefix ++ cont.
inline EmbeddingVector embed_from_trace(const ForwardTrace& tr, std::size_t prefix_len, std::size_t cont_len,
                                        int source = 0) {
  const auto& h = tr.hidden();
  require(prefix_len + cont_len == static_cast<std::size_t>(h.rows()), "trace does not cover prefix+continuation");
  RowVector mean = h.middleRows(static_cast<Eigen::Index>(prefix_len), static_cast<Eigen::Index>(cont_len))
                       .colwise()
                       .mean();
  return {std::vector<double>(mean.data(), mean.data() + mean.size()), source};
}

/// Sequence embedding: mean-pooled final hidden states of the (frozen)
/// reference model over the continuation positions.
inline EmbeddingVector embed_sequence(const Parameters& ref, const ModelConfig& cfg, const TokenSequence& prefix,
                                      const TokenSequence& cont, int source = 0) {
  return embed_from_trace(forward_pair(ref, cfg, prefix, cont), prefix.size(), cont.size(), source);
}

/// Cosine similarity. A zero vector has similarity 0 to everything.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), "embedding sizes differ");
  double dot = 0.0;
  double na = 0.0;
  double nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    log_warning("cosine similarity with a zero embedding; using 0");
    return 0.0;
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
  return cosine_similarity(a.values, b.values);
}

/// Orders candidates by descending cosine similarity to embeddings[0] (the
/// ground truth); ties go to the lower index. The ground truth always ranks
/// first.
inline Ranking rank_by_similarity(std::span<const EmbeddingVector> embeddings) {
  require(!embeddings.empty(), "need at least the ground-truth embedding");
  const std::size_t K = embeddings.size();
  std::vector<double> sim(K);
  sim[0] = 1.0;
  for (std::size_t i = 1; i < K; ++i) sim[i] = cosine_similarity(embeddings[i], embeddings[0]);
  Ranking r = Ranking::identity(K);
  std::stable_sort(r.tau.begin(), r.tau.end(), [&](int a, int b) {
    return sim[static_cast<std::size_t>(a)] > sim[static_cast<std::size_t>(b)];
  });
  return r;
}

inline Ranking rank_by_similarity(const PreferenceGroup& group, std::span<const EmbeddingVector> embeddings) {
  require(embeddings.size() == group.K(), "one embedding per candidate required");
  return rank_by_similarity(embeddings);
}

/// Embeds every candidate with the reference model and sets group.ranking.
inline void rank_group(PreferenceGroup& group, const Parameters& ref, const ModelConfig& cfg) {
  std::vector<EmbeddingVector> e;
  for (std::size_t i = 0; i < group.K(); ++i) {
    e.push_back(embed_sequence(ref, cfg, group.prefix, group.candidates[i], static_cast<int>(i)));
  }
  group.ranking = rank_by_similarity(group, e);
}

}  // namespace cpolab
