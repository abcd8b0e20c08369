#pragma once

// Training objectives. Every function returns a loss to MINIMIZE: the
// negated log-likelihood of the preference event (the bracketed expectation
// written as log(...) is maximized; we return its negative).
//
// ratios[j] = log pi_theta(y_j|x) - log pi_ref(y_j|x), index 0 = ground truth.
// pi_ref is frozen: gradients flow only through pi_theta.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/model.hpp"
#include "cpolab/parallel.hpp"
#include "cpolab/tokens.hpp"

namespace cpolab {

enum class Objective { kMle, kDpo, kCpo, kCpoRanked };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::kMle: return "MLE";
    case Objective::kDpo: return "DPO";
    case Objective::kCpo: return "CPO";
    case Objective::kCpoRanked: return "CPO_RANKED";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "MLE") return Objective::kMle;
  if (s == "DPO") return Objective::kDpo;
  if (s == "CPO") return Objective::kCpo;
  if (s == "CPO_RANKED") return Objective::kCpoRanked;
  throw ValidationError("unknown objective '" + s + "' (expected MLE, DPO, CPO or CPO_RANKED)");
}

struct CPOConfig {
  double beta = 5.0;
  int K = 12;  // group size including the ground truth
  bool use_ranking = false;

  void validate() const {
    require(beta > 0.0, "beta must be positive");
    require(K >= 2, "K must be >= 2");
  }
};

/// K log-ratios; entry 0 belongs to the ground-truth continuation.
struct LogRatioGroup {
  std::vector<double> ratios;

  LogRatioGroup() = default;
  LogRatioGroup(std::initializer_list<double> r) : ratios(r) {}
  explicit LogRatioGroup(std::vector<double> r) : ratios(std::move(r)) {}
  [[nodiscard]] std::size_t size() const { return ratios.size(); }
};

/// tau[k] = candidate index of the (k+1)-th preferred sequence.
struct Ranking {
  std::vector<int> tau;

  [[nodiscard]] std::size_t size() const { return tau.size(); }
  [[nodiscard]] bool is_valid(std::size_t k) const {
    if (tau.size() != k) return false;
    std::vector<bool> seen(k, false);
    for (int t : tau) {
      if (t < 0 || static_cast<std::size_t>(t) >= k || seen[static_cast<std::size_t>(t)]) return false;
      seen[static_cast<std::size_t>(t)] = true;
    }
    return true;
  }
  static Ranking identity(std::size_t k) {
    Ranking r;
    for (std::size_t i = 0; i < k; ++i) r.tau.push_back(static_cast<int>(i));
    return r;
  }
  friend bool operator==(const Ranking&, const Ranking&) = default;
};

/// A loss value and its gradient with respect to the ratios.
struct RatioLoss {
  double loss = 0.0;
  std::vector<double> grad;
};

namespace detail {

inline void check_ratios(std::span<const double> r) {
  for (double v : r) require(std::isfinite(v), "log-ratios must be finite");
}

/// -log softmax(scores)[target] over `members`, with d/dscores added to grad.
inline double softmax_nll(std::span<const double> scores, std::span<const int> members, int target,
                          std::span<double> grad) {
  double m = -std::numeric_limits<double>::infinity();
  for (int j : members) m = std::max(m, scores[static_cast<std::size_t>(j)]);
  double sum = 0.0;
  for (int j : members) sum += std::exp(scores[static_cast<std::size_t>(j)] - m);
  const double lse = m + std::log(sum);
  for (int j : members) grad[static_cast<std::size_t>(j)] += std::exp(scores[static_cast<std::size_t>(j)] - lse);
  grad[static_cast<std::size_t>(target)] -= 1.0;
  return lse - scores[static_cast<std::size_t>(target)];
}

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

}  // namespace detail

/// -log sigma(beta * (ratios[0] - ratios[1])), with gradient.
inline RatioLoss dpo_pair_loss_grad(const LogRatioGroup& group, double beta) {
  require(group.size() == 2, "pairwise DPO needs exactly K = 2");
  detail::check_ratios(group.ratios);
  const double margin = beta * (group.ratios[0] - group.ratios[1]);
  const double s = detail::sigmoid(-margin);
  return {detail::softplus(-margin), {-beta * s, beta * s}};
}

inline double dpo_pair_loss(const LogRatioGroup& group, double beta) { return dpo_pair_loss_grad(group, beta).loss; }

/// Best-of-K: -log softmax(beta * ratios)[0], with gradient.
inline RatioLoss cpo_loss_grad(const LogRatioGroup& group, double beta) {
  require(group.size() >= 2, "CPO needs K >= 2");
  detail::check_ratios(group.ratios);
  const std::size_t K = group.size();
  std::vector<double> scores(K);
  for (std::size_t j = 0; j < K; ++j) scores[j] = beta * group.ratios[j];
  std::vector<int> members(K);
  for (std::size_t j = 0; j < K; ++j) members[j] = static_cast<int>(j);
  std::vector<double> dscores(K, 0.0);
  const double loss = detail::softmax_nll(scores, members, 0, dscores);
  for (double& g : dscores) g *= beta;
  return {loss, std::move(dscores)};
}

inline double cpo_loss(const LogRatioGroup& group, double beta) { return cpo_loss_grad(group, beta).loss; }

/// Plackett-Luce: sum over stages k of -log softmax over the remaining
/// candidates tau[k..K-1], evaluated at tau[k]. The final stage is always 0
/// and is skipped.
inline RatioLoss cpo_ranked_loss_grad(const LogRatioGroup& group, const Ranking& ranking, double beta) {
  const std::size_t K = group.size();
  require(K >= 2, "ranked CPO needs K >= 2");
  require(ranking.is_valid(K), "ranking is not a permutation of the candidates");
  detail::check_ratios(group.ratios);
  std::vector<double> scores(K);
  for (std::size_t j = 0; j < K; ++j) scores[j] = beta * group.ratios[j];
  std::vector<double> dscores(K, 0.0);
  double loss = 0.0;
  for (std::size_t k = 0; k + 1 < K; ++k) {
    const std::span<const int> remaining(ranking.tau.data() + k, K - k);
    loss += detail::softmax_nll(scores, remaining, ranking.tau[k], dscores);
  }
  for (double& g : dscores) g *= beta;
  return {loss, std::move(dscores)};
}

inline double cpo_ranked_loss(const LogRatioGroup& group, const Ranking& ranking, double beta) {
  return cpo_ranked_loss_grad(group, ranking, beta).loss;
}

/// Same computation as cpo_ranked_loss; the entry point for human-ranked
/// groups rather than ground-truth-plus-synthetic ones.
inline double plackett_luce_dpo_loss(const LogRatioGroup& group, const Ranking& ranking, double beta) {
  return cpo_ranked_loss(group, ranking, beta);
}

/// beta * (log pi_theta - log pi_ref): the reward implied by a policy, up to
/// the beta * log Z(x) offset shared by every continuation of x.
inline double implicit_reward(double theta_logprob, double ref_logprob, double beta) {
  require(std::isfinite(theta_logprob) && std::isfinite(ref_logprob), "log-probabilities must be finite");
  return beta * (theta_logprob - ref_logprob);
}

/// P(candidate i is the best of K) under the K-way Bradley-Terry model.
inline std::vector<double> best_of_k_prob(std::span<const double> rewards) {
  require(!rewards.empty(), "need at least one reward");
  detail::check_ratios(rewards);
  const double lse = log_sum_exp(rewards);
  std::vector<double> p(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) p[i] = std::exp(rewards[i] - lse);
  return p;
}

// ---------------------------------------------------------------------------
// Model-level losses.

/// A preference group with frozen reference log-probabilities attached.
struct ScoredGroup {
  TokenSequence prefix;
  std::vector<TokenSequence> candidates;  // index 0 = ground truth
  std::vector<double> ref_logprobs;
  std::optional<Ranking> ranking;
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad;
};

namespace detail {

inline void add_into(std::vector<double>& total, const std::vector<double>& part) {
  for (std::size_t i = 0; i < total.size(); ++i) total[i] += part[i];
}

}  // namespace detail

/// Mean over every predicted continuation token of -log Q(token | context).
inline double mle_loss(const Parameters& params, const ModelConfig& cfg, std::span<const Example> batch) {
  require(!batch.empty(), "MLE loss needs a non-empty batch");
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    total -= sequence_logprob(params, cfg, ex.prefix, ex.cont);
    tokens += ex.cont.size();
  }
  return total / static_cast<double>(tokens);
}

inline LossAndGradient mle_loss_and_gradient(const Parameters& params, const ModelConfig& cfg,
                                             std::span<const Example> batch) {
  require(!batch.empty(), "MLE loss needs a non-empty batch");
  std::size_t tokens = 0;
  for (const auto& ex : batch) tokens += ex.cont.size();
  const double weight = -1.0 / static_cast<double>(tokens);
  struct Part {
    double loss = 0.0;
    std::vector<double> grad;
  };
  auto parts = ordered_map(batch.size(), [&](std::size_t i) {
    const auto& ex = batch[i];
    const auto tr = forward_pair(params, cfg, ex.prefix, ex.cont);
    Part part{weight * continuation_logprob(tr, ex.prefix.size(), ex.cont),
              std::vector<double>(params.size(), 0.0)};
    Matrix dlogits;
    add_logprob_cotangent(tr, ex.prefix.size(), ex.cont, weight, dlogits);
    backward(params, cfg, tr, dlogits, part.grad);
    return part;
  });
  LossAndGradient out{0.0, std::vector<double>(params.size(), 0.0)};
  for (const auto& p : parts) {
    out.loss += p.loss;
    detail::add_into(out.grad, p.grad);
  }
  return out;
}

/// Ratio-level loss for one group under the chosen preference objective.
inline RatioLoss group_ratio_loss(const LogRatioGroup& ratios, const std::optional<Ranking>& ranking,
                                  Objective objective, double beta) {
  switch (objective) {
    case Objective::kDpo: return dpo_pair_loss_grad(ratios, beta);
    case Objective::kCpo: return cpo_loss_grad(ratios, beta);
    case Objective::kCpoRanked:
      require(ranking.has_value(), "ranked CPO needs a ranking for every group");
      return cpo_ranked_loss_grad(ratios, *ranking, beta);
    case Objective::kMle: break;
  }
  throw ValidationError("MLE is not a preference objective");
}

/// Mean over groups of the preference loss, with gradient w.r.t. theta.
inline LossAndGradient preference_loss_and_gradient(const Parameters& params, const ModelConfig& cfg,
                                                    std::span<const ScoredGroup> groups, Objective objective,
                                                    double beta, bool want_gradient = true) {
  require(!groups.empty(), "preference loss needs at least one group");
  const double inv_n = 1.0 / static_cast<double>(groups.size());
  struct Part {
    double loss = 0.0;
    std::vector<double> grad;
  };
  auto parts = ordered_map(groups.size(), [&](std::size_t gi) {
    const auto& g = groups[gi];
    require(g.candidates.size() == g.ref_logprobs.size(), "group has mismatched reference scores");
    std::vector<ForwardTrace> traces;
    traces.reserve(g.candidates.size());
    LogRatioGroup ratios;
    for (std::size_t j = 0; j < g.candidates.size(); ++j) {
      traces.push_back(forward_pair(params, cfg, g.prefix, g.candidates[j]));
      ratios.ratios.push_back(continuation_logprob(traces.back(), g.prefix.size(), g.candidates[j]) -
                              g.ref_logprobs[j]);
    }
    const RatioLoss rl = group_ratio_loss(ratios, g.ranking, objective, beta);
    Part part{rl.loss * inv_n, {}};
    if (want_gradient) {
      part.grad.assign(params.size(), 0.0);
      for (std::size_t j = 0; j < g.candidates.size(); ++j) {
        if (rl.grad[j] == 0.0) continue;
        Matrix dlogits;
        add_logprob_cotangent(traces[j], g.prefix.size(), g.candidates[j], rl.grad[j] * inv_n, dlogits);
        backward(params, cfg, traces[j], dlogits, part.grad);
      }
    }
    return part;
  });
  LossAndGradient out{0.0, std::vector<double>(want_gradient ? params.size() : 0, 0.0)};
  for (const auto& p : parts) {
    out.loss += p.loss;
    if (want_gradient) detail::add_into(out.grad, p.grad);
  }
  return out;
}

inline double preference_loss(const Parameters& params, const ModelConfig& cfg, std::span<const ScoredGroup> groups,
                              Objective objective, double beta) {
  return preference_loss_and_gradient(params, cfg, groups, objective, beta, false).loss;
}

}  // namespace cpolab
