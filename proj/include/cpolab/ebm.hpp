#pragma once

// Brute-force RLHF <-> EBM checks on enumerable continuation spaces.
//
//   Z(x)      = sum_y pi_ref(y|x) exp(r(x,y)/beta)
//   pi*(y|x)  = pi_ref(y|x) exp(r(x,y)/beta) / Z(x)
//   J(pi)     = E_pi[r] - beta KL(pi || pi_ref),   J(pi*) = beta log Z

#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/language_model.hpp"
#include "cpolab/model.hpp"
#include "cpolab/tokens.hpp"

namespace cpolab {

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::abs(sum_) >= std::abs(x)) {
      comp_ += (sum_ - t) + x;
    } else {
      comp_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  [[nodiscard]] double value() const { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

/// A continuation distribution written out in full.
struct EnumeratedPolicy {
  std::vector<TokenSequence> support;
  std::vector<double> logprobs;

  [[nodiscard]] std::size_t size() const { return support.size(); }
  [[nodiscard]] double prob(std::size_t i) const { return std::exp(logprobs[i]); }
  [[nodiscard]] double mass() const {
    CompensatedSum s;
    for (double lp : logprobs) s.add(std::exp(lp));
    return s.value();
  }
  /// Builds a policy over `support` from explicit probabilities.
  static EnumeratedPolicy from_probs(std::vector<TokenSequence> support, std::span<const double> probs) {
    require(support.size() == probs.size(), "one probability per support element");
    EnumeratedPolicy p{std::move(support), {}};
    for (double q : probs) {
      require(q >= 0.0, "probabilities must be non-negative");
      p.logprobs.push_back(std::log(q));
    }
    return p;
  }
};

inline constexpr double kMaxEnumeration = 1e6;

/// Every EOS-terminated continuation of length <= max_len, plus each
/// non-terminated length-max_len sequence as a tail bucket, so the mass is 1.
/// Depth-first, tokens in ascending id order.
template <LanguageModel M>
EnumeratedPolicy enumerate_continuations(const M& model, const TokenSequence& prefix, int max_len) {
  require(max_len >= 1, "max_len must be positive");
  const int V = model.vocab_size();
  require(std::pow(static_cast<double>(V), max_len) <= kMaxEnumeration,
          "continuation space too large to enumerate (vocab^max_len > 1e6)");
  EnumeratedPolicy out;
  std::vector<TokenId> partial;
  std::function<void(double)> expand = [&](double logp) {
    const auto next = model.next_logprobs(prefix, partial);
    for (TokenId v = 0; v < V; ++v) {
      const double lp = logp + next[static_cast<std::size_t>(v)];
      partial.push_back(v);
      if (v == kEos || static_cast<int>(partial.size()) == max_len) {
        out.support.emplace_back(partial);
        out.logprobs.push_back(lp);
      } else {
        expand(lp);
      }
      partial.pop_back();
    }
  };
  expand(0.0);
  return out;
}

inline EnumeratedPolicy enumerate_continuations(const ModelConfig& cfg, const TokenSequence& prefix, int max_len,
                                                const Parameters& params) {
  check_pair_fits(cfg, prefix.size(), static_cast<std::size_t>(max_len));
  return enumerate_continuations(TransformerModel{cfg, params}, prefix, max_len);
}

namespace detail {
inline void check_support(const EnumeratedPolicy& ref, std::span<const double> rewards) {
  require(ref.size() == rewards.size(), "one reward per support element");
}
}  // namespace detail

inline double log_partition_function(const EnumeratedPolicy& ref, std::span<const double> rewards, double beta) {
  detail::check_support(ref, rewards);
  require(beta > 0.0, "beta must be positive");
  std::vector<double> terms(ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) terms[i] = ref.logprobs[i] + rewards[i] / beta;
  double m = -std::numeric_limits<double>::infinity();
  for (double t : terms) m = std::max(m, t);
  CompensatedSum s;
  for (double t : terms) s.add(std::exp(t - m));
  return m + std::log(s.value());
}

inline double partition_function(const EnumeratedPolicy& ref, std::span<const double> rewards, double beta) {
  return std::exp(log_partition_function(ref, rewards, beta));
}

inline EnumeratedPolicy optimal_policy(const EnumeratedPolicy& ref, std::span<const double> rewards, double beta) {
  const double log_z = log_partition_function(ref, rewards, beta);
  EnumeratedPolicy out{ref.support, {}};
  for (std::size_t i = 0; i < ref.size(); ++i) out.logprobs.push_back(ref.logprobs[i] + rewards[i] / beta - log_z);
  return out;
}

/// E_pi[r] - beta * KL(pi || pi_ref).
inline double rlhf_objective_value(const EnumeratedPolicy& policy, const EnumeratedPolicy& ref,
                                   std::span<const double> rewards, double beta) {
  require(policy.support == ref.support, "policy and reference supports differ");
  detail::check_support(ref, rewards);
  CompensatedSum reward;
  CompensatedSum kl;
  for (std::size_t i = 0; i < policy.size(); ++i) {
    const double p = policy.prob(i);
    if (p == 0.0) continue;
    if (ref.logprobs[i] == -std::numeric_limits<double>::infinity()) {
      throw ValidationError("policy puts mass where the reference has none (KL diverges)");
    }
    reward.add(p * rewards[i]);
    kl.add(p * (policy.logprobs[i] - ref.logprobs[i]));
  }
  return reward.value() - beta * kl.value();
}

}  // namespace cpolab
