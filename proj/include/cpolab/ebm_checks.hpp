#pragma once

// Property checks of the RLHF optimum on a small enumerable space:
//   1. pi* beats randomly perturbed policies on the RLHF objective;
//   2. J(pi*) = beta log Z;
//   3. the implicit reward of pi* reproduces the best-of-K probabilities of
//      the true rewards (the partition function cancels).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cpolab/ebm.hpp"
#include "cpolab/model.hpp"
#include "cpolab/objectives.hpp"
#include "cpolab/random.hpp"

namespace cpolab {

struct EbmCheckOptions {
  int vocab_size = 5;
  int max_len = 3;
  double beta = 5.0;
  int n_perturbations = 1000;
  int n_instances = 100;  // for the best-of-K check
  int K = 4;
  std::uint64_t seed = 0;
};

struct EbmCheckReport {
  std::size_t support_size = 0;
  double optimum_value = 0.0;
  double beta_log_z = 0.0;
  double best_perturbed_value = 0.0;
  int perturbations_beaten = 0;
  int n_perturbations = 0;
  double max_best_of_k_error = 0.0;

  [[nodiscard]] bool optimum_beats_perturbations() const { return perturbations_beaten == n_perturbations; }
  [[nodiscard]] double objective_gap() const { return std::abs(optimum_value - beta_log_z); }
};

/// Reference policy: a randomly initialized transformer over the small
/// vocabulary, enumerated exactly.
inline EnumeratedPolicy random_reference_policy(int vocab_size, int max_len, std::uint64_t seed) {
  const ModelConfig cfg{vocab_size, 8, 1, 2, 16};
  const auto params = init_parameters(cfg, derive_seed(seed, stream::kInit), 0.5);
  return enumerate_continuations(cfg, TokenSequence(std::vector<TokenId>{1}), max_len, params);
}

/// (1 - eps) * pi + eps * d with d ~ Dirichlet(1, ..., 1) and eps ~ U(0, 1].
inline EnumeratedPolicy dirichlet_perturbation(const EnumeratedPolicy& pi, Rng& rng) {
  std::gamma_distribution<double> gamma(1.0, 1.0);
  std::vector<double> d(pi.size());
  double total = 0.0;
  for (auto& x : d) total += (x = gamma(rng));
  const double eps = 1.0 - uniform01(rng);
  std::vector<double> probs(pi.size());
  for (std::size_t i = 0; i < pi.size(); ++i) probs[i] = (1.0 - eps) * pi.prob(i) + eps * d[i] / total;
  return EnumeratedPolicy::from_probs(pi.support, probs);
}

inline EbmCheckReport run_ebm_checks(const EbmCheckOptions& opt) {
  require(opt.K >= 2, "K must be >= 2");
  EbmCheckReport rep;
  Rng rng = make_rng(opt.seed, stream::kEval, 5);
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto ref = random_reference_policy(opt.vocab_size, opt.max_len, opt.seed);
  rep.support_size = ref.size();
  std::vector<double> rewards(ref.size());
  for (auto& r : rewards) r = normal(rng);
  const auto pi_star = optimal_policy(ref, rewards, opt.beta);
  rep.optimum_value = rlhf_objective_value(pi_star, ref, rewards, opt.beta);
  rep.beta_log_z = opt.beta * log_partition_function(ref, rewards, opt.beta);
  rep.n_perturbations = opt.n_perturbations;
  rep.best_perturbed_value = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < opt.n_perturbations; ++i) {
    const double v = rlhf_objective_value(dirichlet_perturbation(pi_star, rng), ref, rewards, opt.beta);
    rep.best_perturbed_value = std::max(rep.best_perturbed_value, v);
    if (rep.optimum_value > v) ++rep.perturbations_beaten;
  }

  for (int inst = 0; inst < opt.n_instances; ++inst) {
    const auto ref_i = random_reference_policy(opt.vocab_size, opt.max_len, derive_seed(opt.seed, stream::kEval, inst));
    std::vector<double> r(ref_i.size());
    for (auto& x : r) x = normal(rng);
    const auto opt_i = optimal_policy(ref_i, r, opt.beta);
    const auto picks = sample_without_replacement(ref_i.size(), static_cast<std::size_t>(opt.K), rng);
    std::vector<double> true_r;
    std::vector<double> implied_r;
    for (auto j : picks) {
      true_r.push_back(r[j]);
      implied_r.push_back(implicit_reward(opt_i.logprobs[j], ref_i.logprobs[j], opt.beta));
    }
    const auto p_true = best_of_k_prob(true_r);
    const auto p_implied = best_of_k_prob(implied_r);
    for (std::size_t k = 0; k < p_true.size(); ++k) {
      rep.max_best_of_k_error = std::max(rep.max_best_of_k_error, std::abs(p_true[k] - p_implied[k]));
    }
  }
  return rep;
}

}  // namespace cpolab
