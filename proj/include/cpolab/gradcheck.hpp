#pragma once

// Central finite-difference check of the analytic gradients of every
// training loss on a small transformer.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "cpolab/model.hpp"
#include "cpolab/objectives.hpp"
#include "cpolab/random.hpp"

namespace cpolab {

struct GradcheckOptions {
  Objective objective = Objective::kMle;
  int K = 4;  // group size for the preference objectives (DPO forces 2)
  int coords = 100;
  double h = 1e-5;
  double beta = 5.0;
  double init_scale = 0.3;
  std::uint64_t seed = 0;
};

struct GradcheckResult {
  std::size_t n_params = 0;
  double loss = 0.0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::vector<std::size_t> coords;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// d_model 8, 1 layer, 2 heads, vocab 11, context 16: 1203 parameters.
inline ModelConfig gradcheck_model() { return {11, 8, 1, 2, 16}; }

/// |a - n| / max(|a|, |n|, 1e-4). Below the floor this is an absolute test
/// (a 1e-4 bound means |a - n| < 1e-8), which matters for coordinates whose
/// true gradient is zero, e.g. the attention key bias, where the central
/// difference is pure roundoff.
inline constexpr double kGradcheckFloor = 1e-4;

inline double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradcheckFloor});
}

namespace detail {

inline TokenSequence random_continuation(Rng& rng, int vocab, int min_len, int max_len) {
  const auto len = uniform_int(rng, min_len, max_len);
  std::vector<TokenId> ids;
  for (std::int64_t i = 0; i + 1 < len; ++i) ids.push_back(static_cast<TokenId>(uniform_int(rng, 1, vocab - 1)));
  ids.push_back(kEos);
  return TokenSequence(std::move(ids));
}

inline TokenSequence random_prefix(Rng& rng, int vocab, int len) {
  std::vector<TokenId> ids;
  for (int i = 0; i < len; ++i) ids.push_back(static_cast<TokenId>(uniform_int(rng, 1, vocab - 1)));
  return TokenSequence(std::move(ids));
}

}  // namespace detail

inline GradcheckResult run_gradcheck(const GradcheckOptions& opt) {
  require(opt.coords >= 1, "gradcheck needs at least one coordinate");
  require(opt.h > 0.0, "finite-difference step must be positive");
  const ModelConfig cfg = gradcheck_model();
  const int K = opt.objective == Objective::kDpo ? 2 : opt.K;
  require(K >= 2, "gradcheck group size must be >= 2");
  Rng rng = make_rng(opt.seed, stream::kEval, 77);
  Parameters params = init_parameters(cfg, derive_seed(opt.seed, stream::kInit, 0), opt.init_scale);
  // A nearby reference keeps the log-ratios O(1), like a fine-tune that has
  // moved away from its starting point.
  const Parameters ref = params + init_parameters(cfg, derive_seed(opt.seed, stream::kInit, 1), 0.1 * opt.init_scale);

  std::vector<Example> batch;
  std::vector<ScoredGroup> groups;
  if (opt.objective == Objective::kMle) {
    for (int i = 0; i < 3; ++i) {
      batch.push_back({detail::random_prefix(rng, cfg.vocab_size, 3), detail::random_continuation(rng, cfg.vocab_size, 2, 6)});
    }
  } else {
    for (int gi = 0; gi < 2; ++gi) {
      ScoredGroup g;
      g.prefix = detail::random_prefix(rng, cfg.vocab_size, 3);
      for (int j = 0; j < K; ++j) {
        g.candidates.push_back(detail::random_continuation(rng, cfg.vocab_size, 2, 6));
        g.ref_logprobs.push_back(sequence_logprob(ref, cfg, g.prefix, g.candidates.back()));
      }
      if (opt.objective == Objective::kCpoRanked) {
        Ranking r = Ranking::identity(static_cast<std::size_t>(K));
        std::shuffle(r.tau.begin(), r.tau.end(), rng);
        g.ranking = r;
      }
      groups.push_back(std::move(g));
    }
  }

  auto loss_at = [&](const Parameters& p) {
    return opt.objective == Objective::kMle ? mle_loss(p, cfg, batch)
                                            : preference_loss(p, cfg, groups, opt.objective, opt.beta);
  };
  const LossAndGradient lg = opt.objective == Objective::kMle
                                 ? mle_loss_and_gradient(params, cfg, batch)
                                 : preference_loss_and_gradient(params, cfg, groups, opt.objective, opt.beta);

  GradcheckResult res;
  res.n_params = params.size();
  res.loss = lg.loss;
  const auto n_coords = std::min(static_cast<std::size_t>(opt.coords), params.size());
  res.coords = sample_without_replacement(params.size(), n_coords, rng);
  auto flat = params.flat();
  for (std::size_t c : res.coords) {
    const double orig = flat[c];
    flat[c] = orig + opt.h;
    const double up = loss_at(params);
    flat[c] = orig - opt.h;
    const double down = loss_at(params);
    flat[c] = orig;
    const double numeric = (up - down) / (2.0 * opt.h);
    res.analytic.push_back(lg.grad[c]);
    res.numeric.push_back(numeric);
    res.max_rel_error = std::max(res.max_rel_error, gradcheck_relative_error(lg.grad[c], numeric));
    res.max_abs_error = std::max(res.max_abs_error, std::abs(lg.grad[c] - numeric));
  }
  return res;
}

}  // namespace cpolab
