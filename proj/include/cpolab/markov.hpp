#pragma once

// Known synthetic language P: an order-2 Markov chain over the toy
// vocabulary with a sparse seeded transition table. Because P is explicit,
// every sequence probability is exact, which makes reverse-KL checkable.
//
// State = last two tokens of prefix ++ continuation (left-padded with 0).
// Continuation position i:
//   i == 0             : no EOS (continuations carry at least one token)
//   0 < i < L-1        : EOS with the state's hazard h, else sparse successor
//   i >= L-1           : EOS
// and every row is mixed with a uniform floor so P(y|x) > 0 for all y.
// Prefix tokens are drawn from the sparse successors with EOS excluded.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/random.hpp"
#include "cpolab/tokens.hpp"

namespace cpolab {

struct MarkovSpec {
  int vocab_size = 64;
  int prefix_len = 4;
  int max_cont_len = 16;  // L: continuation length including EOS is at most L (before smoothing)
  int branching = 4;
  double min_eos = 0.05;
  double max_eos = 0.3;
  double smoothing = 0.01;
  std::uint64_t seed = 0;

  void validate() const {
    require(vocab_size >= 3, "generator vocab_size must be >= 3");
    require(prefix_len >= 1, "generator prefix_len must be positive");
    require(max_cont_len >= 2, "generator max_cont_len must be >= 2");
    require(branching >= 1 && branching < vocab_size, "generator branching must be in [1, vocab_size-1]");
    require(0.0 <= min_eos && min_eos <= max_eos && max_eos < 1.0, "generator EOS hazards must satisfy 0<=min<=max<1");
    require(smoothing > 0.0 && smoothing < 1.0, "generator smoothing must be in (0, 1)");
  }
};

class MarkovChain {
 public:
  explicit MarkovChain(MarkovSpec spec) : spec_(spec) {
    spec_.validate();
    const auto V = static_cast<std::size_t>(spec_.vocab_size);
    successor_.assign(V * V * V, 0.0);
    eos_.assign(V * V, 0.0);
    Rng rng = make_rng(spec_.seed, stream::kGenerator);
    std::gamma_distribution<double> gamma(1.0, 1.0);
    std::uniform_real_distribution<double> hazard(spec_.min_eos, spec_.max_eos);
    for (std::size_t a = 0; a < V; ++a) {
      for (std::size_t b = 0; b < V; ++b) {
        const auto picks = sample_without_replacement(V - 1, static_cast<std::size_t>(spec_.branching), rng);
        std::vector<double> w(picks.size());
        double total = 0.0;
        for (double& x : w) total += (x = gamma(rng));
        double* row = &successor_[(a * V + b) * V];
        for (std::size_t i = 0; i < picks.size(); ++i) row[picks[i] + 1] = w[i] / total;
        eos_[a * V + b] = hazard(rng);
      }
    }
  }

  [[nodiscard]] const MarkovSpec& spec() const { return spec_; }
  [[nodiscard]] int vocab_size() const { return spec_.vocab_size; }

  /// Distribution of continuation token number `position` given the full
  /// context so far.
  [[nodiscard]] std::vector<double> continuation_probs(std::span<const TokenId> context, std::size_t position) const {
    const auto V = static_cast<std::size_t>(spec_.vocab_size);
    const auto [a, b] = state(context);
    const double* succ = &successor_[(a * V + b) * V];
    const auto L = static_cast<std::size_t>(spec_.max_cont_len);
    double eos = 0.0;
    if (position >= L - 1) {
      eos = 1.0;
    } else if (position > 0) {
      eos = eos_[a * V + b];
    }
    std::vector<double> p(V);
    const double floor = spec_.smoothing / static_cast<double>(V);
    p[0] = (1.0 - spec_.smoothing) * eos + floor;
    for (std::size_t c = 1; c < V; ++c) p[c] = (1.0 - spec_.smoothing) * (1.0 - eos) * succ[c] + floor;
    return p;
  }

  [[nodiscard]] std::vector<double> prefix_probs(std::span<const TokenId> context) const {
    const auto V = static_cast<std::size_t>(spec_.vocab_size);
    const auto [a, b] = state(context);
    const double* succ = &successor_[(a * V + b) * V];
    std::vector<double> p(V, 0.0);
    const double floor = spec_.smoothing / static_cast<double>(V - 1);
    for (std::size_t c = 1; c < V; ++c) p[c] = (1.0 - spec_.smoothing) * succ[c] + floor;
    return p;
  }

  [[nodiscard]] std::vector<double> next_logprobs(const TokenSequence& prefix, std::span<const TokenId> partial) const {
    const auto ctx = concat(prefix, partial);
    auto p = continuation_probs(ctx, partial.size());
    for (double& v : p) v = std::log(v);
    return p;
  }

  /// Exact log P(cont | prefix).
  [[nodiscard]] double sequence_logprob(const TokenSequence& prefix, const TokenSequence& cont) const {
    std::vector<TokenId> ctx(prefix.begin(), prefix.end());
    double total = 0.0;
    for (std::size_t i = 0; i < cont.size(); ++i) {
      const TokenId y = cont[i];
      if (y < 0 || y >= spec_.vocab_size) return -std::numeric_limits<double>::infinity();
      total += std::log(continuation_probs(ctx, i)[static_cast<std::size_t>(y)]);
      ctx.push_back(y);
    }
    return total;
  }

  [[nodiscard]] TokenSequence sample_prefix(Rng& rng) const {
    std::vector<TokenId> ids;
    for (int i = 0; i < spec_.prefix_len; ++i) {
      ids.push_back(static_cast<TokenId>(sample_categorical(prefix_probs(ids), rng)));
    }
    return TokenSequence(std::move(ids));
  }

  /// Continuation sampled until EOS. `cap` bounds the length for the
  /// vanishing-probability tail left by the smoothing floor; hitting it
  /// forces EOS.
  [[nodiscard]] TokenSequence sample_continuation(const TokenSequence& prefix, Rng& rng, std::size_t cap) const {
    std::vector<TokenId> ctx(prefix.begin(), prefix.end());
    std::vector<TokenId> out;
    while (true) {
      if (out.size() + 1 >= cap) {
        out.push_back(kEos);
        break;
      }
      const auto y = static_cast<TokenId>(sample_categorical(continuation_probs(ctx, out.size()), rng));
      out.push_back(y);
      ctx.push_back(y);
      if (y == kEos) break;
    }
    return TokenSequence(std::move(out));
  }

  /// n (prefix, continuation) pairs; sequences fit in max_total tokens.
  /// Bare-EOS continuations (reachable only through the smoothing floor) are
  /// resampled so every continuation has at least one content token.
  [[nodiscard]] std::vector<Example> sample_corpus(std::size_t n, std::uint64_t seed, std::size_t max_total) const {
    require(max_total > static_cast<std::size_t>(spec_.prefix_len) + 2, "context too small for generator prefixes");
    Rng rng = make_rng(seed, stream::kCorpus);
    std::vector<Example> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      auto prefix = sample_prefix(rng);
      auto cont = sample_continuation(prefix, rng, max_total - prefix.size());
      while (cont.size() < 2) cont = sample_continuation(prefix, rng, max_total - prefix.size());
      out.push_back({std::move(prefix), std::move(cont)});
    }
    return out;
  }

 private:
  [[nodiscard]] std::pair<std::size_t, std::size_t> state(std::span<const TokenId> context) const {
    const std::size_t n = context.size();
    const auto a = n >= 2 ? static_cast<std::size_t>(context[n - 2]) : 0;
    const auto b = n >= 1 ? static_cast<std::size_t>(context[n - 1]) : 0;
    return {a, b};
  }

  MarkovSpec spec_;
  std::vector<double> successor_;  // [a][b][c], rows sum to 1 over c >= 1
  std::vector<double> eos_;        // [a][b]
};

}  // namespace cpolab
