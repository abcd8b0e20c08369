#pragma once

#include <concepts>
#include <span>
#include <vector>

#include "cpolab/tokens.hpp"

namespace cpolab {

/// Anything that scores continuations and exposes next-token distributions:
/// the transformer, the synthetic Markov generator, test doubles.
template <typename M>
concept LanguageModel = requires(const M& m, const TokenSequence& seq, std::span<const TokenId> partial) {
  { m.vocab_size() } -> std::convertible_to<int>;
  { m.sequence_logprob(seq, seq) } -> std::convertible_to<double>;
  { m.next_logprobs(seq, partial) } -> std::convertible_to<std::vector<double>>;
};

}  // namespace cpolab
