#pragma once

#include <cstdint>
#include <initializer_list>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cpolab/error.hpp"

namespace cpolab {

using TokenId = std::int32_t;

/// Reserved end-of-sequence id.
inline constexpr TokenId kEos = 0;

/// A prefix or continuation. Non-empty; EOS may only be the last element.
class TokenSequence {
 public:
  TokenSequence() = default;
  TokenSequence(std::initializer_list<TokenId> ids) : ids_(ids) { validate(); }
  explicit TokenSequence(std::vector<TokenId> ids) : ids_(std::move(ids)) { validate(); }

  [[nodiscard]] std::size_t size() const { return ids_.size(); }
  [[nodiscard]] bool empty() const { return ids_.empty(); }
  [[nodiscard]] TokenId operator[](std::size_t i) const { return ids_[i]; }
  [[nodiscard]] TokenId back() const { return ids_.back(); }
  [[nodiscard]] bool ends_with_eos() const { return !ids_.empty() && ids_.back() == kEos; }
  [[nodiscard]] std::span<const TokenId> ids() const { return ids_; }
  [[nodiscard]] const std::vector<TokenId>& vec() const { return ids_; }
  [[nodiscard]] auto begin() const { return ids_.begin(); }
  [[nodiscard]] auto end() const { return ids_.end(); }

  /// Throws unless every id is in [0, vocab_size).
  void check_vocab(int vocab_size) const {
    for (TokenId id : ids_) {
      if (id < 0 || id >= vocab_size) {
        throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(vocab_size));
      }
    }
  }

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
  friend auto operator<=>(const TokenSequence&, const TokenSequence&) = default;

 private:
  void validate() const {
    require(!ids_.empty(), "token sequence must be non-empty");
    for (std::size_t i = 0; i + 1 < ids_.size(); ++i) {
      require(ids_[i] != kEos, "EOS may only appear as the final token");
    }
    for (TokenId id : ids_) require(id >= 0, "token ids must be non-negative");
  }

  std::vector<TokenId> ids_;
};

/// Space-separated decimal ids.
inline std::string to_string(const TokenSequence& seq) {
  std::ostringstream out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out << ' ';
    out << seq[i];
  }
  return out.str();
}

inline std::vector<TokenId> parse_ids(const std::string& text) {
  std::istringstream in(text);
  std::vector<TokenId> ids;
  std::string tok;
  while (in >> tok) {
    std::size_t used = 0;
    long value = 0;
    try {
      value = std::stol(tok, &used);
    } catch (const std::exception&) {
      throw ValidationError("not an integer token id: '" + tok + "'");
    }
    if (used != tok.size()) throw ValidationError("not an integer token id: '" + tok + "'");
    ids.push_back(static_cast<TokenId>(value));
  }
  return ids;
}

/// A (prefix, continuation) training or test pair.
struct Example {
  TokenSequence prefix;
  TokenSequence cont;
  friend bool operator==(const Example&, const Example&) = default;
};

/// prefix followed by the first n tokens of cont.
inline std::vector<TokenId> concat(const TokenSequence& prefix, std::span<const TokenId> cont) {
  std::vector<TokenId> out(prefix.begin(), prefix.end());
  out.insert(out.end(), cont.begin(), cont.end());
  return out;
}

}  // namespace cpolab
