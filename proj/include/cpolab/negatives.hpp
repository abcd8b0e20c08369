#pragma once

// Synthetic negative samplers and the group assembler.
//
//   AN  autoregressive: top-k samples from the reference model
//   BN  batch: continuations of other prefixes in the same mini-batch
//   MN  meanfield: a fraction of positions independently resampled from the
//       reference model's conditional given the ORIGINAL left context
//   TN  truncation: ground truth cut at a random position, EOS appended

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/model.hpp"
#include "cpolab/objectives.hpp"
#include "cpolab/random.hpp"
#include "cpolab/tokens.hpp"

namespace cpolab {

enum class Provenance { kGt, kAn, kBn, kMn, kTn };

inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::kGt: return "GT";
    case Provenance::kAn: return "AN";
    case Provenance::kBn: return "BN";
    case Provenance::kMn: return "MN";
    case Provenance::kTn: return "TN";
  }
  return "?";
}

inline Provenance parse_provenance(const std::string& s) {
  if (s == "GT") return Provenance::kGt;
  if (s == "AN") return Provenance::kAn;
  if (s == "BN") return Provenance::kBn;
  if (s == "MN") return Provenance::kMn;
  if (s == "TN") return Provenance::kTn;
  throw ValidationError("unknown candidate tag '" + s + "'");
}

struct SamplerMix {
  int n_bn = 3;
  int n_mn = 5;
  int n_tn = 3;
  int n_an = 0;
  [[nodiscard]] int total() const { return n_bn + n_mn + n_tn + n_an; }
};

struct NegativeSamplerConfig {
  int topk = 50;
  double swap_fraction = 0.15;
  SamplerMix mix;
  std::uint64_t seed = 0;

  void validate(int vocab_size) const {
    require(topk >= 1 && topk <= vocab_size, "sampler topk must be in [1, vocab_size]");
    require(swap_fraction > 0.0 && swap_fraction <= 1.0, "swap_fraction must be in (0, 1]");
    require(mix.n_bn >= 0 && mix.n_mn >= 0 && mix.n_tn >= 0 && mix.n_an >= 0, "mix counts must be >= 0");
  }
};

struct PreferenceGroup {
  TokenSequence prefix;
  std::vector<TokenSequence> candidates;  // index 0 = ground truth
  std::vector<Provenance> provenance;
  std::optional<Ranking> ranking;

  [[nodiscard]] std::size_t K() const { return candidates.size(); }

  void validate() const {
    require(candidates.size() >= 2, "a preference group needs K >= 2 candidates");
    require(provenance.size() == candidates.size(), "one provenance tag per candidate");
    require(provenance[0] == Provenance::kGt, "candidate 0 must be the ground truth");
    for (std::size_t i = 1; i < provenance.size(); ++i) {
      require(provenance[i] != Provenance::kGt, "only candidate 0 may be tagged GT");
    }
    if (ranking) require(ranking->is_valid(candidates.size()), "group ranking is not a permutation");
  }
};

/// n top-k samples from the reference model, one sub-seed each.
inline std::vector<TokenSequence> gen_autoregressive(const Parameters& ref, const ModelConfig& cfg,
                                                     const TokenSequence& prefix, int n,
                                                     const NegativeSamplerConfig& sampler, int max_new,
                                                     std::uint64_t salt = 0) {
  require(n >= 0, "sample count must be non-negative");
  std::vector<TokenSequence> out;
  out.reserve(static_cast<std::size_t>(n));
  const std::uint64_t base = derive_seed(sampler.seed, stream::kAutoregressive, salt);
  for (int i = 0; i < n; ++i) {
    out.push_back(sample_topk(ref, cfg, prefix, sampler.topk, max_new, derive_seed(base, 0, static_cast<std::uint64_t>(i))));
  }
  return out;
}

/// n continuations drawn without replacement from batch[j].cont, j != anchor.
inline std::vector<TokenSequence> gen_batch(std::span<const Example> batch, std::size_t anchor, int n,
                                            std::uint64_t seed) {
  require(n >= 0, "sample count must be non-negative");
  require(anchor < batch.size(), "anchor index outside the batch");
  if (batch.size() < static_cast<std::size_t>(n) + 1) {
    throw ValidationError("insufficient batch: " + std::to_string(n) + " batch negatives need a batch of at least " +
                          std::to_string(n + 1));
  }
  Rng rng = make_rng(seed, stream::kBatch);
  const auto picks = sample_without_replacement(batch.size() - 1, static_cast<std::size_t>(n), rng);
  std::vector<TokenSequence> out;
  for (std::size_t p : picks) out.push_back(batch[p < anchor ? p : p + 1].cont);
  return out;
}

/// Number of positions MN resamples: round-half-up of fraction * length,
/// at least 1, at most length.
inline std::size_t meanfield_swap_count(double swap_fraction, std::size_t length) {
  const auto n = static_cast<std::size_t>(std::floor(swap_fraction * static_cast<double>(length) + 0.5));
  return std::min(length, std::max<std::size_t>(1, n));
}

struct MeanfieldSample {
  TokenSequence seq;
  std::vector<std::size_t> positions;  // resampled positions, ascending
};

/// MN from precomputed conditionals: row t of `logits` is the reference
/// model's next-token logits for continuation position t given
/// prefix ++ cont[0..t). EOS is excluded at non-final positions so the
/// result stays a valid sequence.
inline MeanfieldSample meanfield_from_logits(const Matrix& logits, const TokenSequence& cont, double swap_fraction,
                                             std::uint64_t seed) {
  require(!cont.empty(), "meanfield negatives need a non-empty continuation");
  require(logits.rows() == static_cast<Eigen::Index>(cont.size()), "one conditional row per position");
  Rng rng = make_rng(seed, stream::kMeanfield);
  const std::size_t count = meanfield_swap_count(swap_fraction, cont.size());
  auto positions = sample_without_replacement(cont.size(), count, rng);
  std::sort(positions.begin(), positions.end());
  std::vector<TokenId> ids(cont.begin(), cont.end());
  std::vector<double> w(static_cast<std::size_t>(logits.cols()));
  for (std::size_t t : positions) {
    const auto row = static_cast<Eigen::Index>(t);
    const double m = logits.row(row).maxCoeff();
    for (Eigen::Index v = 0; v < logits.cols(); ++v) w[static_cast<std::size_t>(v)] = std::exp(logits(row, v) - m);
    if (t + 1 < cont.size()) w[kEos] = 0.0;
    ids[t] = static_cast<TokenId>(sample_categorical(w, rng));
  }
  return {TokenSequence(std::move(ids)), std::move(positions)};
}

inline TokenSequence gen_meanfield(const Parameters& ref, const ModelConfig& cfg, const TokenSequence& prefix,
                                   const TokenSequence& cont, double swap_fraction, std::uint64_t seed) {
  const auto tr = forward_pair(ref, cfg, prefix, cont);
  const Matrix rows = tr.logits.middleRows(static_cast<Eigen::Index>(prefix.size()) - 1,
                                           static_cast<Eigen::Index>(cont.size()));
  return meanfield_from_logits(rows, cont, swap_fraction, seed).seq;
}

/// TN: body = cont without its trailing EOS; cut drawn uniformly from
/// {1, ..., max(1, |body|-1)}; returns body[0..cut) ++ EOS.
inline TokenSequence gen_truncation(const TokenSequence& cont, std::uint64_t seed) {
  const std::size_t body = cont.ends_with_eos() ? cont.size() - 1 : cont.size();
  require(body >= 1, "truncation negatives need at least one non-EOS token");
  Rng rng = make_rng(seed, stream::kTruncation);
  const auto hi = static_cast<std::int64_t>(std::max<std::size_t>(1, body - 1));
  const auto cut = static_cast<std::size_t>(uniform_int(rng, 1, hi));
  std::vector<TokenId> ids(cont.begin(), cont.begin() + static_cast<std::ptrdiff_t>(cut));
  ids.push_back(kEos);
  return TokenSequence(std::move(ids));
}

/// [GT] ++ AN x n_an ++ BN x n_bn ++ MN x n_mn ++ TN x n_tn. The ranking is
/// left unset. `batch[anchor]` is the ground-truth pair; `salt` separates the
/// random streams of different groups sharing one sampler seed.
inline PreferenceGroup assemble_group(std::span<const Example> batch, std::size_t anchor,
                                      const NegativeSamplerConfig& sampler, const Parameters& ref,
                                      const ModelConfig& cfg, std::uint64_t salt, int max_new) {
  require(anchor < batch.size(), "anchor index outside the batch");
  require(sampler.mix.total() >= 1, "sampler mix must produce at least one negative (K >= 2)");
  const auto& gt = batch[anchor];
  const std::uint64_t group_seed = derive_seed(sampler.seed, stream::kGroup, salt);
  PreferenceGroup g;
  g.prefix = gt.prefix;
  g.candidates.push_back(gt.cont);
  g.provenance.push_back(Provenance::kGt);
  auto push = [&](TokenSequence s, Provenance p) {
    g.candidates.push_back(std::move(s));
    g.provenance.push_back(p);
  };
  for (auto& s : gen_autoregressive(ref, cfg, gt.prefix, sampler.mix.n_an, sampler, max_new, group_seed)) {
    push(std::move(s), Provenance::kAn);
  }
  for (auto& s : gen_batch(batch, anchor, sampler.mix.n_bn, derive_seed(group_seed, stream::kBatch))) {
    push(std::move(s), Provenance::kBn);
  }
  if (sampler.mix.n_mn > 0) {
    const auto tr = forward_pair(ref, cfg, gt.prefix, gt.cont);
    const Matrix rows = tr.logits.middleRows(static_cast<Eigen::Index>(gt.prefix.size()) - 1,
                                             static_cast<Eigen::Index>(gt.cont.size()));
    for (int i = 0; i < sampler.mix.n_mn; ++i) {
      const auto seed = derive_seed(group_seed, stream::kMeanfield, static_cast<std::uint64_t>(i));
      push(meanfield_from_logits(rows, gt.cont, sampler.swap_fraction, seed).seq, Provenance::kMn);
    }
  }
  for (int i = 0; i < sampler.mix.n_tn; ++i) {
    push(gen_truncation(gt.cont, derive_seed(group_seed, stream::kTruncation, static_cast<std::uint64_t>(i))),
         Provenance::kTn);
  }
  g.validate();
  return g;
}

// ---------------------------------------------------------------------------
// Group cache file: one group per line, tab-separated fields:
//   prefix ids, then K blocks "TAG:ids", then optionally "tau:perm".

inline std::string format_group(const PreferenceGroup& g) {
  std::string line = to_string(g.prefix);
  for (std::size_t i = 0; i < g.K(); ++i) {
    line += '\t' + to_string(g.provenance[i]) + ':' + to_string(g.candidates[i]);
  }
  if (g.ranking) {
    line += "\ttau:";
    for (std::size_t i = 0; i < g.ranking->tau.size(); ++i) {
      if (i) line += ' ';
      line += std::to_string(g.ranking->tau[i]);
    }
  }
  return line;
}

inline PreferenceGroup parse_group(const std::string& line, int vocab_size) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, '\t')) fields.push_back(field);
  require(fields.size() >= 3, "group record needs a prefix and at least two candidates");
  PreferenceGroup g;
  g.prefix = TokenSequence(parse_ids(fields[0]));
  g.prefix.check_vocab(vocab_size);
  for (std::size_t i = 1; i < fields.size(); ++i) {
    const auto colon = fields[i].find(':');
    require(colon != std::string::npos, "candidate block missing 'TAG:'");
    const std::string tag = fields[i].substr(0, colon);
    const std::string ids = fields[i].substr(colon + 1);
    if (tag == "tau") {
      require(i + 1 == fields.size(), "tau must be the last field");
      Ranking r;
      for (TokenId v : parse_ids(ids)) r.tau.push_back(v);
      g.ranking = std::move(r);
      continue;
    }
    g.provenance.push_back(parse_provenance(tag));
    g.candidates.push_back(TokenSequence(parse_ids(ids)));
    g.candidates.back().check_vocab(vocab_size);
  }
  g.validate();
  return g;
}

}  // namespace cpolab
