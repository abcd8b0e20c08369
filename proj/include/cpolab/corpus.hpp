#pragma once

// Corpus file: UTF-8 text, one example per line,
//   "<prefix ids>\t<continuation ids>"
// ids are space-separated decimals; continuations end with 0 (EOS).

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cpolab/checkpoint.hpp"
#include "cpolab/error.hpp"
#include "cpolab/tokens.hpp"

namespace cpolab {

/// Parses corpus text. Blank lines are skipped. Pass vocab_size to range-check ids.
inline std::vector<Example> parse_corpus(const std::string& text, std::optional<int> vocab_size = std::nullopt) {
  std::vector<Example> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      const auto tab = line.find('\t');
      require(tab != std::string::npos, "expected '<prefix>\\t<continuation>'");
      require(line.find('\t', tab + 1) == std::string::npos, "more than one tab");
      Example ex{TokenSequence(parse_ids(line.substr(0, tab))), TokenSequence(parse_ids(line.substr(tab + 1)))};
      require(std::ranges::find(ex.prefix.ids(), kEos) == ex.prefix.ids().end(), "prefix may not contain EOS");
      require(ex.cont.ends_with_eos(), "continuation must end with EOS (0)");
      if (vocab_size) {
        ex.prefix.check_vocab(*vocab_size);
        ex.cont.check_vocab(*vocab_size);
      }
      out.push_back(std::move(ex));
    } catch (const ValidationError& e) {
      throw ValidationError("corpus line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Example> load_corpus(const std::filesystem::path& path, std::optional<int> vocab_size = std::nullopt) {
  return parse_corpus(read_file(path), vocab_size);
}

inline std::string format_corpus(const std::vector<Example>& corpus) {
  std::string out;
  for (const auto& ex : corpus) out += to_string(ex.prefix) + '\t' + to_string(ex.cont) + '\n';
  return out;
}

inline void save_corpus(const std::filesystem::path& path, const std::vector<Example>& corpus) {
  detail::write_atomically(path, format_corpus(corpus));
}

}  // namespace cpolab
