#pragma once

// Checkpoint file:
//   "CPO1\n"
//   "vocab_size <n>\n" "d_model <n>\n" "n_layers <n>\n" "n_heads <n>\n" "max_context <n>\n"
//   flat parameters, little-endian IEEE-754 float64, layout order.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cpolab/error.hpp"
#include "cpolab/model.hpp"

namespace cpolab {

inline constexpr char kCheckpointMagic[] = "CPO1";

struct Checkpoint {
  ModelConfig config;
  Parameters params;
};

namespace detail {

inline std::uint64_t to_little_endian(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return out;
  }
}

/// Writes via a temporary file and rename so readers never see a partial file.
inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw RuntimeError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::string encode_checkpoint(const ModelConfig& cfg, const Parameters& params) {
  require(params.size() == parameter_count(cfg), "parameters do not match config");
  std::ostringstream out;
  out << kCheckpointMagic << '\n'
      << "vocab_size " << cfg.vocab_size << '\n'
      << "d_model " << cfg.d_model << '\n'
      << "n_layers " << cfg.n_layers << '\n'
      << "n_heads " << cfg.n_heads << '\n'
      << "max_context " << cfg.max_context << '\n';
  std::string bytes = out.str();
  const std::size_t header = bytes.size();
  bytes.resize(header + 8 * params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::uint64_t le = detail::to_little_endian(std::bit_cast<std::uint64_t>(params.flat()[i]));
    std::memcpy(bytes.data() + header + 8 * i, &le, 8);
  }
  return bytes;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto next_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw ValidationError("truncated checkpoint header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (next_line() != kCheckpointMagic) throw ValidationError("not a checkpoint (bad magic)");
  ModelConfig cfg;
  const std::pair<const char*, int*> fields[] = {{"vocab_size", &cfg.vocab_size},
                                                 {"d_model", &cfg.d_model},
                                                 {"n_layers", &cfg.n_layers},
                                                 {"n_heads", &cfg.n_heads},
                                                 {"max_context", &cfg.max_context}};
  for (const auto& [key, dst] : fields) {
    std::istringstream line(next_line());
    std::string name;
    long value = 0;
    if (!(line >> name >> value) || name != key) {
      throw ValidationError(std::string("checkpoint header: expected field ") + key);
    }
    *dst = static_cast<int>(value);
  }
  cfg.validate();
  const std::size_t n = parameter_count(cfg);
  if (bytes.size() - pos != 8 * n) {
    throw ValidationError("checkpoint payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                          std::to_string(8 * n));
  }
  std::vector<double> flat(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t le = 0;
    std::memcpy(&le, bytes.data() + pos + 8 * i, 8);
    flat[i] = std::bit_cast<double>(detail::to_little_endian(le));
  }
  return {cfg, Parameters(make_layout(cfg), std::move(flat))};
}

inline void save_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg, const Parameters& params) {
  detail::write_atomically(path, encode_checkpoint(cfg, params));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace cpolab
