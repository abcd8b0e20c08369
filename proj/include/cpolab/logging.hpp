#pragma once

#include <atomic>
#include <iostream>
#include <string_view>

namespace cpolab {

inline std::atomic<bool>& warnings_enabled() {
  static std::atomic<bool> enabled{true};
  return enabled;
}

inline std::atomic<long>& warning_count() {
  static std::atomic<long> count{0};
  return count;
}

inline void log_warning(std::string_view msg) {
  ++warning_count();
  if (warnings_enabled()) std::clog << "warning: " << msg << '\n';
}

}  // namespace cpolab
