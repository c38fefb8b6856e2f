#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace metatask {

/// Warning sink; defaults to stderr. Tests swap it to capture messages.
inline std::function<void(const std::string&)>& warning_sink() {
  static std::function<void(const std::string&)> sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return sink;
}

inline void warn(const std::string& msg) {
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  if (warning_sink()) warning_sink()(msg);
}

}  // namespace metatask
