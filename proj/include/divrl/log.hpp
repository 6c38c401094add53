#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <set>
#include <string>

namespace divrl {

using LogSink = std::function<void(const std::string&)>;

inline LogSink& warning_sink() {
  static LogSink sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
  return sink;
}

/// Emits `message` once per distinct `key` for the lifetime of the process.
inline void warn_once(const std::string& key, const std::string& message) {
  static std::mutex mu;
  static std::set<std::string> seen;
  {
    std::lock_guard<std::mutex> lock(mu);
    if (!seen.insert(key).second) return;
  }
  if (warning_sink()) warning_sink()(message);
}

}  // namespace divrl
