// Copyright (c) 2026 MAMEX contributors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <cstdlib>
#include <string>

namespace mamex {

enum class LogLevel { kQuiet = 0, kInfo = 1, kDebug = 2 };

// Verbosity comes from the MAMEX_LOG environment variable:
// "quiet"/"0", "info"/"1" (default), "debug"/"2".
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("MAMEX_LOG");
    if (env == nullptr) return LogLevel::kInfo;
    const std::string v(env);
    if (v == "0" || v == "quiet") return LogLevel::kQuiet;
    if (v == "2" || v == "debug") return LogLevel::kDebug;
    return LogLevel::kInfo;
  }();
  return level;
}

inline void log_info(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) std::fprintf(stderr, "[mamex] %s\n", msg.c_str());
}

inline void log_warn(const std::string& msg) {
  if (log_level() >= LogLevel::kInfo) std::fprintf(stderr, "[mamex] warning: %s\n", msg.c_str());
}

inline void log_debug(const std::string& msg) {
  if (log_level() >= LogLevel::kDebug) std::fprintf(stderr, "[mamex] debug: %s\n", msg.c_str());
}

}  // namespace mamex
