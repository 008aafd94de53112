#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace clipstream {

enum class LogLevel : int { kError = 0, kInfo = 1, kDebug = 2 };

/// Current log level, read once from the CLIPSTREAM_LOG environment variable
/// (error | info | debug; default error).
inline LogLevel log_level() {
  static const LogLevel level = [] {
    const char* env = std::getenv("CLIPSTREAM_LOG");
    if (env == nullptr) return LogLevel::kError;
    if (std::strcmp(env, "debug") == 0) return LogLevel::kDebug;
    if (std::strcmp(env, "info") == 0) return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

inline bool log_enabled(LogLevel lvl) {
  return static_cast<int>(lvl) <= static_cast<int>(log_level());
}

/// Log a line to stderr if the level is enabled. printf-style.
template <typename... Args>
void log_line(LogLevel lvl, const char* fmt, Args... args) {
  if (!log_enabled(lvl)) return;
  const char* tag = lvl == LogLevel::kError  ? "error"
                    : lvl == LogLevel::kInfo ? "info"
                                             : "debug";
  std::fprintf(stderr, "[clipstream %s] ", tag);
  if constexpr (sizeof...(args) == 0) {
    std::fputs(fmt, stderr);
  } else {
    std::fprintf(stderr, fmt, args...);
  }
  std::fputc('\n', stderr);
}

#define CLIPSTREAM_LOG_ERROR(...) \
  ::clipstream::log_line(::clipstream::LogLevel::kError, __VA_ARGS__)
#define CLIPSTREAM_LOG_INFO(...) \
  ::clipstream::log_line(::clipstream::LogLevel::kInfo, __VA_ARGS__)
#define CLIPSTREAM_LOG_DEBUG(...) \
  ::clipstream::log_line(::clipstream::LogLevel::kDebug, __VA_ARGS__)

}  // namespace clipstream
