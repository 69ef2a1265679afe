#pragma once

#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>

namespace w2e {

enum class LogLevel { error = 0, info = 1, debug = 2 };

// Level comes from W2E_LOG={error|info|debug}; default info.
inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("W2E_LOG");
    if (env == nullptr) return LogLevel::info;
    if (std::strcmp(env, "error") == 0) return LogLevel::error;
    if (std::strcmp(env, "debug") == 0) return LogLevel::debug;
    return LogLevel::info;
  }();
  return level;
}

// All diagnostics go to stderr; stdout stays machine-readable.
inline void logf(LogLevel level, const char* fmt, ...) {
  if (static_cast<int>(level) > static_cast<int>(log_level())) return;
  std::va_list args;
  va_start(args, fmt);
  std::vfprintf(stderr, fmt, args);
  std::fputc('\n', stderr);
  va_end(args);
}

}  // namespace w2e

#define W2E_ERROR(...) ::w2e::logf(::w2e::LogLevel::error, __VA_ARGS__)
#define W2E_INFO(...) ::w2e::logf(::w2e::LogLevel::info, __VA_ARGS__)
#define W2E_DEBUG(...) ::w2e::logf(::w2e::LogLevel::debug, __VA_ARGS__)
