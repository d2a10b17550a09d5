#include "rimbus/log.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>

#include "rimbus/clock.hpp"

namespace rimbus::log {

namespace {
std::atomic<int> g_level{static_cast<int>(Level::kInfo)};
std::mutex g_mutex;

char level_char(Level l) {
  switch (l) {
    case Level::kDebug: return 'D';
    case Level::kInfo: return 'I';
    case Level::kWarn: return 'W';
    case Level::kError: return 'E';
  }
  return '?';
}
}  // namespace

void set_level(Level level) { g_level.store(static_cast<int>(level), std::memory_order_relaxed); }

Level level() { return static_cast<Level>(g_level.load(std::memory_order_relaxed)); }

void write(Level level, const std::string& msg) {
  const double t = double(monotonic_ns()) / 1e9;
  std::lock_guard<std::mutex> lock(g_mutex);
  std::fprintf(stderr, "[rimbus %c %.6f] %s\n", level_char(level), t, msg.c_str());
}

}  // namespace rimbus::log
