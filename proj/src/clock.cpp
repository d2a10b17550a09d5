#include "rimbus/clock.hpp"

#include <ctime>

namespace rimbus {

namespace {

uint64_t read_clock(clockid_t id) {
  timespec ts{};
  clock_gettime(id, &ts);
  return uint64_t(ts.tv_sec) * 1000000000ull + uint64_t(ts.tv_nsec);
}

// Anchor computed once per process: realtime - monotonic at first use.
uint64_t epoch_offset() {
  static const uint64_t offset = read_clock(CLOCK_REALTIME) - read_clock(CLOCK_MONOTONIC);
  return offset;
}

}  // namespace

uint64_t monotonic_ns() { return read_clock(CLOCK_MONOTONIC); }

uint64_t now_ns() { return monotonic_ns() + epoch_offset(); }

}  // namespace rimbus
