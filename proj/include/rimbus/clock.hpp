#pragma once

#include <cstdint>

namespace rimbus {

/// Nanoseconds on the host monotonic clock, anchored to the wall-clock epoch
/// once at process start. Monotonic within a process; comparable across
/// processes on one host up to the (sub-microsecond) anchor skew.
uint64_t now_ns();

/// Raw CLOCK_MONOTONIC nanoseconds (no epoch anchor).
uint64_t monotonic_ns();

}  // namespace rimbus
