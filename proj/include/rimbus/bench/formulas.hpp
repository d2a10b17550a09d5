#pragma once

#include <cstdint>
#include <optional>

namespace rimbus::bench {

/// Network share of a bridged transfer: the measured stream latency minus
/// the two shared-memory hops it rides on. Empty when the inputs violate
/// t_original >= 2*t_shm (reported as an invalid-adjustment row, not a crash).
inline std::optional<int64_t> adjusted_stream_latency(int64_t t_original_ns,
                                                      int64_t t_shm_ns) {
  if (t_original_ns < 2 * t_shm_ns) return std::nullopt;
  return t_original_ns - 2 * t_shm_ns;
}

/// Percentage latency reduction of the optimized path relative to baseline.
/// Empty when the baseline is not positive.
inline std::optional<double> latency_reduction(double l_base, double l_opt) {
  if (l_base <= 0.0) return std::nullopt;
  return (l_base - l_opt) / l_base * 100.0;
}

/// Percentage reduction in callback time difference relative to baseline.
inline std::optional<double> callback_diff_reduction(double t_base, double t_opt) {
  if (t_base <= 0.0) return std::nullopt;
  return (t_base - t_opt) / t_base * 100.0;
}

}  // namespace rimbus::bench
