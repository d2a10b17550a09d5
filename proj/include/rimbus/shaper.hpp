#pragma once

#include <cstdint>
#include <memory>
#include <mutex>

namespace rimbus {

/// Token-bucket byte shaper used to model a bounded wire at desk scale.
/// acquire() sleeps until the requested bytes fit the budget. Thread-safe.
class TokenBucket {
 public:
  /// rate in bytes per second; capacity defaults to 20 ms of rate with a
  /// 256 KiB floor so single datagrams always fit.
  explicit TokenBucket(double bytes_per_sec, uint64_t capacity = 0);

  void acquire(uint64_t bytes);

  double rate() const { return rate_; }

 private:
  void refill_locked(uint64_t now);

  const double rate_;
  const uint64_t capacity_;
  std::mutex mutex_;
  double tokens_;
  uint64_t last_refill_ns_;
};

using ShaperPtr = std::shared_ptr<TokenBucket>;

}  // namespace rimbus
