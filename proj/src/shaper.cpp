#include "rimbus/shaper.hpp"

#include <algorithm>
#include <thread>

#include "rimbus/clock.hpp"

namespace rimbus {

TokenBucket::TokenBucket(double bytes_per_sec, uint64_t capacity)
    : rate_(bytes_per_sec),
      capacity_(capacity ? capacity
                         : std::max<uint64_t>(uint64_t(bytes_per_sec * 0.020), 256 * 1024)),
      tokens_(double(capacity_)),
      last_refill_ns_(monotonic_ns()) {}

void TokenBucket::refill_locked(uint64_t now) {
  const double elapsed_s = double(now - last_refill_ns_) / 1e9;
  tokens_ = std::min(double(capacity_), tokens_ + elapsed_s * rate_);
  last_refill_ns_ = now;
}

void TokenBucket::acquire(uint64_t bytes) {
  // Oversized requests consume the budget in capacity-sized bites.
  uint64_t remaining = bytes;
  while (remaining > 0) {
    const uint64_t bite = std::min(remaining, capacity_);
    for (;;) {
      uint64_t wait_ns = 0;
      {
        std::lock_guard<std::mutex> lock(mutex_);
        refill_locked(monotonic_ns());
        if (tokens_ >= double(bite)) {
          tokens_ -= double(bite);
          break;
        }
        wait_ns = uint64_t((double(bite) - tokens_) / rate_ * 1e9);
      }
      std::this_thread::sleep_for(
          std::chrono::nanoseconds(std::clamp<uint64_t>(wait_ns, 10000, 50000000)));
    }
    remaining -= bite;
  }
}

}  // namespace rimbus
