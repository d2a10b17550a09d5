#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>

#include "rimbus/envelope.hpp"

namespace rimbus {

/// Bounded MPMC queue with drop-oldest overflow, the building block for
/// in-process delivery. push never blocks.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(size_t capacity) : capacity_(capacity ? capacity : 1) {}

  /// Returns false when an old element was dropped to make room.
  bool push(T value) {
    bool dropped = false;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (closed_) return true;
      if (items_.size() >= capacity_) {
        items_.pop_front();
        dropped_++;
        dropped = true;
      }
      items_.push_back(std::move(value));
    }
    cv_.notify_one();
    return !dropped;
  }

  /// Blocks until there is room or the timeout expires; on timeout the value
  /// is NOT inserted and false is returned (drop-newest semantics).
  bool push_wait(T value, std::chrono::milliseconds timeout) {
    {
      std::unique_lock<std::mutex> lock(mutex_);
      if (!space_cv_.wait_for(lock, timeout,
                              [this] { return items_.size() < capacity_ || closed_; })) {
        dropped_++;
        return false;
      }
      if (closed_) return true;
      items_.push_back(std::move(value));
    }
    cv_.notify_one();
    return true;
  }

  std::optional<T> pop(std::chrono::milliseconds timeout) {
    std::optional<T> v;
    {
      std::unique_lock<std::mutex> lock(mutex_);
      if (!cv_.wait_for(lock, timeout, [this] { return !items_.empty() || closed_; }))
        return std::nullopt;
      if (items_.empty()) return std::nullopt;
      v = std::move(items_.front());
      items_.pop_front();
    }
    space_cv_.notify_one();
    return v;
  }

  std::optional<T> try_pop() {
    std::optional<T> v;
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (items_.empty()) return std::nullopt;
      v = std::move(items_.front());
      items_.pop_front();
    }
    space_cv_.notify_one();
    return v;
  }

  void close() {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      closed_ = true;
    }
    cv_.notify_all();
    space_cv_.notify_all();
  }

  size_t size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return items_.size();
  }
  uint64_t dropped() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return dropped_;
  }
  bool closed() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return closed_;
  }

 private:
  const size_t capacity_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;        // data available
  std::condition_variable space_cv_;  // room available
  std::deque<T> items_;
  uint64_t dropped_ = 0;
  bool closed_ = false;
};

using EnvelopePtr = std::shared_ptr<const MessageEnvelope>;

/// Same-process topic channel: delivery by reference, no serialization,
/// FIFO, bounded with drop-oldest.
class IntraChannel {
 public:
  static constexpr size_t kDefaultDepth = 64;

  explicit IntraChannel(size_t depth = kDefaultDepth) : queue_(depth) {}

  void publish(EnvelopePtr env) { queue_.push(std::move(env)); }
  std::optional<EnvelopePtr> receive(std::chrono::milliseconds timeout) {
    return queue_.pop(timeout);
  }
  std::optional<EnvelopePtr> try_receive() { return queue_.try_pop(); }
  uint64_t dropped() const { return queue_.dropped(); }
  size_t depth() const { return queue_.size(); }

 private:
  BoundedQueue<EnvelopePtr> queue_;
};

}  // namespace rimbus
