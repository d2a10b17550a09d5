#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <thread>
#include <vector>

#include "rimbus/envelope.hpp"
#include "rimbus/net.hpp"
#include "rimbus/queue.hpp"
#include "rimbus/shaper.hpp"
#include "rimbus/types.hpp"

namespace rimbus {

// Reliable framed stream transport: per-topic channels on distinct ports,
// length-prefixed envelope frames, reconnect with exponential backoff.

constexpr uint32_t kStreamMagic = 0x52494D53;  // "RIMS"
constexpr uint8_t kStreamVersion = 1;
constexpr size_t kHelloBytes = 10;  // magic u32 | version u8 | lane u8 | channel_id u32
constexpr size_t kFramePrefixBytes = 4;

/// Stable per-topic channel id (low half of the topic hash).
uint32_t stream_channel_id(const TopicKey& topic);

struct StreamCounters {
  std::atomic<uint64_t> frames_sent{0};
  std::atomic<uint64_t> bytes_sent{0};  // wire bytes: prefix + frame
  std::atomic<uint64_t> frames_received{0};
  std::atomic<uint64_t> bytes_received{0};
  std::atomic<uint64_t> slow_peer_drops{0};
  std::atomic<uint64_t> down_drops{0};
  std::atomic<uint64_t> reconnects{0};
  std::atomic<uint64_t> handshake_failures{0};
  std::atomic<uint64_t> checksum_resets{0};
  std::atomic<uint64_t> oversize_rejects{0};
};

/// Accepts connections on one port and yields checksum-valid envelopes in
/// connection order. A corrupt frame resets that connection.
class StreamListener {
 public:
  using FrameHandler =
      std::function<void(MessageEnvelope env, uint32_t channel_id, Lane lane)>;

  struct Options {
    uint16_t port = 0;
    uint64_t max_frame_bytes = kDefaultMaxPayloadBytes + 4096;
    /// When nonzero, hellos with a different channel id are rejected.
    uint32_t expected_channel_id = 0;
  };

  StreamListener(Options options, FrameHandler handler);
  ~StreamListener();

  void start();
  void stop();
  uint16_t port() const { return options_.port; }
  StreamCounters& counters() { return counters_; }

 private:
  void accept_loop();
  void connection_loop(Fd conn);

  Options options_;
  FrameHandler handler_;
  Fd listen_fd_;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex conns_mutex_;
  std::vector<std::thread> conn_threads_;
  StreamCounters counters_;
};

/// Client side of one channel. Owns a writer thread; send() enqueues with
/// bounded backpressure: it blocks up to send_timeout when the peer is slow,
/// then drops that message (counted). While disconnected, messages are
/// dropped immediately and reconnection proceeds with exponential backoff.
class StreamChannel {
 public:
  struct Options {
    SocketAddress remote;
    Lane lane = Lane::kEthernet;
    uint32_t channel_id = 0;
    uint64_t max_frame_bytes = kDefaultMaxPayloadBytes + 4096;
    std::chrono::milliseconds send_timeout{5000};
    size_t queue_depth = 32;
    std::chrono::milliseconds backoff_min{100};
    std::chrono::milliseconds backoff_max{3000};
    std::chrono::milliseconds connect_timeout{1000};
    ShaperPtr shaper;
  };

  enum class State : uint8_t { kConnecting = 0, kEstablished = 1, kFailed = 2 };

  explicit StreamChannel(Options options);
  ~StreamChannel();

  /// False when the frame was dropped (slow peer timeout or channel down).
  bool send(std::shared_ptr<const std::vector<uint8_t>> frame);

  State state() const { return State(state_.load(std::memory_order_acquire)); }
  void stop();
  StreamCounters& counters() { return counters_; }
  Lane lane() const { return options_.lane; }

  /// Blocks until the channel is established or the timeout elapses.
  bool wait_established(std::chrono::milliseconds timeout);

 private:
  void writer_loop();
  bool connect_once();

  Options options_;
  std::atomic<uint8_t> state_{0};
  std::atomic<bool> running_{true};
  BoundedQueue<std::shared_ptr<const std::vector<uint8_t>>> queue_;
  Fd socket_;
  std::thread writer_thread_;
  StreamCounters counters_;
};

}  // namespace rimbus
