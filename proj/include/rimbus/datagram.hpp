#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <unordered_set>
#include <vector>

#include "rimbus/envelope.hpp"
#include "rimbus/net.hpp"
#include "rimbus/shaper.hpp"

namespace rimbus {

// Best-effort datagram transport: naive fragmentation, no retransmission,
// no pacing. A single lost fragment loses the whole message, which is the
// large-message fragility the loss experiments quantify.

constexpr uint32_t kFragmentMagic = 0x52494D46;  // "RIMF"
constexpr size_t kFragmentHeaderBytes = 16;      // magic | msg_seq | index | count

struct FragmentHeader {
  uint64_t msg_seq = 0;
  uint16_t frag_index = 0;
  uint16_t frag_count = 1;
};

void write_fragment_header(uint8_t* out, const FragmentHeader& header);
std::optional<FragmentHeader> parse_fragment_header(std::span<const uint8_t> datagram);

/// Fragments a frame of `frame_len` bytes under a datagram size cap.
size_t fragment_count(size_t frame_len, uint32_t max_datagram);

/// Deterministic Bernoulli dropper: for a fixed seed the drop decision
/// sequence depends only on call order, never on timing.
class LossInjector {
 public:
  LossInjector(double rate, uint64_t seed) : rate_(rate), rng_(seed) {}

  bool should_drop() {
    if (rate_ <= 0.0) return false;
    if (rate_ >= 1.0) return true;
    return dist_(rng_) < rate_;
  }

  double rate() const { return rate_; }

 private:
  double rate_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> dist_{0.0, 1.0};
};

struct DatagramCounters {
  std::atomic<uint64_t> messages_sent{0};
  std::atomic<uint64_t> datagrams_sent{0};
  std::atomic<uint64_t> bytes_sent{0};
  std::atomic<uint64_t> injected_drops{0};
  std::atomic<uint64_t> datagrams_received{0};
  std::atomic<uint64_t> messages_delivered{0};
  std::atomic<uint64_t> expired_assemblies{0};
  std::atomic<uint64_t> checksum_failures{0};
  std::atomic<uint64_t> duplicates_suppressed{0};
};

/// Splits one encoded envelope into ceil(len / (cap - header)) fragments and
/// sends them back to back to one peer. Throws SendError on hard socket
/// errors. The loss injector and shaper are optional.
class DatagramSender {
 public:
  DatagramSender(int fd, uint32_t max_datagram, DatagramCounters* counters,
                 std::atomic<uint64_t>* msg_seq_source)
      : fd_(fd), max_datagram_(max_datagram), counters_(counters), seq_(msg_seq_source) {}

  void set_loss_injector(LossInjector* injector) { loss_ = injector; }
  void set_shaper(ShaperPtr shaper) { shaper_ = std::move(shaper); }

  /// Returns the msg_seq used for this message.
  uint64_t send(const SocketAddress& peer, std::span<const uint8_t> frame);

 private:
  int fd_;
  uint32_t max_datagram_;
  DatagramCounters* counters_;
  std::atomic<uint64_t>* seq_;
  LossInjector* loss_ = nullptr;
  ShaperPtr shaper_;
};

/// Rebuilds complete envelopes from fragments keyed by (source, msg_seq).
/// Incomplete assemblies expire; duplicates are idempotent; completed
/// messages are delivered at most once.
class Reassembler {
 public:
  struct Options {
    uint64_t reassembly_timeout_ns = 200ull * 1000 * 1000;  // 200 ms
    size_t total_cap_bytes = 64ull << 20;
    size_t delivered_window = 4096;
    uint64_t max_payload_bytes = kDefaultMaxPayloadBytes;
  };

  explicit Reassembler(Options options, DatagramCounters* counters)
      : options_(options), counters_(counters) {}

  /// Feeds one received datagram; returns a complete, checksum-valid
  /// envelope when this datagram finishes an assembly.
  std::optional<MessageEnvelope> feed(const SocketAddress& from,
                                      std::span<const uint8_t> datagram, uint64_t now_ns);

  size_t pending_assemblies() const { return assemblies_.size(); }
  size_t pending_bytes() const { return pending_bytes_; }

 private:
  struct AssemblyKey {
    SocketAddress from;
    uint64_t msg_seq;
    friend auto operator<=>(const AssemblyKey&, const AssemblyKey&) = default;
  };
  struct Assembly {
    uint16_t frag_count = 0;
    std::map<uint16_t, std::vector<uint8_t>> chunks;
    size_t bytes = 0;
    uint64_t first_seen_ns = 0;
  };

  void expire(uint64_t now_ns);
  void evict_oldest();
  bool recently_delivered(const AssemblyKey& key) const;
  void mark_delivered(const AssemblyKey& key);

  Options options_;
  DatagramCounters* counters_;
  std::map<AssemblyKey, Assembly> assemblies_;
  size_t pending_bytes_ = 0;

  struct KeyHash {
    size_t operator()(const std::pair<uint64_t, uint64_t>& k) const {
      return std::hash<uint64_t>{}(k.first * 1000003 + k.second);
    }
  };
  std::unordered_set<std::pair<uint64_t, uint64_t>, KeyHash> delivered_;
  std::deque<std::pair<uint64_t, uint64_t>> delivered_order_;
};

}  // namespace rimbus
