#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "rimbus/config.hpp"
#include "rimbus/envelope.hpp"
#include "rimbus/net.hpp"
#include "rimbus/result.hpp"
#include "rimbus/types.hpp"

namespace rimbus {

enum class Role : uint8_t { kPublisher = 0, kSubscriber = 1 };
enum class BeaconKind : uint8_t { kAlive = 0, kBye = 1 };

const char* to_string(Role role);

/// Endpoints a publisher advertises so peers can reach it directly.
struct EndpointHints {
  std::string shm_segment;
  uint16_t datagram_port = 0;
  uint16_t stream_port = 0;

  friend bool operator==(const EndpointHints&, const EndpointHints&) = default;
};

/// Subscriber delivery preference bits carried in beacons.
constexpr uint8_t kFlagForceDatagram = 0x1;

struct Announcement {
  ChipId chip;
  std::string node;
  uint32_t pid = 0;
  TopicKey topic;
  Role role = Role::kPublisher;
  BeaconKind kind = BeaconKind::kAlive;
  uint8_t flags = 0;
  std::optional<EndpointHints> hints;  // present iff role == kPublisher
  uint64_t sent_ts_ns = 0;

  friend bool operator==(const Announcement&, const Announcement&) = default;
};

/// Beacon datagrams reuse the envelope framing with the reserved topic
/// "_disc"; the announcement itself is the payload. Result stays under the
/// 512-byte beacon budget for all valid announcements.
constexpr size_t kMaxBeaconBytes = 512;
extern const std::string kDiscTopicName;

std::vector<uint8_t> encode_beacon(const Announcement& ann, TopicScope segment_level,
                                   uint64_t beacon_seq);
Result<Announcement, DecodeError> decode_beacon(std::span<const uint8_t> datagram);

/// (chip, node, topic, role) — the identity of one topology entry.
struct ParticipantKey {
  ChipId chip;
  std::string node;
  TopicKey topic;
  Role role = Role::kPublisher;

  friend bool operator==(const ParticipantKey&, const ParticipantKey&) = default;
  friend auto operator<=>(const ParticipantKey&, const ParticipantKey&) = default;
};

struct TopologyEntry {
  ParticipantKey key;
  uint32_t pid = 0;
  uint8_t flags = 0;
  std::optional<EndpointHints> hints;
  SocketAddress source;  // observed beacon source; the peer's data address
  uint64_t last_seen_ns = 0;
};

/// Live map of announcements. One writer (the segment listeners), many
/// readers; queries exclude entries older than the liveness timeout.
class TopologyView {
 public:
  explicit TopologyView(uint64_t liveness_timeout_ns)
      : liveness_timeout_ns_(liveness_timeout_ns) {}

  /// Parses one beacon datagram and applies it: Alive upserts, Bye removes.
  /// Malformed datagrams are dropped and counted.
  void process_beacon(std::span<const uint8_t> datagram, const SocketAddress& source,
                      uint64_t now_ns);

  void apply(const Announcement& ann, const SocketAddress& source, uint64_t now_ns);

  std::vector<TopologyEntry> subscribers_of(const TopicKey& topic, uint64_t now_ns) const;
  std::vector<TopologyEntry> publishers_of(const TopicKey& topic, uint64_t now_ns) const;
  std::vector<TopologyEntry> snapshot(uint64_t now_ns) const;
  bool node_alive(const ChipId& chip, const std::string& node, uint64_t now_ns) const;

  uint64_t malformed_count() const { return malformed_.load(std::memory_order_relaxed); }
  uint64_t liveness_timeout_ns() const { return liveness_timeout_ns_; }

 private:
  bool fresh(const TopologyEntry& e, uint64_t now_ns) const {
    return now_ns - e.last_seen_ns <= liveness_timeout_ns_;
  }

  const uint64_t liveness_timeout_ns_;
  mutable std::mutex mutex_;
  std::map<ParticipantKey, TopologyEntry> entries_;
  std::atomic<uint64_t> malformed_{0};
};

/// Pin-down of the communication-mode switching table. Pure and total:
///   same process                       -> Intra
///   same chip, different process       -> Shm
///   cross chip, Small or unbridged     -> Datagram
///   cross chip, Large and bridged      -> BridgedStream
struct Location {
  ChipId chip;
  uint32_t pid = 0;
};

TransportKind select_transport(const Location& pub, const Location& sub, SizeClass size,
                               bool bridged);

/// Joins discovery segments, announces local entities every beacon interval,
/// and maintains the topology view from received beacons.
///
/// The per-segment announcer socket doubles as this participant's datagram
/// data endpoint: peers learn its address from beacon source addresses, so
/// subscriber announcements need no endpoint hints.
class DiscoveryParticipant {
 public:
  DiscoveryParticipant(const SystemConfig& cfg, std::string node_name);
  ~DiscoveryParticipant();

  DiscoveryParticipant(const DiscoveryParticipant&) = delete;
  DiscoveryParticipant& operator=(const DiscoveryParticipant&) = delete;

  /// Starts announcing (chip, node, topic, role); sends one immediate beacon.
  void add_local(const TopicKey& topic, Role role, std::optional<EndpointHints> hints,
                 uint8_t flags = 0);
  /// Stops announcing and sends a Bye beacon.
  void remove_local(const TopicKey& topic, Role role);

  TopologyView& view() { return view_; }
  const TopologyView& view() const { return view_; }

  /// The vehicle-segment data socket (announcer); -1 until the vehicle
  /// segment is joined.
  int vehicle_data_fd() const;
  SocketAddress vehicle_data_address() const;

  /// Lazily joins the vehicle segment (chip-local is joined at start).
  void join_vehicle_segment();

  void start();
  void stop();  // sends Bye for all local entities

  const ChipId& chip() const { return cfg_.chip_id; }
  const std::string& node_name() const { return node_name_; }

 private:
  struct SegmentRuntime {
    Segment segment;
    Fd announcer;   // unicast-bound; mcast TX + data RX
    Fd listener;    // group-joined; beacon RX
    std::thread listen_thread;
  };

  void announce_loop();
  void listen_loop(SegmentRuntime* rt);
  void send_beacon(const Announcement& ann, SegmentRuntime* rt);
  SegmentRuntime* runtime_for(TopicScope level);
  void join_segment(TopicScope level);

  SystemConfig cfg_;
  std::string node_name_;

  mutable std::mutex mutex_;
  std::vector<std::unique_ptr<SegmentRuntime>> segments_;
  struct LocalEntity {
    TopicKey topic;
    Role role;
    std::optional<EndpointHints> hints;
    uint8_t flags;
  };
  std::vector<LocalEntity> locals_;

  TopologyView view_;
  std::atomic<bool> running_{false};
  std::thread announce_thread_;
  std::atomic<uint64_t> beacon_seq_{0};
};

}  // namespace rimbus
