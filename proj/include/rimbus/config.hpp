#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "rimbus/bridge_config.hpp"
#include "rimbus/envelope.hpp"
#include "rimbus/types.hpp"

namespace rimbus {

/// One discovery network: a multicast group and port, at either the
/// chip-local or the vehicle-area level.
struct Segment {
  TopicScope level = TopicScope::kVehicleArea;
  std::string group;
  uint16_t port = 0;

  friend bool operator==(const Segment&, const Segment&) = default;
};

struct SystemConfig {
  ChipId chip_id{"A1"};
  /// Deployment chip list in a fixed order; the position of a chip defines
  /// its index for port derivation. Must contain chip_id.
  std::vector<ChipId> chips{ChipId{"A1"}};

  uint64_t large_threshold_bytes = 1ull << 20;
  uint32_t datagram_cap_bytes = 61440;
  uint64_t max_payload_bytes = kDefaultMaxPayloadBytes;

  uint32_t shm_slot_count = 8;
  uint64_t shm_slot_size = 8ull << 20;
  std::string shm_dir = "/dev/shm";

  std::string vehicle_group = "239.255.42.1";
  uint16_t vehicle_port = 7400;
  std::string chip_local_group = "239.255.42.2";
  uint16_t chip_local_base_port = 7410;

  uint32_t beacon_interval_ms = 500;
  uint32_t liveness_timeout_intervals = 3;

  uint16_t datagram_base_port = 7500;
  uint16_t stream_base_port = 7800;

  std::vector<BridgeRoute> bridge_routes;

  /// Throws ConfigError on violated invariants (threshold 0, duplicate or
  /// overlapping ports, chip_id not in chips, bad groups).
  void validate() const;

  size_t chip_index(const ChipId& chip) const;  // throws ConfigError if unknown
  Segment vehicle_segment() const;
  Segment chip_local_segment(const ChipId& chip) const;
  /// Segment a topic's announcements belong on, for this config's chip.
  Segment segment_for_topic(const TopicKey& topic) const;

  uint64_t liveness_timeout_ns() const {
    return uint64_t(beacon_interval_ms) * 1000000ull * liveness_timeout_intervals;
  }

  bool topic_bridged_from(const TopicKey& topic, const ChipId& source) const;
  bool topic_bridged_between(const TopicKey& topic, const ChipId& source,
                             const ChipId& dest) const;
  bool topic_bridged_into(const TopicKey& topic, const ChipId& dest) const;
  const BridgeRoute* route_for(const TopicKey& topic, const ChipId& source) const;

  /// Listener port of the bridge ingress for (route, dest). Deterministic
  /// from the shared config so both sides derive the same value.
  uint16_t bridge_channel_port(const BridgeRoute& route, const ChipId& dest) const;

  /// Default path the bridge daemon for `chip` dumps its stats CSV to.
  std::string bridge_stats_path(const ChipId& chip) const;
};

/// Maps a topic to the segment it is announced on (chip-local topics go to
/// this chip's local segment; vehicle-area topics to the shared segment).
Segment segment_for(const TopicKey& topic, const SystemConfig& cfg);

SystemConfig parse_config(const std::string& json_text);
SystemConfig load_config(const std::string& path);

/// Resolves the config path from --config flag value or RIMBUS_CONFIG, else
/// returns defaults.
SystemConfig load_config_or_default(const std::string& cli_path);

std::string config_to_json(const SystemConfig& cfg);

}  // namespace rimbus
