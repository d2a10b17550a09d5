#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rimbus/types.hpp"

namespace rimbus {

/// Static forwarding rule: messages of `topic` published on `source_chip`
/// are forwarded once per destination chip over the given lane.
struct BridgeRoute {
  TopicKey topic;
  ChipId source_chip;
  std::vector<ChipId> dest_chips;
  Lane lane = Lane::kEthernet;
  size_t index = 0;  // position in the config, used in diagnostics and ports

  bool covers(const TopicKey& t, const ChipId& source, const ChipId& dest) const;
};

/// Parses and validates a route list from JSON text of the form
///   [{"topic": "...", "scope": "vehicle_area", "source": "A1",
///     "dests": ["B1"], "lane": "ethernet"}, ...]
/// Rejects self-destinations, empty dest lists, duplicate dests, unknown
/// lanes/scopes, and duplicate (topic, dest) pairs across entries, naming the
/// offending entries. Throws ConfigError. An empty list is valid.
std::vector<BridgeRoute> parse_bridge_routes(const std::string& json_text);

/// Reads the file at path and parses it. Throws ConfigError with the path
/// and parser context on failure.
std::vector<BridgeRoute> load_bridge_config(const std::string& path);

}  // namespace rimbus
