#include "rimbus/config.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rimbus {

using nlohmann::json;

void SystemConfig::validate() const {
  if (large_threshold_bytes == 0) throw ConfigError("large_threshold_bytes must be > 0");
  if (datagram_cap_bytes < 64 || datagram_cap_bytes > 65507)
    throw ConfigError("datagram_cap_bytes must be in [64, 65507]");
  if (shm_slot_count == 0 || (shm_slot_count & (shm_slot_count - 1)) != 0)
    throw ConfigError("shm_slot_count must be a power of two");
  if (shm_slot_size < kEnvelopeFixedBytes + 256)
    throw ConfigError("shm_slot_size too small for any envelope");
  if (chips.empty()) throw ConfigError("chips list must be non-empty");
  if (std::find(chips.begin(), chips.end(), chip_id) == chips.end())
    throw ConfigError(fmt::format("chip_id '{}' is not in the chips list", chip_id.label()));
  std::set<ChipId> uniq(chips.begin(), chips.end());
  if (uniq.size() != chips.size()) throw ConfigError("chips list has duplicates");

  // All discovery and data ports must be pairwise distinct.
  std::set<uint32_t> ports;
  auto add_port = [&ports](uint32_t p, const char* what) {
    if (p == 0 || p > 65535) throw ConfigError(fmt::format("{} port {} out of range", what, p));
    if (!ports.insert(p).second)
      throw ConfigError(fmt::format("{} port {} collides with another configured port", what, p));
  };
  add_port(vehicle_port, "vehicle segment");
  for (size_t i = 0; i < chips.size(); i++)
    add_port(chip_local_base_port + uint32_t(i), "chip-local segment");
  for (size_t i = 0; i < chips.size() * 32; i++) add_port(datagram_base_port + uint32_t(i), "datagram");
  // Stream ports: one block per (dest chip, route); bounded by 64 routes.
  if (bridge_routes.size() > 64) throw ConfigError("at most 64 bridge routes supported");
  for (size_t d = 0; d < chips.size(); d++)
    for (size_t r = 0; r < std::max<size_t>(bridge_routes.size(), 1); r++)
      add_port(stream_base_port + uint32_t(d * 64 + r), "stream");
  if (beacon_interval_ms == 0) throw ConfigError("beacon_interval_ms must be > 0");
  if (liveness_timeout_intervals == 0)
    throw ConfigError("liveness_timeout_intervals must be > 0");

  for (const auto& route : bridge_routes) {
    auto known = [this](const ChipId& c) {
      return std::find(chips.begin(), chips.end(), c) != chips.end();
    };
    if (!known(route.source_chip))
      throw ConfigError(fmt::format("bridge route #{}: unknown source chip '{}'", route.index,
                                    route.source_chip.label()));
    for (const auto& d : route.dest_chips)
      if (!known(d))
        throw ConfigError(
            fmt::format("bridge route #{}: unknown dest chip '{}'", route.index, d.label()));
  }
}

size_t SystemConfig::chip_index(const ChipId& chip) const {
  auto it = std::find(chips.begin(), chips.end(), chip);
  if (it == chips.end())
    throw ConfigError(fmt::format("chip '{}' is not in the chips list", chip.label()));
  return size_t(it - chips.begin());
}

Segment SystemConfig::vehicle_segment() const {
  return Segment{TopicScope::kVehicleArea, vehicle_group, vehicle_port};
}

Segment SystemConfig::chip_local_segment(const ChipId& chip) const {
  // Chip-local segments on a shared host are isolated by port: same group,
  // base_port + chip index.
  return Segment{TopicScope::kChipLocal, chip_local_group,
                 uint16_t(chip_local_base_port + chip_index(chip))};
}

Segment SystemConfig::segment_for_topic(const TopicKey& topic) const {
  return segment_for(topic, *this);
}

Segment segment_for(const TopicKey& topic, const SystemConfig& cfg) {
  if (topic.scope == TopicScope::kChipLocal) return cfg.chip_local_segment(cfg.chip_id);
  return cfg.vehicle_segment();
}

bool SystemConfig::topic_bridged_from(const TopicKey& topic, const ChipId& source) const {
  return route_for(topic, source) != nullptr;
}

bool SystemConfig::topic_bridged_between(const TopicKey& topic, const ChipId& source,
                                         const ChipId& dest) const {
  for (const auto& r : bridge_routes)
    if (r.covers(topic, source, dest)) return true;
  return false;
}

bool SystemConfig::topic_bridged_into(const TopicKey& topic, const ChipId& dest) const {
  for (const auto& r : bridge_routes)
    if (r.topic == topic &&
        std::find(r.dest_chips.begin(), r.dest_chips.end(), dest) != r.dest_chips.end())
      return true;
  return false;
}

const BridgeRoute* SystemConfig::route_for(const TopicKey& topic, const ChipId& source) const {
  for (const auto& r : bridge_routes)
    if (r.topic == topic && r.source_chip == source) return &r;
  return nullptr;
}

uint16_t SystemConfig::bridge_channel_port(const BridgeRoute& route, const ChipId& dest) const {
  return uint16_t(stream_base_port + chip_index(dest) * 64 + route.index);
}

std::string SystemConfig::bridge_stats_path(const ChipId& chip) const {
  return fmt::format("{}/rimbus.bridge.{}.stats.csv", shm_dir, chip.label());
}

namespace {

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

SystemConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config parse error: {}", e.what()));
  }

  SystemConfig cfg;
  try {
    if (j.contains("chip_id")) cfg.chip_id = ChipId(j.at("chip_id").get<std::string>());
    if (j.contains("chips")) {
      cfg.chips.clear();
      for (const auto& c : j.at("chips")) cfg.chips.emplace_back(c.get<std::string>());
    } else {
      cfg.chips = {cfg.chip_id};
    }
    maybe(j, "large_threshold_bytes", cfg.large_threshold_bytes);
    maybe(j, "datagram_cap_bytes", cfg.datagram_cap_bytes);
    maybe(j, "max_payload_bytes", cfg.max_payload_bytes);
    maybe(j, "shm_slot_count", cfg.shm_slot_count);
    maybe(j, "shm_slot_size", cfg.shm_slot_size);
    maybe(j, "shm_dir", cfg.shm_dir);
    if (j.contains("segments")) {
      const json& s = j.at("segments");
      if (s.contains("vehicle_area")) {
        maybe(s.at("vehicle_area"), "group", cfg.vehicle_group);
        maybe(s.at("vehicle_area"), "port", cfg.vehicle_port);
      }
      if (s.contains("chip_local")) {
        maybe(s.at("chip_local"), "group", cfg.chip_local_group);
        maybe(s.at("chip_local"), "base_port", cfg.chip_local_base_port);
      }
    }
    maybe(j, "beacon_interval_ms", cfg.beacon_interval_ms);
    maybe(j, "liveness_timeout_intervals", cfg.liveness_timeout_intervals);
    if (j.contains("datagram")) maybe(j.at("datagram"), "base_port", cfg.datagram_base_port);
    if (j.contains("stream")) maybe(j.at("stream"), "base_port", cfg.stream_base_port);
    if (j.contains("bridge") && j.at("bridge").contains("routes"))
      cfg.bridge_routes = parse_bridge_routes(j.at("bridge").at("routes").dump());
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("config field error: {}", e.what()));
  }
  cfg.validate();
  return cfg;
}

SystemConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

SystemConfig load_config_or_default(const std::string& cli_path) {
  if (!cli_path.empty()) return load_config(cli_path);
  if (const char* env = std::getenv("RIMBUS_CONFIG"); env && *env) return load_config(env);
  SystemConfig cfg;
  cfg.validate();
  return cfg;
}

std::string config_to_json(const SystemConfig& cfg) {
  json j;
  j["chip_id"] = cfg.chip_id.label();
  json chips = json::array();
  for (const auto& c : cfg.chips) chips.push_back(c.label());
  j["chips"] = chips;
  j["large_threshold_bytes"] = cfg.large_threshold_bytes;
  j["datagram_cap_bytes"] = cfg.datagram_cap_bytes;
  j["max_payload_bytes"] = cfg.max_payload_bytes;
  j["shm_slot_count"] = cfg.shm_slot_count;
  j["shm_slot_size"] = cfg.shm_slot_size;
  j["shm_dir"] = cfg.shm_dir;
  j["segments"]["vehicle_area"]["group"] = cfg.vehicle_group;
  j["segments"]["vehicle_area"]["port"] = cfg.vehicle_port;
  j["segments"]["chip_local"]["group"] = cfg.chip_local_group;
  j["segments"]["chip_local"]["base_port"] = cfg.chip_local_base_port;
  j["beacon_interval_ms"] = cfg.beacon_interval_ms;
  j["liveness_timeout_intervals"] = cfg.liveness_timeout_intervals;
  j["datagram"]["base_port"] = cfg.datagram_base_port;
  j["stream"]["base_port"] = cfg.stream_base_port;
  json routes = json::array();
  for (const auto& r : cfg.bridge_routes) {
    json e;
    e["topic"] = r.topic.name;
    e["scope"] = to_string(r.topic.scope);
    e["source"] = r.source_chip.label();
    json dests = json::array();
    for (const auto& d : r.dest_chips) dests.push_back(d.label());
    e["dests"] = dests;
    e["lane"] = to_string(r.lane);
    routes.push_back(e);
  }
  j["bridge"]["routes"] = routes;
  return j.dump(2);
}

}  // namespace rimbus
