#include "rimbus/bridge_config.hpp"

#include <fmt/core.h>

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace rimbus {

using nlohmann::json;

bool BridgeRoute::covers(const TopicKey& t, const ChipId& source, const ChipId& dest) const {
  return topic == t && source_chip == source &&
         std::find(dest_chips.begin(), dest_chips.end(), dest) != dest_chips.end();
}

namespace {

TopicScope parse_scope(const std::string& s, size_t entry) {
  if (s == "vehicle_area") return TopicScope::kVehicleArea;
  if (s == "chip_local") return TopicScope::kChipLocal;
  throw ConfigError(fmt::format("bridge route #{}: unknown scope '{}'", entry, s));
}

Lane parse_lane(const std::string& s, size_t entry) {
  if (s == "ethernet") return Lane::kEthernet;
  if (s == "pcie_virtual") return Lane::kPcieVirtual;
  throw ConfigError(fmt::format("bridge route #{}: unknown lane '{}'", entry, s));
}

}  // namespace

std::vector<BridgeRoute> parse_bridge_routes(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(fmt::format("bridge config parse error: {}", e.what()));
  }
  if (!j.is_array()) throw ConfigError("bridge config must be a JSON array of routes");

  std::vector<BridgeRoute> routes;
  // (topic, dest) -> first entry index, for duplicate diagnostics
  std::map<std::pair<TopicKey, ChipId>, size_t> seen;

  for (size_t i = 0; i < j.size(); i++) {
    const json& e = j[i];
    try {
      BridgeRoute r;
      r.index = i;
      r.topic.name = e.at("topic").get<std::string>();
      validate_topic_name(r.topic.name);
      r.topic.scope = parse_scope(e.value("scope", "vehicle_area"), i);
      r.source_chip = ChipId(e.at("source").get<std::string>());
      r.lane = parse_lane(e.value("lane", "ethernet"), i);
      for (const auto& d : e.at("dests")) r.dest_chips.emplace_back(d.get<std::string>());

      if (r.dest_chips.empty())
        throw ConfigError(fmt::format("bridge route #{} ('{}'): dests must be non-empty", i,
                                      r.topic.name));
      for (const auto& d : r.dest_chips) {
        if (d == r.source_chip)
          throw ConfigError(fmt::format(
              "bridge route #{} ('{}'): dest '{}' equals source", i, r.topic.name, d.label()));
        if (std::count(r.dest_chips.begin(), r.dest_chips.end(), d) > 1)
          throw ConfigError(fmt::format("bridge route #{} ('{}'): duplicate dest '{}'", i,
                                        r.topic.name, d.label()));
        auto [it, inserted] = seen.emplace(std::make_pair(r.topic, d), i);
        if (!inserted)
          throw ConfigError(fmt::format(
              "bridge routes #{} and #{} both forward topic '{}' to '{}'", it->second, i,
              r.topic.name, d.label()));
      }
      routes.push_back(std::move(r));
    } catch (const json::exception& ex) {
      throw ConfigError(fmt::format("bridge route #{}: {}", i, ex.what()));
    }
  }
  return routes;
}

std::vector<BridgeRoute> load_bridge_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open bridge config '{}'", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return parse_bridge_routes(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path, e.what()));
  }
}

}  // namespace rimbus
