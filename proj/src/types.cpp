#include "rimbus/types.hpp"

#include <fmt/core.h>

#include <cctype>

namespace rimbus {

ChipId::ChipId(std::string label) : label_(std::move(label)) {
  if (label_.empty()) throw ConfigError("chip id must be non-empty");
  if (label_.size() > 16)
    throw ConfigError(fmt::format("chip id '{}' exceeds 16 bytes", label_));
  for (unsigned char c : label_) {
    if (c < 0x21 || c > 0x7e)
      throw ConfigError(fmt::format("chip id '{}' must be printable ASCII", label_));
  }
}

const char* to_string(TopicScope scope) {
  return scope == TopicScope::kChipLocal ? "chip_local" : "vehicle_area";
}

const char* to_string(SizeClass size) {
  return size == SizeClass::kSmall ? "small" : "large";
}

const char* to_string(TransportKind transport) {
  switch (transport) {
    case TransportKind::kIntra: return "intra";
    case TransportKind::kShm: return "shm";
    case TransportKind::kDatagram: return "datagram";
    case TransportKind::kBridgedStream: return "bridged_stream";
  }
  return "?";
}

const char* to_string(Lane lane) {
  return lane == Lane::kEthernet ? "ethernet" : "pcie_virtual";
}

void validate_topic_name(const std::string& name) {
  if (name.empty()) throw ConfigError("topic name must be non-empty");
  if (name.size() > 256)
    throw ConfigError(fmt::format("topic name '{}…' exceeds 256 bytes", name.substr(0, 24)));
  for (unsigned char c : name) {
    if (std::isspace(c))
      throw ConfigError(fmt::format("topic name '{}' contains whitespace", name));
  }
}

uint64_t topic_hash(const TopicKey& topic) {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](uint8_t byte) {
    h ^= byte;
    h *= 0x100000001b3ull;
  };
  mix(static_cast<uint8_t>(topic.scope));
  for (unsigned char c : topic.name) mix(c);
  return h;
}

SizeClass classify_size(uint64_t payload_len, uint64_t threshold) {
  return payload_len < threshold ? SizeClass::kSmall : SizeClass::kLarge;
}

}  // namespace rimbus
