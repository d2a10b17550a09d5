#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <string>

#include "rimbus/errors.hpp"

namespace rimbus {

/// A compute unit — the middleware's unit of locality. At desk scale a chip
/// is simulated as a group of OS processes sharing one chip id.
class ChipId {
 public:
  ChipId() = default;
  /// Throws ConfigError unless the label is non-empty ASCII of at most
  /// 16 bytes. Labels compare case-sensitively.
  explicit ChipId(std::string label);

  const std::string& label() const noexcept { return label_; }
  bool empty() const noexcept { return label_.empty(); }

  friend bool operator==(const ChipId&, const ChipId&) = default;
  friend auto operator<=>(const ChipId&, const ChipId&) = default;

 private:
  std::string label_;
};

enum class TopicScope : uint8_t { kChipLocal = 0, kVehicleArea = 1 };

const char* to_string(TopicScope scope);

/// Topic identity is the (scope, name) pair: the same name in two scopes is
/// two distinct topics and never cross-talks.
struct TopicKey {
  TopicScope scope = TopicScope::kChipLocal;
  std::string name;

  static TopicKey chip_local(std::string name) {
    return TopicKey{TopicScope::kChipLocal, std::move(name)};
  }
  static TopicKey vehicle_area(std::string name) {
    return TopicKey{TopicScope::kVehicleArea, std::move(name)};
  }

  friend bool operator==(const TopicKey&, const TopicKey&) = default;
  friend auto operator<=>(const TopicKey&, const TopicKey&) = default;
};

/// Throws ConfigError unless the name is non-empty, at most 256 bytes, and
/// contains no whitespace.
void validate_topic_name(const std::string& name);

/// 64-bit FNV-1a over scope byte + name, used for segment names and stable
/// topic ordinals.
uint64_t topic_hash(const TopicKey& topic);

enum class SizeClass : uint8_t { kSmall = 0, kLarge = 1 };

const char* to_string(SizeClass size);

/// Small iff payload_len < threshold; the boundary itself is Large.
/// Pure and total for threshold > 0.
SizeClass classify_size(uint64_t payload_len, uint64_t threshold);

enum class TransportKind : uint8_t {
  kIntra = 0,
  kShm = 1,
  kDatagram = 2,
  kBridgedStream = 3,
};

const char* to_string(TransportKind transport);

enum class Lane : uint8_t { kEthernet = 0, kPcieVirtual = 1 };

const char* to_string(Lane lane);

}  // namespace rimbus

template <>
struct std::hash<rimbus::ChipId> {
  size_t operator()(const rimbus::ChipId& c) const noexcept {
    return std::hash<std::string>{}(c.label());
  }
};

template <>
struct std::hash<rimbus::TopicKey> {
  size_t operator()(const rimbus::TopicKey& t) const noexcept {
    return std::hash<std::string>{}(t.name) * 31u + static_cast<size_t>(t.scope);
  }
};
