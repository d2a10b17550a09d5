#include <doctest.h>

#include <random>
#include <string>

#include "rimbus/config.hpp"
#include "rimbus/envelope.hpp"
#include "rimbus/types.hpp"

using namespace rimbus;

namespace {

// Independent bit-by-bit CRC-32 used as the oracle for the fast path.
uint32_t crc32_reference(std::span<const uint8_t> data) {
  uint32_t crc = 0xFFFFFFFFu;
  for (uint8_t byte : data) {
    crc ^= byte;
    for (int i = 0; i < 8; i++)
      crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
  }
  return crc ^ 0xFFFFFFFFu;
}

std::vector<uint8_t> random_bytes(std::mt19937_64& rng, size_t n) {
  std::vector<uint8_t> v(n);
  for (auto& b : v) b = uint8_t(rng());
  return v;
}

MessageEnvelope random_envelope(std::mt19937_64& rng, size_t max_payload = 4096) {
  static const char* names[] = {"lidar/raw", "camera/front", "pose", "x", "a/b/c/d"};
  TopicKey topic{rng() % 2 ? TopicScope::kVehicleArea : TopicScope::kChipLocal,
                 names[rng() % 5]};
  return make_envelope(std::move(topic), rng(), rng(),
                       random_bytes(rng, rng() % (max_payload + 1)));
}

}  // namespace

TEST_CASE("classify_size thresholds") {
  CHECK(classify_size(102400, 1048576) == SizeClass::kSmall);
  CHECK(classify_size(1048576, 1048576) == SizeClass::kLarge);  // boundary is Large
  CHECK(classify_size(6291456, 1048576) == SizeClass::kLarge);
  CHECK(classify_size(0, 1) == SizeClass::kSmall);
  // Pure: repeated calls agree.
  for (int i = 0; i < 100; i++) CHECK(classify_size(12345, 4096) == SizeClass::kLarge);
}

TEST_CASE("crc32 standard values and oracle agreement") {
  CHECK(checksum({}) == 0x00000000u);
  const std::string check = "123456789";
  std::span<const uint8_t> span{reinterpret_cast<const uint8_t*>(check.data()), check.size()};
  CHECK(checksum(span) == 0xCBF43926u);
  CHECK(crc32_reference(span) == 0xCBF43926u);

  std::mt19937_64 rng(7);
  for (int i = 0; i < 200; i++) {
    auto data = random_bytes(rng, rng() % 512);
    CHECK(checksum(data) == crc32_reference(data));
    CHECK(checksum(data) == checksum(std::vector<uint8_t>(data)));  // determinism
  }
}

TEST_CASE("crc32 detects single-byte corruption") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 300; i++) {
    auto data = random_bytes(rng, 1 + rng() % 2048);
    const uint32_t clean = checksum(data);
    const size_t pos = rng() % data.size();
    const uint8_t flip = uint8_t(1u << (rng() % 8));
    data[pos] ^= flip;
    CHECK(checksum(data) != clean);
  }
}

TEST_CASE("envelope: empty payload is a header-only frame") {
  auto env = make_envelope(TopicKey::vehicle_area("pose"), 0, 42, {});
  auto bytes = encode_envelope(env);
  CHECK(bytes.size() == kEnvelopeFixedBytes + 4);  // fixed header + name
  CHECK(env.checksum == 0);
  auto back = decode_envelope(bytes);
  REQUIRE(back.ok());
  CHECK(back.value() == env);
}

TEST_CASE("envelope: canonical layout is bit-exact") {
  auto env = make_envelope(TopicKey::chip_local("x"), 0x1122334455667788ull,
                           0x0102030405060708ull, {0xAB});
  auto b = encode_envelope(env);
  REQUIRE(b.size() == 32 + 1 + 1);
  // magic "RIMC" little-endian
  CHECK(b[0] == 0x43); CHECK(b[1] == 0x4D); CHECK(b[2] == 0x49); CHECK(b[3] == 0x52);
  CHECK(b[4] == 1);    // version
  CHECK(b[5] == 0);    // scope chip_local
  CHECK(b[6] == 1); CHECK(b[7] == 0);  // name_len
  CHECK(b[8] == 'x');
  CHECK(b[9] == 0x88);   // seq LE
  CHECK(b[16] == 0x11);
  CHECK(b[17] == 0x08);  // ts LE
  CHECK(b[25] == 1); CHECK(b[26] == 0); CHECK(b[27] == 0); CHECK(b[28] == 0);  // payload_len
  CHECK(b[33] == 0xAB);
}

TEST_CASE("envelope round-trip identity over random envelopes") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 2000; i++) {
    auto env = random_envelope(rng);
    auto back = decode_envelope(encode_envelope(env));
    REQUIRE(back.ok());
    CHECK(back.value() == env);
  }
}

TEST_CASE("envelope: corrupted byte fails checksum") {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; i++) {
    auto env = random_envelope(rng);
    if (env.payload.empty()) continue;
    auto bytes = encode_envelope(env);
    const size_t payload_off = kEnvelopeFixedBytes + env.topic.name.size();
    bytes[payload_off + rng() % env.payload.size()] ^= uint8_t(1 + rng() % 255);
    auto back = decode_envelope(bytes);
    REQUIRE_FALSE(back.ok());
    CHECK(back.error() == DecodeError::kChecksumMismatch);
  }
}

TEST_CASE("envelope: oversize and malformed frames are rejected") {
  auto env = make_envelope(TopicKey::vehicle_area("big"), 1, 2, std::vector<uint8_t>(128));
  CHECK_THROWS_AS(encode_envelope(env, 64), EncodingError);

  auto bytes = encode_envelope(env);
  CHECK_FALSE(decode_envelope({bytes.data(), 10}).ok());
  auto trailing = bytes;
  trailing.push_back(0);
  CHECK(decode_envelope(trailing).error() == DecodeError::kTrailingBytes);
  auto bad_magic = bytes;
  bad_magic[0] ^= 0xFF;
  CHECK(decode_envelope(bad_magic).error() == DecodeError::kBadMagic);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK(decode_envelope(bad_version).error() == DecodeError::kBadVersion);
  CHECK(decode_envelope(bytes, 64).error() == DecodeError::kOversize);
}

TEST_CASE("topic and chip validation") {
  CHECK_THROWS_AS(ChipId(""), ConfigError);
  CHECK_THROWS_AS(ChipId("seventeen-bytes-x"), ConfigError);
  CHECK(ChipId("A1") == ChipId("A1"));
  CHECK_FALSE(ChipId("A1") == ChipId("a1"));  // case-sensitive

  CHECK_THROWS_AS(validate_topic_name(""), ConfigError);
  CHECK_THROWS_AS(validate_topic_name("has space"), ConfigError);
  CHECK_THROWS_AS(validate_topic_name(std::string(257, 'a')), ConfigError);
  CHECK_NOTHROW(validate_topic_name("camera/front"));

  // Same name, different scopes: distinct identities, distinct hashes.
  CHECK(TopicKey::chip_local("img") != TopicKey::vehicle_area("img"));
  CHECK(topic_hash(TopicKey::chip_local("img")) != topic_hash(TopicKey::vehicle_area("img")));
}

TEST_CASE("system config validation") {
  SystemConfig cfg;
  cfg.chips = {ChipId{"A1"}, ChipId{"A2"}, ChipId{"B1"}, ChipId{"B2"}};
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.chip_index(ChipId{"B1"}) == 2);
  CHECK(cfg.chip_local_segment(ChipId{"A2"}).port == cfg.chip_local_base_port + 1);

  SystemConfig bad = cfg;
  bad.large_threshold_bytes = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.vehicle_port = bad.chip_local_base_port;  // collision
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.chip_id = ChipId{"Z9"};
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = cfg;
  bad.shm_slot_count = 6;  // not a power of two
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("config json round-trip") {
  SystemConfig cfg;
  cfg.chip_id = ChipId{"B2"};
  cfg.chips = {ChipId{"A1"}, ChipId{"B2"}};
  cfg.large_threshold_bytes = 2 << 20;
  cfg.bridge_routes = parse_bridge_routes(
      R"([{"topic":"camera/front","scope":"vehicle_area","source":"A1","dests":["B2"],"lane":"pcie_virtual"}])");
  cfg.validate();

  SystemConfig back = parse_config(config_to_json(cfg));
  CHECK(back.chip_id == cfg.chip_id);
  CHECK(back.chips == cfg.chips);
  CHECK(back.large_threshold_bytes == cfg.large_threshold_bytes);
  REQUIRE(back.bridge_routes.size() == 1);
  CHECK(back.bridge_routes[0].topic == cfg.bridge_routes[0].topic);
  CHECK(back.bridge_routes[0].lane == Lane::kPcieVirtual);
  CHECK(back.bridge_channel_port(back.bridge_routes[0], ChipId{"B2"}) ==
        back.stream_base_port + 64);
}

TEST_CASE("bridge route validation") {
  // Valid single route.
  auto routes = parse_bridge_routes(
      R"([{"topic":"camera/front","source":"A2","dests":["A1"],"lane":"pcie_virtual"}])");
  REQUIRE(routes.size() == 1);
  CHECK(routes[0].covers(TopicKey::vehicle_area("camera/front"), ChipId{"A2"}, ChipId{"A1"}));

  // dest == source rejected.
  CHECK_THROWS_WITH_AS(
      (void)parse_bridge_routes(R"([{"topic":"t","source":"A1","dests":["A1"]}])"),
      doctest::Contains("equals source"), ConfigError);

  // Empty dests rejected.
  CHECK_THROWS_AS((void)parse_bridge_routes(R"([{"topic":"t","source":"A1","dests":[]}])"),
                  ConfigError);

  // Duplicate (topic, dest) across entries names both entries.
  CHECK_THROWS_WITH_AS(
      (void)parse_bridge_routes(
          R"([{"topic":"t","source":"A1","dests":["B1"]},
              {"topic":"t","source":"A2","dests":["B1"]}])"),
      doctest::Contains("#0 and #1"), ConfigError);

  // Unknown lane rejected.
  CHECK_THROWS_AS(
      (void)parse_bridge_routes(R"([{"topic":"t","source":"A1","dests":["B1"],"lane":"isdn"}])"),
      ConfigError);

  // Empty list is valid (bridge idles).
  CHECK(parse_bridge_routes("[]").empty());
}
