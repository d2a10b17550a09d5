#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "rimbus/result.hpp"
#include "rimbus/types.hpp"

namespace rimbus {

/// The unit of transfer on every path. Payloads are opaque bytes; seq is a
/// per-publisher, per-topic counter starting at 0.
struct MessageEnvelope {
  TopicKey topic;
  uint64_t seq = 0;
  uint64_t publish_ts_ns = 0;
  std::vector<uint8_t> payload;
  uint32_t checksum = 0;

  friend bool operator==(const MessageEnvelope&, const MessageEnvelope&) = default;
};

/// CRC-32 (IEEE polynomial, reflected, init 0xFFFFFFFF, final XOR
/// 0xFFFFFFFF). checksum of the empty sequence is 0.
uint32_t checksum(std::span<const uint8_t> payload);

constexpr uint32_t kEnvelopeMagic = 0x52494D43;  // "RIMC"
constexpr uint8_t kEnvelopeVersion = 1;
constexpr uint64_t kDefaultMaxPayloadBytes = 64ull << 20;

/// Fixed bytes of the canonical layout excluding topic name and payload:
/// magic u32 | version u8 | scope u8 | name_len u16 | seq u64 | ts u64 |
/// payload_len u32 | crc32 u32.
constexpr size_t kEnvelopeFixedBytes = 32;

/// Builds an envelope with the checksum computed over the payload.
MessageEnvelope make_envelope(TopicKey topic, uint64_t seq, uint64_t publish_ts_ns,
                              std::vector<uint8_t> payload);

size_t encoded_size(const MessageEnvelope& env);

/// Canonical little-endian encoding. Throws EncodingError if the payload
/// exceeds max_payload or the topic name exceeds 65535 bytes.
std::vector<uint8_t> encode_envelope(const MessageEnvelope& env,
                                     uint64_t max_payload = kDefaultMaxPayloadBytes);

/// Writes the encoding into out, which must hold encoded_size(env) bytes.
void encode_envelope_into(const MessageEnvelope& env, uint8_t* out);

enum class DecodeError : uint8_t {
  kShortBuffer,
  kBadMagic,
  kBadVersion,
  kBadScope,
  kBadTopic,
  kOversize,
  kChecksumMismatch,
  kTrailingBytes,
};

const char* to_string(DecodeError err);

/// Strict inverse of encode_envelope: the whole buffer must be one frame and
/// the payload checksum must verify.
Result<MessageEnvelope, DecodeError> decode_envelope(
    std::span<const uint8_t> bytes, uint64_t max_payload = kDefaultMaxPayloadBytes);

}  // namespace rimbus
