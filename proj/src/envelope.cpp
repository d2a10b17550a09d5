#include "rimbus/envelope.hpp"

#include <fmt/core.h>
#include <zlib.h>

#include <cstring>

namespace rimbus {

uint32_t checksum(std::span<const uint8_t> payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks to stay safe for >4GiB spans.
  size_t off = 0;
  while (off < payload.size()) {
    const size_t chunk = std::min<size_t>(payload.size() - off, 1u << 30);
    crc = crc32(crc, payload.data() + off, static_cast<uInt>(chunk));
    off += chunk;
  }
  return static_cast<uint32_t>(crc);
}

MessageEnvelope make_envelope(TopicKey topic, uint64_t seq, uint64_t publish_ts_ns,
                              std::vector<uint8_t> payload) {
  MessageEnvelope env;
  env.topic = std::move(topic);
  env.seq = seq;
  env.publish_ts_ns = publish_ts_ns;
  env.checksum = checksum(payload);
  env.payload = std::move(payload);
  return env;
}

size_t encoded_size(const MessageEnvelope& env) {
  return kEnvelopeFixedBytes + env.topic.name.size() + env.payload.size();
}

namespace {

void put_u16(uint8_t* p, uint16_t v) {
  p[0] = uint8_t(v);
  p[1] = uint8_t(v >> 8);
}
void put_u32(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = uint8_t(v >> (8 * i));
}
void put_u64(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = uint8_t(v >> (8 * i));
}
uint16_t get_u16(const uint8_t* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }
uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint32_t(p[i]) << (8 * i);
  return v;
}
uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; i++) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

void encode_envelope_into(const MessageEnvelope& env, uint8_t* out) {
  const size_t n = env.topic.name.size();
  put_u32(out, kEnvelopeMagic);
  out[4] = kEnvelopeVersion;
  out[5] = static_cast<uint8_t>(env.topic.scope);
  put_u16(out + 6, static_cast<uint16_t>(n));
  std::memcpy(out + 8, env.topic.name.data(), n);
  put_u64(out + 8 + n, env.seq);
  put_u64(out + 16 + n, env.publish_ts_ns);
  put_u32(out + 24 + n, static_cast<uint32_t>(env.payload.size()));
  put_u32(out + 28 + n, env.checksum);
  std::memcpy(out + 32 + n, env.payload.data(), env.payload.size());
}

std::vector<uint8_t> encode_envelope(const MessageEnvelope& env, uint64_t max_payload) {
  if (env.topic.name.empty() || env.topic.name.size() > 65535)
    throw EncodingError(fmt::format("topic name length {} out of range", env.topic.name.size()));
  if (env.payload.size() > max_payload)
    throw EncodingError(fmt::format("payload of {} bytes exceeds max {}", env.payload.size(),
                                    max_payload));
  std::vector<uint8_t> out(encoded_size(env));
  encode_envelope_into(env, out.data());
  return out;
}

const char* to_string(DecodeError err) {
  switch (err) {
    case DecodeError::kShortBuffer: return "short buffer";
    case DecodeError::kBadMagic: return "bad magic";
    case DecodeError::kBadVersion: return "bad version";
    case DecodeError::kBadScope: return "bad scope";
    case DecodeError::kBadTopic: return "bad topic";
    case DecodeError::kOversize: return "oversize";
    case DecodeError::kChecksumMismatch: return "checksum mismatch";
    case DecodeError::kTrailingBytes: return "trailing bytes";
  }
  return "?";
}

Result<MessageEnvelope, DecodeError> decode_envelope(std::span<const uint8_t> bytes,
                                                     uint64_t max_payload) {
  if (bytes.size() < kEnvelopeFixedBytes) return DecodeError::kShortBuffer;
  const uint8_t* p = bytes.data();
  if (get_u32(p) != kEnvelopeMagic) return DecodeError::kBadMagic;
  if (p[4] != kEnvelopeVersion) return DecodeError::kBadVersion;
  if (p[5] > 1) return DecodeError::kBadScope;
  const size_t name_len = get_u16(p + 6);
  if (name_len == 0) return DecodeError::kBadTopic;
  if (bytes.size() < kEnvelopeFixedBytes + name_len) return DecodeError::kShortBuffer;
  const size_t payload_len = get_u32(p + 24 + name_len);
  if (payload_len > max_payload) return DecodeError::kOversize;
  if (bytes.size() < kEnvelopeFixedBytes + name_len + payload_len)
    return DecodeError::kShortBuffer;
  if (bytes.size() > kEnvelopeFixedBytes + name_len + payload_len)
    return DecodeError::kTrailingBytes;

  MessageEnvelope env;
  env.topic.scope = static_cast<TopicScope>(p[5]);
  env.topic.name.assign(reinterpret_cast<const char*>(p + 8), name_len);
  env.seq = get_u64(p + 8 + name_len);
  env.publish_ts_ns = get_u64(p + 16 + name_len);
  env.checksum = get_u32(p + 28 + name_len);
  env.payload.assign(p + 32 + name_len, p + 32 + name_len + payload_len);
  if (checksum(env.payload) != env.checksum) return DecodeError::kChecksumMismatch;
  return env;
}

}  // namespace rimbus
