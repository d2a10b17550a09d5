#include "rimbus/datagram.hpp"

#include <fmt/core.h>
#include <sys/socket.h>

#include <cerrno>
#include <cstring>

#include "rimbus/errors.hpp"

namespace rimbus {

namespace {
void put_u32(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = uint8_t(v >> (8 * i));
}
void put_u64(uint8_t* p, uint64_t v) {
  for (int i = 0; i < 8; i++) p[i] = uint8_t(v >> (8 * i));
}
void put_u16(uint8_t* p, uint16_t v) {
  p[0] = uint8_t(v);
  p[1] = uint8_t(v >> 8);
}
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
uint16_t get_u16(const uint8_t* p) { return uint16_t(p[0]) | uint16_t(p[1]) << 8; }

uint64_t addr_key(const SocketAddress& a) {
  return (uint64_t(a.ip_be) << 16) | a.port;
}
}  // namespace

void write_fragment_header(uint8_t* out, const FragmentHeader& header) {
  put_u32(out, kFragmentMagic);
  put_u64(out + 4, header.msg_seq);
  put_u16(out + 12, header.frag_index);
  put_u16(out + 14, header.frag_count);
}

std::optional<FragmentHeader> parse_fragment_header(std::span<const uint8_t> datagram) {
  if (datagram.size() < kFragmentHeaderBytes) return std::nullopt;
  if (get_u32(datagram.data()) != kFragmentMagic) return std::nullopt;
  FragmentHeader h;
  h.msg_seq = get_u64(datagram.data() + 4);
  h.frag_index = get_u16(datagram.data() + 12);
  h.frag_count = get_u16(datagram.data() + 14);
  if (h.frag_count == 0 || h.frag_index >= h.frag_count) return std::nullopt;
  return h;
}

size_t fragment_count(size_t frame_len, uint32_t max_datagram) {
  const size_t budget = max_datagram > kFragmentHeaderBytes
                            ? max_datagram - kFragmentHeaderBytes
                            : 1;
  if (frame_len == 0) return 1;
  return (frame_len + budget - 1) / budget;
}

uint64_t DatagramSender::send(const SocketAddress& peer, std::span<const uint8_t> frame) {
  const size_t budget = max_datagram_ - kFragmentHeaderBytes;
  const size_t count = fragment_count(frame.size(), max_datagram_);
  if (count > 65535)
    throw SendError(fmt::format("frame of {} bytes needs {} fragments (max 65535)",
                                frame.size(), count));
  const uint64_t msg_seq = seq_->fetch_add(1, std::memory_order_relaxed);
  const sockaddr_in dst = peer.to_sockaddr();

  std::vector<uint8_t> datagram(max_datagram_);
  for (size_t i = 0; i < count; i++) {
    const size_t off = i * budget;
    const size_t n = std::min(budget, frame.size() - off);
    FragmentHeader h{msg_seq, uint16_t(i), uint16_t(count)};
    write_fragment_header(datagram.data(), h);
    std::memcpy(datagram.data() + kFragmentHeaderBytes, frame.data() + off, n);
    const size_t len = kFragmentHeaderBytes + n;

    if (shaper_) shaper_->acquire(len);
    if (loss_ && loss_->should_drop()) {
      counters_->injected_drops.fetch_add(1, std::memory_order_relaxed);
      continue;  // dropped on the simulated wire; still counts as sent bytes
    }
    ssize_t rc = sendto(fd_, datagram.data(), len, 0,
                        reinterpret_cast<const sockaddr*>(&dst), sizeof(dst));
    if (rc < 0) {
      if (errno == ECONNREFUSED || errno == EINTR) continue;  // stale peer; best effort
      throw SendError(fmt::format("sendto({}) failed: {}", peer.to_string(),
                                  std::strerror(errno)));
    }
  }
  counters_->messages_sent.fetch_add(1, std::memory_order_relaxed);
  counters_->datagrams_sent.fetch_add(count, std::memory_order_relaxed);
  counters_->bytes_sent.fetch_add(frame.size() + count * kFragmentHeaderBytes,
                                  std::memory_order_relaxed);
  return msg_seq;
}

bool Reassembler::recently_delivered(const AssemblyKey& key) const {
  return delivered_.count({addr_key(key.from), key.msg_seq}) > 0;
}

void Reassembler::mark_delivered(const AssemblyKey& key) {
  const std::pair<uint64_t, uint64_t> k{addr_key(key.from), key.msg_seq};
  if (delivered_.insert(k).second) {
    delivered_order_.push_back(k);
    while (delivered_order_.size() > options_.delivered_window) {
      delivered_.erase(delivered_order_.front());
      delivered_order_.pop_front();
    }
  }
}

void Reassembler::expire(uint64_t now_ns) {
  for (auto it = assemblies_.begin(); it != assemblies_.end();) {
    if (now_ns - it->second.first_seen_ns > options_.reassembly_timeout_ns) {
      pending_bytes_ -= it->second.bytes;
      counters_->expired_assemblies.fetch_add(1, std::memory_order_relaxed);
      it = assemblies_.erase(it);
    } else {
      ++it;
    }
  }
}

void Reassembler::evict_oldest() {
  auto oldest = assemblies_.end();
  for (auto it = assemblies_.begin(); it != assemblies_.end(); ++it)
    if (oldest == assemblies_.end() || it->second.first_seen_ns < oldest->second.first_seen_ns)
      oldest = it;
  if (oldest != assemblies_.end()) {
    pending_bytes_ -= oldest->second.bytes;
    counters_->expired_assemblies.fetch_add(1, std::memory_order_relaxed);
    assemblies_.erase(oldest);
  }
}

std::optional<MessageEnvelope> Reassembler::feed(const SocketAddress& from,
                                                 std::span<const uint8_t> datagram,
                                                 uint64_t now_ns) {
  counters_->datagrams_received.fetch_add(1, std::memory_order_relaxed);
  expire(now_ns);

  auto header = parse_fragment_header(datagram);
  if (!header) return std::nullopt;
  const AssemblyKey key{from, header->msg_seq};
  if (recently_delivered(key)) {
    counters_->duplicates_suppressed.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }

  auto payload = datagram.subspan(kFragmentHeaderBytes);
  Assembly& a = assemblies_[key];
  if (a.frag_count == 0) {
    a.frag_count = header->frag_count;
    a.first_seen_ns = now_ns;
  } else if (a.frag_count != header->frag_count) {
    // Conflicting fragment counts: drop the whole assembly.
    pending_bytes_ -= a.bytes;
    assemblies_.erase(key);
    counters_->checksum_failures.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }
  auto [it, inserted] = a.chunks.emplace(
      header->frag_index, std::vector<uint8_t>(payload.begin(), payload.end()));
  if (!inserted) {
    counters_->duplicates_suppressed.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }
  a.bytes += payload.size();
  pending_bytes_ += payload.size();
  while (pending_bytes_ > options_.total_cap_bytes && assemblies_.size() > 1) evict_oldest();

  if (a.chunks.size() < a.frag_count) return std::nullopt;

  // Complete: concatenate in index order and decode.
  std::vector<uint8_t> frame;
  frame.reserve(a.bytes);
  for (auto& [idx, chunk] : a.chunks) frame.insert(frame.end(), chunk.begin(), chunk.end());
  pending_bytes_ -= a.bytes;
  assemblies_.erase(key);
  mark_delivered(key);

  auto env = decode_envelope(frame, options_.max_payload_bytes);
  if (!env.ok()) {
    counters_->checksum_failures.fetch_add(1, std::memory_order_relaxed);
    return std::nullopt;
  }
  counters_->messages_delivered.fetch_add(1, std::memory_order_relaxed);
  return std::move(env).value();
}

}  // namespace rimbus
