#include "rimbus/discovery.hpp"

#include <fmt/core.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstring>

#include "rimbus/clock.hpp"
#include "rimbus/log.hpp"

namespace rimbus {

const std::string kDiscTopicName = "_disc";

const char* to_string(Role role) {
  return role == Role::kPublisher ? "publisher" : "subscriber";
}

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(uint8_t(v));
  out.push_back(uint8_t(v >> 8));
}
void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; i++) out.push_back(uint8_t(v >> (8 * i)));
}
void put_str8(std::vector<uint8_t>& out, const std::string& s) {
  out.push_back(uint8_t(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}
void put_str16(std::vector<uint8_t>& out, const std::string& s) {
  put_u16(out, uint16_t(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct Cursor {
  const uint8_t* p;
  size_t left;
  bool fail = false;

  uint8_t u8() {
    if (left < 1) { fail = true; return 0; }
    left--;
    return *p++;
  }
  uint16_t u16() { return uint16_t(u8()) | uint16_t(u8()) << 8; }
  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; i++) v |= uint32_t(u8()) << (8 * i);
    return v;
  }
  std::string str(size_t n) {
    if (left < n) { fail = true; return {}; }
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

}  // namespace

std::vector<uint8_t> encode_beacon(const Announcement& ann, TopicScope segment_level,
                                   uint64_t beacon_seq) {
  // Hints ride only on publisher Alive beacons; Bye carries none.
  const bool with_hints =
      ann.role == Role::kPublisher && ann.kind == BeaconKind::kAlive;
  const EndpointHints hints = ann.hints.value_or(EndpointHints{});

  std::vector<uint8_t> payload;
  payload.reserve(128);
  put_str8(payload, ann.chip.label());
  put_str8(payload, ann.node);
  put_u32(payload, ann.pid);
  payload.push_back(uint8_t(ann.role));
  payload.push_back(uint8_t(ann.kind));
  payload.push_back(ann.flags);
  payload.push_back(with_hints ? 1 : 0);
  payload.push_back(uint8_t(ann.topic.scope));
  put_str16(payload, ann.topic.name);
  if (with_hints) {
    put_str16(payload, hints.shm_segment);
    put_u16(payload, hints.datagram_port);
    put_u16(payload, hints.stream_port);
  }

  MessageEnvelope env = make_envelope(TopicKey{segment_level, kDiscTopicName}, beacon_seq,
                                      ann.sent_ts_ns ? ann.sent_ts_ns : now_ns(),
                                      std::move(payload));
  auto bytes = encode_envelope(env);
  if (bytes.size() > kMaxBeaconBytes)
    throw EncodingError(fmt::format("beacon for topic '{}' exceeds {} bytes", ann.topic.name,
                                    kMaxBeaconBytes));
  return bytes;
}

Result<Announcement, DecodeError> decode_beacon(std::span<const uint8_t> datagram) {
  auto env = decode_envelope(datagram, kMaxBeaconBytes);
  if (!env.ok()) return env.error();
  if (env.value().topic.name != kDiscTopicName) return DecodeError::kBadTopic;

  const auto& payload = env.value().payload;
  Cursor c{payload.data(), payload.size()};
  Announcement ann;
  std::string chip_label = c.str(c.u8());
  ann.node = c.str(c.u8());
  ann.pid = c.u32();
  const uint8_t role = c.u8();
  const uint8_t kind = c.u8();
  ann.flags = c.u8();
  const uint8_t has_hints = c.u8();
  const uint8_t scope = c.u8();
  ann.topic.name = c.str(c.u16());
  if (has_hints) {
    EndpointHints hints;
    hints.shm_segment = c.str(c.u16());
    hints.datagram_port = c.u16();
    hints.stream_port = c.u16();
    ann.hints = std::move(hints);
  }
  if (c.fail || c.left != 0 || role > 1 || kind > 1 || scope > 1 || chip_label.empty() ||
      ann.node.empty() || ann.topic.name.empty())
    return DecodeError::kBadTopic;
  // Hints are present iff this is a publisher Alive beacon; Bye carries none.
  const bool expect_hints =
      role == uint8_t(Role::kPublisher) && kind == uint8_t(BeaconKind::kAlive);
  if (bool(has_hints) != expect_hints) return DecodeError::kBadTopic;
  try {
    ann.chip = ChipId(chip_label);
  } catch (const ConfigError&) {
    return DecodeError::kBadTopic;
  }
  ann.role = Role(role);
  ann.kind = BeaconKind(kind);
  ann.topic.scope = TopicScope(scope);
  ann.sent_ts_ns = env.value().publish_ts_ns;
  return ann;
}

void TopologyView::process_beacon(std::span<const uint8_t> datagram,
                                  const SocketAddress& source, uint64_t now_ns_) {
  auto ann = decode_beacon(datagram);
  if (!ann.ok()) {
    malformed_.fetch_add(1, std::memory_order_relaxed);
    return;
  }
  apply(ann.value(), source, now_ns_);
}

void TopologyView::apply(const Announcement& ann, const SocketAddress& source,
                         uint64_t now_ns_) {
  ParticipantKey key{ann.chip, ann.node, ann.topic, ann.role};
  std::lock_guard<std::mutex> lock(mutex_);
  if (ann.kind == BeaconKind::kBye) {
    entries_.erase(key);
    return;
  }
  TopologyEntry& e = entries_[key];
  e.key = std::move(key);
  e.pid = ann.pid;
  e.flags = ann.flags;
  e.hints = ann.hints;
  e.source = source;
  e.last_seen_ns = now_ns_;
}

std::vector<TopologyEntry> TopologyView::subscribers_of(const TopicKey& topic,
                                                        uint64_t now_ns_) const {
  std::vector<TopologyEntry> out;
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& [key, e] : entries_)
    if (key.role == Role::kSubscriber && key.topic == topic && fresh(e, now_ns_))
      out.push_back(e);
  return out;
}

std::vector<TopologyEntry> TopologyView::publishers_of(const TopicKey& topic,
                                                       uint64_t now_ns_) const {
  std::vector<TopologyEntry> out;
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& [key, e] : entries_)
    if (key.role == Role::kPublisher && key.topic == topic && fresh(e, now_ns_))
      out.push_back(e);
  return out;
}

std::vector<TopologyEntry> TopologyView::snapshot(uint64_t now_ns_) const {
  std::vector<TopologyEntry> out;
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& [key, e] : entries_)
    if (fresh(e, now_ns_)) out.push_back(e);
  return out;
}

bool TopologyView::node_alive(const ChipId& chip, const std::string& node,
                              uint64_t now_ns_) const {
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& [key, e] : entries_)
    if (key.chip == chip && key.node == node && fresh(e, now_ns_)) return true;
  return false;
}

TransportKind select_transport(const Location& pub, const Location& sub, SizeClass size,
                               bool bridged) {
  if (pub.chip == sub.chip) {
    return pub.pid == sub.pid ? TransportKind::kIntra : TransportKind::kShm;
  }
  if (size == SizeClass::kSmall || !bridged) return TransportKind::kDatagram;
  return TransportKind::kBridgedStream;
}

// ---------------------------------------------------------------------------
// DiscoveryParticipant
// ---------------------------------------------------------------------------

DiscoveryParticipant::DiscoveryParticipant(const SystemConfig& cfg, std::string node_name)
    : cfg_(cfg), node_name_(std::move(node_name)), view_(cfg.liveness_timeout_ns()) {}

DiscoveryParticipant::~DiscoveryParticipant() { stop(); }

void DiscoveryParticipant::join_segment(TopicScope level) {
  // Caller holds mutex_.
  for (const auto& rt : segments_)
    if (rt->segment.level == level) return;

  auto rt = std::make_unique<SegmentRuntime>();
  rt->segment = level == TopicScope::kChipLocal ? cfg_.chip_local_segment(cfg_.chip_id)
                                                : cfg_.vehicle_segment();

  // Announcer: deterministic data port when free, ephemeral otherwise.
  const uint16_t base =
      uint16_t(cfg_.datagram_base_port + cfg_.chip_index(cfg_.chip_id) * 32);
  Fd announcer;
  for (uint16_t i = 0; i < 32 && !announcer.valid(); i++) {
    try {
      announcer = udp_bind(SocketAddress::loopback(uint16_t(base + i)));
    } catch (const Error&) {
    }
  }
  if (!announcer.valid()) announcer = udp_bind(SocketAddress::loopback(0));
  udp_enable_multicast_tx(announcer.get());
  set_recv_timeout(announcer.get(), std::chrono::milliseconds(100));
  rt->announcer = std::move(announcer);

  rt->listener = udp_join_multicast(rt->segment.group, rt->segment.port);
  set_recv_timeout(rt->listener.get(), std::chrono::milliseconds(100));

  SegmentRuntime* raw = rt.get();
  segments_.push_back(std::move(rt));
  if (running_.load(std::memory_order_acquire))
    raw->listen_thread = std::thread([this, raw] { listen_loop(raw); });
}

DiscoveryParticipant::SegmentRuntime* DiscoveryParticipant::runtime_for(TopicScope level) {
  for (const auto& rt : segments_)
    if (rt->segment.level == level) return rt.get();
  return nullptr;
}

void DiscoveryParticipant::start() {
  std::lock_guard<std::mutex> lock(mutex_);
  if (running_.exchange(true, std::memory_order_acq_rel)) return;
  join_segment(TopicScope::kChipLocal);
  for (const auto& rt : segments_)
    if (!rt->listen_thread.joinable())
      rt->listen_thread = std::thread([this, raw = rt.get()] { listen_loop(raw); });
  announce_thread_ = std::thread([this] { announce_loop(); });
}

void DiscoveryParticipant::join_vehicle_segment() {
  std::lock_guard<std::mutex> lock(mutex_);
  join_segment(TopicScope::kVehicleArea);
}

int DiscoveryParticipant::vehicle_data_fd() const {
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& rt : segments_)
    if (rt->segment.level == TopicScope::kVehicleArea) return rt->announcer.get();
  return -1;
}

SocketAddress DiscoveryParticipant::vehicle_data_address() const {
  const int fd = vehicle_data_fd();
  return fd >= 0 ? local_address(fd) : SocketAddress{};
}

void DiscoveryParticipant::stop() {
  if (!running_.exchange(false, std::memory_order_acq_rel)) return;

  // Bye beacons for every local entity, then join threads.
  {
    std::lock_guard<std::mutex> lock(mutex_);
    for (const auto& local : locals_) {
      Announcement ann;
      ann.chip = cfg_.chip_id;
      ann.node = node_name_;
      ann.pid = uint32_t(getpid());
      ann.topic = local.topic;
      ann.role = local.role;
      ann.kind = BeaconKind::kBye;
      if (auto* rt = runtime_for(segment_for(local.topic, cfg_).level)) send_beacon(ann, rt);
    }
  }
  if (announce_thread_.joinable()) announce_thread_.join();
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& rt : segments_)
    if (rt->listen_thread.joinable()) rt->listen_thread.join();
}

void DiscoveryParticipant::add_local(const TopicKey& topic, Role role,
                                     std::optional<EndpointHints> hints, uint8_t flags) {
  if (role != Role::kPublisher) hints.reset();  // hints are publisher-only
  Announcement ann;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    join_segment(segment_for(topic, cfg_).level);
    locals_.push_back(LocalEntity{topic, role, hints, flags});
    ann.chip = cfg_.chip_id;
    ann.node = node_name_;
    ann.pid = uint32_t(getpid());
    ann.topic = topic;
    ann.role = role;
    ann.kind = BeaconKind::kAlive;
    ann.flags = flags;
    ann.hints = hints;
    send_beacon(ann, runtime_for(segment_for(topic, cfg_).level));
  }
}

void DiscoveryParticipant::remove_local(const TopicKey& topic, Role role) {
  std::lock_guard<std::mutex> lock(mutex_);
  for (auto it = locals_.begin(); it != locals_.end(); ++it) {
    if (it->topic == topic && it->role == role) {
      Announcement ann;
      ann.chip = cfg_.chip_id;
      ann.node = node_name_;
      ann.pid = uint32_t(getpid());
      ann.topic = topic;
      ann.role = role;
      ann.kind = BeaconKind::kBye;
      if (auto* rt = runtime_for(segment_for(topic, cfg_).level)) send_beacon(ann, rt);
      locals_.erase(it);
      return;
    }
  }
}

void DiscoveryParticipant::send_beacon(const Announcement& ann, SegmentRuntime* rt) {
  if (rt == nullptr) return;
  try {
    auto bytes = encode_beacon(ann, rt->segment.level,
                               beacon_seq_.fetch_add(1, std::memory_order_relaxed));
    sockaddr_in dst = SocketAddress::parse(rt->segment.group, rt->segment.port).to_sockaddr();
    if (sendto(rt->announcer.get(), bytes.data(), bytes.size(), 0,
               reinterpret_cast<sockaddr*>(&dst), sizeof(dst)) < 0) {
      log::warn("beacon send to {}:{} failed: {}", rt->segment.group, rt->segment.port,
                std::strerror(errno));
    }
  } catch (const Error& e) {
    log::warn("beacon encode failed: {}", e.what());
  }
}

void DiscoveryParticipant::announce_loop() {
  while (running_.load(std::memory_order_acquire)) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      for (const auto& local : locals_) {
        Announcement ann;
        ann.chip = cfg_.chip_id;
        ann.node = node_name_;
        ann.pid = uint32_t(getpid());
        ann.topic = local.topic;
        ann.role = local.role;
        ann.kind = BeaconKind::kAlive;
        ann.flags = local.flags;
        ann.hints = local.hints;
        send_beacon(ann, runtime_for(segment_for(local.topic, cfg_).level));
      }
    }
    // Sleep in small steps so stop() is prompt.
    const auto interval = std::chrono::milliseconds(cfg_.beacon_interval_ms);
    const auto step = std::chrono::milliseconds(20);
    for (auto slept = std::chrono::milliseconds(0);
         slept < interval && running_.load(std::memory_order_acquire); slept += step)
      std::this_thread::sleep_for(step);
  }
}

void DiscoveryParticipant::listen_loop(SegmentRuntime* rt) {
  std::vector<uint8_t> buf(kMaxBeaconBytes + 64);
  while (running_.load(std::memory_order_acquire)) {
    sockaddr_in from{};
    socklen_t from_len = sizeof(from);
    ssize_t n = recvfrom(rt->listener.get(), buf.data(), buf.size(), 0,
                         reinterpret_cast<sockaddr*>(&from), &from_len);
    if (n <= 0) continue;  // timeout or transient error
    view_.process_beacon({buf.data(), size_t(n)}, SocketAddress::from(from), now_ns());
  }
}

}  // namespace rimbus
