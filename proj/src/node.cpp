#include "rimbus/node.hpp"

#include <fmt/core.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <set>

#include "rimbus/clock.hpp"
#include "rimbus/log.hpp"

namespace rimbus {

namespace {

const std::string kNodeTopicName = "_node";
const std::string kServiceRequestPrefix = "_svc/q/";
const std::string kServiceReplyPrefix = "_svc/r/";
const std::string kServiceErrorPrefix = "_svc/e/";

bool has_prefix(const std::string& s, const std::string& prefix) {
  return s.size() >= prefix.size() && std::equal(prefix.begin(), prefix.end(), s.begin());
}

// Process-wide registry: intra-process delivery spans every Node in this
// process, and duplicate names on one chip are rejected instantly here.
struct ProcessRegistry {
  std::mutex mutex;
  std::map<std::pair<std::string, std::string>, Node*> nodes;  // (chip, name)

  static ProcessRegistry& instance() {
    static ProcessRegistry reg;
    return reg;
  }
};

void validate_node_name(const std::string& name) {
  if (name.empty() || name.size() > 64)
    throw ConfigError(fmt::format("node name '{}' must be 1..64 bytes", name));
  for (unsigned char c : name)
    if (c <= 0x20 || c > 0x7e)
      throw ConfigError(fmt::format("node name '{}' must be printable ASCII", name));
}

void validate_user_topic(const TopicKey& topic) {
  validate_topic_name(topic.name);
  if (topic.name[0] == '_')
    throw ConfigError(fmt::format("topic name '{}' is reserved (leading underscore)",
                                  topic.name));
}

}  // namespace

const char* to_string(ServiceStatus s) {
  switch (s) {
    case ServiceStatus::kOk: return "ok";
    case ServiceStatus::kNoProvider: return "no_provider";
    case ServiceStatus::kTimeout: return "timeout";
    case ServiceStatus::kRemoteError: return "remote_error";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Subscription
// ---------------------------------------------------------------------------

Subscription::Subscription(Node* node, TopicKey topic, DeliveryCallback cb,
                           SubscribeOptions opts)
    : node_(node),
      topic_(std::move(topic)),
      callback_(std::move(cb)),
      options_(opts),
      queue_(opts.queue_depth) {
  worker_ = std::thread([this] { worker_loop(); });
}

void Subscription::start_shm_reader() {
  shm_reader_ = std::thread([this] { shm_loop(); });
}

void Subscription::stop() {
  running_.store(false, std::memory_order_release);
  queue_.close();
  if (worker_.joinable()) worker_.join();
  if (shm_reader_.joinable()) shm_reader_.join();
}

SubscriptionStats Subscription::stats() const {
  std::lock_guard<std::mutex> lock(stats_mutex_);
  SubscriptionStats out = stats_;
  out.queue_drops = queue_.dropped();
  return out;
}

void Subscription::deliver(TransportKind transport, EnvelopePtr env, uint64_t recv_ts_ns) {
  {
    std::lock_guard<std::mutex> lock(stats_mutex_);
    stats_.received++;
    auto [it, inserted] = last_seq_.emplace(transport, env->seq);
    if (!inserted) {
      if (env->seq > it->second + 1) stats_.gaps += env->seq - it->second - 1;
      it->second = env->seq;
    }
  }
  Delivery d;
  d.info = DeliveryInfo{env->topic, env->seq, env->publish_ts_ns, recv_ts_ns, transport};
  d.env = std::move(env);
  queue_.push(std::move(d));
}

void Subscription::worker_loop() {
  while (running_.load(std::memory_order_acquire) || queue_.size() > 0) {
    auto d = queue_.pop(std::chrono::milliseconds(50));
    if (!d) {
      if (!running_.load(std::memory_order_acquire)) return;
      continue;
    }
    callback_(d->info, d->env->payload);
  }
}

void Subscription::shm_loop() {
  std::shared_ptr<ShmRing> ring;
  try {
    ring = node_->ring_for(topic_);
  } catch (const Error& e) {
    log::error("subscription '{}': shm attach failed: {}", topic_.name, e.what());
    return;
  }
  auto reader = ring->make_reader();
  const bool bridged_in = node_->config().topic_bridged_into(topic_, node_->chip());
  const uint32_t self = uint32_t(getpid());

  while (running_.load(std::memory_order_acquire)) {
    auto ev = reader.read(std::chrono::milliseconds(5));
    if (!ev) continue;
    // Frames written by this process reach local subscriptions by reference
    // through the intra path; the ring copy is for other processes.
    if (ring->writer_pid() == self) continue;
    if (ev->gap_before) {
      std::lock_guard<std::mutex> lock(stats_mutex_);
      stats_.gaps += ev->gap_before;
    }
    auto env = decode_envelope(ev->frame, node_->config().max_payload_bytes);
    if (!env.ok()) {
      std::lock_guard<std::mutex> lock(stats_mutex_);
      stats_.corrupt_slots++;
      continue;
    }
    const uint64_t ts = now_ns();
    // A ring fed by the bridge ingress is the tail of a cross-chip stream.
    const auto transport = bridged_in ? TransportKind::kBridgedStream : TransportKind::kShm;
    auto& counters = node_->counters();
    (transport == TransportKind::kBridgedStream ? counters.bridged_deliveries
                                                : counters.shm_deliveries)
        .fetch_add(1, std::memory_order_relaxed);
    deliver(transport, std::make_shared<const MessageEnvelope>(std::move(env).value()), ts);
  }
}

// ---------------------------------------------------------------------------
// Publisher
// ---------------------------------------------------------------------------

uint64_t Publisher::publish(std::span<const uint8_t> payload) {
  return node_->do_publish(*this, payload);
}

// ---------------------------------------------------------------------------
// Node
// ---------------------------------------------------------------------------

Node::Node(SystemConfig cfg, std::string name) : cfg_(std::move(cfg)), name_(std::move(name)) {
  cfg_.validate();
  validate_node_name(name_);

  auto& reg = ProcessRegistry::instance();
  {
    std::lock_guard<std::mutex> lock(reg.mutex);
    auto key = std::make_pair(cfg_.chip_id.label(), name_);
    if (reg.nodes.count(key))
      throw DuplicateNodeError(
          fmt::format("node '{}' already exists on chip {}", name_, cfg_.chip_id.label()));
    reg.nodes.emplace(key, this);
  }

  try {
    participant_ = std::make_unique<DiscoveryParticipant>(cfg_, name_);
    participant_->start();

    // Listen one beacon interval for a same-name node in another process.
    const auto probe = std::chrono::milliseconds(cfg_.beacon_interval_ms + 100);
    std::this_thread::sleep_for(probe);
    for (const auto& e : participant_->view().snapshot(now_ns())) {
      if (e.key.chip == cfg_.chip_id && e.key.node == name_ && e.pid != uint32_t(getpid()))
        throw DuplicateNodeError(
            fmt::format("node '{}' already announced on chip {} (pid {})", name_,
                        cfg_.chip_id.label(), e.pid));
    }
    participant_->add_local(TopicKey{TopicScope::kChipLocal, kNodeTopicName},
                            Role::kPublisher, EndpointHints{});
  } catch (...) {
    std::lock_guard<std::mutex> lock(reg.mutex);
    reg.nodes.erase(std::make_pair(cfg_.chip_id.label(), name_));
    throw;
  }
}

Node::~Node() {
  running_.store(false, std::memory_order_release);
  {
    auto& reg = ProcessRegistry::instance();
    std::lock_guard<std::mutex> lock(reg.mutex);
    reg.nodes.erase(std::make_pair(cfg_.chip_id.label(), name_));
  }
  service_jobs_.close();
  if (service_thread_.joinable()) service_thread_.join();
  if (dgram_thread_.joinable()) dgram_thread_.join();
  {
    std::lock_guard<std::mutex> lock(mutex_);
    for (auto& sub : subscriptions_) sub->stop();
  }
  if (participant_) participant_->stop();
}

std::shared_ptr<ShmRing> Node::ring_for(const TopicKey& topic) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (auto it = rings_.find(topic); it != rings_.end())
    if (auto ring = it->second.lock()) return ring;
  auto ring = std::make_shared<ShmRing>(
      ShmRing::create_or_open(ShmRing::segment_name(cfg_.chip_id, topic),
                              ShmGeometry{cfg_.shm_slot_count, cfg_.shm_slot_size}));
  rings_[topic] = ring;
  return ring;
}

void Node::ensure_vehicle_dataplane() {
  if (dataplane_up_.load(std::memory_order_acquire)) return;
  std::lock_guard<std::mutex> lock(mutex_);
  if (dataplane_up_.load(std::memory_order_acquire)) return;

  participant_->join_vehicle_segment();
  const int fd = participant_->vehicle_data_fd();
  sender_ = std::make_unique<DatagramSender>(fd, cfg_.datagram_cap_bytes, &counters_.datagram,
                                             &dgram_msg_seq_);
  if (loss_) sender_->set_loss_injector(loss_.get());
  if (dgram_shaper_) sender_->set_shaper(dgram_shaper_);
  reassembler_ = std::make_unique<Reassembler>(
      Reassembler::Options{.max_payload_bytes = cfg_.max_payload_bytes}, &counters_.datagram);
  dgram_thread_ = std::thread([this] { datagram_loop(); });
  service_thread_ = std::thread([this] { service_loop(); });
  dataplane_up_.store(true, std::memory_order_release);
}

void Node::set_loss(double rate, uint64_t seed) {
  std::lock_guard<std::mutex> lock(mutex_);
  loss_ = std::make_unique<LossInjector>(rate, seed);
  if (sender_) sender_->set_loss_injector(loss_.get());
}

void Node::set_datagram_shaper(ShaperPtr shaper) {
  std::lock_guard<std::mutex> lock(mutex_);
  dgram_shaper_ = std::move(shaper);
  if (sender_) sender_->set_shaper(dgram_shaper_);
}

size_t Node::known_subscribers(const TopicKey& topic) {
  return participant_->view().subscribers_of(topic, now_ns()).size();
}

Publisher& Node::advertise(const TopicKey& topic) {
  validate_user_topic(topic);
  auto ring = ring_for(topic);  // fail fast on geometry problems
  if (topic.scope == TopicScope::kVehicleArea) ensure_vehicle_dataplane();

  std::lock_guard<std::mutex> lock(mutex_);
  publishers_.push_back(std::unique_ptr<Publisher>(new Publisher(this, topic)));
  Publisher& pub = *publishers_.back();
  pub.ring_ = ring;

  EndpointHints hints;
  hints.shm_segment = ring->name();
  hints.datagram_port = participant_->vehicle_data_address().port;
  participant_->add_local(topic, Role::kPublisher, hints);
  return pub;
}

Subscription& Node::subscribe(const TopicKey& topic, DeliveryCallback callback,
                              SubscribeOptions options) {
  validate_user_topic(topic);
  if (topic.scope == TopicScope::kVehicleArea) ensure_vehicle_dataplane();

  std::unique_ptr<Subscription> sub(
      new Subscription(this, topic, std::move(callback), options));
  sub->start_shm_reader();
  Subscription* raw = sub.get();
  {
    std::lock_guard<std::mutex> lock(mutex_);
    subscriptions_.push_back(std::move(sub));
  }
  participant_->add_local(topic, Role::kSubscriber, std::nullopt,
                          options.force_datagram ? kFlagForceDatagram : 0);
  return *raw;
}

uint64_t Node::do_publish(Publisher& pub, std::span<const uint8_t> payload) {
  if (payload.size() > cfg_.max_payload_bytes)
    throw EncodingError(fmt::format("payload of {} bytes exceeds configured max {}",
                                    payload.size(), cfg_.max_payload_bytes));
  const TopicKey& topic = pub.topic();
  const uint64_t seq = pub.seq_.fetch_add(1, std::memory_order_relaxed);
  const uint64_t ts = now_ns();

  auto env = std::make_shared<const MessageEnvelope>(
      make_envelope(topic, seq, ts, std::vector<uint8_t>(payload.begin(), payload.end())));

  // In-process subscriptions: delivery by reference, no serialization.
  deliver_local(TransportKind::kIntra, env, ts);

  // Cross-process interest from the topology view.
  const SizeClass size = classify_size(payload.size(), cfg_.large_threshold_bytes);
  const uint32_t self = uint32_t(getpid());
  bool need_shm = cfg_.topic_bridged_from(topic, cfg_.chip_id);
  std::set<SocketAddress> dgram_targets;

  for (const auto& entry : participant_->view().subscribers_of(topic, ts)) {
    if (entry.key.chip == cfg_.chip_id) {
      if (entry.pid == self) continue;  // served by the intra path above
      need_shm = true;
      continue;
    }
    if (entry.flags & kFlagForceDatagram) {
      dgram_targets.insert(entry.source);
      continue;
    }
    // Explicit bridge configuration wins over the size-based default, so
    // Small bridged topics still ride the bridge.
    if (cfg_.topic_bridged_between(topic, cfg_.chip_id, entry.key.chip)) {
      need_shm = true;
      continue;
    }
    if (size == SizeClass::kLarge &&
        counters_.large_unbridged_warnings.fetch_add(1, std::memory_order_relaxed) == 0) {
      log::warn("topic '{}' sends large payloads cross-chip without a bridge route; "
                "falling back to the datagram path",
                topic.name);
    }
    dgram_targets.insert(entry.source);
  }

  if (need_shm || !dgram_targets.empty()) {
    auto frame = encode_envelope(*env, cfg_.max_payload_bytes);
    if (need_shm) {
      if (pub.ring_) {
        pub.ring_->publish(frame);
        counters_.shm_publishes.fetch_add(1, std::memory_order_relaxed);
        counters_.shm_bytes.fetch_add(frame.size(), std::memory_order_relaxed);
      }
    }
    if (!dgram_targets.empty()) {
      ensure_vehicle_dataplane();
      for (const auto& target : dgram_targets) {
        try {
          sender_->send(target, frame);
        } catch (const SendError& e) {
          log::warn("datagram send to {} failed: {}", target.to_string(), e.what());
        }
      }
    }
  }
  return seq;
}

void Node::deliver_local(TransportKind transport, const EnvelopePtr& env, uint64_t recv_ts) {
  auto& reg = ProcessRegistry::instance();
  std::lock_guard<std::mutex> reg_lock(reg.mutex);
  for (auto& [key, node] : reg.nodes) {
    if (key.first != cfg_.chip_id.label()) continue;
    std::lock_guard<std::mutex> node_lock(node->mutex_);
    for (auto& sub : node->subscriptions_) {
      if (sub->topic() != env->topic) continue;
      node->counters_.intra_deliveries.fetch_add(1, std::memory_order_relaxed);
      sub->deliver(transport, env, recv_ts);
    }
  }
}

void Node::datagram_loop() {
  const int fd = participant_->vehicle_data_fd();
  set_recv_timeout(fd, std::chrono::milliseconds(100));

  constexpr int kBatch = 32;
  std::vector<std::vector<uint8_t>> bufs(kBatch);
  std::vector<mmsghdr> msgs(kBatch);
  std::vector<iovec> iovs(kBatch);
  std::vector<sockaddr_in> addrs(kBatch);
  for (int i = 0; i < kBatch; i++) {
    bufs[i].resize(cfg_.datagram_cap_bytes);
    iovs[i] = {bufs[i].data(), bufs[i].size()};
    std::memset(&msgs[i], 0, sizeof(msgs[i]));
    msgs[i].msg_hdr.msg_iov = &iovs[i];
    msgs[i].msg_hdr.msg_iovlen = 1;
    msgs[i].msg_hdr.msg_name = &addrs[i];
    msgs[i].msg_hdr.msg_namelen = sizeof(addrs[i]);
  }

  while (running_.load(std::memory_order_acquire)) {
    // Plain flags: SO_RCVTIMEO bounds the wait for the first datagram and
    // the rest of the batch is whatever is already queued. (MSG_WAITFORONE
    // is rejected on some kernels.)
    int n = recvmmsg(fd, msgs.data(), kBatch, 0, nullptr);
    if (n <= 0) continue;
    const uint64_t ts = now_ns();
    for (int i = 0; i < n; i++) {
      const auto from = SocketAddress::from(addrs[i]);
      std::span<const uint8_t> dgram{bufs[i].data(), msgs[i].msg_len};
      if (auto env = reassembler_->feed(from, dgram, ts))
        dispatch_envelope(std::move(*env), from);
      msgs[i].msg_hdr.msg_namelen = sizeof(addrs[i]);
    }
  }
}

void Node::dispatch_envelope(MessageEnvelope env, const SocketAddress& from) {
  const std::string& name = env.topic.name;
  if (has_prefix(name, kServiceRequestPrefix)) {
    service_jobs_.push(ServiceRequestJob{std::move(env), from});
    return;
  }
  if (has_prefix(name, kServiceReplyPrefix)) return handle_service_reply(env, false);
  if (has_prefix(name, kServiceErrorPrefix)) return handle_service_reply(env, true);

  const uint64_t ts = now_ns();
  auto ptr = std::make_shared<const MessageEnvelope>(std::move(env));
  std::lock_guard<std::mutex> lock(mutex_);
  for (auto& sub : subscriptions_) {
    if (sub->topic() != ptr->topic) continue;
    sub->deliver(TransportKind::kDatagram, ptr, ts);
  }
}

// ---------------------------------------------------------------------------
// Services
// ---------------------------------------------------------------------------

void Node::register_service(const std::string& name, ServiceHandler handler) {
  validate_topic_name(name);
  ensure_vehicle_dataplane();
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (services_.count(name))
      throw ConfigError(fmt::format("service '{}' already registered", name));
    services_[name] = std::move(handler);
  }
  participant_->add_local(TopicKey::vehicle_area(kServiceRequestPrefix + name),
                          Role::kPublisher,
                          EndpointHints{"", participant_->vehicle_data_address().port, 0});
}

void Node::service_loop() {
  while (running_.load(std::memory_order_acquire)) {
    auto job = service_jobs_.pop(std::chrono::milliseconds(100));
    if (!job) continue;
    handle_service_request(job->env, job->from);
  }
}

void Node::handle_service_request(const MessageEnvelope& env, const SocketAddress& from) {
  const std::string name = env.topic.name.substr(kServiceRequestPrefix.size());
  ServiceHandler handler;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (auto it = services_.find(name); it != services_.end()) handler = it->second;
  }
  if (!handler) return;  // not ours; a stale or misrouted request

  std::string reply_topic;
  std::vector<uint8_t> payload;
  try {
    payload = handler(env.payload);
    reply_topic = kServiceReplyPrefix + name;
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    payload.assign(msg.begin(), msg.end());
    reply_topic = kServiceErrorPrefix + name;
  }
  auto reply = make_envelope(TopicKey::vehicle_area(reply_topic), env.seq, now_ns(),
                             std::move(payload));
  try {
    sender_->send(from, encode_envelope(reply, cfg_.max_payload_bytes));
  } catch (const SendError& e) {
    log::warn("service reply to {} failed: {}", from.to_string(), e.what());
  }
}

void Node::handle_service_reply(const MessageEnvelope& env, bool is_error) {
  std::shared_ptr<PendingCall> call;
  {
    std::lock_guard<std::mutex> lock(calls_mutex_);
    if (auto it = pending_calls_.find(env.seq); it != pending_calls_.end()) {
      call = it->second;
      pending_calls_.erase(it);
    }
  }
  if (!call) return;  // late duplicate (e.g. after retransmit)
  ServiceResult result;
  if (is_error) {
    result.status = ServiceStatus::kRemoteError;
    result.error.assign(env.payload.begin(), env.payload.end());
  } else {
    result.status = ServiceStatus::kOk;
    result.response = env.payload;
  }
  {
    std::lock_guard<std::mutex> lock(call->m);
    call->result = std::move(result);
  }
  call->cv.notify_all();
}

ServiceResult Node::call_service(const std::string& name, std::span<const uint8_t> request,
                                 std::chrono::milliseconds timeout) {
  ensure_vehicle_dataplane();
  const TopicKey svc_topic = TopicKey::vehicle_area(kServiceRequestPrefix + name);
  const uint64_t start = monotonic_ns();
  const uint64_t deadline = start + uint64_t(timeout.count()) * 1000000ull;

  // A provider must appear within one beacon interval or the call fails.
  SocketAddress provider;
  const uint64_t probe_deadline = std::min<uint64_t>(
      deadline, start + (uint64_t(cfg_.beacon_interval_ms) + 100) * 1000000ull);
  for (;;) {
    auto pubs = participant_->view().publishers_of(svc_topic, now_ns());
    if (!pubs.empty()) {
      provider = pubs.front().source;
      break;
    }
    if (monotonic_ns() >= probe_deadline)
      return ServiceResult{ServiceStatus::kNoProvider, {}, "no provider for " + name};
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }

  const uint64_t call_id = next_call_id_.fetch_add(1, std::memory_order_relaxed);
  auto call = std::make_shared<PendingCall>();
  {
    std::lock_guard<std::mutex> lock(calls_mutex_);
    pending_calls_[call_id] = call;
  }
  auto req = make_envelope(svc_topic, call_id, now_ns(),
                           std::vector<uint8_t>(request.begin(), request.end()));
  const auto frame = encode_envelope(req, cfg_.max_payload_bytes);

  auto send_once = [&] {
    try {
      sender_->send(provider, frame);
    } catch (const SendError& e) {
      log::warn("service request to {} failed: {}", provider.to_string(), e.what());
    }
  };
  send_once();

  // One retransmit at half the remaining budget.
  std::unique_lock<std::mutex> lock(call->m);
  const auto half = std::chrono::nanoseconds((deadline - monotonic_ns()) / 2);
  if (!call->cv.wait_for(lock, half, [&] { return call->result.has_value(); })) send_once();
  if (!call->result && monotonic_ns() < deadline)
    call->cv.wait_for(lock, std::chrono::nanoseconds(deadline - monotonic_ns()),
                      [&] { return call->result.has_value(); });

  if (!call->result) {
    std::lock_guard<std::mutex> plock(calls_mutex_);
    pending_calls_.erase(call_id);
    return ServiceResult{ServiceStatus::kTimeout, {}, "timeout calling " + name};
  }
  return std::move(*call->result);
}

}  // namespace rimbus
