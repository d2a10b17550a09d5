#pragma once

#include <atomic>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "rimbus/config.hpp"
#include "rimbus/datagram.hpp"
#include "rimbus/discovery.hpp"
#include "rimbus/queue.hpp"
#include "rimbus/shaper.hpp"
#include "rimbus/shm_ring.hpp"

namespace rimbus {

class Node;

struct DeliveryInfo {
  TopicKey topic;
  uint64_t seq = 0;
  uint64_t publish_ts_ns = 0;
  uint64_t recv_ts_ns = 0;
  TransportKind transport = TransportKind::kIntra;
};

using DeliveryCallback = std::function<void(const DeliveryInfo&, std::span<const uint8_t>)>;

struct SubscribeOptions {
  size_t queue_depth = 16;
  /// Requests direct datagram delivery even when the topic rides the bridge;
  /// the flag is carried in this subscription's beacons.
  bool force_datagram = false;
};

struct SubscriptionStats {
  uint64_t received = 0;
  uint64_t gaps = 0;
  uint64_t queue_drops = 0;
  uint64_t corrupt_slots = 0;
};

/// Handle for publishing on one topic. publish() fans the message out to
/// every transport the routing policy selects; per-route failures are
/// isolated and never abort the remaining routes.
class Publisher {
 public:
  const TopicKey& topic() const { return topic_; }
  uint64_t publish(std::span<const uint8_t> payload);
  uint64_t next_seq() const { return seq_.load(std::memory_order_relaxed); }

 private:
  friend class Node;
  Publisher(Node* node, TopicKey topic) : node_(node), topic_(std::move(topic)) {}
  Node* node_;
  TopicKey topic_;
  std::shared_ptr<ShmRing> ring_;
  std::atomic<uint64_t> seq_{0};
};

/// One subscription: messages from every matching transport funnel into one
/// bounded queue and a single worker runs the callback serially, in delivery
/// order. When both the bridge and a direct datagram path are active for one
/// topic the same message surfaces once per transport, tagged accordingly.
class Subscription {
 public:
  const TopicKey& topic() const { return topic_; }
  SubscriptionStats stats() const;

 private:
  friend class Node;
  struct Delivery {
    DeliveryInfo info;
    EnvelopePtr env;
  };

  Subscription(Node* node, TopicKey topic, DeliveryCallback cb, SubscribeOptions opts);
  void deliver(TransportKind transport, EnvelopePtr env, uint64_t recv_ts_ns);
  void worker_loop();
  void shm_loop();
  void start_shm_reader();
  void stop();

  Node* node_;
  TopicKey topic_;
  DeliveryCallback callback_;
  SubscribeOptions options_;
  BoundedQueue<Delivery> queue_;
  std::thread worker_;
  std::thread shm_reader_;
  std::atomic<bool> running_{true};

  mutable std::mutex stats_mutex_;
  SubscriptionStats stats_;
  std::map<TransportKind, uint64_t> last_seq_;
};

enum class ServiceStatus : uint8_t { kOk = 0, kNoProvider = 1, kTimeout = 2, kRemoteError = 3 };

const char* to_string(ServiceStatus s);

struct ServiceResult {
  ServiceStatus status = ServiceStatus::kTimeout;
  std::vector<uint8_t> response;
  std::string error;  // handler message for kRemoteError

  bool ok() const { return status == ServiceStatus::kOk; }
};

/// Request handler; thrown exceptions surface to the caller as RemoteError
/// carrying the exception message.
using ServiceHandler = std::function<std::vector<uint8_t>(std::span<const uint8_t>)>;

struct NodeCounters {
  DatagramCounters datagram;
  std::atomic<uint64_t> intra_deliveries{0};
  std::atomic<uint64_t> shm_publishes{0};
  std::atomic<uint64_t> shm_bytes{0};
  std::atomic<uint64_t> shm_deliveries{0};
  std::atomic<uint64_t> bridged_deliveries{0};
  std::atomic<uint64_t> large_unbridged_warnings{0};
};

/// The application-facing participant: owns discovery, the per-topic rings,
/// the datagram engine, and request/reply services.
class Node {
 public:
  /// Throws DuplicateNodeError when a node with this name already exists on
  /// this chip (checked against in-process nodes immediately and against
  /// discovery after listening for one beacon interval).
  Node(SystemConfig cfg, std::string name);
  ~Node();

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  Publisher& advertise(const TopicKey& topic);
  Subscription& subscribe(const TopicKey& topic, DeliveryCallback callback,
                          SubscribeOptions options = {});

  void register_service(const std::string& name, ServiceHandler handler);
  ServiceResult call_service(const std::string& name, std::span<const uint8_t> request,
                             std::chrono::milliseconds timeout);

  const SystemConfig& config() const { return cfg_; }
  const std::string& name() const { return name_; }
  const ChipId& chip() const { return cfg_.chip_id; }
  TopologyView& topology() { return participant_->view(); }
  NodeCounters& counters() { return counters_; }

  /// Test/bench instrumentation: deterministic datagram loss and lane
  /// shaping for cross-chip sends.
  void set_loss(double rate, uint64_t seed);
  void set_datagram_shaper(ShaperPtr shaper);

  /// Number of live subscriber entries discovery knows for a topic.
  size_t known_subscribers(const TopicKey& topic);

 private:
  friend class Publisher;
  friend class Subscription;

  uint64_t do_publish(Publisher& pub, std::span<const uint8_t> payload);
  std::shared_ptr<ShmRing> ring_for(const TopicKey& topic);
  void ensure_vehicle_dataplane();
  void datagram_loop();
  void service_loop();
  void dispatch_envelope(MessageEnvelope env, const SocketAddress& from);
  void deliver_local(TransportKind transport, const EnvelopePtr& env, uint64_t recv_ts);
  void handle_service_request(const MessageEnvelope& env, const SocketAddress& from);
  void handle_service_reply(const MessageEnvelope& env, bool is_error);

  SystemConfig cfg_;
  std::string name_;
  std::unique_ptr<DiscoveryParticipant> participant_;
  NodeCounters counters_;

  std::mutex mutex_;
  std::vector<std::unique_ptr<Publisher>> publishers_;
  std::vector<std::unique_ptr<Subscription>> subscriptions_;
  std::map<TopicKey, std::weak_ptr<ShmRing>> rings_;

  // Datagram data plane on the vehicle segment's announcer socket.
  std::atomic<uint64_t> dgram_msg_seq_{0};
  std::unique_ptr<DatagramSender> sender_;
  std::unique_ptr<Reassembler> reassembler_;
  std::unique_ptr<LossInjector> loss_;
  ShaperPtr dgram_shaper_;
  std::thread dgram_thread_;
  std::atomic<bool> dataplane_up_{false};

  // Services.
  std::map<std::string, ServiceHandler> services_;
  struct ServiceRequestJob {
    MessageEnvelope env;
    SocketAddress from;
  };
  BoundedQueue<ServiceRequestJob> service_jobs_{64};
  std::thread service_thread_;
  struct PendingCall {
    std::mutex m;
    std::condition_variable cv;
    std::optional<ServiceResult> result;
  };
  std::mutex calls_mutex_;
  std::map<uint64_t, std::shared_ptr<PendingCall>> pending_calls_;
  std::atomic<uint64_t> next_call_id_{1};

  std::atomic<bool> running_{true};
};

}  // namespace rimbus
