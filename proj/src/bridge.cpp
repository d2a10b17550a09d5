#include "rimbus/bridge.hpp"

#include <fmt/core.h>

#include <fstream>

#include "rimbus/clock.hpp"
#include "rimbus/envelope.hpp"
#include "rimbus/log.hpp"

namespace rimbus {

bool DedupWindow::check_and_insert(uint64_t seq, uint64_t publish_ts_ns) {
  const std::pair<uint64_t, uint64_t> key{seq, publish_ts_ns};
  if (!seen_.insert(key).second) return false;
  order_.push_back(key);
  while (order_.size() > capacity_) {
    seen_.erase(order_.front());
    order_.pop_front();
  }
  return true;
}

BridgeDaemon::BridgeDaemon(SystemConfig cfg, Options options)
    : cfg_(std::move(cfg)), options_(std::move(options)) {
  cfg_.validate();
  if (options_.stats_path.empty()) options_.stats_path = cfg_.bridge_stats_path(cfg_.chip_id);
}

BridgeDaemon::~BridgeDaemon() { stop(); }

ShaperPtr BridgeDaemon::shaper_for(Lane lane) {
  if (lane == Lane::kEthernet) {
    if (options_.ethernet_mbps > 0 && !ethernet_shaper_)
      ethernet_shaper_ = std::make_shared<TokenBucket>(options_.ethernet_mbps * 1e6);
    return ethernet_shaper_;
  }
  if (options_.pcie_mbps > 0 && !pcie_shaper_)
    pcie_shaper_ = std::make_shared<TokenBucket>(options_.pcie_mbps * 1e6);
  return pcie_shaper_;
}

BridgeRouteStats* BridgeDaemon::stats_row(const TopicKey& topic, const ChipId& dest) {
  std::lock_guard<std::mutex> lock(stats_mutex_);
  auto& slot = stats_[{topic, dest.label()}];
  if (!slot) slot = std::make_unique<BridgeRouteStats>();
  return slot.get();
}

const BridgeRouteStats& BridgeDaemon::stats_for(const TopicKey& topic,
                                                const ChipId& dest) const {
  std::lock_guard<std::mutex> lock(stats_mutex_);
  static const BridgeRouteStats kEmpty;
  auto it = stats_.find({topic, dest.label()});
  return it == stats_.end() ? kEmpty : *it->second;
}

void BridgeDaemon::start() {
  if (running_.exchange(true)) return;
  const ShmGeometry geometry{cfg_.shm_slot_count, cfg_.shm_slot_size};

  for (const auto& route : cfg_.bridge_routes) {
    // Ingress: this chip is a destination; republish into local SHM.
    const bool is_dest = std::find(route.dest_chips.begin(), route.dest_chips.end(),
                                   cfg_.chip_id) != route.dest_chips.end();
    if (is_dest) {
      const auto ring_name = ShmRing::segment_name(cfg_.chip_id, route.topic);
      auto ring_it = ingress_rings_.find(ring_name);
      if (ring_it == ingress_rings_.end()) {
        auto ring = std::make_shared<ShmRing>(ShmRing::create_or_open(ring_name, geometry));
        ring->attach_writer();  // sole writer of a bridged topic's segment
        ring_it = ingress_rings_.emplace(ring_name, std::move(ring)).first;
      }
      auto ring = ring_it->second;
      BridgeRouteStats* stats = stats_row(route.topic, cfg_.chip_id);
      StreamListener::Options lopt;
      lopt.port = cfg_.bridge_channel_port(route, cfg_.chip_id);
      lopt.max_frame_bytes = cfg_.max_payload_bytes + 4096;
      lopt.expected_channel_id = stream_channel_id(route.topic);
      auto listener = std::make_unique<StreamListener>(
          lopt, [ring, stats, this](MessageEnvelope env, uint32_t, Lane) {
            // Checksum already verified by the stream layer; preserve the
            // original seq and publish_ts so end-to-end timing holds.
            try {
              ring->publish(encode_envelope(env, cfg_.max_payload_bytes));
              stats->republish_count.fetch_add(1, std::memory_order_relaxed);
            } catch (const Error& e) {
              log::error("bridge ingress republish failed: {}", e.what());
            }
          });
      listener->start();
      ingress_listeners_.push_back(std::move(listener));
    }

    // Egress: this chip is the source; forward once per destination chip.
    if (route.source_chip == cfg_.chip_id) {
      std::vector<EgressWorker*> workers;
      for (const auto& dest : route.dest_chips) {
        auto worker = std::make_unique<EgressWorker>();
        worker->route = &route;
        worker->dest = dest;
        worker->dedup = std::make_unique<DedupWindow>(options_.dedup_window);
        worker->stats = stats_row(route.topic, dest);
        StreamChannel::Options copt;
        copt.remote = SocketAddress::loopback(cfg_.bridge_channel_port(route, dest));
        copt.lane = route.lane;
        copt.channel_id = stream_channel_id(route.topic);
        copt.max_frame_bytes = cfg_.max_payload_bytes + 4096;
        copt.shaper = shaper_for(route.lane);
        worker->channel = std::make_unique<StreamChannel>(copt);
        workers.push_back(worker.get());
        egress_workers_.push_back(std::move(worker));
      }
      egress_threads_.emplace_back(
          [this, route = &route, workers] { egress_loop(route, workers); });
    }
  }

  if (options_.stats_period_ms > 0)
    stats_thread_ = std::thread([this] { stats_loop(); });
}

void BridgeDaemon::egress_loop(const BridgeRoute* route, std::vector<EgressWorker*> workers) {
  std::shared_ptr<ShmRing> ring;
  try {
    ring = std::make_shared<ShmRing>(
        ShmRing::create_or_open(ShmRing::segment_name(cfg_.chip_id, route->topic),
                                ShmGeometry{cfg_.shm_slot_count, cfg_.shm_slot_size}));
  } catch (const Error& e) {
    log::error("bridge egress for '{}': {}", route->topic.name, e.what());
    return;
  }
  auto reader = ring->make_reader();
  std::vector<uint64_t> last_reconnects(workers.size(), 0);

  while (running_.load(std::memory_order_acquire)) {
    // A channel that reconnected may have lost frames in flight: re-read the
    // ring tail; the dedup window suppresses what already went out.
    for (size_t i = 0; i < workers.size(); i++) {
      const uint64_t rc = workers[i]->channel->counters().reconnects.load();
      if (rc != last_reconnects[i]) {
        last_reconnects[i] = rc;
        const uint64_t cur = ring->cursor();
        const uint64_t back = std::min<uint64_t>(options_.reconnect_replay, cur);
        reader = ring->make_reader_from(cur - back);
      }
    }

    auto ev = reader.read(std::chrono::milliseconds(5));
    if (!ev) continue;
    auto env = decode_envelope(ev->frame, cfg_.max_payload_bytes);
    if (!env.ok()) continue;  // torn or foreign slot; ring layer counted it

    auto frame = std::make_shared<const std::vector<uint8_t>>(std::move(ev->frame));
    for (EgressWorker* worker : workers) {
      if (!worker->dedup->check_and_insert(env.value().seq, env.value().publish_ts_ns)) {
        worker->stats->dedup_suppressed.fetch_add(1, std::memory_order_relaxed);
        continue;
      }
      if (worker->channel->send(frame)) {
        worker->stats->forwarded_count.fetch_add(1, std::memory_order_relaxed);
        worker->stats->forwarded_bytes.fetch_add(frame->size() + kFramePrefixBytes,
                                                 std::memory_order_relaxed);
      } else {
        // Channel down or slow: this destination misses the frame, others
        // are unaffected.
        worker->stats->down_drops.fetch_add(1, std::memory_order_relaxed);
      }
    }
  }
}

void BridgeDaemon::stats_loop() {
  uint64_t last = monotonic_ns();
  while (running_.load(std::memory_order_acquire)) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    if (monotonic_ns() - last >= uint64_t(options_.stats_period_ms) * 1000000ull) {
      dump_stats();
      last = monotonic_ns();
    }
  }
}

void BridgeDaemon::stop() {
  if (!running_.exchange(false)) return;
  if (stats_thread_.joinable()) stats_thread_.join();
  for (auto& t : egress_threads_)
    if (t.joinable()) t.join();
  egress_threads_.clear();
  for (auto& w : egress_workers_) w->channel->stop();
  for (auto& l : ingress_listeners_) l->stop();
  dump_stats();
}

std::string BridgeDaemon::stats_csv() const {
  std::string out =
      "topic,dest,forwarded_count,forwarded_bytes,dedup_suppressed,republish_count,"
      "down_drops\n";
  std::lock_guard<std::mutex> lock(stats_mutex_);
  for (const auto& [key, stats] : stats_) {
    out += fmt::format("{},{},{},{},{},{},{}\n", key.first.name, key.second,
                       stats->forwarded_count.load(), stats->forwarded_bytes.load(),
                       stats->dedup_suppressed.load(), stats->republish_count.load(),
                       stats->down_drops.load());
  }
  return out;
}

void BridgeDaemon::dump_stats() const {
  std::ofstream out(options_.stats_path, std::ios::trunc);
  if (!out) {
    log::warn("cannot write bridge stats to '{}'", options_.stats_path);
    return;
  }
  out << stats_csv();
}

}  // namespace rimbus
