#pragma once

#include <atomic>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

#include "rimbus/config.hpp"
#include "rimbus/shaper.hpp"
#include "rimbus/shm_ring.hpp"
#include "rimbus/stream.hpp"

namespace rimbus {

/// Sliding window of already-forwarded (seq, publish_ts) pairs, per
/// (topic, dest). Within the window each message is forwarded at most once;
/// replays beyond the window forward again (at-least-once across restarts).
class DedupWindow {
 public:
  explicit DedupWindow(size_t capacity = 1024) : capacity_(capacity) {}

  /// True if the pair was new (caller should forward); false if suppressed.
  bool check_and_insert(uint64_t seq, uint64_t publish_ts_ns);

  size_t size() const { return order_.size(); }

 private:
  struct Hash {
    size_t operator()(const std::pair<uint64_t, uint64_t>& p) const {
      return std::hash<uint64_t>{}(p.first * 0x9E3779B97F4A7C15ull ^ p.second);
    }
  };
  size_t capacity_;
  std::unordered_set<std::pair<uint64_t, uint64_t>, Hash> seen_;
  std::deque<std::pair<uint64_t, uint64_t>> order_;
};

struct BridgeRouteStats {
  std::atomic<uint64_t> forwarded_count{0};
  std::atomic<uint64_t> forwarded_bytes{0};  // wire bytes incl. frame prefix
  std::atomic<uint64_t> dedup_suppressed{0};
  std::atomic<uint64_t> republish_count{0};
  std::atomic<uint64_t> down_drops{0};
};

/// Per-chip Message Bridge daemon. For every configured route whose source
/// is this chip it subscribes to the topic's shared-memory ring and forwards
/// each committed message exactly once per destination chip over that
/// route's stream channel; for routes targeting this chip it republishes
/// received frames into local shared memory, where the normal fan-out path
/// delivers them to every local subscriber with a single write.
class BridgeDaemon {
 public:
  struct Options {
    /// Lane shaping in MB/s (0 = unshaped).
    double ethernet_mbps = 0;
    double pcie_mbps = 0;
    std::string stats_path;          // default: cfg.bridge_stats_path(chip)
    uint32_t stats_period_ms = 1000; // periodic dump; 0 disables
    size_t dedup_window = 1024;
    /// How many ring positions to re-read after a channel reconnect; the
    /// dedup window suppresses the ones already forwarded.
    uint32_t reconnect_replay = 8;
  };

  BridgeDaemon(SystemConfig cfg, Options options = {});
  ~BridgeDaemon();

  void start();
  void stop();

  /// Rows of "topic,dest,forwarded_count,forwarded_bytes,dedup_suppressed,
  /// republish_count,down_drops" with a header line.
  std::string stats_csv() const;
  void dump_stats() const;

  const BridgeRouteStats& stats_for(const TopicKey& topic, const ChipId& dest) const;

 private:
  struct EgressWorker {
    const BridgeRoute* route;
    ChipId dest;
    std::unique_ptr<StreamChannel> channel;
    std::unique_ptr<DedupWindow> dedup;
    BridgeRouteStats* stats;
  };

  void egress_loop(const BridgeRoute* route, std::vector<EgressWorker*> workers);
  void stats_loop();
  ShaperPtr shaper_for(Lane lane);

  SystemConfig cfg_;
  Options options_;
  std::atomic<bool> running_{false};

  // (topic, dest label) -> stats row; stable storage for the daemon's life.
  mutable std::mutex stats_mutex_;
  std::map<std::pair<TopicKey, std::string>, std::unique_ptr<BridgeRouteStats>> stats_;
  BridgeRouteStats* stats_row(const TopicKey& topic, const ChipId& dest);

  std::vector<std::unique_ptr<EgressWorker>> egress_workers_;
  std::vector<std::thread> egress_threads_;
  std::vector<std::unique_ptr<StreamListener>> ingress_listeners_;
  std::map<std::string, std::shared_ptr<ShmRing>> ingress_rings_;
  std::thread stats_thread_;
  ShaperPtr ethernet_shaper_;
  ShaperPtr pcie_shaper_;
};

}  // namespace rimbus
