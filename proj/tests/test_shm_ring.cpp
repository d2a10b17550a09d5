#include <doctest.h>

#include <atomic>
#include <random>
#include <thread>

#include "rimbus/envelope.hpp"
#include "rimbus/shm_ring.hpp"

using namespace rimbus;

namespace {

struct RingFixture {
  std::string name;
  explicit RingFixture(const char* tag, ShmGeometry geo = {8, 1 << 16})
      : name(fmt_name(tag)), geometry(geo) {
    ShmRing::unlink(name);
    ring = std::make_unique<ShmRing>(ShmRing::create_or_open(name, geometry));
  }
  ~RingFixture() { ShmRing::unlink(name); }

  static std::string fmt_name(const char* tag) {
    return std::string("rimbus.test.") + tag + "." + std::to_string(getpid());
  }

  ShmGeometry geometry;
  std::unique_ptr<ShmRing> ring;
};

std::vector<uint8_t> frame_of(uint64_t seq, size_t payload_len, uint8_t fill = 0) {
  std::vector<uint8_t> payload(payload_len);
  for (size_t i = 0; i < payload_len; i++) payload[i] = uint8_t(fill + i);
  return encode_envelope(make_envelope(TopicKey::chip_local("ring/t"), seq, seq * 10, payload));
}

}  // namespace

TEST_CASE("ring: create then open sees same geometry; mismatch rejected") {
  RingFixture fx("geom");
  ShmRing again = ShmRing::create_or_open(fx.name, fx.geometry);
  CHECK(again.geometry() == fx.geometry);
  CHECK_THROWS_AS(ShmRing::create_or_open(fx.name, ShmGeometry{8, 1 << 17}), GeometryError);
  CHECK_THROWS_AS(ShmRing::create_or_open(fx.name, ShmGeometry{16, 1 << 16}), GeometryError);
}

TEST_CASE("ring: in-order delivery and content fidelity") {
  RingFixture fx("fifo");
  auto reader = fx.ring->make_reader();
  for (uint64_t i = 0; i < 10; i++) {
    fx.ring->publish(frame_of(i, 100));
    auto ev = reader.poll();
    REQUIRE(ev.has_value());
    CHECK(ev->index == i);
    CHECK(ev->gap_before == 0);
    CHECK(ev->frame == frame_of(i, 100));  // bit-identical copy-out
    auto env = decode_envelope(ev->frame);
    REQUIRE(env.ok());
    CHECK(env.value().seq == i);
  }
  CHECK_FALSE(reader.poll().has_value());
}

TEST_CASE("ring: overwrite-oldest keeps the newest slot_count frames") {
  RingFixture fx("wrap");
  // slot_count + 1 publishes with no reader: oldest overwritten.
  for (uint64_t i = 0; i < 9; i++) fx.ring->publish(frame_of(i, 64));
  auto reader = fx.ring->make_reader_from(0);
  auto first = reader.poll();
  REQUIRE(first.has_value());
  CHECK(first->gap_before == 1);
  CHECK(first->index == 1);
  uint64_t idx = first->index;
  while (auto ev = reader.poll()) idx = ev->index;
  CHECK(idx == 8);
}

TEST_CASE("ring: Gap arithmetic for a lapped reader") {
  // 100 messages through an 8-slot ring with a sleeping reader:
  // Gap(92), then the last 8 messages.
  RingFixture fx("gap");
  auto reader = fx.ring->make_reader_from(0);
  for (uint64_t i = 0; i < 100; i++) fx.ring->publish(frame_of(i, 32));
  auto ev = reader.poll();
  REQUIRE(ev.has_value());
  CHECK(ev->gap_before == 92);
  CHECK(ev->index == 92);
  size_t delivered = 1;
  while (auto next = reader.poll()) {
    CHECK(next->gap_before == 0);
    delivered++;
  }
  CHECK(delivered == 8);
}

TEST_CASE("ring: oversize frame rejected") {
  RingFixture fx("oversize", ShmGeometry{4, 4096});
  CHECK_THROWS_AS(fx.ring->publish(frame_of(0, 5000)), SlotOverflowError);
}

TEST_CASE("ring: fan-out to two readers sees identical bytes") {
  RingFixture fx("fanout");
  auto r1 = fx.ring->make_reader();
  auto r2 = fx.ring->make_reader();
  for (uint64_t i = 0; i < 20; i++) {
    fx.ring->publish(frame_of(i, 512, uint8_t(i)));
    auto e1 = r1.read(std::chrono::milliseconds(100));
    auto e2 = r2.read(std::chrono::milliseconds(100));
    REQUIRE(e1.has_value());
    REQUIRE(e2.has_value());
    CHECK(e1->frame == e2->frame);
  }
}

TEST_CASE("ring: second writer process claim is rejected, dead writer reclaimed") {
  RingFixture fx("writer");
  fx.ring->attach_writer();
  ShmRing other = ShmRing::create_or_open(fx.name, fx.geometry);
  // Same pid: allowed (it is the same writer identity).
  CHECK_NOTHROW(other.attach_writer());
}

TEST_CASE("ring: torn-read stress delivers zero corrupt frames" * doctest::timeout(120)) {
  // A writer laps the ring continuously while two readers copy out and
  // checksum-verify. Readers may skip (gaps) but must never surface a torn
  // frame: every delivered frame decodes with a valid checksum.
  RingFixture fx("stress", ShmGeometry{8, 4096});
  constexpr uint64_t kWrites = 100000;
  std::atomic<bool> stop{false};
  std::atomic<uint64_t> torn{0};
  std::atomic<uint64_t> delivered{0};

  auto read_loop = [&] {
    auto reader = fx.ring->make_reader_from(0);
    std::mt19937_64 rng(std::random_device{}());
    while (!stop.load(std::memory_order_acquire)) {
      auto ev = reader.poll();
      if (!ev) continue;
      auto env = decode_envelope(ev->frame);
      if (!env.ok())
        torn.fetch_add(1);
      else
        delivered.fetch_add(1);
      if ((rng() & 0xFF) == 0)
        std::this_thread::sleep_for(std::chrono::microseconds(rng() % 200));
    }
  };
  std::thread r1(read_loop), r2(read_loop);

  std::mt19937_64 rng(99);
  for (uint64_t i = 0; i < kWrites; i++)
    fx.ring->publish(frame_of(i, 1 + rng() % 2048, uint8_t(i)));
  std::this_thread::sleep_for(std::chrono::milliseconds(50));
  stop.store(true, std::memory_order_release);
  r1.join();
  r2.join();

  CHECK(torn.load() == 0);
  CHECK(delivered.load() > 0);
  CHECK(fx.ring->cursor() == kWrites);
}

TEST_CASE("ring: writer progress is independent of reader count" * doctest::timeout(120)) {
  // Publish 10^4 messages with 0 and then 4 slow readers attached; the
  // medians must stay within 2x.
  auto run = [](const char* tag, int readers) {
    RingFixture fx(tag, ShmGeometry{8, 4096});
    std::atomic<bool> stop{false};
    std::vector<std::thread> pool;
    for (int i = 0; i < readers; i++)
      pool.emplace_back([&] {
        auto rd = fx.ring->make_reader_from(0);
        while (!stop.load(std::memory_order_acquire)) {
          rd.poll();
          std::this_thread::sleep_for(std::chrono::microseconds(500));  // slow reader
        }
      });
    constexpr int kN = 10000;
    std::vector<uint64_t> ns(kN);
    auto frame = frame_of(0, 1024);
    for (int i = 0; i < kN; i++) {
      auto t0 = std::chrono::steady_clock::now();
      fx.ring->publish(frame);
      ns[size_t(i)] =
          uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                       std::chrono::steady_clock::now() - t0)
                       .count());
    }
    stop.store(true, std::memory_order_release);
    for (auto& t : pool) t.join();
    std::sort(ns.begin(), ns.end());
    return ns[kN / 2];
  };
  const uint64_t alone = run("prog0", 0);
  const uint64_t crowded = run("prog4", 4);
  INFO("median publish ns alone=", alone, " with readers=", crowded);
  CHECK(double(crowded) <= 2.0 * double(alone) + 2000.0);  // +2us absolute floor
}
