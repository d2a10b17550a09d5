#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "rimbus/clock.hpp"
#include "rimbus/datagram.hpp"

using namespace rimbus;

namespace {

std::vector<uint8_t> encoded_frame(const char* topic, uint64_t seq, size_t payload_len) {
  std::vector<uint8_t> payload(payload_len);
  std::mt19937_64 rng(seq * 7 + payload_len);
  for (auto& b : payload) b = uint8_t(rng());
  return encode_envelope(make_envelope(TopicKey::vehicle_area(topic), seq, now_ns(),
                                       std::move(payload)));
}

struct UdpPair {
  Fd rx, tx;
  SocketAddress rx_addr;
  UdpPair() {
    rx = udp_bind(SocketAddress::loopback(0));
    tx = udp_bind(SocketAddress::loopback(0));
    rx_addr = local_address(rx.get());
    set_recv_timeout(rx.get(), std::chrono::milliseconds(200));
  }
};

}  // namespace

TEST_CASE("fragment counts match the size arithmetic") {
  // 1 KB message fits one datagram.
  CHECK(fragment_count(encoded_frame("t", 0, 1024).size(), 61440) == 1);
  // 100 KB at a 60 KiB cap needs 2 fragments.
  CHECK(fragment_count(encoded_frame("t", 0, 102400).size(), 61440) == 2);
  // 6 MB at the default cap needs 103; one lost fragment loses the message.
  CHECK(fragment_count(encoded_frame("bench/large", 0, 6291456).size(), 61440) == 103);
}

TEST_CASE("fragment header round-trip and rejection") {
  uint8_t buf[kFragmentHeaderBytes];
  write_fragment_header(buf, FragmentHeader{42, 7, 103});
  auto h = parse_fragment_header({buf, sizeof(buf)});
  REQUIRE(h.has_value());
  CHECK(h->msg_seq == 42);
  CHECK(h->frag_index == 7);
  CHECK(h->frag_count == 103);

  buf[0] ^= 0xFF;  // magic
  CHECK_FALSE(parse_fragment_header({buf, sizeof(buf)}).has_value());
  write_fragment_header(buf, FragmentHeader{1, 9, 9});  // index >= count
  CHECK_FALSE(parse_fragment_header({buf, sizeof(buf)}).has_value());
}

TEST_CASE("loss injector: boundary rates and determinism") {
  LossInjector none(0.0, 1);
  LossInjector all(1.0, 1);
  for (int i = 0; i < 1000; i++) {
    CHECK_FALSE(none.should_drop());
    CHECK(all.should_drop());
  }
  LossInjector a(0.3, 42), b(0.3, 42), c(0.3, 43);
  int diff_ab = 0, diff_ac = 0;
  for (int i = 0; i < 4096; i++) {
    const bool da = a.should_drop();
    diff_ab += da != b.should_drop();
    diff_ac += da != c.should_drop();
  }
  CHECK(diff_ab == 0);  // same seed, same decisions
  CHECK(diff_ac > 0);   // different seed diverges
}

TEST_CASE("loss injector: per-message delivery probability matches (1-p)^n") {
  // A 6 MB message fragments into 103 datagrams; at 1% loss the whole
  // message survives with probability 0.99^103.
  constexpr int kFrags = 103;
  constexpr int kTrials = 10000;
  LossInjector loss(0.01, 2024);
  int survived = 0;
  for (int t = 0; t < kTrials; t++) {
    bool whole = true;
    for (int f = 0; f < kFrags; f++)
      if (loss.should_drop()) whole = false;
    survived += whole;
  }
  const double measured = double(survived) / kTrials;
  const double analytic = std::pow(0.99, kFrags);
  CHECK(analytic == doctest::Approx(0.3551).epsilon(0.01));
  CHECK(measured == doctest::Approx(analytic).epsilon(0.09));  // ±~0.03 absolute
}

TEST_CASE("reassembly over loopback: in-order, reordered, zero loss") {
  UdpPair pair;
  DatagramCounters counters;
  std::atomic<uint64_t> seq_source{0};
  DatagramSender sender(pair.tx.get(), 4096, &counters, &seq_source);
  Reassembler reasm(Reassembler::Options{}, &counters);

  auto pump = [&](size_t expect) {
    std::vector<MessageEnvelope> out;
    std::vector<uint8_t> buf(65536);
    while (out.size() < expect) {
      sockaddr_in from{};
      socklen_t fl = sizeof(from);
      ssize_t n = recvfrom(pair.rx.get(), buf.data(), buf.size(), 0,
                           reinterpret_cast<sockaddr*>(&from), &fl);
      if (n <= 0) break;
      if (auto env = reasm.feed(SocketAddress::from(from), {buf.data(), size_t(n)}, now_ns()))
        out.push_back(std::move(*env));
    }
    return out;
  };

  // Multi-fragment messages of varying size, all delivered bit-exact.
  std::vector<std::vector<uint8_t>> frames;
  for (uint64_t i = 0; i < 20; i++) {
    frames.push_back(encoded_frame("reasm", i, 1 + (i * 977) % 20000));
    sender.send(pair.rx_addr, frames.back());
  }
  auto got = pump(20);
  REQUIRE(got.size() == 20);
  for (uint64_t i = 0; i < 20; i++) {
    CHECK(got[i].seq == i);
    CHECK(encode_envelope(got[i]) == frames[i]);
  }
  CHECK(counters.messages_delivered.load() == 20);
}

TEST_CASE("reassembly: fragment order does not matter") {
  DatagramCounters counters;
  Reassembler reasm(Reassembler::Options{}, &counters);
  const auto frame = encoded_frame("perm", 5, 10000);
  const uint32_t cap = 2048;
  const size_t budget = cap - kFragmentHeaderBytes;
  const size_t count = fragment_count(frame.size(), cap);
  REQUIRE(count > 3);

  std::vector<std::vector<uint8_t>> dgrams;
  for (size_t i = 0; i < count; i++) {
    const size_t off = i * budget;
    const size_t n = std::min(budget, frame.size() - off);
    std::vector<uint8_t> d(kFragmentHeaderBytes + n);
    write_fragment_header(d.data(), FragmentHeader{99, uint16_t(i), uint16_t(count)});
    std::copy_n(frame.begin() + long(off), n, d.begin() + kFragmentHeaderBytes);
    dgrams.push_back(std::move(d));
  }
  std::mt19937_64 rng(3);
  std::shuffle(dgrams.begin(), dgrams.end(), rng);

  const auto src = SocketAddress::loopback(1111);
  std::optional<MessageEnvelope> delivered;
  for (const auto& d : dgrams) {
    auto env = reasm.feed(src, d, now_ns());
    if (env) {
      CHECK_FALSE(delivered.has_value());
      delivered = std::move(env);
    }
  }
  REQUIRE(delivered.has_value());
  CHECK(encode_envelope(*delivered) == frame);

  // Feeding the whole set again does not deliver twice (at-most-once).
  for (const auto& d : dgrams) CHECK_FALSE(reasm.feed(src, d, now_ns()).has_value());
  CHECK(counters.duplicates_suppressed.load() > 0);
}

TEST_CASE("reassembly: one lost fragment drops the message after the timeout") {
  DatagramCounters counters;
  Reassembler reasm(Reassembler::Options{.reassembly_timeout_ns = 1000000}, &counters);
  const auto frame = encoded_frame("lossy", 6, 30000);
  const uint32_t cap = 2048;
  const size_t budget = cap - kFragmentHeaderBytes;
  const size_t count = fragment_count(frame.size(), cap);

  uint64_t t = now_ns();
  const size_t dropped_index = count / 2;
  for (size_t i = 0; i < count; i++) {
    if (i == dropped_index) continue;
    const size_t off = i * budget;
    const size_t n = std::min(budget, frame.size() - off);
    std::vector<uint8_t> d(kFragmentHeaderBytes + n);
    write_fragment_header(d.data(), FragmentHeader{7, uint16_t(i), uint16_t(count)});
    std::copy_n(frame.begin() + long(off), n, d.begin() + kFragmentHeaderBytes);
    CHECK_FALSE(reasm.feed(SocketAddress::loopback(5), d, t).has_value());
  }
  CHECK(reasm.pending_assemblies() == 1);

  // Any later datagram past the timeout expires the incomplete assembly.
  uint8_t probe[kFragmentHeaderBytes];
  write_fragment_header(probe, FragmentHeader{1000, 0, 1});
  reasm.feed(SocketAddress::loopback(5), {probe, sizeof(probe)}, t + 2000000);
  CHECK(counters.expired_assemblies.load() == 1);
  CHECK(counters.messages_delivered.load() == 0);
}

TEST_CASE("datagram transport: zero loss delivers every size" * doctest::timeout(60)) {
  UdpPair pair;
  DatagramCounters counters;
  std::atomic<uint64_t> seq_source{0};
  DatagramSender sender(pair.tx.get(), 61440, &counters, &seq_source);
  Reassembler reasm(Reassembler::Options{}, &counters);

  std::mt19937_64 rng(8);
  std::vector<size_t> sizes = {1, 17, 1024, 61424, 61425, 200000, 2097152};
  for (int i = 0; i < 30; i++) sizes.push_back(1 + rng() % 500000);

  size_t delivered = 0;
  std::vector<uint8_t> buf(65536);
  for (size_t k = 0; k < sizes.size(); k++) {
    auto frame = encoded_frame("zl", k, sizes[k]);
    sender.send(pair.rx_addr, frame);
    for (;;) {
      sockaddr_in from{};
      socklen_t fl = sizeof(from);
      ssize_t n = recvfrom(pair.rx.get(), buf.data(), buf.size(), 0,
                           reinterpret_cast<sockaddr*>(&from), &fl);
      REQUIRE(n > 0);
      auto env = reasm.feed(SocketAddress::from(from), {buf.data(), size_t(n)}, now_ns());
      if (env) {
        CHECK(encode_envelope(*env) == frame);
        delivered++;
        break;
      }
    }
  }
  CHECK(delivered == sizes.size());
  CHECK(counters.checksum_failures.load() == 0);
}
