#include "rimbus/stream.hpp"

#include <fmt/core.h>
#include <poll.h>
#include <sys/socket.h>

#include <cstring>

#include "rimbus/clock.hpp"
#include "rimbus/errors.hpp"
#include "rimbus/log.hpp"

namespace rimbus {

namespace {

void put_u32(uint8_t* p, uint32_t v) {
  for (int i = 0; i < 4; i++) p[i] = uint8_t(v >> (8 * i));
}
uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; i++) v |= uint32_t(p[i]) << (8 * i);
  return v;
}

constexpr size_t kWriteChunk = 256 * 1024;

// read_exact with EAGAIN tolerance: the socket carries a short SO_RCVTIMEO
// so the loop can observe `running` between waits. False on EOF, hard error,
// or shutdown.
bool read_full(int fd, uint8_t* buf, size_t n, const std::atomic<bool>& running) {
  size_t got = 0;
  while (got < n) {
    if (!running.load(std::memory_order_acquire)) return false;
    ssize_t r = ::recv(fd, buf + got, n - got, 0);
    if (r == 0) return false;
    if (r < 0) {
      if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
      return false;
    }
    got += size_t(r);
  }
  return true;
}

}  // namespace

uint32_t stream_channel_id(const TopicKey& topic) {
  return uint32_t(topic_hash(topic) & 0xFFFFFFFFull);
}

// ---------------------------------------------------------------------------
// StreamListener
// ---------------------------------------------------------------------------

StreamListener::StreamListener(Options options, FrameHandler handler)
    : options_(options), handler_(std::move(handler)) {}

StreamListener::~StreamListener() { stop(); }

void StreamListener::start() {
  if (running_.exchange(true)) return;
  listen_fd_ = tcp_listen(options_.port);
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void StreamListener::stop() {
  if (!running_.exchange(false)) return;
  ::shutdown(listen_fd_.get(), SHUT_RDWR);
  listen_fd_.reset();
  if (accept_thread_.joinable()) accept_thread_.join();
  std::lock_guard<std::mutex> lock(conns_mutex_);
  for (auto& t : conn_threads_)
    if (t.joinable()) t.join();
  conn_threads_.clear();
}

void StreamListener::accept_loop() {
  while (running_.load(std::memory_order_acquire)) {
    pollfd pfd{listen_fd_.get(), POLLIN, 0};
    if (::poll(&pfd, 1, 200) <= 0) continue;
    Fd conn(::accept(listen_fd_.get(), nullptr, nullptr));
    if (!conn.valid()) continue;
    tcp_tune(conn.get());
    std::lock_guard<std::mutex> lock(conns_mutex_);
    conn_threads_.emplace_back(
        [this, fd = std::make_shared<Fd>(std::move(conn))]() mutable {
          connection_loop(std::move(*fd));
        });
  }
}

void StreamListener::connection_loop(Fd conn) {
  // Handshake: validate hello, echo the magic back.
  uint8_t hello[kHelloBytes];
  set_recv_timeout(conn.get(), std::chrono::milliseconds(2000));
  if (!read_exact(conn.get(), hello, sizeof(hello))) return;
  const uint32_t magic = get_u32(hello);
  const uint8_t version = hello[4];
  const Lane lane = Lane(hello[5] & 1);
  const uint32_t channel_id = get_u32(hello + 6);
  if (magic != kStreamMagic || version != kStreamVersion ||
      (options_.expected_channel_id != 0 && channel_id != options_.expected_channel_id)) {
    counters_.handshake_failures.fetch_add(1, std::memory_order_relaxed);
    return;  // close without ack: fatal for that peer
  }
  uint8_t ack[4];
  put_u32(ack, kStreamMagic);
  if (!write_all(conn.get(), ack, sizeof(ack))) return;
  set_recv_timeout(conn.get(), std::chrono::milliseconds(200));

  std::vector<uint8_t> frame;
  while (running_.load(std::memory_order_acquire)) {
    uint8_t prefix[kFramePrefixBytes];
    if (!read_full(conn.get(), prefix, sizeof(prefix), running_)) return;
    const uint32_t len = get_u32(prefix);
    if (len < kEnvelopeFixedBytes || len > options_.max_frame_bytes) {
      counters_.oversize_rejects.fetch_add(1, std::memory_order_relaxed);
      return;  // framing is unrecoverable; reject the connection
    }
    frame.resize(len);
    if (!read_full(conn.get(), frame.data(), len, running_)) return;
    counters_.frames_received.fetch_add(1, std::memory_order_relaxed);
    counters_.bytes_received.fetch_add(len + kFramePrefixBytes, std::memory_order_relaxed);

    auto env = decode_envelope(frame);
    if (!env.ok()) {
      // Stream corruption is unrecoverable mid-frame: reset the connection.
      counters_.checksum_resets.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    if (handler_) handler_(std::move(env).value(), channel_id, lane);
  }
}

// ---------------------------------------------------------------------------
// StreamChannel
// ---------------------------------------------------------------------------

StreamChannel::StreamChannel(Options options)
    : options_(std::move(options)), queue_(options_.queue_depth) {
  writer_thread_ = std::thread([this] { writer_loop(); });
}

StreamChannel::~StreamChannel() { stop(); }

void StreamChannel::stop() {
  if (!running_.exchange(false)) return;
  queue_.close();
  if (writer_thread_.joinable()) writer_thread_.join();
  socket_.reset();
}

bool StreamChannel::send(std::shared_ptr<const std::vector<uint8_t>> frame) {
  if (state() != State::kEstablished) {
    counters_.down_drops.fetch_add(1, std::memory_order_relaxed);
    return false;
  }
  if (!queue_.push_wait(std::move(frame), options_.send_timeout)) {
    counters_.slow_peer_drops.fetch_add(1, std::memory_order_relaxed);
    return false;
  }
  return true;
}

bool StreamChannel::wait_established(std::chrono::milliseconds timeout) {
  const uint64_t deadline = monotonic_ns() + uint64_t(timeout.count()) * 1000000ull;
  while (monotonic_ns() < deadline) {
    if (state() == State::kEstablished) return true;
    if (state() == State::kFailed) return false;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return state() == State::kEstablished;
}

bool StreamChannel::connect_once() {
  Fd fd = tcp_connect(options_.remote, options_.connect_timeout);
  if (!fd.valid()) return false;
  tcp_tune(fd.get());
  // Bound write stalls so a dead peer cannot wedge the writer thread.
  timeval tv{};
  tv.tv_sec = options_.send_timeout.count() / 1000;
  tv.tv_usec = (options_.send_timeout.count() % 1000) * 1000;
  setsockopt(fd.get(), SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof(tv));

  uint8_t hello[kHelloBytes];
  put_u32(hello, kStreamMagic);
  hello[4] = kStreamVersion;
  hello[5] = uint8_t(options_.lane);
  put_u32(hello + 6, options_.channel_id);
  if (!write_all(fd.get(), hello, sizeof(hello))) return false;

  uint8_t ack[4] = {};
  set_recv_timeout(fd.get(), std::chrono::milliseconds(2000));
  if (!read_exact(fd.get(), ack, sizeof(ack))) return false;
  if (get_u32(ack) != kStreamMagic) {
    // Wrong magic from a live listener: fatal for this peer.
    counters_.handshake_failures.fetch_add(1, std::memory_order_relaxed);
    state_.store(uint8_t(State::kFailed), std::memory_order_release);
    throw HandshakeError(fmt::format("peer {} answered handshake with wrong magic",
                                     options_.remote.to_string()));
  }
  socket_ = std::move(fd);
  return true;
}

void StreamChannel::writer_loop() {
  auto backoff = options_.backoff_min;
  while (running_.load(std::memory_order_acquire)) {
    if (state() == State::kFailed) return;
    if (!socket_.valid()) {
      bool up = false;
      try {
        up = connect_once();
      } catch (const HandshakeError& e) {
        log::error("stream channel {}: {}", options_.channel_id, e.what());
        return;
      }
      if (!up) {
        state_.store(uint8_t(State::kConnecting), std::memory_order_release);
        std::this_thread::sleep_for(backoff);
        backoff = std::min(backoff * 2, options_.backoff_max);
        continue;
      }
      backoff = options_.backoff_min;
      state_.store(uint8_t(State::kEstablished), std::memory_order_release);
    }

    auto frame = queue_.pop(std::chrono::milliseconds(100));
    if (!frame) continue;
    const auto& bytes = **frame;

    uint8_t prefix[kFramePrefixBytes];
    put_u32(prefix, uint32_t(bytes.size()));
    bool ok = true;
    if (options_.shaper) options_.shaper->acquire(kFramePrefixBytes);
    if (!write_all(socket_.get(), prefix, sizeof(prefix))) ok = false;
    // Frames are written whole: no interleaving is possible because this
    // thread is the only writer on the socket.
    for (size_t off = 0; ok && off < bytes.size(); off += kWriteChunk) {
      const size_t n = std::min(kWriteChunk, bytes.size() - off);
      if (options_.shaper) options_.shaper->acquire(n);
      if (!write_all(socket_.get(), bytes.data() + off, n)) ok = false;
    }
    if (!ok) {
      // Broken pipe: drop this frame, reconnect with backoff.
      socket_.reset();
      state_.store(uint8_t(State::kConnecting), std::memory_order_release);
      counters_.reconnects.fetch_add(1, std::memory_order_relaxed);
      counters_.down_drops.fetch_add(1, std::memory_order_relaxed);
      continue;
    }
    counters_.frames_sent.fetch_add(1, std::memory_order_relaxed);
    counters_.bytes_sent.fetch_add(bytes.size() + kFramePrefixBytes,
                                   std::memory_order_relaxed);
  }
}

}  // namespace rimbus
