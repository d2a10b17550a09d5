#include "rimbus/shm_ring.hpp"

#include <fcntl.h>
#include <fmt/core.h>
#include <signal.h>
#include <sys/file.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include "rimbus/clock.hpp"
#include "rimbus/errors.hpp"

namespace rimbus {

namespace {
constexpr uint64_t kRingMagic = 0x52494D4252494E47ull;  // "RIMBRING"
constexpr uint32_t kRingVersion = 1;
constexpr size_t kAlign = 64;

size_t round_up(size_t n) { return (n + kAlign - 1) & ~(kAlign - 1); }

[[noreturn]] void throw_errno(const std::string& what) {
  throw ShmError(fmt::format("{}: {}", what, std::strerror(errno)));
}
}  // namespace

struct ShmRing::Header {
  uint64_t magic;
  uint32_t version;
  uint32_t slot_count;
  uint64_t slot_size;
  std::atomic<uint64_t> cursor;      // committed message count
  std::atomic<uint32_t> writer_pid;  // advisory single-writer claim
  uint32_t reserved;
};
struct ShmRing::Slot {
  std::atomic<uint64_t> commit_seq;  // 2*(index+1) committed, odd while writing
  uint32_t payload_len;
  uint32_t reserved;
};

ShmRing::Header* ShmRing::header() const { return static_cast<Header*>(map_); }

ShmRing::Slot* ShmRing::slot(uint64_t slot_index) const {
  auto* base = static_cast<uint8_t*>(map_) + kAlign + slot_index * slot_stride_;
  return reinterpret_cast<Slot*>(base);
}

std::string ShmRing::segment_name(const ChipId& chip, const TopicKey& topic) {
  return fmt::format("rimbus.{}.{:016x}", chip.label(), topic_hash(topic));
}

ShmRing ShmRing::create_or_open(const std::string& name, ShmGeometry geometry) {
  static_assert(sizeof(Header) <= kAlign);
  static_assert(sizeof(Slot) <= kAlign);
  static_assert(std::atomic<uint64_t>::is_always_lock_free);
  if (geometry.slot_count == 0 || (geometry.slot_count & (geometry.slot_count - 1)) != 0)
    throw ShmError("slot_count must be a power of two");

  ShmRing ring;
  ring.name_ = name;
  ring.geometry_ = geometry;
  ring.slot_stride_ = kAlign + round_up(geometry.slot_size);

  const std::string shm_name = "/" + name;
  int fd = shm_open(shm_name.c_str(), O_RDWR | O_CREAT, 0666);
  if (fd < 0) throw_errno(fmt::format("shm_open('{}')", name));
  ring.fd_ = fd;

  // flock serializes initialization against concurrent create_or_open.
  if (flock(fd, LOCK_EX) < 0) throw_errno("flock");

  struct stat st{};
  if (fstat(fd, &st) < 0) throw_errno("fstat");

  const size_t total = kAlign + size_t(geometry.slot_count) * ring.slot_stride_;

  if (st.st_size == 0) {
    if (ftruncate(fd, off_t(total)) < 0) throw_errno("ftruncate");
    ring.map_size_ = total;
    ring.map_ = mmap(nullptr, total, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    if (ring.map_ == MAP_FAILED) { ring.map_ = nullptr; throw_errno("mmap"); }
    Header* h = ring.header();
    h->slot_count = geometry.slot_count;
    h->slot_size = geometry.slot_size;
    h->version = kRingVersion;
    h->cursor.store(0, std::memory_order_relaxed);
    h->writer_pid.store(0, std::memory_order_relaxed);
    h->magic = kRingMagic;
  } else {
    if (size_t(st.st_size) < kAlign) {
      flock(fd, LOCK_UN);
      throw ShmError(fmt::format("segment '{}' is truncated", name));
    }
    // Map the header first to learn the existing geometry.
    void* probe = mmap(nullptr, kAlign, PROT_READ, MAP_SHARED, fd, 0);
    if (probe == MAP_FAILED) throw_errno("mmap(header)");
    const Header* h = static_cast<const Header*>(probe);
    if (h->magic != kRingMagic || h->version != kRingVersion) {
      munmap(probe, kAlign);
      flock(fd, LOCK_UN);
      throw ShmError(fmt::format("segment '{}' has a foreign or stale layout", name));
    }
    const ShmGeometry existing{h->slot_count, h->slot_size};
    munmap(probe, kAlign);
    if (existing != geometry) {
      flock(fd, LOCK_UN);
      throw GeometryError(fmt::format(
          "segment '{}' geometry mismatch: existing {}x{} bytes, requested {}x{}", name,
          existing.slot_count, existing.slot_size, geometry.slot_count, geometry.slot_size));
    }
    ring.map_size_ = total;
    ring.map_ = mmap(nullptr, total, PROT_READ | PROT_WRITE, MAP_SHARED, fd, 0);
    if (ring.map_ == MAP_FAILED) { ring.map_ = nullptr; throw_errno("mmap"); }
  }
  flock(fd, LOCK_UN);
  return ring;
}

ShmRing::ShmRing(ShmRing&& other) noexcept { *this = std::move(other); }

ShmRing& ShmRing::operator=(ShmRing&& other) noexcept {
  if (this != &other) {
    this->~ShmRing();
    name_ = std::move(other.name_);
    geometry_ = other.geometry_;
    fd_ = other.fd_;
    map_ = other.map_;
    map_size_ = other.map_size_;
    slot_stride_ = other.slot_stride_;
    writer_ = other.writer_;
    other.fd_ = -1;
    other.map_ = nullptr;
    other.writer_ = false;
  }
  return *this;
}

ShmRing::~ShmRing() {
  if (writer_ && map_) {
    uint32_t self = uint32_t(getpid());
    header()->writer_pid.compare_exchange_strong(self, 0, std::memory_order_relaxed);
  }
  if (map_) munmap(map_, map_size_);
  if (fd_ >= 0) close(fd_);
}

uint64_t ShmRing::cursor() const {
  return header()->cursor.load(std::memory_order_acquire);
}

uint32_t ShmRing::writer_pid() const {
  return header()->writer_pid.load(std::memory_order_relaxed);
}

void ShmRing::attach_writer() {
  if (writer_) return;
  Header* h = header();
  const uint32_t self = uint32_t(getpid());
  uint32_t cur = h->writer_pid.load(std::memory_order_relaxed);
  for (;;) {
    if (cur != 0 && cur != self) {
      // A dead writer's claim is reclaimable.
      if (kill(pid_t(cur), 0) == 0 || errno != ESRCH)
        throw ShmError(fmt::format("segment '{}' already has writer pid {}", name_, cur));
    }
    if (h->writer_pid.compare_exchange_weak(cur, self, std::memory_order_relaxed)) break;
  }
  writer_ = true;
}

void ShmRing::publish(std::span<const uint8_t> encoded) {
  if (encoded.size() > geometry_.slot_size)
    throw SlotOverflowError(fmt::format("frame of {} bytes exceeds slot size {}", encoded.size(),
                                        geometry_.slot_size));
  if (!writer_) attach_writer();

  Header* h = header();
  const uint64_t index = h->cursor.load(std::memory_order_relaxed);
  Slot* s = slot(index & (geometry_.slot_count - 1));

  s->commit_seq.store(2 * index + 1, std::memory_order_release);
  std::atomic_thread_fence(std::memory_order_release);
  auto* data = reinterpret_cast<uint8_t*>(s) + kAlign;
  std::memcpy(data, encoded.data(), encoded.size());
  s->payload_len = uint32_t(encoded.size());
  std::atomic_thread_fence(std::memory_order_release);
  s->commit_seq.store(2 * (index + 1), std::memory_order_release);
  h->cursor.store(index + 1, std::memory_order_release);
}

std::optional<ShmRing::ReadEvent> ShmRing::Reader::poll() {
  const ShmRing& ring = *ring_;
  const uint32_t n = ring.geometry_.slot_count;
  uint64_t gap = 0;

  for (;;) {
    const uint64_t cur = ring.cursor();
    if (next_ >= cur) return std::nullopt;
    if (cur - next_ > n) {
      // Lapped: resume at the oldest message still in the ring.
      gap += (cur - n) - next_;
      next_ = cur - n;
    }
    Slot* s = ring.slot(next_ & (n - 1));
    const uint64_t expected = 2 * (next_ + 1);
    const uint64_t s1 = s->commit_seq.load(std::memory_order_acquire);
    if (s1 != expected) {
      if (s1 < expected) return std::nullopt;  // cursor raced ahead of commit
      continue;  // slot already recycled for a newer message; re-derive lap
    }
    const uint32_t len = s->payload_len;
    if (len > ring.geometry_.slot_size) {
      corrupt_slots_++;
      next_++;
      continue;
    }
    ReadEvent ev;
    ev.frame.resize(len);
    const auto* data = reinterpret_cast<const uint8_t*>(s) + kAlign;
    std::memcpy(ev.frame.data(), data, len);
    std::atomic_thread_fence(std::memory_order_acquire);
    const uint64_t s2 = s->commit_seq.load(std::memory_order_relaxed);
    if (s2 != s1) continue;  // torn by an overwrite mid-copy; retry as lapped
    ev.index = next_;
    ev.gap_before = gap;
    next_++;
    return ev;
  }
}

std::optional<ShmRing::ReadEvent> ShmRing::Reader::read(std::chrono::milliseconds timeout) {
  const uint64_t deadline = monotonic_ns() + uint64_t(timeout.count()) * 1000000ull;
  for (;;) {
    if (auto ev = poll()) return ev;
    if (monotonic_ns() >= deadline) return std::nullopt;
    std::this_thread::sleep_for(kPollSleep);
  }
}

void ShmRing::unlink(const std::string& name) {
  shm_unlink(("/" + name).c_str());
}

}  // namespace rimbus
