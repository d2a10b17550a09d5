#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rimbus/types.hpp"

namespace rimbus {

struct ShmGeometry {
  uint32_t slot_count = 8;       // power of two
  uint64_t slot_size = 8ull << 20;

  friend bool operator==(const ShmGeometry&, const ShmGeometry&) = default;
};

/// Per-topic shared-memory ring for same-chip delivery and bridge fan-out.
///
/// Single writer, many readers, overwrite-oldest. Each slot carries a
/// commit counter following seqlock discipline: the writer marks the slot
/// odd before writing and commits it to 2*(index+1) afterwards, so readers
/// detect both mid-write slots and slots their lap position has lost to a
/// faster writer. Readers never block the writer.
class ShmRing {
 public:
  static constexpr std::chrono::microseconds kPollSleep{100};

  /// Segment name under the OS shared-memory namespace.
  static std::string segment_name(const ChipId& chip, const TopicKey& topic);

  /// Idempotent: the first caller creates and zeroes, later callers map the
  /// existing segment. Throws GeometryError on a slot_count/slot_size
  /// mismatch with an existing segment, ShmError on OS failure.
  static ShmRing create_or_open(const std::string& name, ShmGeometry geometry);

  ShmRing(ShmRing&&) noexcept;
  ShmRing& operator=(ShmRing&&) noexcept;
  ShmRing(const ShmRing&) = delete;
  ShmRing& operator=(const ShmRing&) = delete;
  ~ShmRing();

  const std::string& name() const { return name_; }
  ShmGeometry geometry() const { return geometry_; }

  /// Committed message count (also the index of the next write).
  uint64_t cursor() const;

  /// Pid of the current writer claim (0 when unclaimed).
  uint32_t writer_pid() const;

  /// Claims the single-writer role. Throws ShmError if another live process
  /// already writes this segment. Called implicitly by the first publish.
  void attach_writer();

  /// Writes one encoded envelope into the next slot, overwriting the oldest
  /// when the ring is full; never blocks on readers. Throws
  /// SlotOverflowError if the frame exceeds slot_size.
  void publish(std::span<const uint8_t> encoded);

  struct ReadEvent {
    std::vector<uint8_t> frame;  // encoded envelope bytes
    uint64_t index = 0;          // ring position of this message
    uint64_t gap_before = 0;     // messages lost to overwrite before this one
  };

  /// A cursor-tracking reader. Each reader sees every committed message
  /// (fan-out, no consume semantics) unless it lags by more than the ring
  /// capacity, in which case the gap is reported and it resumes at the
  /// oldest available message.
  class Reader {
   public:
    /// Non-blocking: next committed message, if any.
    std::optional<ReadEvent> poll();
    /// Blocking poll loop with kPollSleep granularity.
    std::optional<ReadEvent> read(std::chrono::milliseconds timeout);

    uint64_t next_index() const { return next_; }
    uint64_t corrupt_slots() const { return corrupt_slots_; }

   private:
    friend class ShmRing;
    Reader(const ShmRing* ring, uint64_t start) : ring_(ring), next_(start) {}
    const ShmRing* ring_;
    uint64_t next_;
    uint64_t corrupt_slots_ = 0;
  };

  /// Reader starting at the current end of the ring (no history replay).
  Reader make_reader() const { return Reader(this, cursor()); }
  /// Reader starting at an explicit index (0 replays what the ring holds).
  Reader make_reader_from(uint64_t index) const { return Reader(this, index); }

  /// Unlinks the segment from the OS namespace (existing mappings survive).
  static void unlink(const std::string& name);

 private:
  ShmRing() = default;

  struct Header;
  struct Slot;
  Header* header() const;
  Slot* slot(uint64_t slot_index) const;

  std::string name_;
  ShmGeometry geometry_{};
  int fd_ = -1;
  void* map_ = nullptr;
  size_t map_size_ = 0;
  uint64_t slot_stride_ = 0;
  bool writer_ = false;
};

}  // namespace rimbus
