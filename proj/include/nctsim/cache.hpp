#pragma once

#include <cstdint>
#include <deque>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace nctsim::mem {

struct SimInvariantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Replacement : uint8_t { LRU, RRIP };

struct CacheConfig {
  uint64_t capacity_bytes = 0;
  uint32_t ways = 1;
  uint32_t line_bytes = 64;
  Replacement replacement = Replacement::LRU;
  uint32_t read_ports = 0;        // dedicated 64B read ports
  uint32_t write_ports = 0;       // dedicated 64B write ports
  uint32_t shared_rw_ports = 0;   // 64B ports usable either way
  uint32_t mshr_entries = 8;
  uint32_t tag_latency = 1;
  uint32_t data_latency = 4;
  uint32_t slices = 1;                  // L3 only
  uint32_t partitioned_ways_for_tfu = 0;  // L3 only

  uint64_t sets() const { return capacity_bytes / (uint64_t(ways) * line_bytes); }
  void check() const {
    if (capacity_bytes % (uint64_t(ways) * line_bytes) != 0)
      throw SimInvariantError("capacity not divisible by ways*line");
    if (partitioned_ways_for_tfu >= ways)
      throw SimInvariantError("partition must leave shared ways");
  }
};

// Set-associative tag array. Way ranges let an L3 slice reserve a private
// region for its near-cache unit; lookups always search every way.
class CacheArray {
 public:
  CacheArray() = default;
  CacheArray(uint64_t sets, uint32_t ways, Replacement repl);

  struct Evicted {
    bool valid = false;
    uint64_t line = 0;
    bool dirty = false;
  };

  bool lookup(uint64_t line, bool touch = true);
  bool present(uint64_t line) const;
  // Insert into ways [way_lo, way_hi); returns the victim, if any.
  Evicted insert(uint64_t line, bool dirty, uint32_t way_lo, uint32_t way_hi);
  Evicted insert(uint64_t line, bool dirty) { return insert(line, dirty, 0, ways_); }
  void set_dirty(uint64_t line);
  bool invalidate(uint64_t line);  // returns previous dirty flag
  uint64_t sets() const { return sets_; }
  uint32_t ways() const { return ways_; }

 private:
  struct Entry {
    uint64_t tag = 0;
    bool valid = false;
    bool dirty = false;
    uint64_t lru = 0;    // LRU stamp
    uint8_t rrpv = 3;    // 2-bit re-reference prediction value
  };
  uint64_t set_of(uint64_t line) const { return line % sets_; }
  Entry* find(uint64_t line);
  const Entry* find(uint64_t line) const;

  uint64_t sets_ = 1;
  uint32_t ways_ = 1;
  Replacement repl_ = Replacement::LRU;
  uint64_t clock_ = 0;
  std::vector<Entry> entries_;  // sets_ * ways_
};

// Per-cycle port budget with future reservations. Requests arrive in
// non-decreasing cycle order; a full cycle pushes the request to the next
// free slot. Over-booking is a hard invariant violation.
class PortSchedule {
 public:
  PortSchedule() = default;
  PortSchedule(uint32_t reads, uint32_t writes, uint32_t shared)
      : reads_(reads), writes_(writes), shared_(shared) {}

  // Returns the granted cycle (>= requested).
  uint64_t reserve(uint64_t cycle, bool is_write);
  void prune_before(uint64_t cycle);
  uint64_t slots_used() const { return total_used_; }
  uint32_t slots_per_cycle() const { return reads_ + writes_ + shared_; }

 private:
  struct Use {
    uint32_t r = 0, w = 0, s = 0;
  };
  bool try_take(Use& u, bool is_write);

  uint32_t reads_ = 0, writes_ = 0, shared_ = 0;
  uint64_t total_used_ = 0;
  uint64_t prune_floor_ = 0;
  std::unordered_map<uint64_t, Use> used_;
};

// Outstanding-miss bookkeeping. Primary misses take an entry until fill
// completion; secondary misses to the same line merge onto the in-flight one.
class MshrBank {
 public:
  MshrBank() = default;
  explicit MshrBank(uint32_t entries) : entries_(entries) {}

  struct Grant {
    uint64_t start_cycle;    // when an entry was available
    bool merged;             // someone already fetching this line
    uint64_t merged_completion;
  };
  Grant acquire(uint64_t cycle, uint64_t line);
  void fill_done(uint64_t line, uint64_t completion_cycle);
  uint64_t stall_cycles() const { return stall_cycles_; }

 private:
  void prune(uint64_t cycle);
  uint32_t entries_ = 8;
  uint64_t stall_cycles_ = 0;
  std::unordered_map<uint64_t, uint64_t> inflight_;  // line -> completion
};

}  // namespace nctsim::mem
