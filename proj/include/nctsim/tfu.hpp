#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "nctsim/kernelgen.hpp"
#include "nctsim/memhier.hpp"
#include "nctsim/psx.hpp"

namespace nctsim::tfu {

struct TfuConfig {
  mem::AgentKind attached = mem::AgentKind::TfuL1;
  uint32_t macs_per_cycle = 128;     // multiple of 64
  uint32_t code_reg_capacity = 32;
  uint32_t data_regs = psx::kDataRegs;
  uint32_t queue_depth = 8;          // each of the two issue queues
  bool replicate_weights = false;    // near-L3: copy into the local partition
  bool replicate_inputs = false;
  uint32_t tc_entries = 6;
  uint32_t tc_miss_latency = 30;     // walk through the local core's TLB path
  uint32_t exec_latency = 4;
  uint32_t offload_bus_bytes = 8;

  uint32_t compute_width() const { return macs_per_cycle / psx::kMacsPerVector; }
  uint32_t mem_width() const { return macs_per_cycle >= 128 ? 2 : 1; }
  // unrolling scheduler refill rate: sized so decode never gates a full-width
  // unit on load-heavy kernels
  uint32_t decode_width() const { return std::max(2u, 2 * compute_width()); }
  // pre-decoded entries staged behind each issue queue out of the code
  // registers; sized to cover the attached cache's load latency at full rate
  uint32_t latency_cover() const {
    switch (attached) {
      case mem::AgentKind::TfuL3: return 36;
      case mem::AgentKind::TfuL2: return 20;
      default: return 24;
    }
  }
  uint32_t decode_lookahead() const {
    return std::max(8u, latency_cover() * compute_width() - queue_depth);
  }
};

// Virtual-to-physical staging cache: few entries, page granular, LRU.
class TranslationCache {
 public:
  TranslationCache() = default;
  explicit TranslationCache(uint32_t entries) : entries_(entries) {}

  // Returns the added latency (0 on hit, miss latency otherwise).
  uint32_t lookup(uint64_t vaddr, uint32_t miss_latency);
  void invalidate_all();
  uint64_t hits() const { return hits_; }
  uint64_t misses() const { return misses_; }
  double hit_rate() const {
    uint64_t n = hits_ + misses_;
    return n ? double(hits_) / double(n) : 0.0;
  }

 private:
  struct Entry {
    uint64_t page;
    uint64_t lru;
  };
  uint32_t entries_ = 6;
  uint64_t clock_ = 0;
  uint64_t hits_ = 0, misses_ = 0;
  std::vector<Entry> map_;
};

enum class OffloadStatus : uint8_t { Accepted, TfuBusy, ProgramTooLarge };
enum class RestoreStatus : uint8_t { Ok, RestoreWhileBusy };

struct IssuedOp {
  psx::DynOp op;
  uint64_t seq;
  uint64_t complete_cycle;
};

// One near-cache tensor unit. The unrolling scheduler refills two in-order
// issue queues (memory and compute) from the program cursor; loads may issue
// ahead of older compute ops, everything else stays ordered. Registers are
// guarded by a single ready-bit scoreboard, no renaming.
class Tfu {
 public:
  Tfu(const TfuConfig& cfg, mem::Hierarchy* hier, int core);

  OffloadStatus accept_offload(const psx::Program& p,
                               const std::vector<kern::TensorRole>& roles,
                               uint64_t cycle);
  // Advances one cycle; returns the ops issued this cycle.
  std::vector<IssuedOp> step(uint64_t cycle);
  // Runs to completion from `cycle`; returns the cycle the last op finishes.
  uint64_t run_to_completion(uint64_t cycle);

  bool busy() const { return busy_; }
  bool offload_done(uint64_t cycle) const { return cycle >= decode_start_; }
  uint64_t first_issue_cycle() const { return decode_start_; }
  uint64_t last_completion() const { return last_completion_; }
  uint64_t retired_macs() const { return retired_macs_; }
  uint64_t retired_ops() const { return retired_ops_; }
  uint64_t idle_cycles() const { return idle_cycles_; }
  uint64_t tc_extra_cycles() const { return tc_extra_cycles_; }
  TranslationCache& tc() { return tc_; }
  const TfuConfig& config() const { return cfg_; }

  struct Entry {
    IssuedOp op;
    std::array<uint64_t, 3> dep{};  // producer sequence numbers
    int n_dep = 0;
  };
  struct Snapshot {
    psx::Program program;
    std::vector<kern::TensorRole> roles;
    psx::UnrollCursor::State cursor;
    std::array<uint64_t, psx::kDataRegs> writer;
    std::vector<std::pair<uint64_t, uint64_t>> ring;
    std::deque<Entry> mem_q, compute_q;
    bool busy;
    uint64_t decode_start;
    uint64_t next_seq;
  };
  Snapshot save_context() const;
  RestoreStatus restore_context(const Snapshot& s);

 private:
  static constexpr size_t kRing = 1024;  // seq-tagged completion slots

  void refill(uint64_t cycle);
  bool deps_ready(const Entry& e, uint64_t cycle) const;

  TfuConfig cfg_;
  mem::Hierarchy* hier_;
  int core_;
  TranslationCache tc_;

  psx::Program program_;
  std::vector<kern::TensorRole> roles_;
  std::optional<psx::UnrollCursor> cursor_;
  std::deque<Entry> mem_q_, compute_q_;
  std::array<uint64_t, psx::kDataRegs> writer_{};  // last writer seq, at decode
  std::vector<std::pair<uint64_t, uint64_t>> ring_;  // (seq, completion)
  bool busy_ = false;
  uint64_t decode_start_ = 0;
  uint64_t next_seq_ = 1;
  uint64_t last_completion_ = 0;
  uint64_t retired_macs_ = 0;
  uint64_t retired_ops_ = 0;
  uint64_t idle_cycles_ = 0;
  uint64_t tc_extra_cycles_ = 0;
};

}  // namespace nctsim::tfu
