#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nctsim/cache.hpp"

namespace nctsim::mem {

// Directory-based MESIF tracking at line granularity. Coherence agents are
// the per-core private hierarchies (L1+L2 as one domain, with an extra
// l1-owner bit inside it) and the per-slice near-L3 local regions (an extra
// presence/ownership bit per near-L3 unit in the directory entry).
//
// Transitions are atomic with respect to the simulated cycle: the timing
// layer consumes the returned actions (invalidations, writebacks) and charges
// their latency; the model checker drives the same object directly.
class CoherenceModel {
 public:
  CoherenceModel(int cores, int slices) : cores_(cores), slices_(slices) {}

  enum class CoreState : uint8_t { I, S, E, M, F };

  struct LineState {
    std::vector<CoreState> core;    // per-core domain state (at L2)
    std::vector<bool> l1_present;   // line cached in core's L1
    std::vector<bool> l1_owner;     // L2's extra bit: L1 holds it modified
    std::vector<bool> near_l3;      // per-slice replica present
    std::optional<int> near_l3_owner;  // slice replica holding write permission
  };

  struct Actions {
    int invalidations = 0;       // copies killed at other agents
    int writebacks = 0;          // dirty data pushed down
    bool l1_snoop = false;       // the requester's own L1 was snooped
    bool had_remote_owner = false;
  };

  // Core-side requests enter through the L1 path.
  Actions core_load(int core, uint64_t line);
  Actions core_store(int core, uint64_t line);
  // Near-cache units access their attachment level directly.
  Actions tfu_l2_load(int core, uint64_t line);
  Actions tfu_l2_store(int core, uint64_t line);
  Actions tfu_l3_load(int slice, uint64_t line, bool allocate_replica);
  Actions tfu_l3_store(int slice, uint64_t line);
  // Write landing at the shared level: strips every private copy.
  Actions shared_store(uint64_t line);
  // Evictions from the holding structures.
  void evict_l1(int core, uint64_t line);
  void evict_core(int core, uint64_t line);     // whole private domain
  void evict_replica(int slice, uint64_t line);

  const LineState* peek(uint64_t line) const;
  bool core_has(int core, uint64_t line) const;
  bool l1_owner_bit(int core, uint64_t line) const;
  bool replica_present(int slice, uint64_t line) const;

  // Single-writer/multiple-reader plus owner-bit consistency. Returns an
  // empty string when every tracked line is consistent.
  std::string check_invariants() const;

  uint64_t transitions() const { return transitions_; }

 private:
  LineState& state(uint64_t line);
  // Strip write permission and other copies so `keep` can write.
  Actions make_exclusive(LineState& s, int keep_core, int keep_slice);
  Actions downgrade_writers(LineState& s, int req_core, int req_slice);

  int cores_, slices_;
  uint64_t transitions_ = 0;
  std::unordered_map<uint64_t, LineState> lines_;
};

}  // namespace nctsim::mem
