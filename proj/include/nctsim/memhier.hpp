#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nctsim/cache.hpp"
#include "nctsim/coherence.hpp"
#include "nctsim/kernelgen.hpp"

namespace nctsim::mem {

enum class Level : uint8_t { L1, L2, L3, DRAM };
const char* to_string(Level);

enum class AgentKind : uint8_t { CoreThread, TfuL1, TfuL2, TfuL3 };

struct Requester {
  int core = 0;
  AgentKind kind = AgentKind::CoreThread;
};

struct MemRequest {
  Requester who;
  bool is_store = false;
  uint64_t vaddr = 0;
  uint32_t bytes = 64;
  uint64_t issue_cycle = 0;
  kern::TensorRole role = kern::TensorRole::None;
  // near-L3 loads: pull remote lines into the local partitioned ways
  bool replicate = false;
};

struct AccessResult {
  Level hit_level = Level::L1;
  uint64_t complete_cycle = 0;
  uint64_t stall_cycles = 0;  // port / MSHR backpressure absorbed by the walk
};

// Interface indices for movement accounting.
enum MoveIf : int { kL1L2 = 0, kL2L3 = 1, kL3DRAM = 2, kL3X = 3, kNumIf = 4 };
const char* move_if_name(int i);

struct MovementCounters {
  std::array<uint64_t, kNumIf> fill_bytes{};
  std::array<uint64_t, kNumIf> evict_bytes{};
  uint64_t rf_load_bytes = 0;
  uint64_t rf_store_bytes = 0;

  uint64_t total_moved() const {
    uint64_t t = 0;
    for (int i = 0; i < kNumIf; ++i) t += fill_bytes[i] + evict_bytes[i];
    return t;
  }
};

struct NoTraffic : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidWayCount : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DmReport {
  double total = 0;
  std::array<double, kNumIf> per_interface{};
};
DmReport dm_overhead(const MovementCounters& c);

struct LevelStats {
  uint64_t lookups = 0;
  uint64_t hits = 0;
  std::optional<double> hit_rate() const {
    if (!lookups) return std::nullopt;
    return double(hits) / double(lookups);
  }
};

struct HierConfig {
  int cores = 28;
  CacheConfig l1, l2, l3;
  uint32_t directory_latency = 10;
  uint32_t dram_latency = 120;
  uint32_t xslice_latency = 10;

  static HierConfig table_defaults(int cores = 28);
};

// One movement event, for the optional line-oriented trace dump.
struct MoveEvent {
  uint64_t cycle;
  int interface;
  bool fill;  // false = eviction/writeback
  uint64_t line;
};

class Hierarchy {
 public:
  explicit Hierarchy(const HierConfig& cfg);

  AccessResult access(const MemRequest& req);

  // Reserves `ways_for_tfu` ways of every set of the slice as the local
  // region for its near-L3 unit.
  void partition_l3(int slice, uint32_t ways_for_tfu);
  uint64_t l3_partition_bytes(int slice) const;

  // Installs lines into a level without charging time or movement; models
  // tensor state left behind by earlier layers.
  void prime(Level level, int core_or_slice, uint64_t addr, uint64_t bytes);
  void prime_spread_l3(uint64_t addr, uint64_t bytes);  // home-slice placement

  void reset_counters();
  const MovementCounters& movement() const { return move_; }
  const LevelStats& stats(Level l) const { return stats_[int(l)]; }
  uint64_t port_slots_used(Level l) const;
  uint64_t port_slots_capacity_per_cycle(Level l) const;
  uint64_t stall_cycles() const { return stall_cycles_; }
  uint64_t dram_accesses() const { return dram_accesses_; }
  CoherenceModel& coherence() { return coherence_; }
  const HierConfig& config() const { return cfg_; }

  void set_trace_sink(std::function<void(const MoveEvent&)> sink) {
    trace_ = std::move(sink);
  }
  void prune_schedules(uint64_t watermark);

 private:
  int slice_of(uint64_t line) const { return int(line % cfg_.l3.slices); }

  void count_move(uint64_t cycle, int iface, bool fill, uint64_t line);
  // Install a line into a cache array, handling the victim writeback.
  void install_l1(int core, uint64_t line, bool dirty, uint64_t cycle);
  void install_l2(int core, uint64_t line, bool dirty, uint64_t cycle);
  void install_l3(int slice, uint64_t line, bool dirty, uint64_t cycle,
                  bool tfu_region);
  // Fetch a line on behalf of a requester whose entry level missed.
  // Returns data-ready cycle at the entry level boundary.
  uint64_t fetch_from_outer(const MemRequest& req, Level entry, uint64_t line,
                            uint64_t start, AccessResult& res);

  HierConfig cfg_;
  std::vector<CacheArray> l1_, l2_, l3_;
  std::vector<PortSchedule> l1_ports_, l2_ports_, l3_ports_;
  std::vector<MshrBank> l1_mshr_, l2_mshr_, l3_mshr_;
  std::vector<uint32_t> l3_tfu_ways_;
  CoherenceModel coherence_;
  MovementCounters move_;
  std::array<LevelStats, 3> stats_{};
  uint64_t stall_cycles_ = 0;
  uint64_t dram_accesses_ = 0;
  std::function<void(const MoveEvent&)> trace_;
};

}  // namespace nctsim::mem
