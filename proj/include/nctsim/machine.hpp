#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nctsim/kernelgen.hpp"
#include "nctsim/layers.hpp"
#include "nctsim/memhier.hpp"
#include "nctsim/tfu.hpp"

namespace nctsim::mach {

struct UnknownConfig : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct MachineConfig {
  std::string name = "M128";
  int cores = 28;
  int smt_ways = 4;
  double ghz = 2.6;
  mem::HierConfig hier = mem::HierConfig::table_defaults(28);
  uint32_t core_macs_per_cycle = 128;
  std::array<uint32_t, 3> tfu_width{0, 0, 0};  // MACs/cycle at L1, L2, L3
  bool psx = false;
  uint32_t issue_width = 4;   // legacy pipeline slots per cycle
  uint32_t window = 64;       // legacy in-flight op window
  uint32_t l3_tfu_ways = 2;   // default local region for near-L3 units

  uint32_t total_macs_per_cycle() const {
    uint32_t t = psx ? 0 : core_macs_per_cycle;
    for (uint32_t w : tfu_width) t += w;
    return t;
  }
};

// "M128".."M512" are monolithic cores; "P128".."P640" distribute width over
// the cache levels.
MachineConfig parse_config(const std::string& name, int cores = 28);
std::vector<std::string> known_configs();

// JSON machine description mirroring the parameter-table field names;
// notation strings are accepted as {"machine": "P256"} shorthand.
MachineConfig config_from_json(const std::string& text);
std::string config_to_json(const MachineConfig& m);

struct ThreadBinding {
  int thread;  // SMT thread index on the physical core
  mem::AgentKind role;
  uint32_t macs_per_cycle;
};

struct CapabilityReport {
  std::string name;
  std::array<uint32_t, 3> tfu_width;
  uint32_t core_macs_per_cycle;
  bool psx;
  std::vector<ThreadBinding> bindings;  // per physical core
};
CapabilityReport describe_capabilities(const MachineConfig& m);

// Which cache levels a primitive should compute near.
std::vector<mem::AgentKind> select_levels(kern::LayerKind kind,
                                          bool allow_l2_for_movers = false);

// Largest-remainder proportional split; ties go to the lower worker index.
std::vector<uint64_t> partition_static_asymmetric(uint64_t units,
                                                  const std::vector<double>& strengths);

enum class Schedule : uint8_t { Static, StaticAsymmetric };

struct Policy {
  std::vector<mem::AgentKind> levels;  // empty = select_levels(kind)
  Schedule schedule = Schedule::StaticAsymmetric;
  bool psx = true;  // effective only on machines with near-cache units
  uint32_t bookkeeping_per_iter = 2;
  std::optional<uint32_t> l3_tfu_ways;
  int scale_num = 1, scale_den = 1;
};

struct SimMetrics {
  uint64_t cycles = 0;
  uint64_t total_macs = 0;
  double macs_per_cycle_per_core = 0;
  std::array<std::optional<double>, 3> hit_rate;  // L1, L2, L3
  mem::DmReport dm;
  mem::MovementCounters movement;
  double bandwidth_utilization = 0;  // used port slots / available, all caches
  uint64_t legacy_dyn_instrs = 0;    // ops through the legacy pipeline
  uint64_t psx_core_instrs = 0;      // of which: PSX setup/offload streams
  uint64_t tfu_sched_ops = 0;        // ops unrolled and issued inside units
  uint64_t macvec_ops = 0;
  uint64_t vecalu_ops = 0;
  uint64_t loads = 0, stores = 0;
  std::array<uint64_t, 3> cache_lookups{};
  uint64_t tc_lookups = 0, tc_hits = 0;
  uint64_t dram_accesses = 0;
  uint64_t stall_cycles = 0;
  int workers = 0;
  uint64_t min_worker_completion = 0, max_worker_completion = 0;
  double compression = 0;  // layer-aggregate dynamic-instruction ratio
  uint64_t programs = 0;
};

SimMetrics run_layer(const MachineConfig& m, const kern::LayerSpec& layer,
                     const Policy& policy);

// Convenience: sum of per-layer runs (metrics aggregate; rates recomputed).
SimMetrics run_layers(const MachineConfig& m,
                      const std::vector<kern::LayerSpec>& layers,
                      const Policy& policy);

}  // namespace nctsim::mach
