#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nctsim/layers.hpp"
#include "nctsim/psx.hpp"

namespace nctsim::kern {

enum class TensorRole : uint8_t { None, Input, Weight, Output };

constexpr int kIrMaxLoops = 10;

// Register budget the blocker tiles against. The production kernels this
// models were tuned for a 32-entry architectural vector file; the 48-entry
// near-cache register file keeps the extra entries for staging headroom.
constexpr int kTileRegs = 32;
// Reduction scalars accumulated per offloaded program before the chain is
// chunked (bounds accumulator width and keeps one offload amortizable).
constexpr int kMaxReductionPerProgram = 640;

struct BlockingParams {
  int outputs_per_inner_loop = 0;  // accumulator tile size
  int weights_resident = 0;        // weight vectors held across the tile
  int accumulators_used = 0;
  int vector_bytes = 64;
};

// One op of the blocked-kernel IR. Addressing is role-relative: `base` is an
// offset inside the role's tensor and strides are per IR loop level.
struct IrOp {
  psx::Opcode op = psx::Opcode::MacVector;
  TensorRole role = TensorRole::None;
  uint8_t dest = 0;
  std::array<uint8_t, 2> src{};
  uint8_t n_src = 0;
  uint64_t base = 0;
  uint16_t loop_mask = 0;
  std::array<int64_t, kIrMaxLoops> addr_stride{};
  std::array<int32_t, kIrMaxLoops> reg_stride{};

  bool in_loop(int l) const { return (loop_mask >> l) & 1; }
  bool mem() const { return psx::is_mem(op); }
};

// A uniform nest: loop counts (outermost first), ops in program order, and
// the number of leading levels that form the independent work grid (one tile
// owns one accumulator set). red_mult marks how many reduction scalars one
// iteration of a level covers (0 = not a reduction level).
struct Region {
  std::string label;
  std::vector<uint32_t> loop_counts;
  std::vector<uint32_t> red_mult;
  int tile_levels = 0;
  std::vector<IrOp> ops;

  int levels() const { return static_cast<int>(loop_counts.size()); }
  uint64_t tiles() const {
    uint64_t t = 1;
    for (int i = 0; i < tile_levels; ++i) t *= loop_counts[i];
    return t;
  }
};

struct KernelIR {
  LayerSpec layer;
  BlockingParams blocking;
  std::vector<Region> regions;
};

struct UnblockableLayer : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Emits the output-stationary blocked kernel for a layer. When `forced` is
// given its tile shape is used as-is (register budget still enforced).
KernelIR block_layer(const LayerSpec& layer, int rf_size = psx::kDataRegs,
                     int vector_bytes = 64, const BlockingParams* forced = nullptr);

// Per-tensor reuse assuming an infinite register file, plus the kernel's
// realized loads/stores per compute instruction. For pooling/concat the
// denominator is the vector op (pooling) or copied vector (concat).
struct ReuseReport {
  double input_ops_per_byte = 0;
  double weight_ops_per_byte = 0;
  double output_ops_per_byte = 0;
  double loads_per_mac = 0;
  double stores_per_mac = 0;
};

ReuseReport algorithm_ops_per_byte(const LayerSpec& layer);
ReuseReport kernel_traffic(const KernelIR& kernel);  // fills the kernel part

// ---- Lowering to offloadable programs ----

// All instances of one program template. Instance addressing: every tile
// level and intra peel contributes iter * step[instr] (+ base_extra) to each
// instruction's base address.
struct ProgramClass {
  psx::Program shape;
  std::vector<TensorRole> roles;               // per instruction
  std::vector<std::vector<int64_t>> tile_step; // [tile level][instr]
  struct Peel {
    uint64_t instances = 1;
    std::vector<int64_t> step;  // per instr, per instance
  };
  std::vector<Peel> intra;  // outermost first

  uint64_t intra_instances() const {
    uint64_t n = 1;
    for (const Peel& p : intra) n *= p.instances;
    return n;
  }
  // dynamic op counts of one instance
  uint64_t dyn_loads = 0, dyn_stores = 0, dyn_macs = 0, dyn_alus = 0;
  uint64_t dyn_iterations = 0;
};

struct RegionLowering {
  std::vector<uint32_t> tile_dims;
  uint64_t tile_count = 1;
  std::vector<ProgramClass> classes;  // execution order within one tile
  uint64_t macvec_per_tile = 0;
  uint64_t ops_per_tile = 0;
};

struct Lowering {
  std::vector<RegionLowering> regions;
  uint64_t tile_count = 0;     // across regions
  uint64_t total_macvec = 0;

  // Concrete programs of global tile t, in execution order. Roles returned
  // alongside so the memory system can see tensor intent.
  struct TileProgram {
    psx::Program prog;
    const ProgramClass* cls;
  };
  std::vector<TileProgram> tile_programs(uint64_t t) const;
  uint64_t tile_macvec(uint64_t t) const;
  uint64_t tile_ops(uint64_t t) const;

  // [lo_addr, hi_addr) touched by `role` within one tile; empty when the
  // tile has no ops of that role.
  struct Span {
    uint64_t lo = UINT64_MAX, hi = 0;
    bool empty() const { return hi <= lo; }
    uint64_t bytes() const { return empty() ? 0 : hi - lo; }
    void merge(const Span& o) {
      lo = std::min(lo, o.lo);
      hi = std::max(hi, o.hi);
    }
  };
  Span role_span(TensorRole role, uint64_t t) const;
};

// role base addresses for concrete programs
struct TensorBases {
  uint64_t input = 0, weight = 0, output = 0;
};

Lowering lower(const KernelIR& kernel, const TensorBases& bases = {});

// Materialized program list (trace-order). Intended for microkernels and
// tests; full layers enumerate lazily through Lowering.
std::vector<psx::Program> lower_to_psx(const KernelIR& kernel,
                                       const TensorBases& bases = {});

// Byte extent of each tensor as addressed by the kernel (padded frames).
struct TensorExtents {
  uint64_t input_bytes = 0, weight_bytes = 0, output_bytes = 0;
};
TensorExtents tensor_extents(const LayerSpec& layer);

// Suite analytics used by compression reporting: totals across every program
// instance of the layer.
struct CompressionStats {
  uint64_t baseline_dynamic = 0;
  uint64_t core_side = 0;
  uint64_t programs = 0;
  double ratio() const {
    return core_side ? double(baseline_dynamic) / double(core_side) : 0.0;
  }
};
CompressionStats compression_stats(const KernelIR& kernel,
                                   uint32_t bookkeeping_per_iter = 2);

}  // namespace nctsim::kern
