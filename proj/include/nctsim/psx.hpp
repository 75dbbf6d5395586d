#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace nctsim::psx {

// Loop-encoding macro ISA for near-cache tensor offload. A program is a short
// list of tagged load/store/compute instructions plus a nest of up to four
// fixed-count loops; per-instruction metadata (base address, address stride
// and register stride per loop level) lets a lean scheduler unroll the whole
// nest next to the data. Meta opcodes and LoopStart/LoopEnd exist on the
// core side to populate the code registers; they never appear in a program
// body.
enum class Opcode : uint8_t {
  TensorLoad,
  TensorStore,
  MacVector,  // one 64B vector multiply-accumulate = 64 8-bit MACs
  VecAlu,     // non-MAC vector op (pooling max/add, copies)
  MetaLoopCount,
  MetaLoopIteration,
  MetaLoopDisable,
  MetaBaseAddress,
  MetaStride,
  MetaRegStride,
  LoopStart,
  LoopEnd,
};

constexpr bool is_body(Opcode op) { return op <= Opcode::VecAlu; }
constexpr bool is_mem(Opcode op) {
  return op == Opcode::TensorLoad || op == Opcode::TensorStore;
}

constexpr int kMaxLoops = 4;
constexpr int kMaxInstrs = 32;
constexpr int kDataRegs = 48;
constexpr int kCodeEntryBytes = 8;
constexpr uint32_t kVectorBytes = 64;
constexpr int kMacsPerVector = 64;

// Iteration counts, outermost level first. 1..4 levels, every count >= 1.
struct LoopNest {
  std::vector<uint32_t> counts;
  int levels() const { return static_cast<int>(counts.size()); }
};

struct Instr {
  Opcode op = Opcode::MacVector;
  uint8_t dest = 0;
  std::array<uint8_t, 2> src{};
  uint8_t n_src = 0;
  uint64_t base_addr = 0;  // mem ops only
  uint8_t loop_mask = 0;   // bit i set = instruction resides in loop level i
  std::array<int64_t, kMaxLoops> addr_stride{};  // bytes per level, mem ops
  std::array<int32_t, kMaxLoops> reg_stride{};   // dest-register delta per level
  uint32_t access_bytes = kVectorBytes;

  bool mem() const { return is_mem(op); }
  bool in_loop(int level) const { return (loop_mask >> level) & 1; }
};

struct Program {
  std::vector<Instr> instrs;
  LoopNest loops;

  size_t encoded_bytes() const { return instrs.size() * kCodeEntryBytes; }
};

enum class Verdict : uint8_t {
  Ok,
  TooManyInstructions,
  TooManyLoops,
  RegisterOverflow,
  DanglingLoopRef,
};
const char* to_string(Verdict v);

struct Validation {
  Verdict verdict = Verdict::Ok;
  int instr_index = -1;  // first violating instruction, when applicable
  explicit operator bool() const { return verdict == Verdict::Ok; }
};

Validation validate(const Program& p);

// One element of the unrolled dynamic stream.
struct DynOp {
  Opcode op;
  uint8_t dest;
  std::array<uint8_t, 2> src;
  uint8_t n_src;
  uint64_t addr;  // resolved byte address, mem ops only
  uint16_t static_index;

  bool mem() const { return is_mem(op); }
};

struct DynamicTrace {
  std::vector<DynOp> ops;
  uint64_t loop_iterations = 0;  // loop-body entries summed over all levels
};

// Resumable unroller. Loop structure is recovered from program order and loop
// masks: scanning forward, an instruction whose mask names a not-yet-open
// level opens that level (outermost of the new levels first) over the maximal
// run of following instructions sharing it; instructions whose mask is
// covered by the open levels are emitted in place. Iteration is lexicographic
// outermost to innermost. The cursor state is explicit so a context switch
// can snapshot and resume mid-program.
class UnrollCursor {
 public:
  explicit UnrollCursor(const Program& p);

  bool done() const { return done_; }
  DynOp next();  // precondition: !done()
  uint64_t iterations() const { return iterations_; }

  struct Frame {
    int8_t level;    // -1 for the root pseudo-frame
    uint32_t iter;
    uint32_t begin;  // instruction run [begin, end)
    uint32_t end;
    uint32_t pos;
  };
  struct State {
    std::vector<Frame> frames;
    uint64_t iterations;
    bool done;
  };
  State save() const { return {frames_, iterations_, done_}; }
  void restore(const State& s) {
    frames_ = s.frames;
    iterations_ = s.iterations;
    done_ = s.done;
    open_mask_ = 0;
    for (size_t i = 1; i < frames_.size(); ++i)
      open_mask_ |= static_cast<uint8_t>(1u << frames_[i].level);
  }

 private:
  void settle();  // advance to the next emittable instruction or completion

  const Program* prog_;
  std::vector<Frame> frames_;
  uint8_t open_mask_ = 0;
  uint64_t iterations_ = 0;
  bool done_ = false;
};

DynamicTrace unroll(const Program& p);

// Trace length and loop iteration count without materializing the ops.
struct UnrollCounts {
  uint64_t ops = 0;
  uint64_t loop_iterations = 0;
};
UnrollCounts unroll_counts(const Program& p);

// Cycles to push the code registers over the offload bus.
uint64_t offload_cycles(const Program& p, uint32_t bus_bytes_per_cycle);

// Dynamic instructions a conventional pipeline retires for the same work:
// the unrolled body plus `bookkeeping_per_iter` loop-maintenance instructions
// (induction update + branch by default) per loop iteration at every level.
uint64_t baseline_dynamic_count(const Program& p, uint32_t bookkeeping_per_iter = 2);

// Instructions the offloading core itself issues: the tagged body, one meta
// instruction per loop count / base address / stride / register stride, and
// the LoopStart/LoopEnd pair.
uint64_t core_side_count(const Program& p);

double compression_ratio(const Program& p, uint32_t bookkeeping_per_iter = 2);

}  // namespace nctsim::psx
