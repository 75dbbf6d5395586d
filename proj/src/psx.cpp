#include "nctsim/psx.hpp"

#include <bit>
#include <stdexcept>

namespace nctsim::psx {

const char* to_string(Verdict v) {
  switch (v) {
    case Verdict::Ok: return "ok";
    case Verdict::TooManyInstructions: return "TooManyInstructions";
    case Verdict::TooManyLoops: return "TooManyLoops";
    case Verdict::RegisterOverflow: return "RegisterOverflow";
    case Verdict::DanglingLoopRef: return "DanglingLoopRef";
  }
  return "?";
}

Validation validate(const Program& p) {
  if (p.instrs.size() > kMaxInstrs)
    return {Verdict::TooManyInstructions, static_cast<int>(p.instrs.size()) - 1};
  if (p.loops.levels() > kMaxLoops || p.loops.levels() == 0)
    return {Verdict::TooManyLoops, -1};
  for (uint32_t c : p.loops.counts)
    if (c == 0) return {Verdict::TooManyLoops, -1};

  const int levels = p.loops.levels();
  for (size_t i = 0; i < p.instrs.size(); ++i) {
    const Instr& in = p.instrs[i];
    if (!is_body(in.op))
      throw std::invalid_argument("meta opcode in program body");
    if (in.loop_mask >> levels)
      return {Verdict::DanglingLoopRef, static_cast<int>(i)};
    // Register span over the whole iteration box must stay in the file.
    int64_t lo = in.dest, hi = in.dest;
    for (int l = 0; l < levels; ++l) {
      if (!in.in_loop(l)) continue;
      int64_t span = static_cast<int64_t>(p.loops.counts[l] - 1) * in.reg_stride[l];
      if (span > 0) hi += span; else lo += span;
    }
    if (lo < 0 || hi >= kDataRegs)
      return {Verdict::RegisterOverflow, static_cast<int>(i)};
    for (int s = 0; s < in.n_src; ++s)
      if (in.src[s] >= kDataRegs)
        return {Verdict::RegisterOverflow, static_cast<int>(i)};
  }
  return {};
}

UnrollCursor::UnrollCursor(const Program& p) : prog_(&p) {
  frames_.push_back({-1, 0, 0, static_cast<uint32_t>(p.instrs.size()), 0});
  settle();
}

void UnrollCursor::settle() {
  for (;;) {
    Frame& f = frames_.back();
    if (f.pos == f.end) {
      if (frames_.size() == 1) {
        done_ = true;
        return;
      }
      f.iter++;
      if (f.iter < prog_->loops.counts[f.level]) {
        f.pos = f.begin;
        iterations_++;
        continue;
      }
      uint32_t run_end = f.end;
      open_mask_ &= ~(1u << f.level);
      frames_.pop_back();
      frames_.back().pos = run_end;
      continue;
    }
    const Instr& in = prog_->instrs[f.pos];
    uint8_t extra = in.loop_mask & ~open_mask_;
    if (extra == 0) return;  // emittable at current position
    int level = std::countr_zero(extra);  // outermost new level first
    uint32_t run_end = f.pos;
    while (run_end < f.end && prog_->instrs[run_end].in_loop(level)) run_end++;
    frames_.push_back({static_cast<int8_t>(level), 0, f.pos, run_end, f.pos});
    open_mask_ |= 1u << level;
    iterations_++;
  }
}

DynOp UnrollCursor::next() {
  Frame& f = frames_.back();
  const Instr& in = prog_->instrs[f.pos];
  int64_t reg = in.dest;
  uint64_t addr = in.base_addr;
  for (size_t k = 1; k < frames_.size(); ++k) {
    const Frame& fr = frames_[k];
    if (!in.in_loop(fr.level)) continue;
    reg += static_cast<int64_t>(fr.iter) * in.reg_stride[fr.level];
    addr += static_cast<int64_t>(fr.iter) * in.addr_stride[fr.level];
  }
  DynOp op{in.op, static_cast<uint8_t>(reg), in.src, in.n_src,
           in.mem() ? addr : 0, static_cast<uint16_t>(f.pos)};
  f.pos++;
  settle();
  return op;
}

DynamicTrace unroll(const Program& p) {
  DynamicTrace t;
  UnrollCursor c(p);
  while (!c.done()) t.ops.push_back(c.next());
  t.loop_iterations = c.iterations();
  return t;
}

UnrollCounts unroll_counts(const Program& p) {
  UnrollCounts n;
  UnrollCursor c(p);
  while (!c.done()) {
    c.next();
    n.ops++;
  }
  n.loop_iterations = c.iterations();
  return n;
}

uint64_t offload_cycles(const Program& p, uint32_t bus_bytes_per_cycle) {
  uint64_t bytes = p.encoded_bytes();
  return (bytes + bus_bytes_per_cycle - 1) / bus_bytes_per_cycle;
}

uint64_t baseline_dynamic_count(const Program& p, uint32_t bookkeeping_per_iter) {
  UnrollCounts n = unroll_counts(p);
  return n.ops + bookkeeping_per_iter * n.loop_iterations;
}

uint64_t core_side_count(const Program& p) {
  uint64_t meta = p.loops.levels();  // one loop-count populate per level
  for (const Instr& in : p.instrs) {
    int levels_used = std::popcount(in.loop_mask);
    if (in.mem()) meta += 1 + levels_used;  // base address + per-level strides
    meta += levels_used;                    // per-level register strides
  }
  return p.instrs.size() + meta + 2;  // + LoopStart, LoopEnd
}

double compression_ratio(const Program& p, uint32_t bookkeeping_per_iter) {
  return static_cast<double>(baseline_dynamic_count(p, bookkeeping_per_iter)) /
         static_cast<double>(core_side_count(p));
}

}  // namespace nctsim::psx
