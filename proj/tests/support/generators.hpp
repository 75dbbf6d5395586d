#pragma once

// Random well-formed program generator for property tests: up to 4 loops,
// counts <= 8, <= 32 instructions, register expansions kept inside the file.

#include <cstdint>
#include <random>
#include <vector>

#include "nctsim/psx.hpp"

namespace testgen {

using nctsim::psx::Instr;
using nctsim::psx::Opcode;
using nctsim::psx::Program;

class ProgramGen {
 public:
  explicit ProgramGen(uint64_t seed) : rng_(seed) {}

  Program next() {
    for (;;) {
      Program p = candidate();
      if (p.instrs.empty()) continue;
      if (nctsim::psx::validate(p)) return p;
    }
  }

 private:
  std::mt19937_64 rng_;

  int pick(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng_);
  }

  Program candidate() {
    Program p;
    int levels = pick(1, 4);
    for (int i = 0; i < levels; ++i)
      p.loops.counts.push_back(static_cast<uint32_t>(pick(1, 8)));
    std::vector<int> avail;
    for (int l = 0; l < levels; ++l) avail.push_back(l);
    emit_segment(p, 0, avail, 0);
    return p;
  }

  void emit_segment(Program& p, uint8_t open, std::vector<int> avail, int depth) {
    int slots = pick(depth == 0 ? 1 : 0, 3);
    for (int s = 0; s < slots && p.instrs.size() < 30; ++s)
      p.instrs.push_back(make_instr(p, open));
    while (!avail.empty() && p.instrs.size() < 30 && pick(0, 2) != 0) {
      int k = pick(0, static_cast<int>(avail.size()) - 1);
      int lvl = avail[k];
      avail.erase(avail.begin() + k);
      std::vector<int> inner = avail;
      emit_segment(p, static_cast<uint8_t>(open | (1u << lvl)), inner, depth + 1);
      int tail = pick(0, 2);
      for (int s = 0; s < tail && p.instrs.size() < 30; ++s)
        p.instrs.push_back(make_instr(p, open));
    }
  }

  Instr make_instr(Program& p, uint8_t mask) {
    static const Opcode kinds[] = {Opcode::TensorLoad, Opcode::TensorStore,
                                   Opcode::MacVector, Opcode::VecAlu};
    Instr in;
    in.op = kinds[pick(0, 3)];
    in.dest = static_cast<uint8_t>(pick(0, nctsim::psx::kDataRegs - 1));
    in.loop_mask = mask;
    if (in.op == Opcode::MacVector) {
      in.n_src = 2;
      in.src[0] = static_cast<uint8_t>(pick(0, nctsim::psx::kDataRegs - 1));
      in.src[1] = static_cast<uint8_t>(pick(0, nctsim::psx::kDataRegs - 1));
    } else if (in.op == Opcode::TensorStore || in.op == Opcode::VecAlu) {
      in.n_src = 1;
      in.src[0] = static_cast<uint8_t>(pick(0, nctsim::psx::kDataRegs - 1));
    }
    if (in.mem()) {
      in.base_addr = static_cast<uint64_t>(pick(0, 1 << 20)) * 64;
      for (int l = 0; l < p.loops.levels(); ++l)
        if (in.in_loop(l)) in.addr_stride[l] = 64 * pick(-4, 16);
    }
    for (int l = 0; l < p.loops.levels(); ++l)
      if (in.in_loop(l)) in.reg_stride[l] = pick(0, 4) == 0 ? pick(-2, 2) : 0;
    return in;
  }
};

}  // namespace testgen
