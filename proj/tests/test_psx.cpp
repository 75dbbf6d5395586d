#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nctsim/psx.hpp"
#include "support/generators.hpp"
#include "support/reference_interp.hpp"

using namespace nctsim::psx;

namespace {

Instr load(uint8_t dest, uint64_t base, uint8_t mask,
           std::initializer_list<int64_t> strides = {}) {
  Instr in;
  in.op = Opcode::TensorLoad;
  in.dest = dest;
  in.base_addr = base;
  in.loop_mask = mask;
  int l = 0;
  for (int64_t s : strides) in.addr_stride[l++] = s;
  return in;
}

Instr mac(uint8_t dest, uint8_t s0, uint8_t s1, uint8_t mask) {
  Instr in;
  in.op = Opcode::MacVector;
  in.dest = dest;
  in.src = {s0, s1};
  in.n_src = 2;
  in.loop_mask = mask;
  return in;
}

Instr store(uint8_t src, uint64_t base, uint8_t mask) {
  Instr in;
  in.op = Opcode::TensorStore;
  in.dest = src;  // register whose contents are written
  in.src = {src, 0};
  in.n_src = 1;
  in.base_addr = base;
  in.loop_mask = mask;
  return in;
}

Program minimal() {
  Program p;
  p.loops.counts = {1};
  p.instrs.push_back(mac(0, 0, 0, 0));
  return p;
}

// Outer weight load feeding an inner loop that computes four outputs into
// consecutive accumulators, stores unrolled at the end.
Program conv_microkernel(uint32_t red = 8) {
  Program p;
  p.loops.counts = {red, 4};
  p.instrs.push_back(load(0, 0x10000, 0b01, {64}));
  Instr in = load(1, 0x20000, 0b11, {256, 64});
  p.instrs.push_back(in);
  Instr m = mac(2, 0, 1, 0b11);
  m.reg_stride[1] = 1;  // accumulators 2..5
  p.instrs.push_back(m);
  for (int j = 0; j < 4; ++j)
    p.instrs.push_back(store(static_cast<uint8_t>(2 + j), 0x30000 + 64 * j, 0));
  return p;
}

}  // namespace

TEST_CASE("validate: size limits") {
  Program p;
  p.loops.counts = {1};
  for (int i = 0; i < 33; ++i) p.instrs.push_back(mac(0, 0, 0, 0));
  auto v = validate(p);
  CHECK(v.verdict == Verdict::TooManyInstructions);

  Program q = minimal();
  q.loops.counts = {1, 1, 1, 1, 1};
  CHECK(validate(q).verdict == Verdict::TooManyLoops);

  CHECK(static_cast<bool>(validate(minimal())));
}

TEST_CASE("validate: register overflow and dangling loop refs name the instruction") {
  Program p;
  p.loops.counts = {8};
  Instr m = mac(44, 0, 0, 0b01);
  m.reg_stride[0] = 1;  // 44 + 7 = 51 > 47
  p.instrs.push_back(mac(0, 0, 0, 0b01));
  p.instrs.push_back(m);
  auto v = validate(p);
  CHECK(v.verdict == Verdict::RegisterOverflow);
  CHECK(v.instr_index == 1);

  Program q = minimal();
  q.instrs[0].loop_mask = 0b10;  // level 1 does not exist
  auto w = validate(q);
  CHECK(w.verdict == Verdict::DanglingLoopRef);
  CHECK(w.instr_index == 0);

  Program r;
  r.loops.counts = {4};
  Instr neg = mac(1, 0, 0, 0b01);
  neg.reg_stride[0] = -1;  // 1 - 3 < 0
  r.instrs.push_back(neg);
  CHECK(validate(r).verdict == Verdict::RegisterOverflow);
}

TEST_CASE("offload cycles over an 8B bus") {
  Program p;
  p.loops.counts = {1};
  for (int i = 0; i < 16; ++i) p.instrs.push_back(mac(0, 0, 0, 0));
  CHECK(offload_cycles(p, 8) == 16);
  CHECK(offload_cycles(minimal(), 8) == 1);
  while (p.instrs.size() < 32) p.instrs.push_back(mac(0, 0, 0, 0));
  CHECK(offload_cycles(p, 8) == 32);
  CHECK(p.encoded_bytes() == 32 * kCodeEntryBytes);
}

TEST_CASE("unroll: strided progression") {
  Program p;
  p.loops.counts = {3};
  p.instrs.push_back(load(0, 1024, 0b01, {64}));
  auto t = unroll(p);
  REQUIRE(t.ops.size() == 3);
  CHECK(t.ops[0].addr == 1024);
  CHECK(t.ops[1].addr == 1088);
  CHECK(t.ops[2].addr == 1152);
  CHECK(t.loop_iterations == 3);
}

TEST_CASE("unroll: all counts one is the static order") {
  Program p;
  p.loops.counts = {1, 1};
  p.instrs.push_back(load(0, 0, 0b01));
  p.instrs.push_back(mac(1, 0, 0, 0b11));
  p.instrs.push_back(store(1, 64, 0));
  auto t = unroll(p);
  REQUIRE(t.ops.size() == 3);
  for (size_t i = 0; i < 3; ++i) CHECK(t.ops[i].static_index == i);
}

TEST_CASE("unroll: conv microkernel matches the reference interpreter") {
  Program p = conv_microkernel();
  REQUIRE(static_cast<bool>(validate(p)));
  auto t = unroll(p);
  auto r = refinterp::interpret(p);
  CHECK(refinterp::same_trace(t, r));
  // shape: per outer iteration one weight load then 4 (input, mac) pairs,
  // stores once at the very end
  CHECK(t.ops.size() == 8 * (1 + 8) + 4);
  CHECK(t.ops[0].op == Opcode::TensorLoad);
  CHECK(t.ops.back().op == Opcode::TensorStore);
  // accumulator rotation via register stride
  CHECK(t.ops[2].dest == 2);
  CHECK(t.ops[4].dest == 3);
}

TEST_CASE("baseline dynamic count includes loop bookkeeping") {
  Program p;
  p.loops.counts = {4};
  p.instrs.push_back(mac(0, 0, 0, 0b01));
  CHECK(baseline_dynamic_count(p, 2) == 4 + 4 * 2);
  CHECK(baseline_dynamic_count(p, 0) == unroll(p).ops.size());

  Program q;
  q.loops.counts = {1};
  for (int i = 0; i < 5; ++i) q.instrs.push_back(mac(0, 0, 0, 0b01));
  CHECK(baseline_dynamic_count(q, 2) == 5 + 2);
}

TEST_CASE("compression: metadata dominates trivial programs") {
  Program q;
  q.loops.counts = {1};
  q.instrs.push_back(load(0, 0, 0b01, {64}));
  q.instrs.push_back(mac(1, 0, 0, 0b01));
  // dynamic 2 + bookkeeping 2 vs body 2 + meta (1 count + 1 base + 1 stride
  // + 2 reg strides) + start/end
  CHECK(compression_ratio(q) < 1.0);
  CHECK(core_side_count(q) == 2 + 5 + 2);
}

TEST_CASE("compression grows monotonically with any loop count") {
  testgen::ProgramGen gen(7);
  for (int n = 0; n < 200; ++n) {
    Program p = gen.next();
    double base = compression_ratio(p);
    for (int l = 0; l < p.loops.levels(); ++l) {
      Program q = p;
      q.loops.counts[l] += 1;
      if (!validate(q)) continue;  // register span may no longer fit
      CHECK(compression_ratio(q) >= base - 1e-12);
    }
  }
}

TEST_CASE("unroll is deterministic") {
  testgen::ProgramGen gen(11);
  for (int n = 0; n < 50; ++n) {
    Program p = gen.next();
    CHECK(refinterp::same_trace(unroll(p), unroll(p)));
  }
}

TEST_CASE("oracle equivalence on random programs") {
  testgen::ProgramGen gen(1234);
  for (int n = 0; n < 1000; ++n) {
    Program p = gen.next();
    auto t = unroll(p);
    auto r = refinterp::interpret(p);
    REQUIRE(refinterp::same_trace(t, r));
    CHECK(t.loop_iterations == r.loop_iterations);
  }
}

TEST_CASE("cursor save/restore resumes identically") {
  testgen::ProgramGen gen(99);
  for (int n = 0; n < 50; ++n) {
    Program p = gen.next();
    auto full = unroll(p);
    if (full.ops.size() < 2) continue;
    size_t cut = full.ops.size() / 2;
    UnrollCursor c(p);
    for (size_t i = 0; i < cut; ++i) c.next();
    auto snap = c.save();
    UnrollCursor d(p);
    d.restore(snap);
    std::vector<DynOp> tail;
    while (!d.done()) tail.push_back(d.next());
    REQUIRE(tail.size() == full.ops.size() - cut);
    for (size_t i = 0; i < tail.size(); ++i)
      CHECK(refinterp::same_op(tail[i], full.ops[cut + i]));
  }
}

TEST_CASE("addresses are affine in the iteration indices") {
  Program p;
  p.loops.counts = {3, 5};
  p.instrs.push_back(load(0, 4096, 0b11, {1024, 64}));
  auto t = unroll(p);
  REQUIRE(t.ops.size() == 15);
  size_t k = 0;
  for (uint32_t i = 0; i < 3; ++i)
    for (uint32_t j = 0; j < 5; ++j, ++k)
      CHECK(t.ops[k].addr == 4096 + 1024 * i + 64 * j);
}
