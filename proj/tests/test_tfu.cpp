#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nctsim/tfu.hpp"
#include "support/generators.hpp"

using namespace nctsim;
using namespace nctsim::tfu;

namespace {

struct Rig {
  mem::Hierarchy hier;
  Tfu tfu;
  explicit Rig(TfuConfig cfg = {})
      : hier(mem::HierConfig::table_defaults(2)), tfu(cfg, &hier, 0) {}
};

psx::Instr mk_load(uint8_t dest, uint64_t addr) {
  psx::Instr in;
  in.op = psx::Opcode::TensorLoad;
  in.dest = dest;
  in.base_addr = addr;
  return in;
}

psx::Instr mk_mac(uint8_t dest, uint8_t s0, uint8_t s1) {
  psx::Instr in;
  in.op = psx::Opcode::MacVector;
  in.dest = dest;
  in.src = {s0, s1};
  in.n_src = 2;
  return in;
}

psx::Instr mk_store(uint8_t reg, uint64_t addr) {
  psx::Instr in;
  in.op = psx::Opcode::TensorStore;
  in.dest = reg;
  in.base_addr = addr;
  return in;
}

psx::Program prog(std::initializer_list<psx::Instr> instrs) {
  psx::Program p;
  p.loops.counts = {1};
  p.instrs = instrs;
  return p;
}

std::vector<kern::TensorRole> roles_of(const psx::Program& p) {
  return std::vector<kern::TensorRole>(p.instrs.size(), kern::TensorRole::Input);
}

// run and collect (op, issue_cycle) log
std::vector<std::pair<IssuedOp, uint64_t>> run_log(Rig& r, const psx::Program& p) {
  REQUIRE(r.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::Accepted);
  std::vector<std::pair<IssuedOp, uint64_t>> log;
  uint64_t cycle = 0;
  while (r.tfu.busy()) {
    for (auto& op : r.tfu.step(cycle)) log.push_back({op, cycle});
    cycle++;
    REQUIRE(cycle < 1u << 22);
  }
  return log;
}

}  // namespace

TEST_CASE("offload takes encoded-size over bus-width cycles before first issue") {
  Rig r;
  psx::Program p;
  p.loops.counts = {1};
  for (int i = 0; i < 16; ++i) p.instrs.push_back(mk_mac(0, 1, 2));
  REQUIRE(r.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::Accepted);
  CHECK(r.tfu.first_issue_cycle() == 16);
  uint64_t first = 0;
  for (uint64_t c = 0; c < 100 && !first; ++c)
    if (!r.tfu.step(c).empty()) first = c;
  CHECK(first == 16);
  CHECK(r.tfu.idle_cycles() >= 15);  // offload window has no issue
}

TEST_CASE("offload while busy is rejected") {
  Rig r;
  auto p = prog({mk_mac(0, 1, 2)});
  CHECK(r.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::Accepted);
  CHECK(r.tfu.accept_offload(p, roles_of(p), 1) == OffloadStatus::TfuBusy);
}

TEST_CASE("programs beyond the code registers are rejected") {
  Rig r;
  psx::Program p;
  p.loops.counts = {1};
  for (int i = 0; i < 33; ++i) p.instrs.push_back(mk_mac(0, 1, 2));
  CHECK(r.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::ProgramTooLarge);

  TfuConfig small;
  small.code_reg_capacity = 16;
  Rig r2(small);
  psx::Program q;
  q.loops.counts = {1};
  for (int i = 0; i < 17; ++i) q.instrs.push_back(mk_mac(0, 1, 2));
  CHECK(r2.tfu.accept_offload(q, roles_of(q), 0) == OffloadStatus::ProgramTooLarge);
}

TEST_CASE("younger independent load hoists over a stalled MAC") {
  Rig r;
  // load -> long DRAM miss; MAC depends on it; second load independent
  auto p = prog({mk_load(1, 0x100000), mk_mac(2, 1, 1), mk_load(3, 0x100040)});
  auto log = run_log(r, p);
  REQUIRE(log.size() == 3);
  uint64_t mac_issue = 0, load2_issue = 0;
  for (auto& [op, cycle] : log) {
    if (op.op.op == psx::Opcode::MacVector) mac_issue = cycle;
    if (op.op.op == psx::Opcode::TensorLoad && op.op.dest == 3) load2_issue = cycle;
  }
  CHECK(load2_issue < mac_issue);
}

TEST_CASE("a store never passes an older load or older compute") {
  Rig r;
  // the MAC depends on a slow load; the store behind everything must wait
  // for the older load (same queue) and the older MAC (cross queue), even
  // though its own data register is ready from the start
  auto p = prog({mk_load(1, 0x200000), mk_mac(2, 1, 1), mk_load(3, 0x200040),
                 mk_store(0, 0x200080)});
  auto log = run_log(r, p);
  REQUIRE(log.size() == 4);
  uint64_t mac_issue = 0, load2_issue = 0, store_issue = 0;
  for (auto& [op, cycle] : log) {
    if (op.op.op == psx::Opcode::MacVector) mac_issue = cycle;
    if (op.op.op == psx::Opcode::TensorLoad && op.seq == 3) load2_issue = cycle;
    if (op.op.op == psx::Opcode::TensorStore) store_issue = cycle;
  }
  CHECK(store_issue >= load2_issue);  // memory ops stay ordered
  CHECK(store_issue >= mac_issue);    // stores never pass older compute
  CHECK(load2_issue < mac_issue);     // while the load was free to hoist
}

TEST_CASE("issue-order soundness: per-queue order kept, only loads hoist") {
  testgen::ProgramGen gen(2024);
  for (int n = 0; n < 25; ++n) {
    psx::Program p = gen.next();
    Rig r;
    auto log = run_log(r, p);
    auto want = psx::unroll(p);
    REQUIRE(log.size() == want.ops.size());
    // per-queue sequence numbers must ascend
    uint64_t last_mem = 0, last_cmp = 0;
    bool first_mem = true, first_cmp = true;
    for (auto& [op, cycle] : log) {
      if (op.op.mem()) {
        if (!first_mem) CHECK(op.seq > last_mem);
        last_mem = op.seq;
        first_mem = false;
      } else {
        if (!first_cmp) CHECK(op.seq > last_cmp);
        last_cmp = op.seq;
        first_cmp = false;
      }
    }
    // inversions against program order may only be loads passing compute
    for (size_t i = 0; i < log.size(); ++i)
      for (size_t j = i + 1; j < log.size(); ++j)
        if (log[j].first.seq < log[i].first.seq) {
          CHECK(log[i].first.op.op == psx::Opcode::TensorLoad);
          CHECK(!log[j].first.op.mem());
        }
  }
}

TEST_CASE("MAC retire rate never exceeds the configured width") {
  TfuConfig cfg;
  cfg.macs_per_cycle = 128;  // 2 vector MACs per cycle
  Rig r(cfg);
  psx::Program p;
  p.loops.counts = {32};
  psx::Instr m = mk_mac(2, 0, 1);
  m.loop_mask = 1;
  p.instrs.push_back(m);
  REQUIRE(r.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::Accepted);
  uint64_t cycle = 0;
  while (r.tfu.busy()) {
    auto issued = r.tfu.step(cycle);
    uint64_t macs = 0;
    for (auto& op : issued)
      if (op.op.op == psx::Opcode::MacVector) macs += psx::kMacsPerVector;
    CHECK(macs <= cfg.macs_per_cycle);
    cycle++;
  }
  CHECK(r.tfu.retired_macs() == 32 * psx::kMacsPerVector);
}

TEST_CASE("translation cache: one page streams at 63/64") {
  TranslationCache tc(6);
  for (int i = 0; i < 64; ++i) tc.lookup(0x40000 + 64 * i, 30);
  CHECK(tc.hits() == 63);
  CHECK(tc.misses() == 1);
  tc.invalidate_all();
  CHECK(tc.lookup(0x40000, 30) == 30);
}

TEST_CASE("blocked tensor streams keep the translation cache above ninety percent") {
  // addresses shaped like a lowered conv program: a weight stream plus a few
  // input rows touched round-robin
  TranslationCache tc(6);
  uint64_t w = 0x1000000, in0 = 0x2000000, in1 = 0x2001000;
  for (int step = 0; step < 4096; ++step) {
    tc.lookup(in0 + (step % 16) * 64, 30);
    tc.lookup(in1 + (step % 16) * 64, 30);
    tc.lookup(w, 30);
    w += 64;
  }
  CHECK(tc.hit_rate() >= 0.9);
}

TEST_CASE("context save/restore resumes the exact trace") {
  testgen::ProgramGen gen(77);
  for (int n = 0; n < 15; ++n) {
    psx::Program p = gen.next();
    Rig base;
    auto full = run_log(base, p);
    if (full.size() < 4) continue;

    Rig a;
    REQUIRE(a.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::Accepted);
    size_t cut = full.size() / 2;
    std::vector<IssuedOp> head;
    uint64_t cycle = 0;
    while (head.size() < cut) {
      for (auto& op : a.tfu.step(cycle)) head.push_back(op);
      cycle++;
    }
    auto snap = a.tfu.save_context();

    Rig b;
    CHECK(b.tfu.restore_context(snap) == RestoreStatus::Ok);
    std::vector<IssuedOp> tail;
    cycle = 1000000;  // resume far later; order must not change
    while (b.tfu.busy()) {
      for (auto& op : b.tfu.step(cycle)) tail.push_back(op);
      cycle++;
    }
    REQUIRE(head.size() + tail.size() == full.size());
    // the architecturally visible orders are the per-queue projections;
    // the cross-queue interleave may retime after a context switch
    auto project = [](const std::vector<IssuedOp>& v, bool mem) {
      std::vector<IssuedOp> out;
      for (const auto& op : v)
        if (op.op.mem() == mem) out.push_back(op);
      return out;
    };
    std::vector<IssuedOp> resumed = head;
    resumed.insert(resumed.end(), tail.begin(), tail.end());
    std::vector<IssuedOp> uninterrupted;
    for (auto& [op, cycle] : full) uninterrupted.push_back(op);
    for (bool mem : {false, true}) {
      auto a = project(resumed, mem);
      auto b = project(uninterrupted, mem);
      REQUIRE(a.size() == b.size());
      for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].seq == b[i].seq);
        CHECK(a[i].op.op == b[i].op.op);
        CHECK(a[i].op.dest == b[i].op.dest);
        CHECK(a[i].op.addr == b[i].op.addr);
      }
    }
  }
}

TEST_CASE("restore into a busy unit is refused; empty snapshot round-trips") {
  Rig r;
  auto p = prog({mk_load(1, 0x5000), mk_mac(2, 1, 1)});
  REQUIRE(r.tfu.accept_offload(p, roles_of(p), 0) == OffloadStatus::Accepted);
  Tfu::Snapshot snap = r.tfu.save_context();
  CHECK(r.tfu.restore_context(snap) == RestoreStatus::RestoreWhileBusy);

  Rig idle;
  auto empty = idle.tfu.save_context();
  Rig other;
  CHECK(other.tfu.restore_context(empty) == RestoreStatus::Ok);
  CHECK_FALSE(other.tfu.busy());
}
