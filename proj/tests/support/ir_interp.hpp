#pragma once

// Reference interpretation of blocked-kernel IR: walks every region's full
// nest (tile levels included) lexicographically and resolves each op's
// address/registers directly. Used to check lowered program traces.

#include <array>
#include <bit>
#include <cstdint>
#include <vector>

#include "nctsim/kernelgen.hpp"

namespace irinterp {

struct FlatOp {
  nctsim::psx::Opcode op;
  uint8_t dest;
  uint64_t addr;
  bool has_addr;
};

namespace detail {

struct Ctx {
  const nctsim::kern::Region& r;
  const nctsim::kern::TensorBases& bases;
  std::vector<FlatOp>& out;
  std::array<uint32_t, nctsim::kern::kIrMaxLoops> idx{};
};

inline uint64_t role_base(const nctsim::kern::TensorBases& b,
                          nctsim::kern::TensorRole role) {
  using nctsim::kern::TensorRole;
  switch (role) {
    case TensorRole::Input: return b.input;
    case TensorRole::Weight: return b.weight;
    case TensorRole::Output: return b.output;
    default: return 0;
  }
}

struct Node {
  bool is_loop = false;
  int level = -1;
  size_t op_index = 0;
  std::vector<Node> kids;
};

inline std::vector<Node> parse(const nctsim::kern::Region& r, size_t b, size_t e,
                               uint32_t open) {
  std::vector<Node> seq;
  size_t i = b;
  while (i < e) {
    uint32_t extra = r.ops[i].loop_mask & ~open;
    if (!extra) {
      Node leaf;
      leaf.op_index = i;
      seq.push_back(leaf);
      i++;
      continue;
    }
    int lvl = std::countr_zero(extra);
    size_t j = i;
    while (j < e && r.ops[j].in_loop(lvl)) j++;
    Node loop;
    loop.is_loop = true;
    loop.level = lvl;
    loop.kids = parse(r, i, j, open | (1u << lvl));
    seq.push_back(std::move(loop));
    i = j;
  }
  return seq;
}

inline void walk(Ctx& c, const std::vector<Node>& seq) {
  for (const Node& n : seq) {
    if (!n.is_loop) {
      const auto& op = c.r.ops[n.op_index];
      int64_t reg = op.dest;
      uint64_t addr = role_base(c.bases, op.role) + op.base;
      for (int l = 0; l < c.r.levels(); ++l) {
        if (!op.in_loop(l)) continue;
        reg += static_cast<int64_t>(c.idx[l]) * op.reg_stride[l];
        addr += static_cast<int64_t>(c.idx[l]) * op.addr_stride[l];
      }
      c.out.push_back({op.op, static_cast<uint8_t>(reg), op.mem() ? addr : 0,
                       op.mem()});
    } else {
      for (uint32_t it = 0; it < c.r.loop_counts[n.level]; ++it) {
        c.idx[n.level] = it;
        walk(c, n.kids);
      }
      c.idx[n.level] = 0;
    }
  }
}

}  // namespace detail

inline std::vector<FlatOp> interpret(const nctsim::kern::KernelIR& k,
                                     const nctsim::kern::TensorBases& bases = {}) {
  std::vector<FlatOp> out;
  for (const auto& region : k.regions) {
    detail::Ctx c{region, bases, out, {}};
    auto tree = detail::parse(region, 0, region.ops.size(), 0);
    detail::walk(c, tree);
  }
  return out;
}

inline std::vector<FlatOp> flatten_programs(
    const std::vector<nctsim::psx::Program>& progs) {
  std::vector<FlatOp> out;
  for (const auto& p : progs)
    for (const auto& op : nctsim::psx::unroll(p).ops)
      out.push_back({op.op, op.dest, op.addr, op.mem()});
  return out;
}

inline bool same(const std::vector<FlatOp>& a, const std::vector<FlatOp>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (a[i].op != b[i].op || a[i].dest != b[i].dest) return false;
    if (a[i].has_addr != b[i].has_addr) return false;
    if (a[i].has_addr && a[i].addr != b[i].addr) return false;
  }
  return true;
}

}  // namespace irinterp
