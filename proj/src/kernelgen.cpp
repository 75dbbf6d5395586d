#include "nctsim/kernelgen.hpp"

#include <algorithm>
#include <bit>
#include <cassert>
#include <numeric>

namespace nctsim::kern {

namespace {

constexpr int kConvMaxWeightBlocks = 4;  // resident weight vectors (oc16 blocks)
constexpr int kIpWeightBlocks = 3;
constexpr int kIpUnroll = 4;  // statically unrolled reduction sub-steps

int ceil_div(int64_t a, int64_t b) { return static_cast<int>((a + b - 1) / b); }

IrOp ir_load(TensorRole role, uint8_t dest, uint64_t base, uint16_t mask) {
  IrOp op;
  op.op = psx::Opcode::TensorLoad;
  op.role = role;
  op.dest = dest;
  op.base = base;
  op.loop_mask = mask;
  return op;
}

IrOp ir_store(uint8_t data_reg, uint64_t base, uint16_t mask) {
  IrOp op;
  op.op = psx::Opcode::TensorStore;
  op.role = TensorRole::Output;
  op.dest = data_reg;  // register whose contents are written
  op.base = base;
  op.loop_mask = mask;
  return op;
}

IrOp ir_mac(uint8_t dest, uint8_t w, uint8_t x, uint16_t mask) {
  IrOp op;
  op.op = psx::Opcode::MacVector;
  op.dest = dest;
  op.src = {w, x};
  op.n_src = 2;
  op.loop_mask = mask;
  return op;
}

IrOp ir_alu(uint8_t dest, uint8_t src, uint16_t mask) {
  IrOp op;
  op.op = psx::Opcode::VecAlu;
  op.dest = dest;
  op.src = {src, 0};
  op.n_src = 1;
  op.loop_mask = mask;
  return op;
}

struct ConvDims {
  int oh, ow, ocb, lines, subs, taps;
  int64_t ic_bytes;   // padded channel bytes per position
  int64_t wp;         // padded input width
  int64_t w_block;    // weight bytes per oc16 block
};

ConvDims conv_dims(const LayerSpec& l) {
  ConvDims d;
  d.oh = l.out_h();
  d.ow = l.out_w();
  d.ocb = ceil_div(l.out_channels, 16);
  d.lines = ceil_div(l.in_channels, 64);
  d.subs = l.in_channels >= 64 ? 16 : ceil_div(l.in_channels, 4);
  d.taps = l.kernel_h * l.kernel_w;
  d.ic_bytes = int64_t(d.lines) * 64;
  d.wp = l.in_w + 2 * l.pad_w();
  d.w_block = int64_t(d.taps) * d.lines * 16 * 64;
  return d;
}

// Output-stationary conv tile: a positions x b oc16 blocks. Weight vectors
// and input broadcasts stage through fixed registers; the a*b accumulators
// are statically unrolled so every MAC reads fixed source registers.
// When b == 1 the position dimension folds into a loop instead (one staging
// register, accumulator rotated by register stride).
void emit_conv_region(const LayerSpec& l, const ConvDims& d, Region& r,
                      int a, int b, int n_oc, int n_col,
                      int oc_block0, int col0) {
  // level ids
  enum { T_OC, T_ROW, T_COL, KH, KW, LINES, SUB, ST_A, ST_B, N_LV };
  r.loop_counts.assign(N_LV, 1);
  r.red_mult.assign(N_LV, 0);
  r.tile_levels = 3;
  r.loop_counts[T_OC] = n_oc;
  r.loop_counts[T_ROW] = d.oh;
  r.loop_counts[T_COL] = n_col;
  r.loop_counts[KH] = l.kernel_h;
  r.loop_counts[KW] = l.kernel_w;
  r.loop_counts[LINES] = d.lines;
  r.loop_counts[SUB] = d.subs;
  r.loop_counts[ST_A] = a;
  r.loop_counts[ST_B] = b;
  r.red_mult[KH] = r.red_mult[KW] = r.red_mult[LINES] = 1;
  r.red_mult[SUB] = 4;

  const uint16_t tile_mask = 1 << T_OC | 1 << T_ROW | 1 << T_COL;
  const uint16_t red_mask =
      tile_mask | 1 << KH | 1 << KW | 1 << LINES | 1 << SUB;
  const int64_t s = l.stride;
  const int64_t row_pitch = d.wp * d.ic_bytes;
  const int64_t out_pos = int64_t(d.ocb) * 64;   // output bytes per position

  const bool looped_out = (b == 1 && a > 1);
  const uint8_t reg_in = 0;
  const uint8_t reg_w = looped_out ? 1 : static_cast<uint8_t>(a);
  const uint8_t reg_acc = looped_out ? 2 : static_cast<uint8_t>(a + b);

  auto weight_load = [&](int bi) {
    IrOp op = ir_load(TensorRole::Weight, static_cast<uint8_t>(reg_w + bi),
                      uint64_t(oc_block0 + bi) * d.w_block, red_mask);
    op.addr_stride[T_OC] = int64_t(b) * d.w_block;
    op.addr_stride[KH] = int64_t(l.kernel_w) * d.lines * 1024;
    op.addr_stride[KW] = int64_t(d.lines) * 1024;
    op.addr_stride[LINES] = 1024;
    op.addr_stride[SUB] = 64;
    return op;
  };
  auto input_load = [&](int ai, uint16_t extra_mask, int64_t extra_stride_lvl,
                        int64_t extra_stride) {
    IrOp op = ir_load(TensorRole::Input, reg_in, 0, red_mask | extra_mask);
    op.dest = looped_out ? reg_in : static_cast<uint8_t>(reg_in + ai);
    op.base = uint64_t(col0 + ai) * s * d.ic_bytes;
    op.addr_stride[T_ROW] = s * row_pitch;
    op.addr_stride[T_COL] = int64_t(a) * s * d.ic_bytes;
    op.addr_stride[KH] = row_pitch;
    op.addr_stride[KW] = d.ic_bytes;
    op.addr_stride[LINES] = 64;
    if (extra_stride_lvl >= 0) op.addr_stride[extra_stride_lvl] = extra_stride;
    return op;
  };

  if (looped_out) {
    // weight outer, positions as a loop over ST_A with rotating accumulator
    const uint16_t out_mask = red_mask | 1 << ST_A;
    r.loop_counts[ST_B] = 1;
    IrOp w = weight_load(0);
    r.ops.push_back(w);
    IrOp in = input_load(0, 1 << ST_A, ST_A, s * d.ic_bytes);
    r.ops.push_back(in);
    IrOp m = ir_mac(reg_acc, reg_w, reg_in, out_mask);
    m.reg_stride[ST_A] = 1;
    r.ops.push_back(m);
    if (a <= 4) {
      for (int ai = 0; ai < a; ++ai) {
        IrOp st = ir_store(static_cast<uint8_t>(reg_acc + ai),
                           uint64_t(col0 + ai) * out_pos +
                               uint64_t(oc_block0) * 64,
                           tile_mask);
        st.addr_stride[T_OC] = int64_t(b) * 64;
        st.addr_stride[T_ROW] = int64_t(d.ow) * out_pos;
        st.addr_stride[T_COL] = int64_t(a) * out_pos;
        r.ops.push_back(st);
      }
    } else {
      IrOp st = ir_store(reg_acc, uint64_t(col0) * out_pos + uint64_t(oc_block0) * 64,
                         tile_mask | 1 << ST_A);
      st.addr_stride[T_OC] = int64_t(b) * 64;
      st.addr_stride[T_ROW] = int64_t(d.ow) * out_pos;
      st.addr_stride[T_COL] = int64_t(a) * out_pos;
      st.addr_stride[ST_A] = out_pos;
      st.reg_stride[ST_A] = 1;
      r.ops.push_back(st);
    }
    return;
  }

  for (int bi = 0; bi < b; ++bi) r.ops.push_back(weight_load(bi));
  for (int ai = 0; ai < a; ++ai) r.ops.push_back(input_load(ai, 0, -1, 0));
  for (int ai = 0; ai < a; ++ai)
    for (int bi = 0; bi < b; ++bi)
      r.ops.push_back(ir_mac(static_cast<uint8_t>(reg_acc + ai * b + bi),
                             static_cast<uint8_t>(reg_w + bi),
                             static_cast<uint8_t>(reg_in + ai), red_mask));
  IrOp st = ir_store(reg_acc, uint64_t(col0) * out_pos + uint64_t(oc_block0) * 64,
                     tile_mask | 1 << ST_A | 1 << ST_B);
  st.addr_stride[T_OC] = int64_t(b) * 64;
  st.addr_stride[T_ROW] = int64_t(d.ow) * out_pos;
  st.addr_stride[T_COL] = int64_t(a) * out_pos;
  st.addr_stride[ST_A] = out_pos;
  st.addr_stride[ST_B] = 64;
  st.reg_stride[ST_A] = b;
  st.reg_stride[ST_B] = 1;
  r.ops.push_back(st);
}

KernelIR block_conv(const LayerSpec& l, int rf_size, const BlockingParams* forced) {
  ConvDims d = conv_dims(l);
  int budget = std::min(rf_size, kTileRegs);
  int b = std::min(kConvMaxWeightBlocks, d.ocb);
  int a = std::max(1, std::min(d.ow, (budget - b) / (1 + b)));
  if (forced) {
    a = forced->outputs_per_inner_loop / std::max(1, forced->weights_resident);
    b = forced->weights_resident;
    if (a < 1 || b < 1 || a * b + a + b > rf_size)
      throw UnblockableLayer(l.name + ": forced blocking exceeds registers");
  }
  if (a * b + a + b > rf_size)
    throw UnblockableLayer(l.name + ": accumulation chain does not fit");

  KernelIR k;
  k.layer = l;
  k.blocking = {a * b, b, a * b, 64};
  int col_full = d.ow / a, col_tail = d.ow % a;
  int oc_full = d.ocb / b, oc_tail = d.ocb % b;
  struct Part { int n, size, off; };
  std::vector<Part> cols = {{col_full, a, 0}};
  if (col_tail) cols.push_back({1, col_tail, col_full * a});
  std::vector<Part> ocs = {{oc_full, b, 0}};
  if (oc_tail) ocs.push_back({1, oc_tail, oc_full * b});
  for (const Part& pc : cols)
    for (const Part& po : ocs) {
      if (pc.n == 0 || po.n == 0) continue;
      Region r;
      r.label = "conv";
      if (pc.off || po.off) r.label += "_tail";
      emit_conv_region(l, d, r, pc.size, po.size, po.n, pc.n, po.off, pc.off);
      k.regions.push_back(std::move(r));
    }
  return k;
}

KernelIR block_ip(const LayerSpec& l, int rf_size, const BlockingParams* forced) {
  int ocb = ceil_div(l.out_channels, 16);
  int lines = ceil_div(l.vec_inputs, 64);
  int b = std::min(kIpWeightBlocks, ocb);
  if (forced) b = std::max(1, forced->weights_resident);
  if (1 + 2 * b > rf_size)
    throw UnblockableLayer(l.name + ": accumulation chain does not fit");

  KernelIR k;
  k.layer = l;
  k.blocking = {b, b, b, 64};
  int full = ocb / b, tail = ocb % b;
  struct Part { int n, size, off; };
  std::vector<Part> parts = {{full, b, 0}};
  if (tail) parts.push_back({1, tail, full * b});
  for (const Part& p : parts) {
    if (p.n == 0) continue;
    Region r;
    r.label = p.off ? "ip_tail" : "ip";
    enum { T_OC, LINES, SUBG, STJ, N_LV };
    r.loop_counts = {uint32_t(p.n), uint32_t(lines), 16 / kIpUnroll, uint32_t(p.size)};
    r.red_mult = {0, 1, kIpUnroll * 4, 0};
    r.tile_levels = 1;
    const uint16_t red_mask = 1 << T_OC | 1 << LINES | 1 << SUBG;
    const int64_t w_block = int64_t(lines) * 1024;
    const uint8_t reg_x = 0, reg_w = 1, reg_acc = static_cast<uint8_t>(1 + p.size);
    for (int u = 0; u < kIpUnroll; ++u) {
      IrOp x = ir_load(TensorRole::Input, reg_x, 0, red_mask);
      x.addr_stride[LINES] = 64;  // whole line refetched per sub-step
      r.ops.push_back(x);
      for (int bi = 0; bi < p.size; ++bi) {
        IrOp w = ir_load(TensorRole::Weight, static_cast<uint8_t>(reg_w + bi),
                         uint64_t(p.off + bi) * w_block + uint64_t(u) * 64, red_mask);
        w.addr_stride[T_OC] = int64_t(p.size) * w_block;
        w.addr_stride[LINES] = 1024;
        w.addr_stride[SUBG] = int64_t(kIpUnroll) * 64;
        r.ops.push_back(w);
      }
      for (int bi = 0; bi < p.size; ++bi)
        r.ops.push_back(ir_mac(static_cast<uint8_t>(reg_acc + bi),
                               static_cast<uint8_t>(reg_w + bi), reg_x, red_mask));
    }
    IrOp st = ir_store(reg_acc, uint64_t(p.off) * 64, uint16_t(1 << T_OC | 1 << STJ));
    st.addr_stride[T_OC] = int64_t(p.size) * 64;
    st.addr_stride[STJ] = 64;
    st.reg_stride[STJ] = 1;
    r.ops.push_back(st);
    k.regions.push_back(std::move(r));
  }
  return k;
}

KernelIR block_pool(const LayerSpec& l) {
  KernelIR k;
  k.layer = l;
  k.blocking = {1, 0, 1, 64};
  int cb = ceil_div(l.in_channels, 64);
  Region r;
  r.label = "pool";
  enum { T_CB, T_OY, T_OX, WH, WW, N_LV };
  r.loop_counts = {uint32_t(cb), uint32_t(l.out_h()), uint32_t(l.out_w()),
                   uint32_t(l.kernel_h), uint32_t(l.kernel_w)};
  r.red_mult = {0, 0, 0, 1, 1};
  r.tile_levels = 3;
  const uint16_t all = (1 << N_LV) - 1;
  const int64_t C = int64_t(cb) * 64;
  IrOp in = ir_load(TensorRole::Input, 1, 0, all);
  in.addr_stride[T_CB] = 64;
  in.addr_stride[T_OY] = int64_t(l.stride) * l.in_w * C;
  in.addr_stride[T_OX] = int64_t(l.stride) * C;
  in.addr_stride[WH] = int64_t(l.in_w) * C;
  in.addr_stride[WW] = C;
  r.ops.push_back(in);
  r.ops.push_back(ir_alu(0, 1, all));
  IrOp st = ir_store(0, 0, uint16_t(1 << T_CB | 1 << T_OY | 1 << T_OX));
  st.addr_stride[T_CB] = 64;
  st.addr_stride[T_OY] = int64_t(l.out_w()) * C;
  st.addr_stride[T_OX] = C;
  r.ops.push_back(st);
  k.regions.push_back(std::move(r));
  return k;
}

KernelIR block_concat(const LayerSpec& l) {
  KernelIR k;
  k.layer = l;
  k.blocking = {1, 0, 1, 64};
  const int group = 8;  // positions copied per tile
  int hw = l.in_h * l.in_w;
  int ctot = 0;
  for (int c : l.concat_channels) ctot += ceil_div(c, 64);
  int64_t in_off = 0;
  int out_off = 0;
  for (size_t s = 0; s < l.concat_channels.size(); ++s) {
    int csb = ceil_div(l.concat_channels[s], 64);
    int full = hw / group, tail = hw % group;
    struct Part { int n, size, off; };
    std::vector<Part> parts = {{full, group, 0}};
    if (tail) parts.push_back({1, tail, full * group});
    for (const Part& p : parts) {
      if (p.n == 0) continue;
      Region r;
      r.label = "concat_src" + std::to_string(s);
      enum { T_POS, POSG, CB, N_LV };
      r.loop_counts = {uint32_t(p.n), uint32_t(p.size), uint32_t(csb)};
      r.red_mult = {0, 0, 0};
      r.tile_levels = 1;
      const uint16_t all = 0b111;
      IrOp in = ir_load(TensorRole::Input, 0,
                        in_off + uint64_t(p.off) * csb * 64, all);
      in.addr_stride[T_POS] = int64_t(p.size) * csb * 64;
      in.addr_stride[POSG] = int64_t(csb) * 64;
      in.addr_stride[CB] = 64;
      r.ops.push_back(in);
      IrOp st = ir_store(0, (uint64_t(p.off) * ctot + out_off) * 64, all);
      st.addr_stride[T_POS] = int64_t(p.size) * ctot * 64;
      st.addr_stride[POSG] = int64_t(ctot) * 64;
      st.addr_stride[CB] = 64;
      r.ops.push_back(st);
      k.regions.push_back(std::move(r));
    }
    in_off += int64_t(hw) * csb * 64;
    out_off += csb;
  }
  return k;
}

}  // namespace

KernelIR block_layer(const LayerSpec& layer, int rf_size, int vector_bytes,
                     const BlockingParams* forced) {
  check_layer(layer);
  if (rf_size < 8) throw UnblockableLayer("register file too small");
  (void)vector_bytes;
  switch (layer.kind) {
    case LayerKind::Convolution: return block_conv(layer, rf_size, forced);
    case LayerKind::InnerProduct: return block_ip(layer, rf_size, forced);
    case LayerKind::Pooling: return block_pool(layer);
    case LayerKind::Concat: return block_concat(layer);
  }
  throw UnblockableLayer("unreachable");
}

ReuseReport algorithm_ops_per_byte(const LayerSpec& l) {
  check_layer(l);
  ReuseReport r;
  switch (l.kind) {
    case LayerKind::Convolution:
      r.input_ops_per_byte =
          double(l.out_channels) * l.kernel_h * l.kernel_w / (l.stride * l.stride);
      r.weight_ops_per_byte = double(l.out_h()) * l.out_w();
      r.output_ops_per_byte = double(l.in_channels) * l.kernel_h * l.kernel_w;
      break;
    case LayerKind::InnerProduct:
      r.input_ops_per_byte = l.out_channels;
      r.weight_ops_per_byte = 1.0;
      r.output_ops_per_byte = l.vec_inputs;
      break;
    case LayerKind::Pooling:
      r.input_ops_per_byte = 1.0;
      r.output_ops_per_byte = double(l.kernel_h) * l.kernel_w;
      break;
    case LayerKind::Concat:
      r.input_ops_per_byte = 1.0;
      r.output_ops_per_byte = 1.0;
      break;
  }
  return r;
}

TensorExtents tensor_extents(const LayerSpec& l) {
  TensorExtents e;
  switch (l.kind) {
    case LayerKind::Convolution: {
      ConvDims d = conv_dims(l);
      int64_t hp = l.in_h + 2 * l.pad_h();
      e.input_bytes = uint64_t(hp) * d.wp * d.ic_bytes;
      e.weight_bytes = uint64_t(d.ocb) * d.w_block;
      e.output_bytes = uint64_t(d.oh) * d.ow * d.ocb * 64;
      break;
    }
    case LayerKind::InnerProduct: {
      int lines = ceil_div(l.vec_inputs, 64);
      int ocb = ceil_div(l.out_channels, 16);
      e.input_bytes = uint64_t(lines) * 64;
      e.weight_bytes = uint64_t(ocb) * lines * 1024;
      e.output_bytes = uint64_t(ocb) * 64;
      break;
    }
    case LayerKind::Pooling: {
      int cb = ceil_div(l.in_channels, 64);
      e.input_bytes = uint64_t(l.in_h) * l.in_w * cb * 64;
      e.output_bytes = uint64_t(l.out_h()) * l.out_w() * cb * 64;
      break;
    }
    case LayerKind::Concat: {
      uint64_t hw = uint64_t(l.in_h) * l.in_w;
      uint64_t ctot = 0;
      for (int c : l.concat_channels) ctot += ceil_div(c, 64);
      e.input_bytes = hw * ctot * 64;
      e.output_bytes = hw * ctot * 64;
      break;
    }
  }
  return e;
}

// ---------------- lowering ----------------

namespace {

struct Node {
  bool is_loop = false;
  int level = -1;
  size_t op_index = 0;
  std::vector<Node> kids;
};

std::vector<Node> parse_ir(const Region& r, size_t b, size_t e, uint32_t open) {
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
    loop.kids = parse_ir(r, i, j, open | (1u << lvl));
    seq.push_back(std::move(loop));
    i = j;
  }
  return seq;
}

void collect(const std::vector<Node>& seq, std::vector<size_t>& ops, uint32_t& levels) {
  for (const Node& n : seq) {
    if (n.is_loop) {
      levels |= 1u << n.level;
      collect(n.kids, ops, levels);
    } else {
      ops.push_back(n.op_index);
    }
  }
}

struct Builder {
  const Region& region;
  const TensorBases& bases;
  RegionLowering out;

  struct PeelEntry {
    int level;
    uint64_t instances;
    uint64_t stride_iters;  // iterations of `level` advanced per instance
    uint64_t base_iter;     // starting iteration of `level`
  };

  uint64_t role_base(TensorRole role) const {
    switch (role) {
      case TensorRole::Input: return bases.input;
      case TensorRole::Weight: return bases.weight;
      case TensorRole::Output: return bases.output;
      default: return 0;
    }
  }

  uint64_t red_scalars(uint32_t levels, uint32_t override_level = ~0u,
                       uint32_t override_count = 0) const {
    uint64_t red = 1;
    bool any = false;
    for (int l = 0; l < region.levels(); ++l) {
      if (!(levels >> l & 1) || region.red_mult[l] == 0) continue;
      uint64_t c = (uint32_t(l) == override_level) ? override_count
                                                   : region.loop_counts[l];
      red *= c * region.red_mult[l];
      any = true;
    }
    return any ? red : 0;
  }

  bool fits(const std::vector<size_t>& ops, uint32_t levels,
            uint32_t split_level = ~0u, uint32_t split_count = 0) const {
    if (ops.size() > psx::kMaxInstrs) return false;
    int live = 0;
    for (int l = 0; l < region.levels(); ++l) {
      if (!(levels >> l & 1)) continue;
      uint32_t c = (uint32_t(l) == split_level) ? split_count : region.loop_counts[l];
      if (c > 1) live++;
    }
    if (live > psx::kMaxLoops) return false;
    uint64_t red = red_scalars(levels, split_level, split_count);
    return red <= kMaxReductionPerProgram;
  }

  void make_class(const std::vector<Node>& seq, const std::vector<PeelEntry>& peels,
                  uint32_t split_level, uint32_t split_count) {
    std::vector<size_t> ops;
    uint32_t levels = 0;
    collect(seq, ops, levels);

    // in-program levels, outermost first, dropping degenerate counts
    std::vector<int> live;
    for (int l = 0; l < region.levels(); ++l) {
      if (!(levels >> l & 1)) continue;
      uint32_t c = (uint32_t(l) == split_level) ? split_count : region.loop_counts[l];
      if (c > 1) live.push_back(l);
    }

    ProgramClass cls;
    cls.shape.loops.counts.clear();
    for (int l : live) {
      uint32_t c = (uint32_t(l) == split_level) ? split_count : region.loop_counts[l];
      cls.shape.loops.counts.push_back(c);
    }
    if (cls.shape.loops.counts.empty()) cls.shape.loops.counts.push_back(1);

    for (size_t oi : ops) {
      const IrOp& src = region.ops[oi];
      psx::Instr in;
      in.op = src.op;
      in.dest = src.dest;
      in.src = src.src;
      in.n_src = src.n_src;
      in.base_addr = role_base(src.role) + src.base;
      for (size_t k = 0; k < live.size(); ++k) {
        int l = live[k];
        if (!src.in_loop(l)) continue;
        in.loop_mask |= uint8_t(1u << k);
        in.addr_stride[k] = src.addr_stride[l];
        in.reg_stride[k] = src.reg_stride[l];
      }
      // peeled and tile levels contribute to the instance base
      for (const PeelEntry& pe : peels)
        in.base_addr += pe.base_iter * src.addr_stride[pe.level];
      cls.shape.instrs.push_back(in);
      cls.roles.push_back(src.role);
    }

    cls.tile_step.resize(region.tile_levels);
    for (int tl = 0; tl < region.tile_levels; ++tl) {
      cls.tile_step[tl].resize(ops.size());
      for (size_t i = 0; i < ops.size(); ++i)
        cls.tile_step[tl][i] = region.ops[ops[i]].addr_stride[tl];
    }
    for (const PeelEntry& pe : peels) {
      if (pe.instances == 1) continue;  // folded into the base
      ProgramClass::Peel p;
      p.instances = pe.instances;
      p.step.resize(ops.size());
      for (size_t i = 0; i < ops.size(); ++i) {
        const IrOp& src = region.ops[ops[i]];
        if (src.reg_stride[pe.level] != 0)
          throw UnblockableLayer("register stride on a peeled loop level");
        p.step[i] = int64_t(pe.stride_iters) * src.addr_stride[pe.level];
      }
      cls.intra.push_back(std::move(p));
    }

    auto v = psx::validate(cls.shape);
    if (!v)
      throw UnblockableLayer(std::string("lowered program invalid: ") +
                             psx::to_string(v.verdict));
    auto counts = psx::unroll_counts(cls.shape);
    cls.dyn_iterations = counts.loop_iterations;
    for (const psx::DynOp& op : psx::unroll(cls.shape).ops) {
      switch (op.op) {
        case psx::Opcode::TensorLoad: cls.dyn_loads++; break;
        case psx::Opcode::TensorStore: cls.dyn_stores++; break;
        case psx::Opcode::MacVector: cls.dyn_macs++; break;
        case psx::Opcode::VecAlu: cls.dyn_alus++; break;
        default: break;
      }
    }
    out.classes.push_back(std::move(cls));
  }

  void emit_seq(const std::vector<Node>& seq, std::vector<PeelEntry>& peels) {
    std::vector<size_t> ops;
    uint32_t levels = 0;
    collect(seq, ops, levels);
    if (fits(ops, levels)) {
      make_class(seq, peels, ~0u, 0);
      return;
    }
    if (seq.size() > 1) {
      for (const Node& n : seq) {
        std::vector<Node> one = {n};
        emit_seq(one, peels);
      }
      return;
    }
    const Node& n = seq[0];
    if (!n.is_loop)
      throw UnblockableLayer("single op exceeds program limits");
    uint32_t count = region.loop_counts[n.level];

    // prefer keeping a reduction level in-program at a reduced count
    if (region.red_mult[n.level] > 0) {
      uint64_t per_iter = red_scalars(levels) / count;
      if (per_iter > 0 && per_iter <= kMaxReductionPerProgram) {
        uint32_t chunk = uint32_t(kMaxReductionPerProgram / per_iter);
        chunk = std::min(chunk, count);
        if (chunk >= 1 && fits(ops, levels, n.level, chunk)) {
          uint32_t full = count / chunk, tail = count % chunk;
          if (full) {
            peels.push_back({n.level, full, chunk, 0});
            make_class(seq, peels, n.level, chunk);
            peels.pop_back();
          }
          if (tail) {
            peels.push_back({n.level, 1, 0, uint64_t(full) * chunk});
            make_class(seq, peels, n.level, tail);
            peels.pop_back();
          }
          return;
        }
      }
    }
    // peel the whole level into instances
    peels.push_back({n.level, count, 1, 0});
    emit_seq(n.kids, peels);
    peels.pop_back();
  }

  void run() {
    out.tile_dims.assign(region.loop_counts.begin(),
                         region.loop_counts.begin() + region.tile_levels);
    out.tile_count = region.tiles();
    uint32_t tile_mask = (1u << region.tile_levels) - 1;
    auto forest = parse_ir(region, 0, region.ops.size(), tile_mask);
    std::vector<PeelEntry> peels;
    emit_seq(forest, peels);
    for (const ProgramClass& c : out.classes) {
      uint64_t n = c.intra_instances();
      out.macvec_per_tile += c.dyn_macs * n;
      out.ops_per_tile +=
          (c.dyn_loads + c.dyn_stores + c.dyn_macs + c.dyn_alus) * n;
    }
  }
};

}  // namespace

Lowering lower(const KernelIR& kernel, const TensorBases& bases) {
  Lowering low;
  for (const Region& r : kernel.regions) {
    Builder b{r, bases, {}};
    b.run();
    low.tile_count += b.out.tile_count;
    for (const ProgramClass& c : b.out.classes)
      low.total_macvec += c.dyn_macs * c.intra_instances() * b.out.tile_count;
    low.regions.push_back(std::move(b.out));
  }
  return low;
}

std::vector<Lowering::TileProgram> Lowering::tile_programs(uint64_t t) const {
  const RegionLowering* rl = nullptr;
  for (const RegionLowering& r : regions) {
    if (t < r.tile_count) { rl = &r; break; }
    t -= r.tile_count;
  }
  if (!rl) return {};
  // decompose tile index over the region's tile dims (row-major)
  std::vector<uint64_t> idx(rl->tile_dims.size(), 0);
  uint64_t rem = t;
  for (size_t i = rl->tile_dims.size(); i-- > 0;) {
    idx[i] = rem % rl->tile_dims[i];
    rem /= rl->tile_dims[i];
  }
  std::vector<TileProgram> out;
  for (const ProgramClass& cls : rl->classes) {
    size_t n_instr = cls.shape.instrs.size();
    std::vector<uint64_t> tile_off(n_instr, 0);
    for (size_t tl = 0; tl < idx.size(); ++tl)
      for (size_t i = 0; i < n_instr; ++i)
        tile_off[i] += idx[tl] * cls.tile_step[tl][i];
    // enumerate intra instances lexicographically
    std::vector<uint64_t> iidx(cls.intra.size(), 0);
    for (;;) {
      psx::Program p = cls.shape;
      for (size_t i = 0; i < n_instr; ++i) {
        uint64_t extra = tile_off[i];
        for (size_t pi = 0; pi < cls.intra.size(); ++pi)
          extra += iidx[pi] * cls.intra[pi].step[i];
        p.instrs[i].base_addr += extra;
      }
      out.push_back({std::move(p), &cls});
      bool carry = true;
      for (size_t pi = cls.intra.size(); pi-- > 0 && carry;) {
        if (++iidx[pi] < cls.intra[pi].instances) carry = false;
        else iidx[pi] = 0;
      }
      if (carry) break;
    }
  }
  return out;
}

uint64_t Lowering::tile_macvec(uint64_t t) const {
  for (const RegionLowering& r : regions) {
    if (t < r.tile_count) return r.macvec_per_tile;
    t -= r.tile_count;
  }
  return 0;
}

Lowering::Span Lowering::role_span(TensorRole role, uint64_t t) const {
  Span span;
  const RegionLowering* rl = nullptr;
  uint64_t local = t;
  for (const RegionLowering& r : regions) {
    if (local < r.tile_count) { rl = &r; break; }
    local -= r.tile_count;
  }
  if (!rl) return span;
  std::vector<uint64_t> idx(rl->tile_dims.size(), 0);
  uint64_t rem = local;
  for (size_t i = rl->tile_dims.size(); i-- > 0;) {
    idx[i] = rem % rl->tile_dims[i];
    rem /= rl->tile_dims[i];
  }
  for (const ProgramClass& cls : rl->classes) {
    for (size_t i = 0; i < cls.shape.instrs.size(); ++i) {
      if (cls.roles[i] != role || !cls.shape.instrs[i].mem()) continue;
      const psx::Instr& in = cls.shape.instrs[i];
      uint64_t base = in.base_addr;
      for (size_t tl = 0; tl < idx.size(); ++tl)
        base += idx[tl] * cls.tile_step[tl][i];
      uint64_t hi = base;
      for (size_t l = 0; l < cls.shape.loops.counts.size(); ++l)
        if (in.in_loop(int(l)) && in.addr_stride[l] > 0)
          hi += uint64_t(cls.shape.loops.counts[l] - 1) * in.addr_stride[l];
      for (const auto& p : cls.intra)
        if (p.step[i] > 0) hi += (p.instances - 1) * p.step[i];
      span.lo = std::min(span.lo, base);
      span.hi = std::max(span.hi, hi + in.access_bytes);
    }
  }
  return span;
}

uint64_t Lowering::tile_ops(uint64_t t) const {
  for (const RegionLowering& r : regions) {
    if (t < r.tile_count) return r.ops_per_tile;
    t -= r.tile_count;
  }
  return 0;
}

std::vector<psx::Program> lower_to_psx(const KernelIR& kernel,
                                       const TensorBases& bases) {
  Lowering low = lower(kernel, bases);
  std::vector<psx::Program> out;
  for (uint64_t t = 0; t < low.tile_count; ++t)
    for (auto& tp : low.tile_programs(t)) out.push_back(std::move(tp.prog));
  return out;
}

ReuseReport kernel_traffic(const KernelIR& kernel) {
  ReuseReport r = algorithm_ops_per_byte(kernel.layer);
  Lowering low = lower(kernel);
  uint64_t loads = 0, stores = 0, macs = 0, alus = 0;
  for (const RegionLowering& rl : low.regions)
    for (const ProgramClass& c : rl.classes) {
      uint64_t n = rl.tile_count * c.intra_instances();
      loads += n * c.dyn_loads;
      stores += n * c.dyn_stores;
      macs += n * c.dyn_macs;
      alus += n * c.dyn_alus;
    }
  uint64_t denom = macs ? macs : (alus ? alus : stores);
  if (denom) {
    r.loads_per_mac = double(loads) / double(denom);
    r.stores_per_mac = double(stores) / double(denom);
  }
  return r;
}

CompressionStats compression_stats(const KernelIR& kernel,
                                   uint32_t bookkeeping_per_iter) {
  CompressionStats s;
  Lowering low = lower(kernel);
  for (const RegionLowering& rl : low.regions)
    for (const ProgramClass& c : rl.classes) {
      uint64_t n = rl.tile_count * c.intra_instances();
      uint64_t dyn = c.dyn_loads + c.dyn_stores + c.dyn_macs + c.dyn_alus;
      s.baseline_dynamic += n * (dyn + bookkeeping_per_iter * c.dyn_iterations);
      s.core_side += n * psx::core_side_count(c.shape);
      s.programs += n;
    }
  return s;
}

}  // namespace nctsim::kern
