#include "nctsim/memhier.hpp"

#include <cassert>

namespace nctsim::mem {

const char* to_string(Level l) {
  switch (l) {
    case Level::L1: return "L1";
    case Level::L2: return "L2";
    case Level::L3: return "L3";
    case Level::DRAM: return "DRAM";
  }
  return "?";
}

const char* move_if_name(int i) {
  switch (i) {
    case kL1L2: return "l1_l2";
    case kL2L3: return "l2_l3";
    case kL3DRAM: return "l3_dram";
    case kL3X: return "l3_xslice";
  }
  return "?";
}

DmReport dm_overhead(const MovementCounters& c) {
  uint64_t rf = c.rf_load_bytes + c.rf_store_bytes;
  if (rf == 0) throw NoTraffic("no register-file traffic recorded");
  DmReport r;
  for (int i = 0; i < kNumIf; ++i) {
    r.per_interface[i] = double(c.fill_bytes[i] + c.evict_bytes[i]) / double(rf);
    r.total += r.per_interface[i];
  }
  return r;
}

HierConfig HierConfig::table_defaults(int cores) {
  HierConfig h;
  h.cores = cores;
  h.l1 = {32 * 1024, 8, 64, Replacement::LRU, 2, 1, 0, 8, 1, 4, 1, 0};
  h.l2 = {1024 * 1024, 16, 64, Replacement::LRU, 0, 0, 2, 48, 2, 8, 1, 0};
  h.l3 = {1441792, 11, 64, Replacement::RRIP, 0, 0, 1, 48, 2, 10,
          uint32_t(cores), 0};
  return h;
}

Hierarchy::Hierarchy(const HierConfig& cfg)
    : cfg_(cfg), coherence_(cfg.cores, int(cfg.l3.slices)) {
  cfg_.l1.check();
  cfg_.l2.check();
  cfg_.l3.check();
  for (int c = 0; c < cfg_.cores; ++c) {
    l1_.emplace_back(cfg_.l1.sets(), cfg_.l1.ways, cfg_.l1.replacement);
    l2_.emplace_back(cfg_.l2.sets(), cfg_.l2.ways, cfg_.l2.replacement);
    l1_ports_.emplace_back(cfg_.l1.read_ports, cfg_.l1.write_ports,
                           cfg_.l1.shared_rw_ports);
    l2_ports_.emplace_back(cfg_.l2.read_ports, cfg_.l2.write_ports,
                           cfg_.l2.shared_rw_ports);
    l1_mshr_.emplace_back(cfg_.l1.mshr_entries);
    l2_mshr_.emplace_back(cfg_.l2.mshr_entries);
  }
  for (uint32_t s = 0; s < cfg_.l3.slices; ++s) {
    l3_.emplace_back(cfg_.l3.sets(), cfg_.l3.ways, cfg_.l3.replacement);
    l3_ports_.emplace_back(cfg_.l3.read_ports, cfg_.l3.write_ports,
                           cfg_.l3.shared_rw_ports);
    l3_mshr_.emplace_back(cfg_.l3.mshr_entries);
    l3_tfu_ways_.push_back(cfg_.l3.partitioned_ways_for_tfu);
  }
}

void Hierarchy::partition_l3(int slice, uint32_t ways_for_tfu) {
  if (ways_for_tfu < 1 || ways_for_tfu >= cfg_.l3.ways)
    throw InvalidWayCount("ways_for_tfu must be in [1, ways-1]");
  l3_tfu_ways_[slice] = ways_for_tfu;
}

uint64_t Hierarchy::l3_partition_bytes(int slice) const {
  return uint64_t(l3_tfu_ways_[slice]) * cfg_.l3.sets() * 64;
}

void Hierarchy::count_move(uint64_t cycle, int iface, bool fill, uint64_t line) {
  if (fill)
    move_.fill_bytes[iface] += 64;
  else
    move_.evict_bytes[iface] += 64;
  if (trace_) trace_({cycle, iface, fill, line});
}

void Hierarchy::install_l1(int core, uint64_t line, bool dirty, uint64_t cycle) {
  count_move(cycle, kL1L2, true, line);
  auto ev = l1_[core].insert(line, dirty);
  if (ev.valid) {
    coherence_.evict_l1(core, ev.line);
    if (ev.dirty) {
      l2_ports_[core].reserve(cycle, true);
      count_move(cycle, kL1L2, false, ev.line);
      l2_[core].set_dirty(ev.line);
    }
  }
}

void Hierarchy::install_l2(int core, uint64_t line, bool dirty, uint64_t cycle) {
  auto ev = l2_[core].insert(line, dirty);
  if (!ev.valid) return;
  // L1 copy cannot outlive its L2 backing
  if (l1_[core].present(ev.line)) {
    bool l1_dirty = l1_[core].invalidate(ev.line);
    if (l1_dirty) {
      ev.dirty = true;
      count_move(cycle, kL1L2, false, ev.line);
    }
  }
  coherence_.evict_core(core, ev.line);
  int home = slice_of(ev.line);
  bool in_l3 = l3_[home].present(ev.line);
  if (in_l3 && !ev.dirty) return;  // shared copy already downstream
  l3_ports_[home].reserve(cycle, true);
  count_move(cycle, kL2L3, false, ev.line);
  install_l3(home, ev.line, ev.dirty, cycle, false);
}

void Hierarchy::install_l3(int slice, uint64_t line, bool dirty, uint64_t cycle,
                           bool tfu_region) {
  uint32_t part = l3_tfu_ways_[slice];
  uint32_t lo = tfu_region ? 0 : part;
  uint32_t hi = tfu_region ? part : cfg_.l3.ways;
  if (lo >= hi) return;  // no region configured
  auto ev = l3_[slice].insert(line, dirty, lo, hi);
  if (ev.valid) {
    if (tfu_region) coherence_.evict_replica(slice, ev.line);
    if (ev.dirty) count_move(cycle, kL3DRAM, false, ev.line);
  }
}

uint64_t Hierarchy::fetch_from_outer(const MemRequest& req, Level entry,
                                     uint64_t line, uint64_t start,
                                     AccessResult& res) {
  int core = req.who.core;
  uint64_t t = start;
  if (entry == Level::L1) {
    // look in this core's L2
    uint64_t granted = l2_ports_[core].reserve(t, false);
    res.stall_cycles += granted - t;
    t = granted + cfg_.l2.tag_latency;
    stats_[1].lookups++;
    if (l2_[core].lookup(line)) {
      stats_[1].hits++;
      res.hit_level = Level::L2;
      return t + cfg_.l2.data_latency;
    }
    auto g = l2_mshr_[core].acquire(t, line);
    res.stall_cycles += g.start_cycle - t;
    t = g.start_cycle;
    if (g.merged) {
      res.hit_level = Level::L2;
      return g.merged_completion;
    }
    uint64_t done = fetch_from_outer(req, Level::L2, line, t, res);
    install_l2(core, line, false, done);
    count_move(done, kL2L3, true, line);
    l2_mshr_[core].fill_done(line, done);
    return done;
  }

  // entry == L2: look in the home slice, then peers, then DRAM
  int home = slice_of(line);
  uint64_t granted = l3_ports_[home].reserve(t, false);
  res.stall_cycles += granted - t;
  t = granted + cfg_.l3.tag_latency;
  stats_[2].lookups++;
  if (l3_[home].lookup(line)) {
    stats_[2].hits++;
    if (res.hit_level == Level::L1) res.hit_level = Level::L3;
    return t + cfg_.l3.data_latency;
  }
  auto g = l3_mshr_[home].acquire(t, line);
  res.stall_cycles += g.start_cycle - t;
  t = g.start_cycle;
  if (g.merged) return g.merged_completion;

  // directory: another core's private hierarchy may forward
  bool peer = false;
  for (int c = 0; c < cfg_.cores && !peer; ++c)
    if (c != core && coherence_.core_has(c, line)) peer = true;
  uint64_t done;
  if (peer) {
    done = t + cfg_.directory_latency + cfg_.l2.tag_latency + cfg_.l2.data_latency;
  } else {
    done = t + cfg_.dram_latency;
    dram_accesses_++;
    count_move(done, kL3DRAM, true, line);
  }
  if (res.hit_level == Level::L1 || res.hit_level == Level::L2)
    res.hit_level = Level::DRAM;
  l3_mshr_[home].fill_done(line, done);
  return done;
}

AccessResult Hierarchy::access(const MemRequest& req) {
  if (req.vaddr % 64 != 0)
    throw SimInvariantError("memory request not line aligned");
  uint64_t line = req.vaddr / 64;
  int core = req.who.core;
  AccessResult res;
  res.hit_level = Level::L1;
  if (req.is_store)
    move_.rf_store_bytes += 64;
  else
    move_.rf_load_bytes += 64;

  switch (req.who.kind) {
    case AgentKind::CoreThread:
    case AgentKind::TfuL1: {
      uint64_t granted = l1_ports_[core].reserve(req.issue_cycle, req.is_store);
      res.stall_cycles += granted - req.issue_cycle;
      uint64_t t = granted + cfg_.l1.tag_latency;
      stats_[0].lookups++;
      bool hit = l1_[core].lookup(line);
      auto act = req.is_store ? coherence_.core_store(core, line)
                              : coherence_.core_load(core, line);
      uint64_t coh = 0;
      if (act.invalidations || act.writebacks) coh = cfg_.directory_latency;
      for (int wb = 0; wb < act.writebacks; ++wb)
        count_move(t, kL2L3, false, line);
      if (hit) {
        stats_[0].hits++;
        if (req.is_store) l1_[core].set_dirty(line);
        res.complete_cycle = t + cfg_.l1.data_latency + coh;
        break;
      }
      auto g = l1_mshr_[core].acquire(t, line);
      res.stall_cycles += g.start_cycle - t;
      t = g.start_cycle;
      if (g.merged) {
        res.hit_level = Level::L2;  // served by an in-flight fill
        res.complete_cycle = std::max(g.merged_completion, t) + coh;
        if (req.is_store) {
          l1_[core].set_dirty(line);
          l2_[core].lookup(line);
        }
        break;
      }
      uint64_t done = fetch_from_outer(req, Level::L1, line, t, res);
      install_l1(core, line, req.is_store, done);
      l1_mshr_[core].fill_done(line, done);
      res.complete_cycle = done + coh;
      break;
    }
    case AgentKind::TfuL2: {
      uint64_t granted = l2_ports_[core].reserve(req.issue_cycle, req.is_store);
      res.stall_cycles += granted - req.issue_cycle;
      uint64_t t = granted + cfg_.l2.tag_latency;
      stats_[1].lookups++;
      bool hit = l2_[core].lookup(line);
      auto act = req.is_store ? coherence_.tfu_l2_store(core, line)
                              : coherence_.tfu_l2_load(core, line);
      uint64_t coh = 0;
      if (act.l1_snoop) {
        coh += cfg_.directory_latency + cfg_.l1.tag_latency;
        bool dirty = l1_[core].invalidate(line);
        if (req.is_store || dirty) count_move(t, kL1L2, false, line);
        if (!req.is_store && dirty) l2_[core].set_dirty(line);
      } else if (act.invalidations || act.writebacks) {
        coh += cfg_.directory_latency;
      }
      for (int wb = 0; wb < act.writebacks - (act.l1_snoop ? 1 : 0); ++wb)
        count_move(t, kL2L3, false, line);
      if (hit) {
        stats_[1].hits++;
        res.hit_level = Level::L2;
        if (req.is_store) l2_[core].set_dirty(line);
        res.complete_cycle = t + cfg_.l2.data_latency + coh;
        break;
      }
      auto g = l2_mshr_[core].acquire(t, line);
      res.stall_cycles += g.start_cycle - t;
      t = g.start_cycle;
      if (g.merged) {
        res.hit_level = Level::L3;
        res.complete_cycle = std::max(g.merged_completion, t) + coh;
        if (req.is_store) l2_[core].set_dirty(line);
        break;
      }
      uint64_t done = fetch_from_outer(req, Level::L2, line, t, res);
      install_l2(core, line, req.is_store, done);
      count_move(done, kL2L3, true, line);
      l2_mshr_[core].fill_done(line, done);
      if (res.hit_level == Level::L1) res.hit_level = Level::L3;
      res.complete_cycle = done + coh;
      break;
    }
    case AgentKind::TfuL3: {
      int local = core % int(cfg_.l3.slices);
      int home = slice_of(line);
      uint64_t granted = l3_ports_[local].reserve(req.issue_cycle, req.is_store);
      res.stall_cycles += granted - req.issue_cycle;
      uint64_t t = granted + cfg_.l3.tag_latency;
      res.hit_level = Level::L3;

      if (req.is_store) {
        // write to the home slice's shared region; invalidate private copies
        auto act = coherence_.shared_store(line);
        uint64_t coh =
            (act.invalidations || act.writebacks) ? cfg_.directory_latency : 0;
        for (int wb = 0; wb < act.writebacks; ++wb)
          count_move(t, kL2L3, false, line);
        stats_[2].lookups++;
        if (home != local) {
          uint64_t th = l3_ports_[home].reserve(t + cfg_.xslice_latency, true);
          t = th + cfg_.l3.tag_latency;
        }
        bool hit = l3_[home].lookup(line);
        if (hit) stats_[2].hits++;
        l3_[home].insert(line, true, l3_tfu_ways_[home], cfg_.l3.ways);
        if (!hit) install_l3(home, line, true, t, false);
        res.complete_cycle = t + cfg_.l3.data_latency + coh;
        break;
      }

      bool allocate = (home != local) && req.replicate;
      auto act = coherence_.tfu_l3_load(local, line, allocate);
      uint64_t coh =
          (act.invalidations || act.writebacks) ? cfg_.directory_latency : 0;
      for (int wb = 0; wb < act.writebacks; ++wb)
        count_move(t, kL2L3, false, line);
      stats_[2].lookups++;
      if (l3_[local].lookup(line)) {
        stats_[2].hits++;
        res.complete_cycle = t + cfg_.l3.data_latency + coh;
        break;
      }
      if (home != local) {
        uint64_t th = l3_ports_[home].reserve(t + cfg_.xslice_latency, false);
        res.stall_cycles += th - (t + cfg_.xslice_latency);
        uint64_t t2 = th + cfg_.l3.tag_latency;
        stats_[2].lookups++;
        if (l3_[home].lookup(line)) {
          stats_[2].hits++;
          uint64_t done = t2 + cfg_.l3.data_latency;
          if (allocate) {
            count_move(done, kL3X, true, line);
            install_l3(local, line, false, done, true);
          }
          res.complete_cycle = done + coh;
          break;
        }
        auto g = l3_mshr_[home].acquire(t2, line);
        res.stall_cycles += g.start_cycle - t2;
        uint64_t done;
        if (g.merged) {
          done = g.merged_completion;
        } else {
          done = g.start_cycle + cfg_.dram_latency;
          dram_accesses_++;
          count_move(done, kL3DRAM, true, line);
          install_l3(home, line, false, done, false);
          l3_mshr_[home].fill_done(line, done);
        }
        if (allocate) {
          count_move(done, kL3X, true, line);
          install_l3(local, line, false, done, true);
        }
        res.hit_level = Level::DRAM;
        res.complete_cycle = done + coh;
        break;
      }
      auto g = l3_mshr_[local].acquire(t, line);
      res.stall_cycles += g.start_cycle - t;
      uint64_t done;
      if (g.merged) {
        done = g.merged_completion;
      } else {
        done = g.start_cycle + cfg_.dram_latency;
        dram_accesses_++;
        count_move(done, kL3DRAM, true, line);
        install_l3(local, line, false, done, false);
        l3_mshr_[local].fill_done(line, done);
      }
      res.hit_level = Level::DRAM;
      res.complete_cycle = done + coh;
      break;
    }
  }
  stall_cycles_ += res.stall_cycles;
  return res;
}

void Hierarchy::prime(Level level, int core_or_slice, uint64_t addr,
                      uint64_t bytes) {
  for (uint64_t a = addr / 64; a < (addr + bytes + 63) / 64; ++a) {
    switch (level) {
      case Level::L1: l1_[core_or_slice].insert(a, false); break;
      case Level::L2: l2_[core_or_slice].insert(a, false); break;
      case Level::L3:
        l3_[core_or_slice].insert(a, false, l3_tfu_ways_[core_or_slice],
                                  cfg_.l3.ways);
        break;
      default: break;
    }
  }
}

void Hierarchy::prime_spread_l3(uint64_t addr, uint64_t bytes) {
  for (uint64_t a = addr / 64; a < (addr + bytes + 63) / 64; ++a) {
    int s = slice_of(a);
    l3_[s].insert(a, false, l3_tfu_ways_[s], cfg_.l3.ways);
  }
}

void Hierarchy::reset_counters() {
  move_ = {};
  for (auto& s : stats_) s = {};
  stall_cycles_ = 0;
  dram_accesses_ = 0;
}

uint64_t Hierarchy::port_slots_used(Level l) const {
  uint64_t t = 0;
  if (l == Level::L1)
    for (const auto& p : l1_ports_) t += p.slots_used();
  if (l == Level::L2)
    for (const auto& p : l2_ports_) t += p.slots_used();
  if (l == Level::L3)
    for (const auto& p : l3_ports_) t += p.slots_used();
  return t;
}

uint64_t Hierarchy::port_slots_capacity_per_cycle(Level l) const {
  uint64_t t = 0;
  if (l == Level::L1)
    for (const auto& p : l1_ports_) t += p.slots_per_cycle();
  if (l == Level::L2)
    for (const auto& p : l2_ports_) t += p.slots_per_cycle();
  if (l == Level::L3)
    for (const auto& p : l3_ports_) t += p.slots_per_cycle();
  return t;
}

void Hierarchy::prune_schedules(uint64_t watermark) {
  for (auto& p : l1_ports_) p.prune_before(watermark);
  for (auto& p : l2_ports_) p.prune_before(watermark);
  for (auto& p : l3_ports_) p.prune_before(watermark);
}

}  // namespace nctsim::mem
