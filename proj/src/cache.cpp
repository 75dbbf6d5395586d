#include "nctsim/cache.hpp"

namespace nctsim::mem {

CacheArray::CacheArray(uint64_t sets, uint32_t ways, Replacement repl)
    : sets_(sets), ways_(ways), repl_(repl), entries_(sets * ways) {}

CacheArray::Entry* CacheArray::find(uint64_t line) {
  Entry* base = &entries_[set_of(line) * ways_];
  for (uint32_t w = 0; w < ways_; ++w)
    if (base[w].valid && base[w].tag == line) return &base[w];
  return nullptr;
}

const CacheArray::Entry* CacheArray::find(uint64_t line) const {
  const Entry* base = &entries_[set_of(line) * ways_];
  for (uint32_t w = 0; w < ways_; ++w)
    if (base[w].valid && base[w].tag == line) return &base[w];
  return nullptr;
}

bool CacheArray::lookup(uint64_t line, bool touch) {
  Entry* e = find(line);
  if (!e) return false;
  if (touch) {
    e->lru = ++clock_;
    e->rrpv = 0;
  }
  return true;
}

bool CacheArray::present(uint64_t line) const { return find(line) != nullptr; }

CacheArray::Evicted CacheArray::insert(uint64_t line, bool dirty, uint32_t way_lo,
                                       uint32_t way_hi) {
  Entry* base = &entries_[set_of(line) * ways_];
  if (Entry* e = find(line)) {  // already present: refresh
    e->dirty = e->dirty || dirty;
    e->lru = ++clock_;
    e->rrpv = 0;
    return {};
  }
  for (uint32_t w = way_lo; w < way_hi; ++w) {
    if (!base[w].valid) {
      base[w] = {line, true, dirty, ++clock_, 2};
      return {};
    }
  }
  uint32_t victim = way_lo;
  if (repl_ == Replacement::LRU) {
    for (uint32_t w = way_lo + 1; w < way_hi; ++w)
      if (base[w].lru < base[victim].lru) victim = w;
  } else {
    // SRRIP: age until a distant-rereference way appears
    for (;;) {
      bool found = false;
      for (uint32_t w = way_lo; w < way_hi; ++w)
        if (base[w].rrpv == 3) {
          victim = w;
          found = true;
          break;
        }
      if (found) break;
      for (uint32_t w = way_lo; w < way_hi; ++w) base[w].rrpv++;
    }
  }
  Evicted ev{true, base[victim].tag, base[victim].dirty};
  base[victim] = {line, true, dirty, ++clock_, 2};
  return ev;
}

void CacheArray::set_dirty(uint64_t line) {
  if (Entry* e = find(line)) e->dirty = true;
}

bool CacheArray::invalidate(uint64_t line) {
  Entry* e = find(line);
  if (!e) return false;
  bool was_dirty = e->dirty;
  e->valid = false;
  e->dirty = false;
  return was_dirty;
}

bool PortSchedule::try_take(Use& u, bool is_write) {
  if (is_write) {
    if (u.w < writes_) {
      u.w++;
      return true;
    }
  } else {
    if (u.r < reads_) {
      u.r++;
      return true;
    }
  }
  if (u.s < shared_) {
    u.s++;
    return true;
  }
  return false;
}

uint64_t PortSchedule::reserve(uint64_t cycle, bool is_write) {
  uint32_t usable = shared_ + (is_write ? writes_ : reads_);
  if (usable == 0)
    throw SimInvariantError(is_write ? "no write-capable ports"
                                     : "no read-capable ports");
  for (uint64_t c = std::max(cycle, prune_floor_);; ++c) {
    Use& u = used_[c];
    if (u.r > reads_ || u.w > writes_ || u.s > shared_)
      throw SimInvariantError("port budget exceeded");  // never: structural
    if (try_take(u, is_write)) {
      total_used_++;
      return c;
    }
  }
}

void PortSchedule::prune_before(uint64_t cycle) {
  if (cycle <= prune_floor_) return;
  for (auto it = used_.begin(); it != used_.end();)
    it = (it->first < cycle) ? used_.erase(it) : std::next(it);
  prune_floor_ = cycle;
}

MshrBank::Grant MshrBank::acquire(uint64_t cycle, uint64_t line) {
  if (auto it = inflight_.find(line); it != inflight_.end() && it->second > cycle)
    return {cycle, true, it->second};
  prune(cycle);
  if (inflight_.size() < entries_) return {cycle, false, 0};
  // wait for the earliest completion
  uint64_t earliest = UINT64_MAX;
  for (const auto& [l, done] : inflight_) earliest = std::min(earliest, done);
  stall_cycles_ += earliest - cycle;
  return {earliest, false, 0};
}

void MshrBank::fill_done(uint64_t line, uint64_t completion_cycle) {
  inflight_[line] = completion_cycle;
}

void MshrBank::prune(uint64_t cycle) {
  for (auto it = inflight_.begin(); it != inflight_.end();)
    it = (it->second <= cycle) ? inflight_.erase(it) : std::next(it);
}

}  // namespace nctsim::mem
