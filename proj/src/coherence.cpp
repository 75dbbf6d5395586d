#include "nctsim/coherence.hpp"

namespace nctsim::mem {

using CS = CoherenceModel::CoreState;

CoherenceModel::LineState& CoherenceModel::state(uint64_t line) {
  auto it = lines_.find(line);
  if (it == lines_.end()) {
    LineState s;
    s.core.assign(cores_, CS::I);
    s.l1_present.assign(cores_, false);
    s.l1_owner.assign(cores_, false);
    s.near_l3.assign(slices_, false);
    it = lines_.emplace(line, std::move(s)).first;
  }
  return it->second;
}

const CoherenceModel::LineState* CoherenceModel::peek(uint64_t line) const {
  auto it = lines_.find(line);
  return it == lines_.end() ? nullptr : &it->second;
}

bool CoherenceModel::core_has(int core, uint64_t line) const {
  const LineState* s = peek(line);
  return s && s->core[core] != CS::I;
}

bool CoherenceModel::l1_owner_bit(int core, uint64_t line) const {
  const LineState* s = peek(line);
  return s && s->l1_owner[core];
}

bool CoherenceModel::replica_present(int slice, uint64_t line) const {
  const LineState* s = peek(line);
  return s && s->near_l3[slice];
}

CoherenceModel::Actions CoherenceModel::downgrade_writers(LineState& s,
                                                          int req_core,
                                                          int req_slice) {
  Actions a;
  for (int c = 0; c < cores_; ++c) {
    if (c == req_core) continue;
    if (s.core[c] == CS::M || s.core[c] == CS::E) {
      a.had_remote_owner = true;
      if (s.l1_owner[c]) {
        a.writebacks++;  // dirty L1 data folds into L2 first
        s.l1_owner[c] = false;
      }
      if (s.core[c] == CS::M) a.writebacks++;
      s.core[c] = CS::S;
    }
  }
  if (s.near_l3_owner && *s.near_l3_owner != req_slice) {
    a.had_remote_owner = true;
    a.writebacks++;
    s.near_l3_owner.reset();
  }
  return a;
}

CoherenceModel::Actions CoherenceModel::make_exclusive(LineState& s, int keep_core,
                                                       int keep_slice) {
  Actions a = downgrade_writers(s, keep_core, keep_slice);
  for (int c = 0; c < cores_; ++c) {
    if (c == keep_core) continue;
    if (s.core[c] != CS::I) {
      a.invalidations++;
      s.core[c] = CS::I;
      s.l1_present[c] = false;
      s.l1_owner[c] = false;
    }
  }
  for (int sl = 0; sl < slices_; ++sl) {
    if (sl == keep_slice) continue;
    if (s.near_l3[sl]) {
      a.invalidations++;
      s.near_l3[sl] = false;
    }
  }
  if (s.near_l3_owner && *s.near_l3_owner != keep_slice) s.near_l3_owner.reset();
  return a;
}

static bool any_other_sharer(const CoherenceModel::LineState& s, int cores,
                             int slices, int core, int slice) {
  for (int c = 0; c < cores; ++c)
    if (c != core && s.core[c] != CS::I) return true;
  for (int sl = 0; sl < slices; ++sl)
    if (sl != slice && s.near_l3[sl]) return true;
  return false;
}

CoherenceModel::Actions CoherenceModel::core_load(int core, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  Actions a;
  if (s.core[core] == CS::I) {
    a = downgrade_writers(s, core, -1);
    if (any_other_sharer(s, cores_, slices_, core, -1)) {
      for (int c = 0; c < cores_; ++c)
        if (c != core && s.core[c] == CS::F) s.core[c] = CS::S;
      s.core[core] = CS::F;  // newest reader forwards
    } else {
      s.core[core] = CS::E;
    }
  }
  s.l1_present[core] = true;
  return a;
}

CoherenceModel::Actions CoherenceModel::core_store(int core, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  Actions a = make_exclusive(s, core, -1);
  s.core[core] = CS::M;
  s.l1_present[core] = true;
  s.l1_owner[core] = true;  // the store lands in this core's L1
  return a;
}

CoherenceModel::Actions CoherenceModel::tfu_l2_load(int core, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  Actions a;
  if (s.core[core] == CS::I) {
    a = downgrade_writers(s, core, -1);
    if (any_other_sharer(s, cores_, slices_, core, -1)) {
      for (int c = 0; c < cores_; ++c)
        if (c != core && s.core[c] == CS::F) s.core[c] = CS::S;
      s.core[core] = CS::F;
    } else {
      s.core[core] = CS::E;
    }
  } else if (s.l1_owner[core]) {
    // fresh data is up in L1: pull it down, L1 keeps a shared copy
    a.l1_snoop = true;
    a.writebacks++;
    s.l1_owner[core] = false;
  }
  return a;
}

CoherenceModel::Actions CoherenceModel::tfu_l2_store(int core, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  Actions a = make_exclusive(s, core, -1);
  if (s.l1_present[core]) {
    // incoherent copy above the write point: invalidate before writing
    a.l1_snoop = true;
    if (s.l1_owner[core]) a.writebacks++;
    s.l1_present[core] = false;
    s.l1_owner[core] = false;
    a.invalidations++;
  }
  s.core[core] = CS::M;
  return a;
}

CoherenceModel::Actions CoherenceModel::tfu_l3_load(int slice, uint64_t line,
                                                    bool allocate_replica) {
  transitions_++;
  LineState& s = state(line);
  Actions a = downgrade_writers(s, -1, slice);
  if (allocate_replica) s.near_l3[slice] = true;
  return a;
}

CoherenceModel::Actions CoherenceModel::tfu_l3_store(int slice, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  Actions a = make_exclusive(s, -1, slice);
  s.near_l3[slice] = true;
  s.near_l3_owner = slice;
  return a;
}

CoherenceModel::Actions CoherenceModel::shared_store(uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  return make_exclusive(s, -1, -1);
}

void CoherenceModel::evict_l1(int core, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  s.l1_present[core] = false;
  s.l1_owner[core] = false;  // dirty data folds into L2; domain stays M
}

void CoherenceModel::evict_core(int core, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  s.core[core] = CS::I;
  s.l1_present[core] = false;
  s.l1_owner[core] = false;
}

void CoherenceModel::evict_replica(int slice, uint64_t line) {
  transitions_++;
  LineState& s = state(line);
  s.near_l3[slice] = false;
  if (s.near_l3_owner && *s.near_l3_owner == slice) s.near_l3_owner.reset();
}

std::string CoherenceModel::check_invariants() const {
  for (const auto& [line, s] : lines_) {
    int writers = 0, copies = 0;
    for (int c = 0; c < cores_; ++c) {
      if (s.core[c] == CS::M || s.core[c] == CS::E) writers++;
      if (s.core[c] != CS::I) copies++;
      if (s.l1_owner[c]) {
        if (!s.l1_present[c])
          return "l1 owner bit without an L1 copy, line " + std::to_string(line);
        if (s.core[c] != CS::M)
          return "l1 owner bit outside a modified domain, line " + std::to_string(line);
      }
      if (s.l1_present[c] && s.core[c] == CS::I)
        return "L1 copy outside the domain, line " + std::to_string(line);
    }
    for (int sl = 0; sl < slices_; ++sl)
      if (s.near_l3[sl]) copies++;
    if (s.near_l3_owner) {
      writers++;
      if (!s.near_l3[*s.near_l3_owner])
        return "near-L3 owner bit points at an absent replica, line " +
               std::to_string(line);
    }
    if (writers > 1) return "multiple writers on line " + std::to_string(line);
    if (writers == 1 && copies > 1)
      return "writer coexists with other copies, line " + std::to_string(line);
    int fwd = 0;
    for (int c = 0; c < cores_; ++c)
      if (s.core[c] == CS::F) fwd++;
    if (fwd > 1) return "two forwarders on line " + std::to_string(line);
  }
  return {};
}

}  // namespace nctsim::mem
