#include "nctsim/tfu.hpp"

#include <algorithm>

namespace nctsim::tfu {

uint32_t TranslationCache::lookup(uint64_t vaddr, uint32_t miss_latency) {
  uint64_t page = vaddr >> 12;
  for (Entry& e : map_) {
    if (e.page == page) {
      e.lru = ++clock_;
      hits_++;
      return 0;
    }
  }
  misses_++;
  if (map_.size() < entries_) {
    map_.push_back({page, ++clock_});
  } else {
    auto victim = std::min_element(map_.begin(), map_.end(),
                                   [](const Entry& a, const Entry& b) {
                                     return a.lru < b.lru;
                                   });
    *victim = {page, ++clock_};
  }
  return miss_latency;
}

void TranslationCache::invalidate_all() { map_.clear(); }

Tfu::Tfu(const TfuConfig& cfg, mem::Hierarchy* hier, int core)
    : cfg_(cfg), hier_(hier), core_(core), tc_(cfg.tc_entries) {
  writer_.fill(0);
  ring_.assign(kRing, {0, 0});
}

OffloadStatus Tfu::accept_offload(const psx::Program& p,
                                  const std::vector<kern::TensorRole>& roles,
                                  uint64_t cycle) {
  if (busy_) return OffloadStatus::TfuBusy;
  if (p.instrs.size() > cfg_.code_reg_capacity) return OffloadStatus::ProgramTooLarge;
  program_ = p;
  roles_ = roles;
  cursor_.emplace(program_);
  busy_ = true;
  decode_start_ = cycle + psx::offload_cycles(p, cfg_.offload_bus_bytes);
  return OffloadStatus::Accepted;
}

// Operands are captured against their producers when an op enters a queue,
// so a later load rewriting a staging register never holds back earlier
// consumers (issue order within each queue still never changes).
void Tfu::refill(uint64_t cycle) {
  if (!cursor_ || cycle < decode_start_) return;
  uint32_t cap = cfg_.queue_depth + cfg_.decode_lookahead();
  for (uint32_t k = 0; k < cfg_.decode_width() && !cursor_->done(); ++k) {
    psx::UnrollCursor::State mark = cursor_->save();
    psx::DynOp op = cursor_->next();
    auto& q = op.mem() ? mem_q_ : compute_q_;
    if (q.size() >= cap) {
      cursor_->restore(mark);
      break;
    }
    Entry e;
    e.op.op = op;
    e.op.seq = next_seq_++;
    e.n_dep = 0;
    if (op.op == psx::Opcode::TensorStore) {
      if (writer_[op.dest]) e.dep[e.n_dep++] = writer_[op.dest];
    } else if (!op.mem()) {
      for (int s = 0; s < op.n_src; ++s)
        if (writer_[op.src[s]]) e.dep[e.n_dep++] = writer_[op.src[s]];
      if (writer_[op.dest]) e.dep[e.n_dep++] = writer_[op.dest];  // accumulate
      writer_[op.dest] = e.op.seq;
    } else {
      writer_[op.dest] = e.op.seq;  // load produces dest
    }
    q.push_back(e);
  }
}

bool Tfu::deps_ready(const Entry& e, uint64_t cycle) const {
  for (int i = 0; i < e.n_dep; ++i) {
    const auto& [seq, done] = ring_[e.dep[i] % kRing];
    if (seq < e.dep[i]) return false;       // producer not issued yet
    if (seq == e.dep[i] && done > cycle) return false;
  }
  return true;
}

std::vector<IssuedOp> Tfu::step(uint64_t cycle) {
  std::vector<IssuedOp> issued;
  if (!busy_) return issued;
  refill(cycle);

  // memory queue: in-order head issue; loads may run ahead of older compute,
  // stores may not
  for (uint32_t slot = 0; slot < cfg_.mem_width() && !mem_q_.empty(); ++slot) {
    Entry& head = mem_q_.front();
    bool is_store = head.op.op.op == psx::Opcode::TensorStore;
    if (is_store) {
      if (!deps_ready(head, cycle)) break;  // data not produced yet
      if (!compute_q_.empty() && compute_q_.front().op.seq < head.op.seq) break;
    }
    uint32_t tc_pen = tc_.lookup(head.op.op.addr, cfg_.tc_miss_latency);
    tc_extra_cycles_ += tc_pen;
    mem::MemRequest req;
    req.who = {core_, cfg_.attached};
    req.is_store = is_store;
    req.vaddr = head.op.op.addr;
    req.issue_cycle = cycle + tc_pen;
    req.role = head.op.op.static_index < roles_.size()
                   ? roles_[head.op.op.static_index]
                   : kern::TensorRole::None;
    req.replicate = (req.role == kern::TensorRole::Weight && cfg_.replicate_weights) ||
                    (req.role == kern::TensorRole::Input && cfg_.replicate_inputs);
    auto res = hier_->access(req);
    head.op.complete_cycle = res.complete_cycle;
    ring_[head.op.seq % kRing] = {head.op.seq, res.complete_cycle};
    last_completion_ = std::max(last_completion_, res.complete_cycle);
    retired_ops_++;
    issued.push_back(head.op);
    mem_q_.pop_front();
  }

  // compute queue: strictly in order, captured operands ready, never ahead
  // of an older unissued memory op
  for (uint32_t slot = 0; slot < cfg_.compute_width() && !compute_q_.empty();
       ++slot) {
    Entry& head = compute_q_.front();
    if (!mem_q_.empty() && mem_q_.front().op.seq < head.op.seq) break;
    if (!deps_ready(head, cycle)) break;
    head.op.complete_cycle = cycle + cfg_.exec_latency;
    ring_[head.op.seq % kRing] = {head.op.seq, head.op.complete_cycle};
    last_completion_ = std::max(last_completion_, head.op.complete_cycle);
    if (head.op.op.op == psx::Opcode::MacVector)
      retired_macs_ += psx::kMacsPerVector;
    retired_ops_++;
    issued.push_back(head.op);
    compute_q_.pop_front();
  }

  refill(cycle);
  if (issued.empty()) idle_cycles_++;
  if (cursor_ && cursor_->done() && mem_q_.empty() && compute_q_.empty())
    busy_ = false;
  return issued;
}

uint64_t Tfu::run_to_completion(uint64_t cycle) {
  while (busy_) {
    step(cycle);
    cycle++;
  }
  return std::max(cycle, last_completion_);
}

Tfu::Snapshot Tfu::save_context() const {
  Snapshot s;
  s.program = program_;
  s.roles = roles_;
  if (cursor_) s.cursor = cursor_->save();
  s.writer = writer_;
  s.ring = ring_;
  s.mem_q = mem_q_;
  s.compute_q = compute_q_;
  s.busy = busy_;
  s.decode_start = decode_start_;
  s.next_seq = next_seq_;
  return s;
}

RestoreStatus Tfu::restore_context(const Snapshot& s) {
  if (busy_) return RestoreStatus::RestoreWhileBusy;
  program_ = s.program;
  roles_ = s.roles;
  if (!program_.instrs.empty()) {
    cursor_.emplace(program_);
    cursor_->restore(s.cursor);
  } else {
    cursor_.reset();
  }
  writer_ = s.writer;
  ring_ = s.ring;
  mem_q_ = s.mem_q;
  compute_q_ = s.compute_q;
  busy_ = s.busy;
  decode_start_ = s.decode_start;
  next_seq_ = s.next_seq;
  tc_.invalidate_all();  // translations never survive a context switch
  return RestoreStatus::Ok;
}

}  // namespace nctsim::tfu
