#include "nctsim/machine.hpp"

#include <json.hpp>

#include <algorithm>
#include <cassert>
#include <deque>
#include <memory>
#include <queue>
#include <cstdio>
#include <cstdlib>

namespace nctsim::mach {

using kern::LayerKind;
using kern::LayerSpec;
using mem::AgentKind;

MachineConfig parse_config(const std::string& name, int cores) {
  MachineConfig m;
  m.name = name;
  m.cores = cores;
  m.hier = mem::HierConfig::table_defaults(cores);
  if (name == "M128") {
    m.core_macs_per_cycle = 128;
  } else if (name == "M256") {
    m.core_macs_per_cycle = 256;
  } else if (name == "M512") {
    m.core_macs_per_cycle = 512;
  } else if (name == "P128") {
    m.psx = true;
    m.core_macs_per_cycle = 128;
    m.tfu_width = {128, 0, 0};  // placement identical to M128
  } else if (name == "P256") {
    m.psx = true;
    m.core_macs_per_cycle = 128;
    m.tfu_width = {128, 64, 64};
  } else if (name == "P320") {
    m.psx = true;
    m.core_macs_per_cycle = 128;
    m.tfu_width = {128, 128, 64};
  } else if (name == "P512") {
    m.psx = true;
    m.core_macs_per_cycle = 256;
    m.tfu_width = {256, 128, 128};
  } else if (name == "P640") {
    m.psx = true;
    m.core_macs_per_cycle = 256;
    m.tfu_width = {256, 256, 128};
  } else {
    throw UnknownConfig("unknown machine configuration: " + name);
  }
  return m;
}

std::vector<std::string> known_configs() {
  return {"M128", "M256", "M512", "P128", "P256", "P320", "P512", "P640"};
}

static void cache_from_json(const nlohmann::json& j, mem::CacheConfig& c) {
  if (j.contains("capacity_kb"))
    c.capacity_bytes = j.at("capacity_kb").get<uint64_t>() * 1024;
  if (j.contains("capacity_bytes")) c.capacity_bytes = j.at("capacity_bytes");
  if (j.contains("ways")) c.ways = j.at("ways");
  if (j.contains("replacement"))
    c.replacement = j.at("replacement") == "rrip" ? mem::Replacement::RRIP
                                                  : mem::Replacement::LRU;
  if (j.contains("read_ports")) c.read_ports = j.at("read_ports");
  if (j.contains("write_ports")) c.write_ports = j.at("write_ports");
  if (j.contains("shared_rw_ports")) c.shared_rw_ports = j.at("shared_rw_ports");
  if (j.contains("mshr")) c.mshr_entries = j.at("mshr");
  if (j.contains("tag_cycles")) c.tag_latency = j.at("tag_cycles");
  if (j.contains("data_cycles")) c.data_latency = j.at("data_cycles");
}

MachineConfig config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw UnknownConfig(std::string("machine file parse error: ") + e.what());
  }
  int cores = j.value("cores", 28);
  MachineConfig m = j.contains("machine")
                        ? parse_config(j.at("machine").get<std::string>(), cores)
                        : parse_config("M128", cores);
  m.cores = cores;
  if (j.contains("smt_ways")) m.smt_ways = j.at("smt_ways");
  if (j.contains("ghz")) m.ghz = j.at("ghz");
  if (j.contains("core_macs_per_cycle"))
    m.core_macs_per_cycle = j.at("core_macs_per_cycle");
  if (j.contains("psx")) m.psx = j.at("psx");
  if (j.contains("issue_width")) m.issue_width = j.at("issue_width");
  if (j.contains("window")) m.window = j.at("window");
  if (j.contains("l3_tfu_ways")) m.l3_tfu_ways = j.at("l3_tfu_ways");
  if (j.contains("tfu")) {
    m.tfu_width = {j.at("tfu").value("l1", 0u), j.at("tfu").value("l2", 0u),
                   j.at("tfu").value("l3", 0u)};
    if (m.tfu_width[0] || m.tfu_width[1] || m.tfu_width[2]) m.psx = true;
  }
  m.hier = mem::HierConfig::table_defaults(m.cores);
  if (j.contains("l1")) cache_from_json(j.at("l1"), m.hier.l1);
  if (j.contains("l2")) cache_from_json(j.at("l2"), m.hier.l2);
  if (j.contains("l3")) cache_from_json(j.at("l3"), m.hier.l3);
  if (j.contains("directory_cycles")) m.hier.directory_latency = j.at("directory_cycles");
  if (j.contains("dram_cycles")) m.hier.dram_latency = j.at("dram_cycles");
  return m;
}

std::string config_to_json(const MachineConfig& m) {
  nlohmann::json j;
  j["machine"] = m.name;
  j["cores"] = m.cores;
  j["smt_ways"] = m.smt_ways;
  j["ghz"] = m.ghz;
  j["core_macs_per_cycle"] = m.core_macs_per_cycle;
  j["psx"] = m.psx;
  j["issue_width"] = m.issue_width;
  j["window"] = m.window;
  j["l3_tfu_ways"] = m.l3_tfu_ways;
  j["tfu"] = {{"l1", m.tfu_width[0]}, {"l2", m.tfu_width[1]}, {"l3", m.tfu_width[2]}};
  auto cache = [](const mem::CacheConfig& c) {
    nlohmann::json o;
    o["capacity_bytes"] = c.capacity_bytes;
    o["ways"] = c.ways;
    o["replacement"] = c.replacement == mem::Replacement::RRIP ? "rrip" : "lru";
    o["read_ports"] = c.read_ports;
    o["write_ports"] = c.write_ports;
    o["shared_rw_ports"] = c.shared_rw_ports;
    o["mshr"] = c.mshr_entries;
    o["tag_cycles"] = c.tag_latency;
    o["data_cycles"] = c.data_latency;
    return o;
  };
  j["l1"] = cache(m.hier.l1);
  j["l2"] = cache(m.hier.l2);
  j["l3"] = cache(m.hier.l3);
  j["directory_cycles"] = m.hier.directory_latency;
  j["dram_cycles"] = m.hier.dram_latency;
  return j.dump(2);
}

CapabilityReport describe_capabilities(const MachineConfig& m) {
  CapabilityReport r;
  r.name = m.name;
  r.tfu_width = m.tfu_width;
  r.core_macs_per_cycle = m.core_macs_per_cycle;
  r.psx = m.psx;
  r.bindings.push_back({0, AgentKind::CoreThread, m.psx ? 0 : m.core_macs_per_cycle});
  if (m.tfu_width[0]) r.bindings.push_back({1, AgentKind::TfuL1, m.tfu_width[0]});
  if (m.tfu_width[1]) r.bindings.push_back({2, AgentKind::TfuL2, m.tfu_width[1]});
  if (m.tfu_width[2]) r.bindings.push_back({3, AgentKind::TfuL3, m.tfu_width[2]});
  return r;
}

std::vector<AgentKind> select_levels(LayerKind kind, bool allow_l2_for_movers) {
  switch (kind) {
    case LayerKind::Convolution:
      return {AgentKind::TfuL1, AgentKind::TfuL2, AgentKind::TfuL3};
    case LayerKind::InnerProduct:
      return {AgentKind::TfuL2, AgentKind::TfuL3};
    case LayerKind::Pooling:
    case LayerKind::Concat:
      if (allow_l2_for_movers) return {AgentKind::TfuL2, AgentKind::TfuL3};
      return {AgentKind::TfuL3};
  }
  return {};
}

std::vector<uint64_t> partition_static_asymmetric(
    uint64_t units, const std::vector<double>& strengths) {
  size_t n = strengths.size();
  double total = 0;
  for (double s : strengths) total += s;
  std::vector<uint64_t> alloc(n, 0);
  std::vector<std::pair<double, size_t>> frac;
  uint64_t assigned = 0;
  for (size_t i = 0; i < n; ++i) {
    double exact = double(units) * strengths[i] / total;
    alloc[i] = uint64_t(exact);
    assigned += alloc[i];
    frac.push_back({exact - double(alloc[i]), i});
  }
  std::stable_sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // ties to the lower worker index
  });
  for (uint64_t k = 0; k < units - assigned; ++k) alloc[frac[k].second]++;
  return alloc;
}

// ---------------- per-layer simulation ----------------

namespace {

// Shared legacy-pipeline slot budget of one physical core.
class FrontEnd {
 public:
  explicit FrontEnd(uint32_t width) : width_(width) {}

  bool take_at(uint64_t cycle, uint32_t n) {
    uint32_t& u = used_[cycle];
    if (u + n > width_) return false;
    u += n;
    taken_ += n;
    return true;
  }
  // Consume `count` slots starting no earlier than `cycle`; returns the cycle
  // after the last one.
  uint64_t reserve_stream(uint64_t cycle, uint64_t count) {
    while (count > 0) {
      uint32_t& u = used_[cycle];
      uint32_t take = std::min<uint64_t>(width_ - u, count);
      u += take;
      taken_ += take;
      count -= take;
      if (count > 0) cycle++;
    }
    return cycle + 1;
  }
  void prune_before(uint64_t cycle) {
    for (auto it = used_.begin(); it != used_.end();)
      it = (it->first < cycle) ? used_.erase(it) : std::next(it);
  }
  uint64_t taken() const { return taken_; }

 private:
  uint32_t width_;
  uint64_t taken_ = 0;
  std::unordered_map<uint64_t, uint32_t> used_;
};

struct WorkerCounters {
  uint64_t legacy_ops = 0;
  uint64_t psx_core_ops = 0;
  uint64_t tfu_ops = 0;
  uint64_t macvec = 0;
  uint64_t vecalu = 0;
  uint64_t loads = 0;
  uint64_t stores = 0;
  uint64_t tc_lookups = 0;
  uint64_t tc_hits = 0;
};

using TileRanges = std::vector<std::pair<uint64_t, uint64_t>>;

class Worker {
 public:
  Worker(int id, const kern::Lowering* low, TileRanges ranges)
      : id_(id), low_(low), ranges_(std::move(ranges)) {
    if (!ranges_.empty()) tile_ = ranges_[0].first;
  }
  virtual ~Worker() = default;
  virtual void advance() = 0;

  int id() const { return id_; }
  uint64_t cycle = 0;
  bool done = false;
  uint64_t completion = 0;
  WorkerCounters n;

 protected:
  bool next_program(psx::Program& prog, std::vector<kern::TensorRole>& roles) {
    while (prog_idx_ >= programs_.size()) {
      if (range_ >= ranges_.size()) return false;
      programs_ = low_->tile_programs(tile_++);
      prog_idx_ = 0;
      if (tile_ >= ranges_[range_].second) {
        range_++;
        if (range_ < ranges_.size()) tile_ = ranges_[range_].first;
      }
    }
    prog = std::move(programs_[prog_idx_].prog);
    roles = programs_[prog_idx_].cls->roles;
    prog_idx_++;
    return true;
  }
  const TileRanges& ranges() const { return ranges_; }

  int id_;
  const kern::Lowering* low_;
  TileRanges ranges_;
  uint64_t tile_ = 0;
  size_t range_ = 0;
  std::vector<kern::Lowering::TileProgram> programs_;
  size_t prog_idx_ = 0;
};

// Near-cache unit worker: per program, the thread issues the PSX setup
// stream through the shared front end, pushes the code registers across the
// offload bus, then the unit unrolls while the thread fences.
class TfuWorker : public Worker {
 public:
  TfuWorker(int id, const kern::Lowering* low, TileRanges ranges,
            tfu::TfuConfig cfg, mem::Hierarchy* hier, int core, FrontEnd* fe)
      : Worker(id, low, std::move(ranges)), tfu_(cfg, hier, core), fe_(fe) {}

  void advance() override {
    if (!tfu_.busy()) {
      psx::Program prog;
      std::vector<kern::TensorRole> roles;
      if (!next_program(prog, roles)) {
        done = true;
        completion = std::max(completion, cycle);
        n.tc_lookups = tfu_.tc().hits() + tfu_.tc().misses();
        n.tc_hits = tfu_.tc().hits();
        return;
      }
      uint64_t setup = psx::core_side_count(prog);
      n.psx_core_ops += setup;
      n.legacy_ops += setup;
      cycle = fe_->reserve_stream(cycle, setup);
      auto st = tfu_.accept_offload(prog, roles, cycle);
      assert(st == tfu::OffloadStatus::Accepted);
      (void)st;
      cycle = tfu_.first_issue_cycle();
      return;
    }
    auto issued = tfu_.step(cycle);
    for (auto& op : issued) {
      n.tfu_ops++;
      switch (op.op.op) {
        case psx::Opcode::MacVector: n.macvec++; break;
        case psx::Opcode::VecAlu: n.vecalu++; break;
        case psx::Opcode::TensorLoad: n.loads++; break;
        case psx::Opcode::TensorStore: n.stores++; break;
        default: break;
      }
    }
    completion = std::max(completion, tfu_.last_completion());
    cycle++;
    // the unit is done once everything issued; in-flight fills land in the
    // data registers while the thread prepares the next setup stream, and
    // cross-program operand dependencies stay tracked in the scoreboard
  }

 private:
  tfu::Tfu tfu_;
  FrontEnd* fe_;
};

// Monolithic-core worker: the whole unrolled stream, bookkeeping included,
// flows through the legacy pipeline. A small in-flight window lets ready ops
// issue past stalled ones; memory ops cost two pipeline slots (address
// generation + access).
class LegacyWorker : public Worker {
 public:
  LegacyWorker(int id, const kern::Lowering* low, TileRanges ranges,
               mem::Hierarchy* hier, int core, FrontEnd* fe, uint32_t window,
               uint32_t mac_width_vec, uint32_t bookkeeping, uint32_t exec_latency)
      : Worker(id, low, std::move(ranges)), hier_(hier), core_(core), fe_(fe),
        window_(window), mac_width_(mac_width_vec), bookkeeping_(bookkeeping),
        exec_latency_(exec_latency) {
    ring_.resize(4 * window_, 0);
  }

  void advance() override {
    fetch();
    if (win_.empty()) {
      done = true;
      completion = std::max(completion, cycle);
      return;
    }
    uint32_t macs_this_cycle = 0;
    for (size_t i = 0; i < win_.size(); ++i) {
      Slot& s = win_[i];
      if (s.issued) continue;
      if (!deps_ready(s)) {
        if (s.kind == kMac || s.kind == kAlu) continue;  // later ops may go
        continue;
      }
      if ((s.kind == kMac || s.kind == kAlu) && macs_this_cycle >= mac_width_)
        continue;
      uint32_t cost = (s.kind == kLoad || s.kind == kStore) ? 2 : 1;
      if (!fe_->take_at(cycle, cost)) break;  // pipeline slots exhausted
      issue(s, macs_this_cycle);
    }
    retire();
    cycle++;
  }

 private:
  enum Kind : uint8_t { kLoad, kStore, kMac, kAlu, kBook };
  struct Slot {
    uint64_t seq;
    Kind kind;
    uint64_t addr;
    kern::TensorRole role;
    uint64_t done = 0;
    bool issued = false;
    std::array<uint64_t, 3> dep{};
    uint8_t n_dep = 0;
  };

  void fetch() {
    while (win_.size() < window_) {
      if (pending_book_ > 0) {
        push_slot(kBook, 0, kern::TensorRole::None, nullptr);
        pending_book_--;
        continue;
      }
      if (!cursor_ || cursor_->done()) {
        psx::Program prog;
        if (!next_program(prog, roles_)) return;
        prog_ = std::move(prog);
        cursor_.emplace(prog_);
        iter_seen_ = 0;
        continue;
      }
      psx::UnrollCursor::State mark = cursor_->save();
      psx::DynOp op = cursor_->next();
      uint64_t it = cursor_->iterations();
      if (it > iter_seen_) {
        pending_book_ += (it - iter_seen_) * bookkeeping_;
        iter_seen_ = it;
        cursor_->restore(mark);
        continue;
      }
      push_slot(op.op == psx::Opcode::TensorLoad   ? kLoad
                : op.op == psx::Opcode::TensorStore ? kStore
                : op.op == psx::Opcode::MacVector   ? kMac
                                                    : kAlu,
                op.addr,
                op.static_index < roles_.size() ? roles_[op.static_index]
                                                : kern::TensorRole::None,
                &op);
    }
  }

  void push_slot(Kind k, uint64_t addr, kern::TensorRole role,
                 const psx::DynOp* op) {
    Slot s;
    s.seq = next_seq_++;
    s.kind = k;
    s.addr = addr;
    s.role = role;
    if (op) {
      if (k == kMac || k == kAlu) {
        for (int i = 0; i < op->n_src; ++i)
          if (writer_[op->src[i]]) s.dep[s.n_dep++] = writer_[op->src[i]];
        if (writer_[op->dest]) s.dep[s.n_dep++] = writer_[op->dest];
        writer_[op->dest] = s.seq;
      } else if (k == kStore) {
        if (writer_[op->dest]) s.dep[s.n_dep++] = writer_[op->dest];
      } else if (k == kLoad) {
        writer_[op->dest] = s.seq;
      }
    }
    win_.push_back(s);
  }

  bool deps_ready(const Slot& s) const {
    uint64_t front = win_.front().seq;
    for (int i = 0; i < s.n_dep; ++i) {
      uint64_t d = s.dep[i];
      if (d >= front) {
        const Slot& p = win_[d - front];
        if (!p.issued || p.done > cycle) return false;
      } else {
        if (ring_[d % ring_.size()] > cycle) return false;
      }
    }
    return true;
  }

  void issue(Slot& s, uint32_t& macs_this_cycle) {
    s.issued = true;
    n.legacy_ops++;
    switch (s.kind) {
      case kLoad:
      case kStore: {
        mem::MemRequest req;
        req.who = {core_, AgentKind::CoreThread};
        req.is_store = (s.kind == kStore);
        req.vaddr = s.addr;
        req.issue_cycle = cycle;
        req.role = s.role;
        auto res = hier_->access(req);
        s.done = res.complete_cycle;
        if (s.kind == kLoad) n.loads++; else n.stores++;
        break;
      }
      case kMac:
        s.done = cycle + exec_latency_;
        macs_this_cycle++;
        n.macvec++;
        break;
      case kAlu:
        s.done = cycle + exec_latency_;
        macs_this_cycle++;
        n.vecalu++;
        break;
      case kBook:
        s.done = cycle + 1;
        break;
    }
    completion = std::max(completion, s.done);
  }

  void retire() {
    while (!win_.empty() && win_.front().issued) {
      ring_[win_.front().seq % ring_.size()] = win_.front().done;
      win_.pop_front();
    }
  }

  mem::Hierarchy* hier_;
  int core_;
  FrontEnd* fe_;
  uint32_t window_, mac_width_, bookkeeping_, exec_latency_;

  psx::Program prog_;
  std::vector<kern::TensorRole> roles_;
  std::optional<psx::UnrollCursor> cursor_;
  uint64_t iter_seen_ = 0;
  uint64_t pending_book_ = 0;
  std::deque<Slot> win_;
  std::vector<uint64_t> ring_;
  std::array<uint64_t, psx::kDataRegs> writer_{};
  uint64_t next_seq_ = 1;
};

}  // namespace

SimMetrics run_layer(const MachineConfig& m, const LayerSpec& layer0,
                     const Policy& policy) {
  kern::check_layer(layer0);
  LayerSpec layer = layer0;
  if (policy.scale_num != policy.scale_den)
    layer = layer0.scaled(policy.scale_num, policy.scale_den);
  kern::check_layer(layer);

  mem::HierConfig hc = m.hier;
  hc.cores = m.cores;
  hc.l3.slices = m.cores;
  mem::Hierarchy hier(hc);

  bool use_psx = m.psx && policy.psx &&
                 (m.tfu_width[0] || m.tfu_width[1] || m.tfu_width[2]);
  std::vector<AgentKind> levels =
      policy.levels.empty() ? select_levels(layer.kind) : policy.levels;
  // keep only levels that actually have a unit; fall back to whatever exists
  std::vector<std::pair<AgentKind, uint32_t>> sites;
  if (use_psx) {
    for (AgentKind k : levels) {
      uint32_t w = m.tfu_width[int(k) - 1];
      if (w) sites.push_back({k, w});
    }
    if (sites.empty())
      for (int i = 0; i < 3; ++i)
        if (m.tfu_width[i]) sites.push_back({AgentKind(i + 1), m.tfu_width[i]});
  }

  bool near_l3 = false;
  for (auto& [k, w] : sites) near_l3 |= (k == AgentKind::TfuL3);
  if (near_l3) {
    uint32_t ways = policy.l3_tfu_ways.value_or(m.l3_tfu_ways);
    for (int s = 0; s < m.cores; ++s) hier.partition_l3(s, ways);
  }

  size_t n_workers = use_psx ? sites.size() * m.cores : size_t(m.cores);
  kern::KernelIR kernel = kern::block_layer(layer);
  kern::TensorBases bases{0x10000000ull, 0x30000000ull, 0x50000000ull};
  kern::Lowering low = kern::lower(kernel, bases);
  // small (scaled) layers: shrink the tile until the grid can feed every
  // compute site, trading register reuse for parallelism the way a JIT would
  if (layer.kind == LayerKind::Convolution || layer.kind == LayerKind::InnerProduct) {
    // a finer tile costs more loads per MAC; it is only worth taking when
    // every site keeps port headroom (or at least does not get hotter than
    // the base blocking already runs)
    double base_ratio =
        kernel.blocking.accumulators_used
            ? double(kernel.blocking.outputs_per_inner_loop /
                         std::max(1, kernel.blocking.weights_resident) +
                     kernel.blocking.weights_resident) /
                  kernel.blocking.accumulators_used
            : 1.0;
    auto port_demand_ok = [&](int a, int b) {
      double ratio = double(a + b) / double(a * b);
      auto budget = [&](AgentKind k) -> double {
        switch (k) {
          case AgentKind::TfuL2: return m.hier.l2.shared_rw_ports;
          case AgentKind::TfuL3: return m.hier.l3.shared_rw_ports;
          default: return m.hier.l1.read_ports;
        }
      };
      auto ok = [&](double width_vec, AgentKind k) {
        double demand = width_vec * ratio;
        return demand <= 0.8 * budget(k) || demand <= width_vec * base_ratio;
      };
      if (use_psx) {
        for (auto& [kind, width] : sites)
          if (!ok(double(width) / psx::kMacsPerVector, kind)) return false;
        return true;
      }
      return ok(double(m.core_macs_per_cycle) / psx::kMacsPerVector,
                AgentKind::CoreThread);
    };
    const int a0 = kernel.blocking.weights_resident
                       ? kernel.blocking.outputs_per_inner_loop /
                             kernel.blocking.weights_resident
                       : 1;
    const int b0 = std::max(1, kernel.blocking.weights_resident);
    int ocb = (layer.out_channels + 15) / 16;
    auto tiles_of = [&](int a, int b) -> uint64_t {
      uint64_t oc_tiles = uint64_t(ocb + b - 1) / b;
      if (layer.kind == LayerKind::InnerProduct) return oc_tiles;
      return oc_tiles * uint64_t(layer.out_h()) *
             ((uint64_t(layer.out_w()) + a - 1) / a);
    };
    if (low.tile_count < 2 * n_workers) {
      // smallest traffic increase that still feeds every site
      int best_a = a0, best_b = b0;
      double best_ratio = 1e9;
      uint64_t best_tiles = low.tile_count;
      bool found_target = false;
      for (int b = b0; b >= 1; b /= 2)
        for (int a = (layer.kind == LayerKind::Convolution ? a0 : 1); a >= 1; --a) {
          if (a == a0 && b == b0) continue;
          if (!port_demand_ok(a, b)) continue;
          uint64_t tl = tiles_of(a, b);
          double ratio = double(a + b) / double(a * b);
          bool hits = tl >= 2 * n_workers;
          if (hits && (!found_target || ratio < best_ratio)) {
            found_target = true;
            best_ratio = ratio;
            best_a = a;
            best_b = b;
            best_tiles = tl;
          } else if (!found_target && tl > best_tiles) {
            best_ratio = ratio;
            best_a = a;
            best_b = b;
            best_tiles = tl;
          }
        }
      if (best_a != a0 || best_b != b0) {
        kern::BlockingParams fb;
        fb.weights_resident = best_b;
        fb.outputs_per_inner_loop = std::max(1, best_a * best_b);
        fb.accumulators_used = fb.outputs_per_inner_loop;
        fb.vector_bytes = 64;
        try {
          kern::KernelIR finer = kern::block_layer(layer, psx::kDataRegs, 64, &fb);
          kern::Lowering finer_low = kern::lower(finer, bases);
          if (finer_low.tile_count > low.tile_count) {
            kernel = std::move(finer);
            low = std::move(finer_low);
          }
        } catch (const kern::UnblockableLayer&) {
        }
      }
    }
  }
  kern::TensorExtents ext = kern::tensor_extents(layer);
  hier.prime_spread_l3(bases.input, ext.input_bytes);
  hier.prime_spread_l3(bases.weight, ext.weight_bytes);
  hier.prime_spread_l3(bases.output, ext.output_bytes);

  // one worker per compute site per core, contiguous tile ranges in
  // worker order, sized by the schedule
  std::vector<std::unique_ptr<FrontEnd>> fes;
  for (int c = 0; c < m.cores; ++c)
    fes.push_back(std::make_unique<FrontEnd>(m.issue_width));

  bool replicate = layer.kind == LayerKind::Convolution;
  std::vector<double> strengths;
  if (use_psx) {
    for (int c = 0; c < m.cores; ++c)
      for (auto& [kind, width] : sites)
        strengths.push_back(policy.schedule == Schedule::StaticAsymmetric
                                ? double(width)
                                : 1.0);
  } else {
    strengths.assign(m.cores, 1.0);
  }
  // tiles are uniform within a lowering region, so strength-proportional
  // division happens region by region with the largest-remainder rule; a
  // worker ends up with one contiguous range per region
  std::vector<std::vector<std::pair<uint64_t, uint64_t>>> ranges(strengths.size());
  {
    uint64_t region_base = 0;
    for (const auto& rl : low.regions) {
      auto alloc_r = partition_static_asymmetric(rl.tile_count, strengths);
      uint64_t t = region_base;
      for (size_t w = 0; w < strengths.size(); ++w) {
        if (alloc_r[w]) ranges[w].push_back({t, t + alloc_r[w]});
        t += alloc_r[w];
      }
      region_base += rl.tile_count;
    }
    if (getenv("NCTSIM_DEBUG_WORKERS")) {
      fprintf(stderr, "tiles=%lu alloc:", low.tile_count);
      for (auto& rs : ranges) {
        uint64_t n = 0;
        for (auto& [lo, hi] : rs) n += hi - lo;
        fprintf(stderr, " %lu", n);
      }
      fprintf(stderr, "\n");
    }
  }

  std::vector<std::unique_ptr<Worker>> workers;
  {
    int id = 0;
    if (use_psx) {
      size_t w = 0;
      for (int c = 0; c < m.cores; ++c)
        for (auto& [kind, width] : sites) {
          tfu::TfuConfig tc;
          tc.attached = kind;
          tc.macs_per_cycle = width;
          tc.replicate_weights = replicate;
          tc.replicate_inputs = replicate || layer.kind == LayerKind::InnerProduct;
          workers.push_back(std::make_unique<TfuWorker>(
              id, &low, ranges[w], tc, &hier, c, fes[c].get()));
          id++;
          w++;
        }
    } else {
      for (int c = 0; c < m.cores; ++c)
        workers.push_back(std::make_unique<LegacyWorker>(
            c, &low, ranges[c], &hier, c, fes[c].get(), m.window,
            m.core_macs_per_cycle / psx::kMacsPerVector,
            policy.bookkeeping_per_iter, 4));
    }
  }

  // steady state across repeated inference passes: with a static partition
  // each core re-reads the same weight slice (and the producer left this
  // worker's input rows in the same core), so slices that fit stay resident
  // in the private L2; near-L3 units likewise keep their replica span in the
  // slice partition. Streaming kinds see no such reuse between passes.
  if (layer.kind == LayerKind::Convolution || layer.kind == LayerKind::Pooling ||
      layer.kind == LayerKind::Concat) {
    auto prime_ranges = [&](int core, AgentKind kind, const auto& rs) {
      kern::Lowering::Span wspan, ispan;
      for (auto& [t_lo, t_hi] : rs) {
        wspan.merge(low.role_span(kern::TensorRole::Weight, t_lo));
        wspan.merge(low.role_span(kern::TensorRole::Weight, t_hi - 1));
        ispan.merge(low.role_span(kern::TensorRole::Input, t_lo));
        ispan.merge(low.role_span(kern::TensorRole::Input, t_hi - 1));
      }
      if (kind == AgentKind::TfuL3) {
        if (!wspan.empty() && wspan.bytes() <= hier.l3_partition_bytes(core))
          hier.prime(mem::Level::L3, core % m.cores, wspan.lo, wspan.bytes());
        return;
      }
      uint64_t budget = m.hier.l2.capacity_bytes * 3 / 4;
      if (!wspan.empty() && wspan.bytes() <= budget) {
        hier.prime(mem::Level::L2, core, wspan.lo, wspan.bytes());
        budget -= wspan.bytes();
        // near-L1 units keep their slice hot in the inner cache too: loop
        // reuse touches it far more often than the streaming rows
        if (kind == AgentKind::TfuL1 &&
            wspan.bytes() <= m.hier.l1.capacity_bytes * 3 / 4)
          hier.prime(mem::Level::L1, core, wspan.lo, wspan.bytes());
      }
      if (!ispan.empty() && ispan.bytes() <= budget)
        hier.prime(mem::Level::L2, core, ispan.lo, ispan.bytes());
    };
    size_t w = 0;
    if (use_psx) {
      for (int c = 0; c < m.cores; ++c)
        for (auto& [kind, width] : sites) prime_ranges(c, kind, ranges[w++]);
    } else {
      for (int c = 0; c < m.cores; ++c) prime_ranges(c, AgentKind::CoreThread, ranges[c]);
    }
  }

  // event loop: earliest worker first, ties by id
  using Key = std::pair<uint64_t, int>;
  std::priority_queue<Key, std::vector<Key>, std::greater<Key>> pq;
  for (auto& w : workers) pq.push({0, w->id()});
  uint64_t pops = 0;
  while (!pq.empty()) {
    auto [cyc, id] = pq.top();
    pq.pop();
    Worker& w = *workers[id];
    w.advance();
    if (!w.done) pq.push({w.cycle, id});
    if (++pops % 65536 == 0) {
      uint64_t min_cycle = w.cycle;
      hier.prune_schedules(min_cycle > 4096 ? min_cycle - 4096 : 0);
      for (auto& fe : fes)
        fe->prune_before(min_cycle > 4096 ? min_cycle - 4096 : 0);
    }
  }

  if (getenv("NCTSIM_DEBUG_WORKERS")) {
    for (auto& w : workers)
      fprintf(stderr, "worker %3d done@%8lu ops=%8lu macv=%7lu loads=%7lu psx=%6lu tc=%lu/%lu\n",
              w->id(), w->completion, w->n.tfu_ops + w->n.legacy_ops,
              w->n.macvec, w->n.loads, w->n.psx_core_ops, w->n.tc_hits,
              w->n.tc_lookups);
  }
  SimMetrics sm;
  sm.workers = int(workers.size());
  sm.min_worker_completion = UINT64_MAX;
  uint64_t mac_vecs = 0;
  for (auto& w : workers) {
    sm.cycles = std::max(sm.cycles, w->completion);
    sm.min_worker_completion = std::min(sm.min_worker_completion, w->completion);
    sm.max_worker_completion = std::max(sm.max_worker_completion, w->completion);
    sm.legacy_dyn_instrs += w->n.legacy_ops;
    sm.psx_core_instrs += w->n.psx_core_ops;
    sm.tfu_sched_ops += w->n.tfu_ops;
    sm.macvec_ops += w->n.macvec;
    sm.vecalu_ops += w->n.vecalu;
    sm.loads += w->n.loads;
    sm.stores += w->n.stores;
    sm.tc_lookups += w->n.tc_lookups;
    sm.tc_hits += w->n.tc_hits;
    mac_vecs += w->n.macvec;
  }
  if (mac_vecs != low.total_macvec)
    throw mem::SimInvariantError("work conservation violated");
  // legacy mode also pays bookkeeping ops that never entered a program
  sm.total_macs = mac_vecs * psx::kMacsPerVector;
  if (sm.cycles)
    sm.macs_per_cycle_per_core =
        double(sm.total_macs) / double(sm.cycles) / double(m.cores);
  for (int l = 0; l < 3; ++l) {
    sm.hit_rate[l] = hier.stats(mem::Level(l)).hit_rate();
    sm.cache_lookups[l] = hier.stats(mem::Level(l)).lookups;
  }
  sm.movement = hier.movement();
  if (sm.movement.rf_load_bytes + sm.movement.rf_store_bytes > 0)
    sm.dm = mem::dm_overhead(sm.movement);
  if (sm.cycles) {
    uint64_t used = 0, cap = 0;
    for (int l = 0; l < 3; ++l) {
      used += hier.port_slots_used(mem::Level(l));
      cap += hier.port_slots_capacity_per_cycle(mem::Level(l));
    }
    sm.bandwidth_utilization = double(used) / (double(cap) * double(sm.cycles));
  }
  sm.dram_accesses = hier.dram_accesses();
  sm.stall_cycles = hier.stall_cycles();
  auto comp = kern::compression_stats(kernel, policy.bookkeeping_per_iter);
  sm.compression = comp.ratio();
  sm.programs = comp.programs;
  return sm;
}

SimMetrics run_layers(const MachineConfig& m,
                      const std::vector<LayerSpec>& layers,
                      const Policy& policy) {
  SimMetrics total;
  total.min_worker_completion = UINT64_MAX;
  double comp_sum = 0;
  std::array<uint64_t, 3> hits{}, lookups{};
  for (const LayerSpec& l : layers) {
    SimMetrics sm = run_layer(m, l, policy);
    total.cycles += sm.cycles;
    total.total_macs += sm.total_macs;
    total.legacy_dyn_instrs += sm.legacy_dyn_instrs;
    total.psx_core_instrs += sm.psx_core_instrs;
    total.tfu_sched_ops += sm.tfu_sched_ops;
    total.macvec_ops += sm.macvec_ops;
    total.vecalu_ops += sm.vecalu_ops;
    total.loads += sm.loads;
    total.stores += sm.stores;
    total.tc_lookups += sm.tc_lookups;
    total.tc_hits += sm.tc_hits;
    total.dram_accesses += sm.dram_accesses;
    total.stall_cycles += sm.stall_cycles;
    total.programs += sm.programs;
    total.workers = sm.workers;
    for (int i = 0; i < mem::kNumIf; ++i) {
      total.movement.fill_bytes[i] += sm.movement.fill_bytes[i];
      total.movement.evict_bytes[i] += sm.movement.evict_bytes[i];
    }
    total.movement.rf_load_bytes += sm.movement.rf_load_bytes;
    total.movement.rf_store_bytes += sm.movement.rf_store_bytes;
    for (int l = 0; l < 3; ++l) {
      lookups[l] += sm.cache_lookups[l];
      if (sm.hit_rate[l])
        hits[l] += uint64_t(*sm.hit_rate[l] * double(sm.cache_lookups[l]) + 0.5);
    }
    total.bandwidth_utilization += sm.bandwidth_utilization * double(sm.cycles);
    comp_sum += sm.compression;
  }
  for (int l = 0; l < 3; ++l) {
    total.cache_lookups[l] = lookups[l];
    if (lookups[l]) total.hit_rate[l] = double(hits[l]) / double(lookups[l]);
  }
  if (total.movement.rf_load_bytes + total.movement.rf_store_bytes > 0)
    total.dm = mem::dm_overhead(total.movement);
  if (total.cycles) {
    total.macs_per_cycle_per_core =
        double(total.total_macs) / double(total.cycles) / double(m.cores);
    total.bandwidth_utilization /= double(total.cycles);
  }
  total.compression = layers.empty() ? 0 : comp_sum / double(layers.size());
  return total;
}

}  // namespace nctsim::mach
