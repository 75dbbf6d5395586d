#pragma once

// Independent table-style MESIF reference for small instances. States are
// per (line, core): {I,S,E,M,F} plus L1-presence and L1-owner bits. Written
// as direct rule application so it can cross-check the library's directory
// model transition by transition.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace refmesif {

enum St : uint8_t { I, S, E, M, F };

struct LineRef {
  std::vector<uint8_t> cs;   // St per core
  std::vector<bool> l1p, l1o;

  explicit LineRef(int cores)
      : cs(cores, I), l1p(cores, false), l1o(cores, false) {}

  bool operator==(const LineRef&) const = default;
};

inline void drop_others(LineRef& s, int keep) {
  for (size_t c = 0; c < s.cs.size(); ++c) {
    if (int(c) == keep) continue;
    s.cs[c] = I;
    s.l1p[c] = false;
    s.l1o[c] = false;
  }
}

inline bool any_other(const LineRef& s, int c) {
  for (size_t k = 0; k < s.cs.size(); ++k)
    if (int(k) != c && s.cs[k] != I) return true;
  return false;
}

inline void demote_writers(LineRef& s, int req) {
  for (size_t k = 0; k < s.cs.size(); ++k) {
    if (int(k) == req) continue;
    if (s.cs[k] == M || s.cs[k] == E) {
      s.cs[k] = S;
      s.l1o[k] = false;
    }
  }
}

inline void core_load(LineRef& s, int c) {
  if (s.cs[c] == I) {
    demote_writers(s, c);
    if (any_other(s, c)) {
      for (size_t k = 0; k < s.cs.size(); ++k)
        if (int(k) != c && s.cs[k] == F) s.cs[k] = S;
      s.cs[c] = F;
    } else {
      s.cs[c] = E;
    }
  }
  s.l1p[c] = true;
}

inline void core_store(LineRef& s, int c) {
  drop_others(s, c);
  s.cs[c] = M;
  s.l1p[c] = true;
  s.l1o[c] = true;
}

inline void tfu_l2_load(LineRef& s, int c) {
  if (s.cs[c] == I) {
    demote_writers(s, c);
    if (any_other(s, c)) {
      for (size_t k = 0; k < s.cs.size(); ++k)
        if (int(k) != c && s.cs[k] == F) s.cs[k] = S;
      s.cs[c] = F;
    } else {
      s.cs[c] = E;
    }
  } else if (s.l1o[c]) {
    s.l1o[c] = false;
  }
}

inline void tfu_l2_store(LineRef& s, int c) {
  drop_others(s, c);
  s.l1p[c] = false;
  s.l1o[c] = false;
  s.cs[c] = M;
}

inline void evict_l1(LineRef& s, int c) {
  s.l1p[c] = false;
  s.l1o[c] = false;
}

inline void evict_core(LineRef& s, int c) {
  s.cs[c] = I;
  s.l1p[c] = false;
  s.l1o[c] = false;
}

inline std::string check(const LineRef& s) {
  int writers = 0, copies = 0, fwd = 0;
  for (size_t c = 0; c < s.cs.size(); ++c) {
    if (s.cs[c] == M || s.cs[c] == E) writers++;
    if (s.cs[c] != I) copies++;
    if (s.cs[c] == F) fwd++;
    if (s.l1o[c] && (!s.l1p[c] || s.cs[c] != M)) return "bad l1 owner bit";
    if (s.l1p[c] && s.cs[c] == I) return "l1 copy without domain state";
  }
  if (writers > 1) return "two writers";
  if (writers == 1 && copies > 1) return "writer with other copies";
  if (fwd > 1) return "two forwarders";
  return {};
}

}  // namespace refmesif
