#pragma once

// Checks a MemoryState against the structural bounds every step must keep.
// Shared by the unit tests and the acceptance runner.

#include <cmath>
#include <cstdio>
#include <string>

#include "memcomputer/memory_unit.hpp"

namespace testutil {

struct InvariantReport {
  bool ok = true;
  std::string first_failure;

  void fail(const char* what, double value) {
    if (!ok) return;
    ok = false;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s (value %.17g)", what, value);
    first_failure = buf;
  }
};

inline InvariantReport check_memory_invariants(const memcomputer::MemoryState& s,
                                               const memcomputer::MuConfig& c, double tol = 1e-9) {
  InvariantReport rep;
  const std::size_t b = s.memory.dim(0), n = c.locations, r = c.read_heads;
  for (std::size_t lane = 0; lane < b; ++lane) {
    double ww = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double w = s.write_weighting[lane * n + j];
      if (w < -tol) rep.fail("negative write weighting", w);
      ww += w;
      const double u = s.usage[lane * n + j];
      if (u < -tol || u > 1.0 + tol) rep.fail("usage outside [0, 1]", u);
    }
    if (ww > 1.0 + tol) rep.fail("write weighting sums above 1", ww);

    for (std::size_t i = 0; i < r; ++i) {
      double rw = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double w = s.read_weightings[(lane * r + i) * n + j];
        if (w < -tol) rep.fail("negative read weighting", w);
        rw += w;
      }
      if (rw > 1.0 + tol) rep.fail("read weighting sums above 1", rw);
      if (!c.has_linkage() && std::abs(rw - 1.0) > tol) rep.fail("content read weighting does not sum to 1", rw);
    }

    if (!c.has_linkage()) continue;
    const double* l = s.linkage.data().data() + lane * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      if (l[i * n + i] != 0.0) rep.fail("linkage diagonal is not zero", l[i * n + i]);
      double row = 0.0, col = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (l[i * n + j] < -tol || l[i * n + j] > 1.0 + tol) rep.fail("linkage entry outside [0, 1]", l[i * n + j]);
        row += l[i * n + j];
        col += l[j * n + i];
      }
      if (row > 1.0 + tol) rep.fail("linkage row sums above 1", row);
      if (col > 1.0 + tol) rep.fail("linkage column sums above 1", col);
    }
    double p = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = s.precedence[lane * n + j];
      if (v < -tol) rep.fail("negative precedence", v);
      p += v;
    }
    if (p > 1.0 + tol) rep.fail("precedence sums above 1", p);
  }
  return rep;
}

}  // namespace testutil
