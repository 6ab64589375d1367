#pragma once

#include <string>

namespace dyncls {

struct SelftestResult {
    bool passed = false;
    std::string report; // one line per check with the measured error
};

// Deterministic geometry and mean-solver checks (fixed derived seeds): metric
// axioms, sheet invariants, exp/log round trips, gradient-vs-finite-difference
// agreement, descent behavior, the skewed three-point regression values, and
// solver convergence with a geodesic-search cross-check.
SelftestResult run_geometry_selftest(uint64_t seed = 17);

} // namespace dyncls
