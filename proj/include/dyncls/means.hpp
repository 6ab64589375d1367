#pragma once

#include <optional>
#include <vector>

#include "dyncls/geometry.hpp"

namespace dyncls {

struct MeanSolverConfig {
    int max_iterations = 100;
    double step_size = 0.0; // <= 0 means the default 1/(2|X|)
    double grad_tolerance = 1e-9;
    bool backtracking = true;

    // 5 descent iterations, loose tolerance (per-episode prototypes)
    static MeanSolverConfig training();
    // 100 iterations, tight tolerance (final prototypes)
    static MeanSolverConfig evaluation();
};

struct MeanResult {
    HyperboloidPoint point;
    int iterations_used = 0;
    double final_grad_norm = 0.0;
    bool converged = false;
    // objective value at the start plus after each accepted step
    std::vector<double> objective_history;
};

// Coordinate-wise arithmetic mean; throws UsageError on empty input or mixed
// dimensions.
Vec euclidean_mean(const std::vector<Vec>& points);

// sum of squared hyperbolic distances from p to every x in X
double frechet_objective(const HyperboloidPoint& p, const std::vector<HyperboloidPoint>& X);

// Ambient average rescaled back onto the hyperboloid. The rescaling is always
// real: pairwise B(xi,xj) = cosh(d(xi,xj)) >= 1 forces B(avg,avg) >= 1.
HyperboloidPoint pseudo_mean(const std::vector<HyperboloidPoint>& X);

// Riemannian gradient descent on the Frechet objective, initialized at
// pseudo_mean(X) unless an explicit start point is given. The minimizer is
// unique, so any start inside the containing ball converges to it.
MeanResult frechet_mean(const std::vector<HyperboloidPoint>& X, const MeanSolverConfig& cfg,
                        const std::optional<HyperboloidPoint>& init = std::nullopt);

} // namespace dyncls
