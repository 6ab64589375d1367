#include "dyncls/means.hpp"

#include <cmath>
#include <string>

namespace dyncls {

MeanSolverConfig MeanSolverConfig::training() {
    MeanSolverConfig cfg;
    cfg.max_iterations = 5;
    cfg.grad_tolerance = 1e-6;
    return cfg;
}

MeanSolverConfig MeanSolverConfig::evaluation() {
    MeanSolverConfig cfg;
    cfg.max_iterations = 100;
    cfg.grad_tolerance = 1e-9;
    return cfg;
}

Vec euclidean_mean(const std::vector<Vec>& points) {
    if (points.empty())
        throw UsageError("euclidean_mean: empty point set");
    Vec m(points[0].size(), 0.0);
    for (const Vec& p : points) {
        if (p.size() != m.size())
            throw UsageError("euclidean_mean: mixed dimensions");
        for (size_t i = 0; i < m.size(); ++i)
            m[i] += p[i];
    }
    double inv = 1.0 / static_cast<double>(points.size());
    for (double& x : m)
        x *= inv;
    return m;
}

double frechet_objective(const HyperboloidPoint& p, const std::vector<HyperboloidPoint>& X) {
    if (X.empty())
        throw UsageError("frechet_objective: empty point set");
    double s = 0.0;
    for (const auto& x : X)
        s += squared_distance(p, x);
    return s;
}

HyperboloidPoint pseudo_mean(const std::vector<HyperboloidPoint>& X) {
    if (X.empty())
        throw UsageError("pseudo_mean: empty point set");
    Vec avg(X[0].coords().size(), 0.0);
    for (const auto& x : X) {
        if (x.coords().size() != avg.size())
            throw UsageError("pseudo_mean: mixed dimensions");
        for (size_t i = 0; i < avg.size(); ++i)
            avg[i] += x.coords()[i];
    }
    double inv = 1.0 / static_cast<double>(X.size());
    for (double& v : avg)
        v *= inv;
    double b = bilinear_form(avg, avg);
    double scale = 1.0 / std::sqrt(std::max(b, 1.0));
    for (double& v : avg)
        v *= scale;
    return HyperboloidPoint::unchecked(std::move(avg));
}

namespace {

// Riemannian gradient of the Frechet objective at p. Also accumulates the
// local curvature bound sum_x b*g(b) (per-term Hessian eigenvalues lie in
// [2, 2*d*coth(d)] and 2*d*coth(d) = b*g(b)), which sets the default step.
TangentVector objective_gradient(const HyperboloidPoint& p, const std::vector<HyperboloidPoint>& X,
                                 double* curvature_bound) {
    Vec ambient(p.coords().size(), 0.0);
    double curv = 0.0;
    for (const auto& x : X) {
        double b = bilinear_form(p.coords(), x.coords());
        double g = acosh_sq_prime(b);
        curv += std::max(b, 1.0) * g;
        ambient[0] += g * x.coords()[0];
        for (size_t j = 1; j < ambient.size(); ++j)
            ambient[j] -= g * x.coords()[j];
    }
    if (curvature_bound)
        *curvature_bound = curv;
    return riemannian_gradient(p, ambient);
}

HyperboloidPoint step(const HyperboloidPoint& p, const TangentVector& grad, double eta) {
    Vec v(grad.vec().size());
    for (size_t i = 0; i < v.size(); ++i)
        v[i] = -eta * grad.vec()[i];
    return exp_map(TangentVector::unchecked(p, std::move(v)));
}

} // namespace

MeanResult frechet_mean(const std::vector<HyperboloidPoint>& X, const MeanSolverConfig& cfg,
                        const std::optional<HyperboloidPoint>& init) {
    if (X.empty())
        throw UsageError("frechet_mean: empty point set");
    HyperboloidPoint p = init ? *init : pseudo_mean(X);
    double obj = frechet_objective(p, X);

    MeanResult res{p, 0, 0.0, false, {obj}};
    for (int it = 0; it < cfg.max_iterations; ++it) {
        double curv = 0.0;
        TangentVector grad = objective_gradient(p, X, &curv);
        double gn = tangent_norm(grad);
        if (!std::isfinite(gn) || !std::isfinite(obj))
            throw NumericalError("frechet_mean: non-finite state at iteration " +
                                 std::to_string(it) + " (objective " + std::to_string(obj) + ")");
        res.final_grad_norm = gn;
        if (gn <= cfg.grad_tolerance) {
            res.converged = true;
            break;
        }
        // 1/curv tends to 1/(2|X|) as the set tightens; far out it shrinks
        // with d*coth(d), which keeps every Hessian mode contractive.
        double eta = cfg.step_size > 0.0 ? cfg.step_size : 1.0 / curv;
        eta = std::min(eta, 2.0 / gn); // keep geodesic steps short; cosh stays tame
        HyperboloidPoint cand = step(p, grad, eta);
        double cobj = frechet_objective(cand, X);
        // Backtrack only while the predicted decrease ~eta*gn^2 is resolvable
        // in the objective; below that the test reads rounding noise and
        // would freeze the iteration short of the gradient tolerance.
        if (cfg.backtracking && eta * gn * gn > 1e-12 * std::max(1.0, obj)) {
            int halvings = 0;
            while (cobj > obj && halvings < 60) {
                eta *= 0.5;
                cand = step(p, grad, eta);
                cobj = frechet_objective(cand, X);
                ++halvings;
            }
            if (cobj > obj) // step size underflowed; we are at the numerical floor
                break;
        }
        p = cand;
        obj = cobj;
        res.iterations_used = it + 1;
        res.objective_history.push_back(obj);
    }
    if (!res.converged) {
        TangentVector grad = objective_gradient(p, X, nullptr);
        res.final_grad_norm = tangent_norm(grad);
        res.converged = res.final_grad_norm <= cfg.grad_tolerance;
    }
    res.point = p;
    return res;
}

} // namespace dyncls
