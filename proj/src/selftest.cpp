#include "dyncls/selftest.hpp"

#include <cmath>
#include <cstdio>
#include <functional>

#include "dyncls/means.hpp"
#include "dyncls/rng.hpp"

namespace dyncls {

namespace {

HyperboloidPoint random_point(Rng& rng, int dim, double max_radius,
                              const HyperboloidPoint& center) {
    Vec dir(static_cast<size_t>(dim) + 1, 0.0);
    double nsq = 0.0;
    for (int j = 1; j <= dim; ++j) {
        dir[j] = rng.normal();
        nsq += dir[j] * dir[j];
    }
    if (nsq == 0.0)
        return center;
    double r = rng.uniform(0.0, max_radius);
    auto t = tangent_project(center, dir);
    double tn = tangent_norm(t);
    if (tn < 1e-15)
        return center;
    Vec v(t.vec());
    for (double& x : v)
        x *= r / tn;
    return exp_map(TangentVector::unchecked(center, std::move(v)));
}

HyperboloidPoint random_point(Rng& rng, int dim, double max_radius) {
    return random_point(rng, dim, max_radius, hyperboloid_origin(dim));
}

double golden_section(const std::function<double(double)>& f, double lo, double hi, int iters) {
    const double inv_phi = 0.6180339887498949;
    double a = lo, b = hi;
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = f(c), fd = f(d);
    for (int i = 0; i < iters; ++i) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    return 0.5 * (a + b);
}

struct Report {
    std::string text;
    bool passed = true;

    void check(const char* name, double measured, double tol) {
        char buf[256];
        bool ok = measured <= tol;
        std::snprintf(buf, sizeof(buf), "%-4s %-52s %.3e (tol %.0e)\n", ok ? "ok" : "FAIL", name,
                      measured, tol);
        text += buf;
        passed = passed && ok;
    }

    void value(const char* name, double measured, double expected, double tol) {
        char buf[256];
        bool ok = std::abs(measured - expected) <= tol;
        std::snprintf(buf, sizeof(buf), "%-4s %-52s %.4f (expected %.4f, tol %.0e)\n",
                      ok ? "ok" : "FAIL", name, measured, expected, tol);
        text += buf;
        passed = passed && ok;
    }
};

} // namespace

SelftestResult run_geometry_selftest(uint64_t seed) {
    Report rep;
    const double sqrt2 = std::sqrt(2.0);
    const HyperboloidPoint a({1, 0, 0});
    const HyperboloidPoint b({sqrt2, 1, 0});

    {
        double e1 = std::abs(bilinear_form(a.coords(), b.coords()) - sqrt2);
        double e2 = std::abs(bilinear_form({1, 0, 0, 0}, {1, 0, 0, 0}) - 1.0);
        double e3 = std::abs(bilinear_form({2, 1, 1}, {3, 2, 2}) - 2.0);
        rep.check("bilinear form reference values", std::max({e1, e2, e3}), 1e-12);
    }
    {
        double e1 = std::abs(distance(a, b) - std::acosh(sqrt2));
        double e2 = std::abs(distance(a, lift({3, 4})) - std::acosh(std::sqrt(26.0)));
        rep.check("distance reference values", std::max(e1, e2), 1e-12);
    }

    for (int dim : {2, 10}) {
        Rng rng = Rng(seed).derive("axioms", static_cast<uint64_t>(dim));
        double asym = 0.0, tri = -1.0, negd = 0.0;
        for (int i = 0; i < 1000; ++i) {
            auto x = random_point(rng, dim, 2.5);
            auto y = random_point(rng, dim, 2.5);
            auto z = random_point(rng, dim, 2.5);
            asym = std::max(asym, std::abs(distance(x, y) - distance(y, x)));
            tri = std::max(tri, distance(x, z) - distance(x, y) - distance(y, z));
            negd = std::max(negd, -distance(x, y));
        }
        char name[64];
        std::snprintf(name, sizeof(name), "metric symmetry (d=%d)", dim);
        rep.check(name, asym, 0.0);
        std::snprintf(name, sizeof(name), "triangle inequality slack (d=%d)", dim);
        rep.check(name, tri, 1e-9);
        std::snprintf(name, sizeof(name), "nonnegativity (d=%d)", dim);
        rep.check(name, negd, 0.0);
    }

    {
        Rng rng = Rng(seed).derive("lift");
        double worst = 0.0, sheet = 0.0;
        for (int i = 0; i < 500; ++i) {
            Vec h(6);
            for (double& x : h)
                x = rng.uniform(-5, 5);
            auto p = lift(h);
            worst = std::max(worst, std::abs(bilinear_form(p.coords(), p.coords()) - 1.0));
            sheet = std::max(sheet, 1.0 - p.coords()[0]);
        }
        rep.check("lift sheet constraint |B(x,x)-1|", worst, 1e-9);
        rep.check("lift upper sheet (1 - x0)", sheet, 0.0);
    }

    {
        Rng rng = Rng(seed).derive("roundtrip");
        double coord_err = 0.0, norm_err = 0.0;
        for (int i = 0; i < 500; ++i) {
            auto p = random_point(rng, 5, 2.0);
            auto q = random_point(rng, 5, 2.0);
            auto v = log_map(p, q);
            norm_err = std::max(norm_err, std::abs(tangent_norm(v) - distance(p, q)));
            auto back = exp_map(v);
            for (size_t j = 0; j < q.coords().size(); ++j)
                coord_err = std::max(coord_err, std::abs(back.coords()[j] - q.coords()[j]));
        }
        rep.check("exp/log round trip coordinate error", coord_err, 1e-7);
        rep.check("log norm vs distance", norm_err, 1e-8);
    }

    {
        Rng rng = Rng(seed).derive("gradient");
        double worst = 0.0;
        // violation ratio against |g - fd| <= 1e-5*|g| + 1e-9 (the absolute
        // term absorbs finite-difference noise on vanishing components)
        auto fd_worst = [&](const HyperboloidPoint& x, const HyperboloidPoint& y) {
            Vec g = squared_distance_gradient(x, y);
            for (size_t i = 0; i < x.coords().size(); ++i) {
                Vec hi = x.coords(), lo = x.coords();
                hi[i] += 1e-6;
                lo[i] -= 1e-6;
                double fd = (squared_distance(HyperboloidPoint::unchecked(hi), y) -
                             squared_distance(HyperboloidPoint::unchecked(lo), y)) /
                            2e-6;
                double allowed = 1e-5 * std::max(std::abs(g[i]), std::abs(fd)) + 1e-9;
                worst = std::max(worst, std::abs(g[i] - fd) / allowed);
            }
        };
        for (int i = 0; i < 400; ++i)
            fd_worst(random_point(rng, 4, 3.0), random_point(rng, 4, 3.0));
        for (int i = 0; i < 100; ++i) {
            auto x = random_point(rng, 4, 1.5);
            fd_worst(x, random_point(rng, 4, rng.uniform(1e-6, 1e-4), x));
        }
        rep.check("squared-distance gradient vs finite differences", worst, 1.0);
    }

    {
        Rng rng = Rng(seed).derive("descent");
        double worst_increase = -1.0;
        for (int i = 0; i < 100; ++i) {
            int n = 1 + static_cast<int>(rng.below(8));
            std::vector<HyperboloidPoint> xs;
            for (int k = 0; k < n; ++k)
                xs.push_back(random_point(rng, 4, 1.0));
            auto p = random_point(rng, 4, 1.0);
            Vec ambient(5, 0.0);
            double before = 0.0;
            for (const auto& x : xs) {
                before += squared_distance(p, x);
                Vec g = squared_distance_gradient(p, x);
                for (size_t j = 0; j < ambient.size(); ++j)
                    ambient[j] += g[j];
            }
            auto r = riemannian_gradient(p, ambient);
            Vec step(r.vec());
            for (double& v : step)
                v *= -0.01;
            auto p2 = exp_map(TangentVector::unchecked(p, std::move(step)));
            double after = 0.0;
            for (const auto& x : xs)
                after += squared_distance(p2, x);
            worst_increase = std::max(worst_increase, after - before);
        }
        rep.check("descent step never increases the objective", worst_increase, 1e-12);
    }

    {
        // skewed three-point set {a, a, b}: the closed-form rescaled average
        // against the descent solution
        std::vector<HyperboloidPoint> X{a, a, b};
        auto pm = pseudo_mean(X);
        double denom = std::sqrt(5.0 + 4.0 * sqrt2);
        Vec expected{(2.0 + sqrt2) / denom, 1.0 / denom, 0.0};
        double coord_err = 0.0;
        for (size_t j = 0; j < expected.size(); ++j)
            coord_err = std::max(coord_err, std::abs(pm.coords()[j] - expected[j]));
        rep.check("rescaled-average prototype coordinates", coord_err, 1e-9);
        rep.value("rescaled-average distance from a", distance(pm, a), 0.3017, 1e-3);
        auto fm = frechet_mean(X, MeanSolverConfig::evaluation());
        rep.value("descent-mean distance from a", distance(fm.point, a), 0.2938, 1e-3);
        rep.value("descent-mean distance as a third of d(a,b)", distance(fm.point, a),
                  std::acosh(sqrt2) / 3.0, 1e-6);
    }

    {
        Rng rng = Rng(seed).derive("solver");
        double worst_gn = 0.0;
        int worst_iters = 0;
        MeanSolverConfig cfg;
        cfg.max_iterations = 200;
        cfg.grad_tolerance = 1e-6;
        for (int rep_i = 0; rep_i < 10; ++rep_i) {
            auto center = random_point(rng, 10, 1.0);
            std::vector<HyperboloidPoint> X;
            int n = 1 + static_cast<int>(rng.below(64));
            for (int i = 0; i < n; ++i)
                X.push_back(random_point(rng, 10, 2.0, center));
            auto res = frechet_mean(X, cfg);
            worst_gn = std::max(worst_gn, res.final_grad_norm);
            worst_iters = std::max(worst_iters, res.iterations_used);
        }
        rep.check("solver gradient norm within 200 iterations", worst_gn, 1e-6);

        double oracle_gap = 0.0;
        for (int rep_i = 0; rep_i < 10; ++rep_i) {
            auto x = random_point(rng, 6, 2.0);
            auto y = random_point(rng, 6, 2.0);
            std::vector<HyperboloidPoint> X{x, y};
            auto res = frechet_mean(X, MeanSolverConfig::evaluation());
            auto base = log_map(x, y);
            auto at = [&](double t) {
                Vec v(base.vec());
                for (double& w : v)
                    w *= t;
                return exp_map(TangentVector::unchecked(x, std::move(v)));
            };
            double t_star =
                golden_section([&](double t) { return frechet_objective(at(t), X); }, 0.0, 1.0, 120);
            oracle_gap = std::max(oracle_gap, distance(res.point, at(t_star)));
        }
        rep.check("two-point solver vs geodesic line search", oracle_gap, 1e-6);
    }

    char tail[64];
    std::snprintf(tail, sizeof(tail), "selftest: %s\n", rep.passed ? "PASS" : "FAIL");
    rep.text += tail;
    return {rep.passed, rep.text};
}

} // namespace dyncls
