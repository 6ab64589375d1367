#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dyncls/geometry.hpp"
#include "testutil.hpp"

using namespace dyncls;
using testutil::central_diff;
using testutil::close_rel;
using testutil::random_point;

namespace {
const double kSqrt2 = std::sqrt(2.0);
}

TEST_CASE("bilinear form") {
    CHECK(bilinear_form({1, 0, 0}, {kSqrt2, 1, 0}) == doctest::Approx(kSqrt2).epsilon(1e-15));
    CHECK(bilinear_form({1, 0, 0, 0}, {1, 0, 0, 0}) == 1.0);
    CHECK(bilinear_form({2, 1, 1}, {3, 2, 2}) == 2.0);
    // symmetric bitwise: same products, same summation order
    Rng rng(7);
    for (int i = 0; i < 50; ++i) {
        Vec u(5), v(5);
        for (int j = 0; j < 5; ++j) {
            u[j] = rng.uniform(-3, 3);
            v[j] = rng.uniform(-3, 3);
        }
        CHECK(bilinear_form(u, v) == bilinear_form(v, u));
    }
    CHECK_THROWS_AS(bilinear_form({1, 0}, {1, 0, 0}), UsageError);
}

TEST_CASE("distance matches the closed forms") {
    HyperboloidPoint a({1, 0, 0});
    HyperboloidPoint b({kSqrt2, 1, 0});
    CHECK(distance(a, b) == doctest::Approx(std::acosh(kSqrt2)).epsilon(1e-14));
    CHECK(distance(a, b) == doctest::Approx(0.8814).epsilon(1e-4));
    CHECK(distance(a, a) == 0.0);
    // lift([3,4]) sits at arccosh(sqrt(26)) from the origin
    HyperboloidPoint c = lift({3, 4});
    CHECK(distance(a, c) == doctest::Approx(std::acosh(std::sqrt(26.0))).epsilon(1e-14));
    CHECK(distance(a, c) == doctest::Approx(2.312).epsilon(1e-3));
}

TEST_CASE("metric axioms on random triples") {
    for (int dim : {2, 10}) {
        Rng rng(100 + dim);
        for (int i = 0; i < 1000; ++i) {
            auto x = random_point(rng, dim, 2.5);
            auto y = random_point(rng, dim, 2.5);
            auto z = random_point(rng, dim, 2.5);
            CHECK(distance(x, y) == distance(y, x)); // exact
            CHECK(distance(x, y) >= 0.0);
            CHECK(distance(x, z) <= distance(x, y) + distance(y, z) + 1e-9);
        }
    }
}

TEST_CASE("distance is zero only at equal points") {
    Rng rng(42);
    auto x = random_point(rng, 4, 2.0);
    auto y = random_point(rng, 4, 2.0);
    CHECK(distance(x, x) == 0.0);
    if (x.coords() != y.coords())
        CHECK(distance(x, y) > 0.0);
}

TEST_CASE("lift") {
    auto p = lift({0.0, 0.0, 0.0});
    CHECK(p.coords() == Vec{1, 0, 0, 0});
    auto q = lift({1.0});
    CHECK(q.coords()[0] == doctest::Approx(kSqrt2).epsilon(1e-15));
    CHECK(q.coords()[1] == 1.0);
    auto r = lift({3.0, 4.0});
    CHECK(r.coords()[0] == doctest::Approx(std::sqrt(26.0)).epsilon(1e-15));

    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
        Vec h(6);
        for (double& x : h)
            x = rng.uniform(-5, 5);
        auto pt = lift(h);
        CHECK(std::abs(bilinear_form(pt.coords(), pt.coords()) - 1.0) <= 1e-9);
        CHECK(pt.coords()[0] >= 1.0);
    }
}

TEST_CASE("squared distance is consistent with distance") {
    Rng rng(5);
    for (int i = 0; i < 300; ++i) {
        auto x = random_point(rng, 6, 2.0);
        auto y = random_point(rng, 6, 2.0);
        double d = distance(x, y);
        CHECK(close_rel(squared_distance(x, y), d * d, 1e-10, 1e-14));
    }
    HyperboloidPoint a({1, 0, 0});
    HyperboloidPoint b({kSqrt2, 1, 0});
    double d = std::acosh(kSqrt2);
    CHECK(squared_distance(a, b) == doctest::Approx(d * d).epsilon(1e-13));
    CHECK(squared_distance(a, b) == doctest::Approx(0.7769).epsilon(1e-4));
    CHECK(squared_distance(a, a) == 0.0);
}

TEST_CASE("squared distance gradient at coincident points uses the limit slope 2") {
    auto x = lift({0.3, -0.2, 0.8});
    Vec g = squared_distance_gradient(x, x);
    // g(1) = 2 applied to dB/dx = (y0, -y1, ..., -yd) at y = x
    CHECK(close_rel(g[0], 2.0 * x.coords()[0], 1e-9));
    for (size_t j = 1; j < g.size(); ++j)
        CHECK(close_rel(g[j], -2.0 * x.coords()[j], 1e-9));
}

TEST_CASE("squared distance gradient matches finite differences") {
    Rng rng(11);
    auto fd_check = [&](const HyperboloidPoint& x, const HyperboloidPoint& y) {
        Vec analytic = squared_distance_gradient(x, y);
        auto f = [&](const Vec& xc) {
            return squared_distance(HyperboloidPoint::unchecked(xc), y);
        };
        for (size_t i = 0; i < x.coords().size(); ++i) {
            double fd = central_diff(f, x.coords(), i, 1e-6);
            CHECK(close_rel(analytic[i], fd, 1e-5, 1e-7));
        }
    };
    // generic pairs, including distant ones
    for (int i = 0; i < 400; ++i) {
        auto x = random_point(rng, 4, 3.0);
        auto y = random_point(rng, 4, 3.0);
        fd_check(x, y);
    }
    // the near-coincident stability regime
    for (int i = 0; i < 100; ++i) {
        auto x = random_point(rng, 4, 1.5);
        auto y = random_point(rng, 4, rng.uniform(1e-6, 1e-4), x);
        fd_check(x, y);
    }
}

TEST_CASE("tangent projection") {
    HyperboloidPoint p({1, 0, 0});
    auto t = tangent_project(p, {5, 1, 2});
    CHECK(t.vec() == Vec{0, 1, 2});

    Rng rng(13);
    for (int i = 0; i < 200; ++i) {
        auto q = random_point(rng, 5, 2.0);
        Vec u(6);
        for (double& x : u)
            x = rng.uniform(-2, 2);
        auto v = tangent_project(q, u);
        CHECK(std::abs(bilinear_form(q.coords(), v.vec())) <= 1e-8);
        // idempotent on already-tangent input
        auto v2 = tangent_project(q, v.vec());
        for (size_t j = 0; j < v.vec().size(); ++j)
            CHECK(v2.vec()[j] == doctest::Approx(v.vec()[j]).epsilon(1e-12));
    }
}

TEST_CASE("exp map") {
    HyperboloidPoint p({1, 0, 0});
    SUBCASE("zero vector is the identity") {
        auto q = exp_map(TangentVector(p, {0, 0, 0}));
        CHECK(q.coords() == p.coords());
    }
    SUBCASE("axis geodesic from the origin") {
        for (double t : {1e-12, 1e-8, 0.1, 1.0, 2.5}) {
            auto q = exp_map(TangentVector(p, {0, t, 0}));
            CHECK(std::abs(bilinear_form(q.coords(), q.coords()) - 1.0) <= 1e-9);
            CHECK(q.coords()[0] == doctest::Approx(std::cosh(t)).epsilon(1e-12));
            CHECK(q.coords()[1] == doctest::Approx(std::sinh(t)).epsilon(1e-12));
            CHECK(distance(p, q) == doctest::Approx(t).epsilon(1e-8));
        }
    }
    SUBCASE("stays on the sheet and preserves length") {
        Rng rng(17);
        for (int i = 0; i < 300; ++i) {
            auto base = random_point(rng, 5, 2.0);
            Vec u(6);
            for (double& x : u)
                x = rng.uniform(-1.5, 1.5);
            auto v = tangent_project(base, u);
            double n = tangent_norm(v);
            if (n > 1e-12) { // rescale to a random length <= 2.5
                double target = rng.uniform(0.0, 2.5);
                Vec scaled(v.vec());
                for (double& x : scaled)
                    x *= target / n;
                v = TangentVector::unchecked(base, std::move(scaled));
            }
            auto q = exp_map(v);
            CHECK(std::abs(bilinear_form(q.coords(), q.coords()) - 1.0) <= 1e-9);
            CHECK(distance(base, q) == doctest::Approx(tangent_norm(v)).epsilon(1e-8));
        }
    }
}

TEST_CASE("log map inverts exp map") {
    HyperboloidPoint p({1, 0, 0});
    SUBCASE("equal points give the zero vector") {
        auto v = log_map(p, p);
        CHECK(v.vec() == Vec{0, 0, 0});
    }
    SUBCASE("axis case") {
        HyperboloidPoint q({std::cosh(1.0), std::sinh(1.0), 0.0});
        auto v = log_map(p, q);
        CHECK(v.vec()[0] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(v.vec()[1] == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(v.vec()[2]) <= 1e-15);
    }
    SUBCASE("round trip on random pairs") {
        Rng rng(19);
        for (int i = 0; i < 500; ++i) {
            auto a = random_point(rng, 5, 2.0);
            auto b = random_point(rng, 5, 2.0);
            auto v = log_map(a, b);
            CHECK(tangent_norm(v) == doctest::Approx(distance(a, b)).epsilon(1e-8));
            auto back = exp_map(v);
            for (size_t j = 0; j < b.coords().size(); ++j)
                CHECK(back.coords()[j] == doctest::Approx(b.coords()[j]).epsilon(1e-7));
        }
    }
}

TEST_CASE("geodesic additivity") {
    Rng rng(23);
    for (int i = 0; i < 200; ++i) {
        auto p = random_point(rng, 4, 1.5);
        Vec u(5);
        for (double& x : u)
            x = rng.uniform(-1, 1);
        auto t = tangent_project(p, u);
        double n = tangent_norm(t);
        if (n < 1e-9)
            continue;
        Vec unit(t.vec());
        for (double& x : unit)
            x /= n;
        double s1 = rng.uniform(0.0, 2.0), s2 = rng.uniform(0.0, 2.0);
        auto scaled = [&](double s) {
            Vec v(unit);
            for (double& x : v)
                x *= s;
            return exp_map(TangentVector::unchecked(p, std::move(v)));
        };
        CHECK(distance(scaled(s1), scaled(s2)) == doctest::Approx(std::abs(s1 - s2)).epsilon(1e-7));
    }
}

TEST_CASE("riemannian gradient") {
    SUBCASE("zero ambient gradient maps to zero") {
        auto p = lift({0.4, -0.3});
        auto r = riemannian_gradient(p, {0, 0, 0});
        for (double x : r.vec())
            CHECK(x == 0.0);
    }
    SUBCASE("vanishes exactly at the minimum of a squared distance") {
        Rng rng(29);
        auto x = random_point(rng, 4, 1.5);
        auto r = riemannian_gradient(x, squared_distance_gradient(x, x));
        CHECK(tangent_norm(r) <= 1e-12);
    }
    SUBCASE("one step descends a single squared distance") {
        Rng rng(31);
        for (int i = 0; i < 100; ++i) {
            auto x = random_point(rng, 4, 1.5);
            auto p = random_point(rng, 4, 1.5);
            double before = squared_distance(p, x);
            if (before < 1e-12)
                continue;
            auto r = riemannian_gradient(p, squared_distance_gradient(p, x));
            Vec step(r.vec());
            for (double& v : step)
                v *= -0.1;
            auto p2 = exp_map(TangentVector::unchecked(p, std::move(step)));
            CHECK(squared_distance(p2, x) < before);
        }
    }
    SUBCASE("descent on random sums of squared distances never increases") {
        Rng rng(37);
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
            CHECK(after <= before + 1e-12);
        }
    }
}

TEST_CASE("point and tangent validation") {
    CHECK_THROWS_AS(HyperboloidPoint({2, 0, 0}), NumericalError);
    CHECK_THROWS_AS(HyperboloidPoint({-1, 0, 0}), NumericalError);
    CHECK_THROWS_AS(HyperboloidPoint(Vec{1}), UsageError);
    HyperboloidPoint p({1, 0, 0});
    CHECK_THROWS_AS(TangentVector(p, {1, 0, 0}), NumericalError); // not orthogonal
    CHECK_NOTHROW(TangentVector(p, {0, 1, 2}));
}
