#include "dyncls/geometry.hpp"

#include <cmath>
#include <string>

namespace dyncls {

namespace {

// b - 1 below this goes through the series branches.
constexpr double kSeriesBranch = 1e-7;
constexpr double kPointTol = 1e-9;
constexpr double kTangentTol = 1e-8;

void check_finite(const Vec& v, const char* what) {
    for (double x : v)
        if (!std::isfinite(x))
            throw NumericalError(std::string(what) + ": non-finite coordinate");
}

} // namespace

double bilinear_form(const Vec& u, const Vec& v) {
    if (u.size() != v.size() || u.empty())
        throw UsageError("bilinear_form: dimension mismatch (" + std::to_string(u.size()) +
                         " vs " + std::to_string(v.size()) + ")");
    double s = u[0] * v[0];
    for (size_t j = 1; j < u.size(); ++j)
        s -= u[j] * v[j];
    return s;
}

HyperboloidPoint::HyperboloidPoint(Vec coords) : coords_(std::move(coords)) {
    if (coords_.size() < 2)
        throw UsageError("HyperboloidPoint: need at least 2 ambient coordinates");
    check_finite(coords_, "HyperboloidPoint");
    double b = bilinear_form(coords_, coords_);
    double scale = std::max(1.0, coords_[0] * coords_[0]);
    if (std::abs(b - 1.0) > kPointTol * scale)
        throw NumericalError("HyperboloidPoint: B(x,x) = " + std::to_string(b) +
                             " violates the sheet constraint");
    if (coords_[0] < 1.0 - kPointTol)
        throw NumericalError("HyperboloidPoint: x0 = " + std::to_string(coords_[0]) +
                             " is below the upper sheet");
}

HyperboloidPoint HyperboloidPoint::unchecked(Vec coords) {
    HyperboloidPoint p;
    p.coords_ = std::move(coords);
    return p;
}

TangentVector::TangentVector(HyperboloidPoint base, Vec vec)
    : base_(std::move(base)), vec_(std::move(vec)) {
    if (vec_.size() != base_.coords().size())
        throw UsageError("TangentVector: dimension mismatch");
    check_finite(vec_, "TangentVector");
    double sq = 0.0;
    for (double x : vec_)
        sq += x * x;
    double scale = std::max(1.0, sq);
    if (std::abs(bilinear_form(base_.coords(), vec_)) > kTangentTol * scale)
        throw NumericalError("TangentVector: not orthogonal to base point");
    if (bilinear_form(vec_, vec_) > kTangentTol * scale)
        throw NumericalError("TangentVector: positive form value (not tangent)");
}

TangentVector TangentVector::unchecked(HyperboloidPoint base, Vec vec) {
    TangentVector v;
    v.base_ = std::move(base);
    v.vec_ = std::move(vec);
    return v;
}

HyperboloidPoint hyperboloid_origin(int dim) {
    Vec c(static_cast<size_t>(dim) + 1, 0.0);
    c[0] = 1.0;
    return HyperboloidPoint::unchecked(std::move(c));
}

double distance(const HyperboloidPoint& x, const HyperboloidPoint& y) {
    if (x.coords() == y.coords())
        return 0.0;
    double b = bilinear_form(x.coords(), y.coords());
    return std::acosh(std::max(b, 1.0));
}

double squared_distance_coords(const Vec& x, const Vec& y) {
    if (x == y)
        return 0.0;
    double b = bilinear_form(x, y);
    double e = b - 1.0;
    if (e < kSeriesBranch) {
        // arccosh(1+e)^2 = 2e - e^2/3 + (4/45)e^3 - ...; also the smooth
        // continuation for the slightly-negative e of off-sheet probes.
        return e * (2.0 + e * (-1.0 / 3.0 + e * (4.0 / 45.0)));
    }
    double a = std::acosh(b);
    return a * a;
}

double squared_distance(const HyperboloidPoint& x, const HyperboloidPoint& y) {
    return squared_distance_coords(x.coords(), y.coords());
}

double acosh_sq_prime(double b) {
    double e = b - 1.0;
    if (e < kSeriesBranch)
        return 2.0 - (2.0 / 3.0) * e;
    // b^2 - 1 as e*(b+1) avoids the cancellation in b*b - 1
    return 2.0 * std::acosh(b) / std::sqrt(e * (b + 1.0));
}

void squared_distance_gradient_coords(const Vec& x, const Vec& y, Vec& grad_out) {
    double b = bilinear_form(x, y);
    double g = acosh_sq_prime(b);
    grad_out.resize(x.size());
    grad_out[0] = g * y[0];
    for (size_t j = 1; j < grad_out.size(); ++j)
        grad_out[j] = -g * y[j];
}

Vec squared_distance_gradient(const HyperboloidPoint& x, const HyperboloidPoint& y) {
    Vec grad;
    squared_distance_gradient_coords(x.coords(), y.coords(), grad);
    return grad;
}

HyperboloidPoint lift(const Vec& h) {
    double sq = 0.0;
    for (double x : h)
        sq += x * x;
    Vec c(h.size() + 1);
    c[0] = std::sqrt(sq + 1.0);
    if (!std::isfinite(c[0]))
        throw NumericalError("lift: non-finite input");
    for (size_t i = 0; i < h.size(); ++i)
        c[i + 1] = h[i];
    return HyperboloidPoint::unchecked(std::move(c));
}

TangentVector tangent_project(const HyperboloidPoint& p, const Vec& u) {
    double b = bilinear_form(p.coords(), u);
    Vec v(u.size());
    for (size_t i = 0; i < u.size(); ++i)
        v[i] = u[i] - b * p.coords()[i];
    return TangentVector::unchecked(p, std::move(v));
}

double tangent_norm(const TangentVector& v) {
    return std::sqrt(std::max(0.0, -bilinear_form(v.vec(), v.vec())));
}

HyperboloidPoint exp_map(const TangentVector& v) {
    const Vec& p = v.base().coords();
    const Vec& u = v.vec();
    double r = tangent_norm(v);
    if (r == 0.0)
        return v.base();
    Vec spatial(p.size() - 1);
    if (r < 1e-9) {
        // first order; the lift renormalization protects the invariant
        for (size_t j = 1; j < p.size(); ++j)
            spatial[j - 1] = p[j] + u[j];
        return lift(spatial);
    }
    double c = std::cosh(r);
    double s = std::sinh(r) / r;
    for (size_t j = 1; j < p.size(); ++j)
        spatial[j - 1] = c * p[j] + s * u[j];
    return lift(spatial);
}

TangentVector log_map(const HyperboloidPoint& p, const HyperboloidPoint& q) {
    if (p.coords() == q.coords())
        return TangentVector::unchecked(p, Vec(p.coords().size(), 0.0));
    double b = std::max(1.0, bilinear_form(p.coords(), q.coords()));
    // arccosh(b)/sqrt(b^2-1) = acosh_sq_prime(b)/2, series-stable at b = 1
    double coeff = 0.5 * acosh_sq_prime(b);
    Vec v(p.coords().size());
    for (size_t i = 0; i < v.size(); ++i)
        v[i] = coeff * (q.coords()[i] - b * p.coords()[i]);
    return TangentVector::unchecked(p, std::move(v));
}

TangentVector riemannian_gradient(const HyperboloidPoint& p, const Vec& ambient_grad) {
    if (ambient_grad.size() != p.coords().size())
        throw UsageError("riemannian_gradient: dimension mismatch");
    Vec w(ambient_grad.size());
    w[0] = ambient_grad[0];
    for (size_t j = 1; j < w.size(); ++j)
        w[j] = -ambient_grad[j];
    double b = bilinear_form(p.coords(), w);
    Vec v(w.size());
    for (size_t i = 0; i < v.size(); ++i)
        v[i] = -(w[i] - b * p.coords()[i]);
    return TangentVector::unchecked(p, std::move(v));
}

} // namespace dyncls
