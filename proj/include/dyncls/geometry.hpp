#pragma once

#include <vector>

#include "dyncls/errors.hpp"

namespace dyncls {

using Vec = std::vector<double>;

// Primitives for the hyperboloid model of d-dimensional hyperbolic space:
// the upper sheet {x in R^{d+1} : B(x,x) = 1, x0 > 0} of the quadric induced
// by the signature-(1,d) form B(x,y) = x0*y0 - sum_j xj*yj. All values are
// 64-bit; near-coincident points go through series branches so that squared
// distances stay differentiable as B -> 1+.

// B(u,v) = u0*v0 - sum_{j>=1} uj*vj. Throws UsageError on dimension mismatch.
double bilinear_form(const Vec& u, const Vec& v);

class HyperboloidPoint {
public:
    // Validates B(x,x) = 1 (scale-relative 1e-9) and x0 >= 1.
    explicit HyperboloidPoint(Vec coords);

    // Caller guarantees the invariant already holds (hot paths whose output
    // is exact by construction).
    static HyperboloidPoint unchecked(Vec coords);

    const Vec& coords() const { return coords_; }
    int dim() const { return static_cast<int>(coords_.size()) - 1; }

private:
    HyperboloidPoint() = default;
    Vec coords_;
};

class TangentVector {
public:
    // Validates B(base, vec) = 0 within 1e-8 and B(vec,vec) <= 0 (both
    // scale-relative).
    TangentVector(HyperboloidPoint base, Vec vec);

    static TangentVector unchecked(HyperboloidPoint base, Vec vec);

    const HyperboloidPoint& base() const { return base_; }
    const Vec& vec() const { return vec_; }

private:
    TangentVector() : base_(HyperboloidPoint::unchecked({})) {}
    HyperboloidPoint base_;
    Vec vec_;
};

// [1, 0, ..., 0]
HyperboloidPoint hyperboloid_origin(int dim);

// arccosh(clamp(B(x,y), 1)); symmetric, zero iff equal coordinates.
double distance(const HyperboloidPoint& x, const HyperboloidPoint& y);

// distance(x,y)^2, evaluated through a series in b = B(x,y) near b = 1 so the
// value and its gradient stay finite there (and so central finite differences
// that probe slightly off the sheet remain meaningful).
double squared_distance(const HyperboloidPoint& x, const HyperboloidPoint& y);

// Ambient partial derivatives of squared_distance with respect to x:
// g(b) * dB/dx with g(b) = 2*arccosh(b)/sqrt(b^2-1) and g(1+) = 2.
Vec squared_distance_gradient(const HyperboloidPoint& x, const HyperboloidPoint& y);

// Allocation-free forms over raw ambient coordinates for the batch kernels;
// callers guarantee the sheet invariant.
double squared_distance_coords(const Vec& x, const Vec& y);
void squared_distance_gradient_coords(const Vec& x, const Vec& y, Vec& grad_out);

// d/db arccosh(b)^2; series 2 - (2/3)(b-1) for b-1 below the branch cut.
double acosh_sq_prime(double b);

// [sqrt(sum h_i^2 + 1); h]
HyperboloidPoint lift(const Vec& h);

// u - B(p,u)*p
TangentVector tangent_project(const HyperboloidPoint& p, const Vec& u);

// sqrt(-B(vec,vec)), the Riemannian length of a tangent vector.
double tangent_norm(const TangentVector& v);

// cosh(r)*base + sinh(r)/r * vec with r the tangent norm; output is
// renormalized through the lift so the point invariant holds exactly up to
// rounding.
HyperboloidPoint exp_map(const TangentVector& v);

// Inverse of exp_map along the unique geodesic from p to q.
TangentVector log_map(const HyperboloidPoint& p, const HyperboloidPoint& q);

// Converts the ambient Euclidean gradient of a scalar objective at p into the
// Riemannian gradient: flip the sign of coordinates 1..d, project onto the
// tangent space at p, and negate (the restricted form is negative definite).
// Stepping along exp_map(-eta * result) descends the objective.
TangentVector riemannian_gradient(const HyperboloidPoint& p, const Vec& ambient_grad);

} // namespace dyncls
