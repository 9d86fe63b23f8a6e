#pragma once
/*
 * Conical frequency cutoffs, partitions of unity, the radial cutoff chi_rho
 * and spatial bumps.  The profile everywhere is the quintic smoothstep S.
 *
 * Two-dimensional partition with M axes theta_j = 2 pi j / M, h = 2 pi / M:
 *   phi_j = S(1 - |theta - theta_j| / h)      (hats; S(1-u) + S(u) = 1)
 *   psi_j = S(2 - |theta - theta_j| / h)      (= 1 on supp phi_j)
 * One-dimensional partition: phi_+ = S(xi + 1/2), psi_+ = S(2 xi + 2) and mirrors.
 */

#include <cmath>
#include <numbers>
#include <vector>

#include "grid.hpp"
#include "symbol.hpp"

namespace microsolve {

// Which symbol variables form the frequency vector of a cutoff.
enum class FreqAxes {
    Xi,      // (xi1) or (xi1, xi2)
    TauXi,   // (tau, xi1)
};

using FreqVec = std::array<double, 2>;

inline FreqVec freq_vector(const EvalPoint& p, FreqAxes axes) {
    return axes == FreqAxes::TauXi ? FreqVec{p.tau, p.xi[0]} : FreqVec{p.xi[0], p.xi[1]};
}

// The two symbol variables spanning the frequency plane.
inline std::array<Var, 2> frequency_vars(FreqAxes axes) {
    return axes == FreqAxes::TauXi ? std::array<Var, 2>{var_tau(), var_xi(0)} : std::array<Var, 2>{var_xi(0), var_xi(1)};
}

inline EvalPoint with_frequency(EvalPoint p, FreqAxes axes, FreqVec w) {
    auto vars = frequency_vars(axes);
    p.set(vars[0], w[0]);
    p.set(vars[1], w[1]);
    return p;
}

// |xi/|xi| - xi0| < eps, for xi0 a unit vector in R^dim.
inline bool cone_membership(FreqVec xi, FreqVec xi0, double eps, int dim = 2) {
    const double n = dim == 1 ? std::abs(xi[0]) : std::hypot(xi[0], xi[1]);
    if (n == 0.0) throw DomainError("cone membership is undefined at xi = 0");
    const double d0 = xi[0] / n - xi0[0];
    const double d1 = dim == 1 ? 0.0 : xi[1] / n - xi0[1];
    return std::hypot(d0, d1) < eps;
}

struct ConeCutoff {
    FreqVec axis{1.0, 0.0};
    double aperture = 0.0;
    int dim = 2;
    FreqAxes axes = FreqAxes::Xi;
    double half_width = 0.0;  // angular radius of supp phi (2-D partitions)
    Symbol phi;
    Symbol psi;

    double axis_angle() const { return std::atan2(axis[1], axis[0]); }
};

namespace detail {

inline double wrapped_angle(double a) {
    a = std::remainder(a, two_pi);
    return a;
}

inline Symbol frequency_native(std::function<double(FreqVec)> f, std::string name, FreqAxes axes, int dim) {
    expr::Usage u;
    if (axes == FreqAxes::TauXi) {
        u.tau = true;
        u.xi_dims = 1;
    } else {
        u.xi_dims = dim;
    }
    auto fn = [f, axes](const EvalPoint& p) { return cplx(f(freq_vector(p, axes))); };
    Symbol s = Symbol::native(fn, std::move(name), 0.0, 0.0, true, u);
    s.set_separable({SeparableTerm{[](const EvalPoint&) { return cplx(1.0); }, fn}});
    return s;
}

}  // namespace detail

inline constexpr double max_cone_aperture = 2.0;

inline std::vector<ConeCutoff> build_cone_partition(int dim, double eps, FreqAxes axes = FreqAxes::Xi) {
    if (!(eps > 0.0) || eps > max_cone_aperture) throw DomainError("cone aperture must lie in (0, 2]");
    if (dim != 1 && dim != 2) throw DomainError("cone partitions exist for dimension 1 or 2");
    std::vector<ConeCutoff> out;
    if (dim == 1) {
        for (int sign : {1, -1}) {
            ConeCutoff c;
            c.axis = {double(sign), 0.0};
            c.aperture = eps;
            c.dim = 1;
            c.axes = axes;
            const double s = sign;
            c.phi = detail::frequency_native([s](FreqVec v) { return smoothstep(s * v[0] + 0.5); },
                                             sign > 0 ? "phi_plus" : "phi_minus", axes, 1);
            c.psi = detail::frequency_native([s](FreqVec v) { return smoothstep(2.0 * s * v[0] + 2.0); },
                                             sign > 0 ? "psi_plus" : "psi_minus", axes, 1);
            out.push_back(std::move(c));
        }
        return out;
    }
    const int m = int(std::ceil(two_pi / (eps / 2.0) - 1e-12));
    const double h = two_pi / m;
    for (int j = 0; j < m; ++j) {
        const double theta = two_pi * j / m;
        ConeCutoff c;
        c.axis = {std::cos(theta), std::sin(theta)};
        c.aperture = eps;
        c.dim = 2;
        c.axes = axes;
        c.half_width = h;
        auto angle = [theta](FreqVec v) { return std::abs(detail::wrapped_angle(std::atan2(v[1], v[0]) - theta)); };
        c.phi = detail::frequency_native(
            [angle, h](FreqVec v) {
                if (v[0] == 0.0 && v[1] == 0.0) return 0.0;
                return smoothstep(1.0 - angle(v) / h);
            },
            "phi_" + std::to_string(j), axes, 2);
        c.psi = detail::frequency_native(
            [angle, h](FreqVec v) {
                if (v[0] == 0.0 && v[1] == 0.0) return 0.0;
                return smoothstep(2.0 - angle(v) / h);
            },
            "psi_" + std::to_string(j), axes, 2);
        out.push_back(std::move(c));
    }
    return out;
}

// chi_rho(xi) = S(|xi| / rho - 1), |xi| the full frequency norm.
inline Symbol radial_cutoff(double rho) {
    if (!(rho >= 1.0)) throw DomainError("radial cutoff needs rho >= 1");
    using namespace expr;
    Expr e = func(Op::Step, sub(div(hom(constant(1.0), 1.0), constant(rho)), constant(1.0)));
    return Symbol(e, 0.0, std::nullopt, true, false);
}

namespace detail {
inline Symbol frequency_product(const Symbol& radial, const Symbol& cone_part) {
    Symbol s = symbol_product(radial, cone_part);
    auto fn = [s](const EvalPoint& p) { return s.eval(p); };
    s.set_separable({SeparableTerm{[](const EvalPoint&) { return cplx(1.0); }, fn}});
    return s;
}
}  // namespace detail

// phi_{j,rho} = chi_rho phi_j; phi_j - phi_{j,rho} vanishes for |xi| >= 2 rho.
inline Symbol localized_phi(const Symbol& phi, double rho) { return detail::frequency_product(radial_cutoff(rho), phi); }

// psi_{j,rho} = chi_{rho/2} psi_j, which equals 1 on supp phi_{j,rho}.
inline Symbol localized_psi(const Symbol& psi, double rho) {
    if (!(rho >= 2.0)) throw DomainError("localized psi needs rho >= 2");
    return detail::frequency_product(radial_cutoff(rho / 2.0), psi);
}

// ---------------------------------------------------------------------------
// Spatial bumps

// 1 on r <= 1, 0 on r >= 2.
inline double bump_profile(double r) { return 1.0 - smoothstep(r - 1.0); }

// Periodic distance from x to c on the torus (Euclidean over the grid axes).
inline double periodic_distance(Point x, Point c, int dim) {
    double acc = 0;
    for (int j = 0; j < dim; ++j) {
        double d = detail::wrapped_angle(x[j] - c[j]);
        acc += d * d;
    }
    return std::sqrt(acc);
}

struct SpatialBump {
    Point center{0.0, 0.0};
    double delta = 0.0;
    GridFunction values;
};

inline SpatialBump spatial_bump(const TorusGrid& g, Point center, double delta) {
    if (!(delta > 0.0) || !(2.0 * delta < std::numbers::pi)) throw DomainError("bump does not fit in the torus: need 0 < 2 delta < pi");
    SpatialBump b{center, delta, GridFunction(g)};
    for (std::size_t k = 0; k < g.size(); ++k)
        b.values.values[k] = bump_profile(periodic_distance(g.point(k), center, g.dim()) / delta);
    return b;
}

}  // namespace microsolve
