#pragma once
/*
 * Per-cone reduction P b = a Q + R for a real-principal-type symbol.
 *
 * On a two-dimensional frequency plane (tau, xi1) or (xi1, xi2) with a
 * time-like variable w1 and a transverse variable w2:
 *   A_j   = d_{w_j} p_m / m                    (Euler: sum A_j w_j = p_m)
 *   b     = chi_b / |A_1(frozen)| + (1 - chi_b) <w>^{1-m}
 *   sym1  = p_m / A_1 = q (w1 + r(w2)),        r = -side * root(side) * w2
 *   a     = b p_m / (w1 + r)
 *   R0    = [p_{m-1} b + i sum_j d_{w_j} a d_{y_j} r] / a
 *         = q0 (w1 + r) + r0(w2)
 *   Q     = D_{y1} + rho(y) D_{y2} + r0,       rho = r / w2
 * with y_j the position variable dual to w_j.  Cones on which p_m has no
 * zero are elliptic and skip the preparation.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <vector>

#include "cutoffs.hpp"
#include "grid.hpp"
#include "quantization.hpp"
#include "symbol.hpp"

namespace microsolve {

// Position, time and jet values at which coefficients are frozen.
struct BasePoint {
    double t = 0.0;
    Point x{0.0, 0.0};
    std::vector<cplx> jet;

    EvalPoint eval_point() const {
        EvalPoint p;
        p.t = t;
        p.x = x;
        p.jet = jet;
        return p;
    }
};

enum class ConeKind { Characteristic, Elliptic };

inline const char* cone_kind_name(ConeKind k) { return k == ConeKind::Characteristic ? "characteristic" : "elliptic"; }

struct PrincipalTypeReport {
    ConeKind kind = ConeKind::Elliptic;
    double lower_bound = 0.0;  // inf |grad p_m| (characteristic) or inf |p_m| (elliptic) on the slice
    double min_abs = 0.0;
    double min_grad = 0.0;
};

struct ADecomposition {
    std::vector<Var> vars;
    std::vector<Symbol> A;
};

// Coordinate order on the frequency plane; sign is that of A at the chosen index.
struct SignedPermutation {
    std::array<int, 2> order{0, 1};
    std::array<int, 2> sign{1, 1};
    bool identity() const { return order[0] == 0 && sign[0] == 1 && sign[1] == 1; }
};

// Which plane variable plays the role of time.
struct PlaneFrame {
    FreqAxes axes = FreqAxes::TauXi;
    int time_index = 0;

    Var time_var() const { return frequency_vars(axes)[time_index]; }
    Var other_var() const { return frequency_vars(axes)[1 - time_index]; }
};

inline Var dual_position(Var w) {
    if (w.kind == VarKind::Tau) return var_t();
    return var_x(w.index);
}

namespace detail {

inline expr::Usage merge_usage(expr::Usage a, const expr::Usage& b) {
    a.t |= b.t;
    a.tau |= b.tau;
    a.absxi |= b.absxi;
    a.hom |= b.hom;
    a.x_dims = std::max(a.x_dims, b.x_dims);
    a.xi_dims = std::max(a.xi_dims, b.xi_dims);
    a.jet_arity = std::max(a.jet_arity, b.jet_arity);
    return a;
}

inline expr::Usage plane_usage(FreqAxes axes) {
    expr::Usage u;
    if (axes == FreqAxes::TauXi) {
        u.tau = true;
        u.xi_dims = 1;
    } else {
        u.xi_dims = 2;
    }
    return u;
}

// Angular radius of the sampled slice.
inline double slice_half_angle(const ConeCutoff& c) {
    if (c.half_width > 0.0) return c.half_width;
    return 2.0 * std::asin(std::min(1.0, c.aperture / 2.0));
}

inline std::vector<FreqVec> cone_slice(const ConeCutoff& c, int samples = 129) {
    if (c.dim == 1) return {c.axis};
    std::vector<FreqVec> out;
    const double th = c.axis_angle(), h = slice_half_angle(c);
    for (int k = 0; k < samples; ++k) {
        double a = th - h + 2.0 * h * k / (samples - 1);
        out.push_back({std::cos(a), std::sin(a)});
    }
    return out;
}

inline double angle_between(FreqVec a, FreqVec b) {
    return std::abs(std::remainder(std::atan2(a[1], a[0]) - std::atan2(b[1], b[0]), two_pi));
}

inline double plane_norm(const EvalPoint& p, FreqAxes axes) {
    auto w = freq_vector(p, axes);
    return std::hypot(w[0], w[1]);
}

inline Symbol quotient(const Symbol& a, const Symbol& b, double order, std::optional<double> hom) {
    if (a.is_expression() && b.is_expression())
        return Symbol(expr::div(a.expression(), b.expression()), order, hom, false, false);
    return Symbol::native([a, b](const EvalPoint& p) { return a.eval(p) / b.eval(p); },
                          "(" + a.expression_string() + ")/(" + b.expression_string() + ")", order, hom, false,
                          merge_usage(a.usage(), b.usage()));
}

}  // namespace detail

inline PrincipalTypeReport check_principal_type(const Symbol& p_m, const BasePoint& base, const ConeCutoff& cone,
                                                double tol = 1e-6) {
    if (!p_m.homogeneous_degree()) throw DomainError("principal symbol must be homogeneous");
    auto vars = frequency_vars(cone.axes);
    Symbol d0 = differentiate_symbol(p_m, vars[0]), d1 = differentiate_symbol(p_m, vars[1]);
    auto slice = detail::cone_slice(cone);
    EvalPoint p0 = base.eval_point();
    PrincipalTypeReport rep;
    rep.min_abs = rep.min_grad = std::numeric_limits<double>::infinity();
    bool zero = false;
    double prev = 0.0;
    for (std::size_t k = 0; k < slice.size(); ++k) {
        EvalPoint p = with_frequency(p0, cone.axes, slice[k]);
        cplx v = p_m.eval(p);
        double g = std::hypot(std::abs(d0.eval(p)), std::abs(d1.eval(p)));
        rep.min_abs = std::min(rep.min_abs, std::abs(v));
        rep.min_grad = std::min(rep.min_grad, g);
        if (std::abs(v) < 1e-12 * std::max(1.0, g)) zero = true;
        if (k > 0 && prev * v.real() < 0.0) zero = true;
        if (std::abs(v) < tol && g < tol) throw DomainError("principal type violated: p_m and its gradient both vanish");
        prev = v.real();
    }
    rep.kind = zero ? ConeKind::Characteristic : ConeKind::Elliptic;
    rep.lower_bound = zero ? rep.min_grad : rep.min_abs;
    if (zero && rep.min_grad < tol) throw DomainError("principal type violated: gradient degenerates on the characteristic set");
    return rep;
}

// A_j = d_{w_j} p_m / m over the given frequency variables, checked against Euler's identity.
inline ADecomposition a_decomposition(const Symbol& p_m, std::vector<Var> vars = {}) {
    auto hom = p_m.homogeneous_degree();
    if (!hom || *hom < 1.0) throw DomainError("A-decomposition needs p_m homogeneous of degree m >= 1");
    const double m = *hom;
    if (vars.empty()) {
        if (p_m.usage().tau) vars.push_back(var_tau());
        for (int i = 0; i < p_m.usage().xi_dims; ++i) vars.push_back(var_xi(i));
    }
    ADecomposition out{vars, {}};
    for (Var w : vars) {
        Symbol d = differentiate_symbol(p_m, w);
        out.A.push_back(symbol_scale(d, 1.0 / m));
    }
    std::mt19937 gen(7);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<cplx> jet(std::max(1, p_m.jet_arity()));
    for (int s = 0; s < 64; ++s) {
        EvalPoint p;
        p.t = 3 * u(gen);
        p.x = {3 * u(gen), 3 * u(gen)};
        for (auto& j : jet) j = u(gen);
        p.jet = jet;
        for (Var w : vars) p.set(w, 10 * u(gen));
        if (p.freq_norm2() < 1e-6) continue;
        cplx acc = 0.0, ref;
        try {
            ref = p_m.eval(p);
            for (std::size_t j = 0; j < vars.size(); ++j) acc += out.A[j].eval(p) * p.get(vars[j]);
        } catch (const DomainError&) {
            continue;
        }
        if (std::abs(acc - ref) > 1e-10 * std::max(1.0, std::abs(ref)))
            throw ConstructionError("Euler identity fails: p_m is not homogeneous of its declared degree");
    }
    return out;
}

// Signed permutation placing the dominant |A_j(xi0)| first (or the preferred index when it is
// within a factor 4 of the maximum).
inline SignedPermutation choose_time_direction(const std::vector<Symbol>& A, const BasePoint& base,
                                               std::span<const Var> vars, std::span<const double> xi0,
                                               int preferred = -1, double threshold = 1e-8) {
    if (A.size() != 2 || vars.size() != 2 || xi0.size() != 2)
        throw DimensionMismatch("time direction is chosen on a two-dimensional frequency plane");
    EvalPoint p = base.eval_point();
    for (int j = 0; j < 2; ++j) p.set(vars[j], xi0[j]);
    std::array<double, 2> val{A[0].eval(p).real(), A[1].eval(p).real()};
    int best = std::abs(val[1]) > std::abs(val[0]) ? 1 : 0;
    if (preferred >= 0 && std::abs(val[preferred]) >= 0.25 * std::abs(val[best])) best = preferred;
    const double norm = std::hypot(xi0[0], xi0[1]);
    if (!(std::abs(val[best]) > threshold * std::max(1.0, norm)))
        throw ConstructionError("no dominant direction: all A_j vanish at the cone axis");
    SignedPermutation out;
    out.order = {best, 1 - best};
    out.sign = {val[best] < 0 ? -1 : 1, 1};
    return out;
}

// b = chi_b / |A_1(frozen)| + (1 - chi_b) <w>^{1-m}, positive and elliptic of order 1 - m.
inline Symbol build_b(const Symbol& A1, const BasePoint& base, const ConeCutoff& cone, double m) {
    auto frozen = std::make_shared<BasePoint>(base);
    auto slice = detail::cone_slice(cone);
    double peak = 0.0;
    for (auto w : slice) {
        EvalPoint p = with_frequency(frozen->eval_point(), cone.axes, w);
        peak = std::max(peak, std::abs(A1.eval(p)));
    }
    if (!(peak > 0.0)) throw ConstructionError("A_1 vanishes on the whole cone");
    const double c = 0.25 * peak;
    const Symbol psi = cone.psi;
    const FreqAxes axes = cone.axes;
    auto fn = [A1, frozen, psi, axes, c, m](const EvalPoint& q) {
        auto w = freq_vector(q, axes);
        const double n = std::hypot(w[0], w[1]);
        const double bessel = std::pow(1.0 + n * n, 0.5 * (1.0 - m));
        if (n == 0.0) return cplx(bessel);
        EvalPoint p = with_frequency(frozen->eval_point(), axes, w);
        const double a = std::abs(A1.eval(p));
        const double chi = psi.eval(q).real() * smoothstep(a / (c * std::pow(n, m - 1.0)) - 1.0);
        if (chi == 0.0) return cplx(bessel);
        return cplx(chi / a + (1.0 - chi) * bessel);
    };
    Symbol b = Symbol::native(fn, "b", 1.0 - m, std::nullopt, true, detail::plane_usage(axes));
    b.set_separable({SeparableTerm{[](const EvalPoint&) { return cplx(1.0); }, fn}});
    // Ellipticity on rings |w| in [8, 64].
    for (double radius : {8.0, 16.0, 32.0, 64.0})
        for (int k = 0; k < 64; ++k) {
            double th = two_pi * k / 64;
            EvalPoint p = with_frequency(EvalPoint{}, axes, {radius * std::cos(th), radius * std::sin(th)});
            double v = b.eval(p).real() * std::pow(1.0 + radius * radius, 0.5 * (m - 1.0));
            if (!(v > 1e-6) || !std::isfinite(v)) throw ConstructionError("b lower bound violated on samples");
        }
    return b;
}

// Range of b <w>^{m-1} over lattice rings |w| in {8, ..., 64}.
inline std::pair<double, double> b_bounds(const Symbol& b, FreqAxes axes, double m) {
    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
    for (int radius = 8; radius <= 64; radius *= 2)
        for (int k = 0; k < 256; ++k) {
            double th = two_pi * k / 256;
            EvalPoint p = with_frequency(EvalPoint{}, axes, {radius * std::cos(th), radius * std::sin(th)});
            double v = b.eval(p).real() * std::pow(1.0 + double(radius) * radius, 0.5 * (m - 1.0));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    return {lo, hi};
}

// ---------------------------------------------------------------------------
// Malgrange preparation and division

struct Preparation {
    PlaneFrame frame;
    int side = 1;  // sign of the transverse variable on the cone
    Symbol sym1;
    Symbol q;
    Symbol r;
    Symbol rate;  // rho = r / w2, independent of the frequency

    // Root w1 of sym1 at transverse value w2 = side.
    std::function<double(const EvalPoint&)> unit_root;
};

namespace detail {

inline double newton_root(const Symbol& f, const Symbol& df, EvalPoint p, Var w1, double guess, int max_steps = 50) {
    double x = guess;
    for (int it = 0; it < max_steps; ++it) {
        p.set(w1, x);
        cplx v = f.eval(p), d = df.eval(p);
        if (!std::isfinite(v.real()) || !std::isfinite(d.real()) || d.real() == 0.0) break;
        double step = v.real() / d.real();
        const double cap = 0.5 * (1.0 + std::abs(x));
        if (std::abs(step) > cap) step = std::copysign(cap, step);
        x -= step;
        if (std::abs(step) <= 1e-15 * (1.0 + std::abs(x))) return x;
    }
    // Accept when the residual is at round-off level even if the step test was not met.
    p.set(w1, x);
    if (std::abs(f.eval(p)) < 1e-12) return x;
    throw ConvergenceError("Newton root search did not converge in " + std::to_string(max_steps) + " steps");
}

}  // namespace detail

inline Preparation malgrange_prepare(const Symbol& sym1, const ConeCutoff& cone, PlaneFrame frame = {}) {
    frame.axes = cone.axes;
    const Var w1 = frame.time_var(), w2 = frame.other_var();
    const double a1 = cone.axis[frame.time_index], a2 = cone.axis[1 - frame.time_index];
    if (std::abs(a2) < 1e-12) throw ConstructionError("cone axis has no transverse component; the root is not time-like");
    Preparation prep;
    prep.frame = frame;
    prep.side = a2 > 0 ? 1 : -1;
    prep.sym1 = sym1;
    const int side = prep.side;
    Symbol d1 = differentiate_symbol(sym1, w1);
    const double guess = side * a1 / a2;
    const double max_angle = std::max(2.0 * detail::slice_half_angle(cone), 2.0 * std::asin(std::min(1.0, cone.aperture / 2.0)));
    const FreqVec axis = cone.axis;
    const int ti = frame.time_index;
    auto root = [sym1, d1, w1, w2, side, guess, max_angle, axis, ti](const EvalPoint& q) {
        EvalPoint p = q;
        p.set(w2, double(side));
        double x = detail::newton_root(sym1, d1, p, w1, guess);
        FreqVec dir{};
        dir[ti] = x;
        dir[1 - ti] = side;
        if (detail::angle_between(dir, axis) > max_angle + 1e-12) throw ConstructionError("root leaves the cone");
        return x;
    };
    prep.unit_root = root;
    const expr::Usage usage = detail::merge_usage(sym1.usage(), detail::plane_usage(cone.axes));
    prep.rate = Symbol::native([root, side](const EvalPoint& q) { return cplx(-side * root(q)); }, "rho", 0.0, 0.0, true,
                               usage);
    prep.r = Symbol::native([root, side, w2](const EvalPoint& q) { return cplx(-side * root(q) * q.get(w2)); }, "r", 1.0,
                            1.0, true, usage);
    Symbol r = prep.r;
    const FreqAxes axes = cone.axes;
    prep.q = Symbol::native(
        [sym1, d1, r, w1, axes](const EvalPoint& q) {
            const double shift = q.get(w1) + r.eval(q).real();
            const double n = detail::plane_norm(q, axes);
            if (std::abs(shift) >= 1e-6 * n) return sym1.eval(q) / shift;
            // Removable singularity: derivative at the midpoint between w1 and the root.
            EvalPoint mid = q;
            mid.set(w1, q.get(w1) - 0.5 * shift);
            return d1.eval(mid);
        },
        "q", 0.0, 0.0, false, usage);
    return prep;
}

struct Division {
    Symbol q0;
    Symbol r0;
    double residual = 0.0;  // sampled |q0 (w1 + r) + r0 - R0|
};

inline Division malgrange_divide(const Symbol& R0, const Preparation& prep, const ConeCutoff& cone,
                                 std::span<const BasePoint> samples = {}) {
    const Var w1 = prep.frame.time_var();
    const Symbol r = prep.r;
    const expr::Usage usage = detail::merge_usage(R0.usage(), prep.r.usage());
    Division out;
    const Var w2 = prep.frame.other_var();
    const int side = prep.side;
    out.r0 = Symbol::native(
        [R0, r, w1, w2, side](const EvalPoint& q) {
            EvalPoint p = q;
            // Degree-0 in w2: the value at w2 = 0 is the limit from the cone side.
            if (p.get(w2) == 0.0) p.set(w2, double(side));
            p.set(w1, -r.eval(p).real());
            return R0.eval(p);
        },
        "r0", 0.0, std::nullopt, false, usage);
    const Symbol r0 = out.r0;
    const FreqAxes axes = cone.axes;
    out.q0 = Symbol::native(
        [R0, r, r0, w1, axes](const EvalPoint& q) {
            const double shift = q.get(w1) + r.eval(q).real();
            const double n = std::max(1.0, detail::plane_norm(q, axes));
            if (std::abs(shift) >= 1e-6 * n) return (R0.eval(q) - r0.eval(q)) / shift;
            EvalPoint a = q, b = q;
            const double mid = q.get(w1) - 0.5 * shift, h = 1e-4 * n;
            a.set(w1, mid + h);
            b.set(w1, mid - h);
            return (R0.eval(a) - R0.eval(b)) / (2.0 * h);
        },
        "q0", -1.0, std::nullopt, false, usage);
    // Resubstitution on the cone.
    std::vector<BasePoint> pts(samples.begin(), samples.end());
    if (pts.empty()) pts.push_back(BasePoint{0.0, {0.0, 0.0}, std::vector<cplx>(std::max(1, usage.jet_arity))});
    auto slice = detail::cone_slice(cone, 33);
    for (const auto& bp : pts)
        for (double radius : {1.0, 4.0, 16.0, 64.0})
            for (auto w : slice) {
                EvalPoint p = with_frequency(bp.eval_point(), axes, {radius * w[0], radius * w[1]});
                cplx lhs = out.q0.eval(p) * (p.get(w1) + r.eval(p).real()) + r0.eval(p), rhs = R0.eval(p);
                out.residual = std::max(out.residual, std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs)));
            }
    if (!(out.residual < 1e-9)) throw ConstructionError("division identity fails on the cone");
    return out;
}

// ---------------------------------------------------------------------------
// Assembled decomposition

struct NormalFormOptions {
    int preferred_time_index = -1;    // plane index to favour as time direction
    int probe_modes = 128;            // grid for the remainder probe
    double probe_width = 0.5;         // Gaussian packet width
    std::vector<double> probe_lambdas{8.0, 16.0, 32.0};
};

struct NormalFormDecomposition {
    ConeCutoff cone;
    ConeKind kind = ConeKind::Elliptic;
    PrincipalTypeReport principal;
    SignedPermutation rotation;
    PlaneFrame frame;
    int m = 1;
    ADecomposition euler;
    Symbol a;                 // order 0 for characteristic cones; p_m + p_{m-1} for elliptic ones
    Symbol b;
    std::vector<Symbol> A;    // transverse coefficient of Q (independent of the time frequency)
    Symbol A0;
    Symbol q, r, q0, r0;
    Symbol Q;                 // w1 + r + r0
    std::optional<Preparation> preparation;
    double division_residual = 0.0;
    std::function<double(double)> remainder_probe;
    std::vector<double> probe_ratios;
    double probe_slope = 0.0;
};

namespace detail {

inline double loglog_slope(std::span<const double> x, std::span<const double> y) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(y[i] > 0.0)) continue;
        lx.push_back(std::log(x[i]));
        ly.push_back(std::log(y[i]));
    }
    if (lx.size() < 2) return -std::numeric_limits<double>::infinity();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        mx += lx[i];
        my += ly[i];
    }
    mx /= lx.size();
    my /= lx.size();
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    return sxy / sxx;
}

// Relative size of the frozen multiplier R(w) on a Gaussian packet of frequency lam * dir.
inline double packet_probe(const std::function<cplx(FreqVec)>& remainder, FreqVec dir, double lam, int modes,
                           double width) {
    TorusGrid g(2, modes);
    GridFunction u(g);
    for (std::size_t k = 0; k < g.size(); ++k) {
        Point z = g.centered_point(k);
        double r2 = z[0] * z[0] + z[1] * z[1];
        u.values[k] = std::exp(-0.5 * r2 / (width * width)) * std::polar(1.0, lam * (dir[0] * z[0] + dir[1] * z[1]));
    }
    auto s = forward_transform(u);
    double num = 0, den = 0;
    for (std::size_t q = 0; q < g.size(); ++q) {
        double w2 = std::norm(s.coeffs[q]);
        if (w2 < 1e-30) continue;
        auto f = g.freq(q);
        if (f[0] == 0 && f[1] == 0) continue;
        num += std::norm(remainder({double(f[0]), double(f[1])})) * w2;
        den += w2;
    }
    return den > 0 ? std::sqrt(num / den) : 0.0;
}

}  // namespace detail

inline NormalFormDecomposition build_normal_form(const Symbol& p_m, const Symbol& p_sub, const BasePoint& base,
                                                 const ConeCutoff& cone, const NormalFormOptions& opts = {}) {
    NormalFormDecomposition nf;
    nf.cone = cone;
    nf.principal = with_stage("principal-type", [&] { return check_principal_type(p_m, base, cone); });
    const double m = *p_m.homogeneous_degree();
    nf.m = int(std::lround(m));
    auto vars = frequency_vars(cone.axes);
    nf.euler = with_stage("a-decomposition", [&] { return a_decomposition(p_m, {vars[0], vars[1]}); });
    nf.kind = nf.principal.kind;
    if (nf.kind == ConeKind::Elliptic) {
        nf.a = detail::symbol_sum(p_m, p_sub, m);
        nf.b = Symbol::constant(1.0);
        nf.A0 = nf.q = nf.r = nf.q0 = nf.r0 = nf.Q = Symbol::constant(0.0);
        return nf;
    }
    std::array<double, 2> axis{cone.axis[0], cone.axis[1]};
    nf.rotation = with_stage("time-direction", [&] {
        return choose_time_direction(nf.euler.A, base, vars, axis, opts.preferred_time_index);
    });
    nf.frame = PlaneFrame{cone.axes, nf.rotation.order[0]};
    const Var w1 = nf.frame.time_var(), w2 = nf.frame.other_var();
    const Symbol A1 = nf.euler.A[nf.frame.time_index];
    nf.b = with_stage("build-b", [&] { return build_b(A1, base, cone, m); });
    Symbol sym1 = detail::quotient(p_m, A1, 1.0, 1.0);
    auto prep = with_stage("prepare", [&] { return malgrange_prepare(sym1, cone, nf.frame); });
    nf.q = prep.q;
    nf.r = prep.r;
    nf.A = {prep.rate};

    // a = b p_m / (w1 + r), with the removable singularity handled at the midpoint.
    const Symbol b = nf.b, r = prep.r;
    Symbol dp = differentiate_symbol(p_m, w1);
    const FreqAxes axes = cone.axes;
    const expr::Usage usage = detail::merge_usage(detail::merge_usage(p_m.usage(), p_sub.usage()), detail::plane_usage(axes));
    Symbol a_main = Symbol::native(
        [p_m, dp, b, r, w1, axes](const EvalPoint& q) {
            const double shift = q.get(w1) + r.eval(q).real();
            const double n = detail::plane_norm(q, axes);
            if (std::abs(shift) > 1e-6 * n) return b.eval(q) * p_m.eval(q) / shift;
            EvalPoint mid = q;
            mid.set(w1, q.get(w1) - 0.5 * shift);
            return b.eval(q) * dp.eval(mid);
        },
        "a", 0.0, std::nullopt, false, usage);

    // R0 = [p_sub b + i sum_j d_{w_j} a d_{y_j} r] / a at frozen jets.
    const Var y1 = dual_position(w1), y2 = dual_position(w2);
    Symbol R0 = Symbol::native(
        [a_main, p_sub, b, r, w1, w2, y1, y2, axes](const EvalPoint& q) {
            const double n = std::max(1.0, detail::plane_norm(q, axes));
            auto d = [&](const Symbol& s, Var v, double h) {
                EvalPoint hi = q, lo = q;
                hi.set(v, q.get(v) + h);
                lo.set(v, q.get(v) - h);
                return (s.eval(hi) - s.eval(lo)) / (2.0 * h);
            };
            const double hw = 1e-4 * n, hy = 1e-5;
            cplx corr = d(a_main, w1, hw) * d(r, y1, hy) + d(a_main, w2, hw) * d(r, y2, hy);
            return (p_sub.eval(q) * b.eval(q) + cplx(0.0, 1.0) * corr) / a_main.eval(q);
        },
        "R0", 0.0, std::nullopt, false, usage);

    std::vector<BasePoint> samples{base};
    auto div = with_stage("divide", [&] { return malgrange_divide(R0, prep, cone, samples); });
    nf.q0 = div.q0;
    nf.r0 = div.r0;
    nf.A0 = div.r0;
    nf.division_residual = div.residual;
    const Symbol q0 = div.q0, r0 = div.r0;
    nf.a = Symbol::native([a_main, q0](const EvalPoint& q) { return a_main.eval(q) * (1.0 + q0.eval(q)); }, "a", 0.0,
                          std::nullopt, false, usage);
    nf.Q = Symbol::native([r, r0, w1](const EvalPoint& q) { return q.get(w1) + r.eval(q) + r0.eval(q); }, "Q", 1.0,
                          std::nullopt, false, usage);
    nf.preparation = prep;

    // Remainder probe psi_cone R on packets, coefficients frozen at the base point.
    auto frozen = std::make_shared<BasePoint>(base);
    const Symbol a = nf.a, Q = nf.Q;
    const Symbol psi = cone.psi;
    auto remainder = [frozen, p_m, p_sub, a, b, Q, psi, axes](FreqVec w) {
        EvalPoint p = with_frequency(frozen->eval_point(), axes, w);
        const double weight = psi.eval(p).real();
        if (weight == 0.0) return cplx(0.0);
        return weight * ((p_m.eval(p) + p_sub.eval(p)) * b.eval(p) - a.eval(p) * Q.eval(p));
    };
    const double root = prep.unit_root(base.eval_point());
    FreqVec dir{};
    dir[nf.frame.time_index] = root;
    dir[1 - nf.frame.time_index] = prep.side;
    const double dn = std::hypot(dir[0], dir[1]);
    dir = {dir[0] / dn, dir[1] / dn};
    const int modes = opts.probe_modes;
    const double width = opts.probe_width;
    nf.remainder_probe = [remainder, dir, modes, width](double lam) {
        return detail::packet_probe(remainder, dir, lam, modes, width);
    };
    for (double lam : opts.probe_lambdas) nf.probe_ratios.push_back(nf.remainder_probe(lam));
    nf.probe_slope = detail::loglog_slope(opts.probe_lambdas, nf.probe_ratios);
    return nf;
}

// Largest deviation from the real structure: A_j real symbols, and i r, i r0 real symbols
// (Q = D_t + ... maps real functions to imaginary ones, so i Q is the real operator).
inline double real_structure_defect(const NormalFormDecomposition& nf, const BasePoint& base) {
    if (nf.kind == ConeKind::Elliptic) return 0.0;
    double worst = 0.0;
    auto slice = detail::cone_slice(nf.cone, 17);
    const cplx i(0.0, 1.0);
    for (double radius : {2.0, 8.0, 32.0})
        for (auto w : slice) {
            EvalPoint p = with_frequency(base.eval_point(), nf.cone.axes, {radius * w[0], radius * w[1]});
            EvalPoint n = with_frequency(base.eval_point(), nf.cone.axes, {-radius * w[0], -radius * w[1]});
            for (const auto& A : nf.A) worst = std::max(worst, std::abs(A.eval(p) - std::conj(A.eval(n))));
            worst = std::max(worst, std::abs(i * nf.r.eval(p) - std::conj(i * nf.r.eval(n))) / radius);
            worst = std::max(worst, std::abs(i * nf.r0.eval(p) - std::conj(i * nf.r0.eval(n))));
        }
    return worst;
}

}  // namespace microsolve
