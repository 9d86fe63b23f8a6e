#pragma once
/*
 * Reference oracles independent of the spectral stack:
 *   characteristics_reference      u_t + c(u) u_x = g(t, x) by RK4 shooting along characteristics
 *   finite_difference_reference    u_tt = A(t, x, u) u_xx + B u_t + G by a centred second-order scheme
 * Each oracle runs at three resolutions and must pass its own self-convergence
 * test before its finest solution is returned.  manufacture() computes
 * forcings with the library's own quantization (for convergence tests only).
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "grid.hpp"
#include "parallel.hpp"
#include "quantization.hpp"
#include "symbol.hpp"

namespace microsolve {

struct ReferenceSolution {
    SpaceTimeFunction u;
    std::string method;
    int declared_order = 0;
    std::array<double, 2> window_t{0.0, 0.0};
    double error_estimate = 0.0;  // Richardson estimate for the finest level
    double observed_order = 0.0;  // from the three-level self-convergence test
    bool self_converged = false;
};

namespace detail {

inline double max_difference(const std::vector<std::vector<cplx>>& a, const std::vector<std::vector<cplx>>& b) {
    double m = 0.0;
    for (std::size_t n = 0; n < a.size(); ++n)
        for (std::size_t k = 0; k < a[n].size(); ++k) m = std::max(m, std::abs(a[n][k] - b[n][k]));
    return m;
}

inline double max_magnitude(const std::vector<std::vector<cplx>>& a) {
    double m = 0.0;
    for (auto& row : a)
        for (auto& v : row) m = std::max(m, std::abs(v));
    return m;
}

// Three-level self-convergence on values sampled at common points.
inline ReferenceSolution finish_reference(const TorusGrid& g, const std::vector<double>& t_nodes,
                                          const std::array<std::vector<std::vector<cplx>>, 3>& levels,
                                          std::string method, int order) {
    ReferenceSolution ref;
    ref.method = std::move(method);
    ref.declared_order = order;
    ref.window_t = {*std::min_element(t_nodes.begin(), t_nodes.end()), *std::max_element(t_nodes.begin(), t_nodes.end())};
    const double d1 = max_difference(levels[0], levels[1]);
    const double d2 = max_difference(levels[1], levels[2]);
    const double floor = 1e-12 * std::max(1.0, max_magnitude(levels[2]));
    if (d1 <= floor) {
        ref.observed_order = std::numeric_limits<double>::infinity();
        ref.self_converged = true;
        ref.error_estimate = d2;
    } else {
        ref.observed_order = d2 > 0.0 ? std::log2(d1 / d2) : std::numeric_limits<double>::infinity();
        ref.self_converged = ref.observed_order >= order - 0.5 || d2 <= floor;
        ref.error_estimate = d2 / (std::pow(2.0, order) - 1.0);
    }
    if (!ref.self_converged)
        throw ConvergenceError(ref.method + " oracle failed its self-convergence test (observed order " +
                               std::to_string(ref.observed_order) + ")");
    std::vector<GridFunction> slices;
    for (auto& row : levels[2]) slices.emplace_back(g, row);
    ref.u = SpaceTimeFunction(g, t_nodes, std::move(slices));
    return ref;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Method of characteristics

struct TransportSpec {
    std::function<double(double)> speed;                       // c(u)
    std::function<double(double, double)> source;              // g(t, x); empty means 0
    std::function<double(double)> initial;                     // u(0, x)
};

struct CharacteristicsOptions {
    int steps_per_unit = 100;  // RK4 steps per unit time at the coarsest level
    double min_jacobian = 0.1;
};

namespace detail {

struct CharState {
    double x, u;
};

// RK4 for x' = c(u), u' = g(t, x) from t0 to t1 in the given number of steps.
inline CharState integrate_characteristic(const TransportSpec& spec, CharState s, double t0, double t1, int steps) {
    const double h = (t1 - t0) / steps;
    auto field = [&](double t, CharState q) {
        return CharState{spec.speed(q.u), spec.source ? spec.source(t, q.x) : 0.0};
    };
    for (int i = 0; i < steps; ++i) {
        const double t = t0 + i * h;
        auto k1 = field(t, s);
        auto k2 = field(t + 0.5 * h, {s.x + 0.5 * h * k1.x, s.u + 0.5 * h * k1.u});
        auto k3 = field(t + 0.5 * h, {s.x + 0.5 * h * k2.x, s.u + 0.5 * h * k2.u});
        auto k4 = field(t + h, {s.x + h * k3.x, s.u + h * k3.u});
        s.x += h / 6.0 * (k1.x + 2 * k2.x + 2 * k3.x + k4.x);
        s.u += h / 6.0 * (k1.u + 2 * k2.u + 2 * k3.u + k4.u);
    }
    return s;
}

// Value at (t, x) by shooting: find u_end with backward characteristic landing on the initial data.
inline double shoot_characteristic(const TransportSpec& spec, double t, double x, int steps_per_unit,
                                   double min_jacobian) {
    if (t == 0.0) return spec.initial(x);
    const int steps = std::max(1, int(std::ceil(std::abs(t) * steps_per_unit)));
    auto mismatch = [&](double u_end) {
        CharState foot = integrate_characteristic(spec, {x, u_end}, t, 0.0, steps);
        return std::pair{foot.u - spec.initial(foot.x), foot.x};
    };
    double a = spec.initial(x), b = a + 1e-3 * std::max(1.0, std::abs(a));
    double fa = mismatch(a).first, fb = mismatch(b).first;
    for (int it = 0; it < 60 && std::abs(fb) > 1e-15 * std::max(1.0, std::abs(b)); ++it) {
        if (fb == fa) break;
        const double c = b - fb * (b - a) / (fb - fa);
        a = b;
        fa = fb;
        b = c;
        fb = mismatch(b).first;
    }
    if (!(std::abs(fb) <= 1e-12 * std::max(1.0, std::abs(b))))
        throw ConvergenceError("characteristic shooting did not converge");
    // Jacobian of the forward characteristic map at the foot point.
    const double foot = mismatch(b).second;
    const double eta = 1e-5;
    auto forward = [&](double x0) { return integrate_characteristic(spec, {x0, spec.initial(x0)}, 0.0, t, steps).x; };
    const double jac = (forward(foot + eta) - forward(foot - eta)) / (2 * eta);
    if (jac < min_jacobian) throw DomainError("characteristic crossing detected");
    return b;
}

}  // namespace detail

inline ReferenceSolution characteristics_reference(const TransportSpec& spec, const TorusGrid& g,
                                                   const std::vector<double>& t_nodes,
                                                   const CharacteristicsOptions& opts = {}) {
    if (g.dim() != 1) throw DomainError("characteristics oracle is one-dimensional");
    if (!spec.speed || !spec.initial) throw DomainError("transport spec needs a speed rule and initial data");
    if (t_nodes.empty()) throw DomainError("characteristics oracle needs time nodes");
    std::array<std::vector<std::vector<cplx>>, 3> levels;
    for (int level = 0; level < 3; ++level) {
        const int spu = opts.steps_per_unit << level;
        auto& rows = levels[level];
        rows.assign(t_nodes.size(), std::vector<cplx>(g.size()));
        parallel_for(t_nodes.size() * g.size(), [&](std::size_t idx) {
            const std::size_t n = idx / g.size(), k = idx % g.size();
            rows[n][k] = detail::shoot_characteristic(spec, t_nodes[n], g.point(k)[0], spu, opts.min_jacobian);
        }, 64);
    }
    return detail::finish_reference(g, t_nodes, levels, "characteristics", 4);
}

// ---------------------------------------------------------------------------
// Finite differences for second-order problems

struct WaveSpec {
    std::function<cplx(double t, double x, cplx u)> coefficient;  // A, needs Re A > 0
    std::function<cplx(double t, double x)> damping;              // B; empty means 0
    std::function<cplx(double t, double x)> source;               // G; empty means 0
    std::function<cplx(double x)> initial;                        // u(0, x)
    std::function<cplx(double x)> initial_rate;                   // u_t(0, x); empty means 0
};

struct FiniteDifferenceOptions {
    int refinement = 4;  // fine points per output grid point at the coarsest level
    double cfl = 0.5;
};

namespace detail {

// One level: centred differences on m points, marching from t = 0 forwards and backwards.
inline std::vector<std::vector<cplx>> wave_march(const WaveSpec& spec, int m, int stride,
                                                 const std::vector<double>& targets, double cfl) {
    const double h = two_pi / m;
    std::vector<double> x(m);
    for (int k = 0; k < m; ++k) x[k] = h * k;
    // Step from the CFL rule with the speed bound of the initial data.
    double amax = 0.0;
    for (int k = 0; k < m; ++k) {
        cplx a = spec.coefficient(0.0, x[k], spec.initial(x[k]));
        if (!(a.real() > 0.0)) throw DomainError("wave coefficient is not hyperbolic (Re A <= 0)");
        amax = std::max(amax, std::abs(a));
    }
    std::vector<std::vector<cplx>> out(targets.size(), std::vector<cplx>(m / stride));
    auto store = [&](double t, const std::vector<cplx>& u) {
        for (std::size_t n = 0; n < targets.size(); ++n)
            if (std::abs(targets[n] - t) < 1e-12)
                for (int k = 0; k < m / stride; ++k) out[n][k] = u[std::size_t(k) * stride];
    };
    for (double dir : {1.0, -1.0}) {
        double tend = 0.0;
        for (double t : targets)
            if (t * dir > 0.0) tend = std::max(tend, std::abs(t));
        std::vector<cplx> u0(m);
        for (int k = 0; k < m; ++k) u0[k] = spec.initial(x[k]);
        store(0.0, u0);
        if (tend == 0.0) continue;
        // Steps land exactly on every target in this direction.
        std::vector<double> stops;
        for (double t : targets)
            if (t * dir > 0.0) stops.push_back(std::abs(t));
        std::sort(stops.begin(), stops.end());
        const double dt_cfl = cfl * h / std::sqrt(amax);
        auto accel = [&](double t, const std::vector<cplx>& u, const std::vector<cplx>& ut, int k) {
            const int km = (k + m - 1) % m, kp = (k + 1) % m;
            const cplx uxx = (u[kp] - 2.0 * u[k] + u[km]) / (h * h);
            cplx a = spec.coefficient(t, x[k], u[k]);
            if (!(a.real() > 0.0)) throw DomainError("wave coefficient is not hyperbolic (Re A <= 0)");
            cplx r = a * uxx;
            if (spec.damping) r += spec.damping(t, x[k]) * ut[k];
            if (spec.source) r += spec.source(t, x[k]);
            return r;
        };
        std::vector<cplx> prev = u0, cur(m), rate(m);
        for (int k = 0; k < m; ++k) rate[k] = spec.initial_rate ? spec.initial_rate(x[k]) : cplx(0.0);
        // Uniform step per direction; every stop must be a whole number of steps.
        const double base = stops.front();
        for (double s : stops)
            if (std::abs(s / base - std::round(s / base)) > 1e-9)
                throw DomainError("finite-difference oracle needs commensurate time nodes");
        const int per_base = std::max(1, int(std::ceil(base / dt_cfl)));
        const double dt = dir * base / per_base;
        // Taylor start: u(dt) = u0 + dt u1 + dt^2 / 2 u_tt(0).
        for (int k = 0; k < m; ++k) cur[k] = u0[k] + dt * rate[k] + 0.5 * dt * dt * accel(0.0, u0, rate, k);
        const long total = std::lround(tend / std::abs(dt));
        for (long step = 1;; ++step) {
            const double t = step * dt;
            for (double s : stops)
                if (std::abs(std::abs(t) - s) < 1e-9 * std::max(1.0, s)) store(dir * s, cur);
            if (step >= total) break;
            std::vector<cplx> next(m);
            for (int k = 0; k < m; ++k) {
                // u_tt = A u_xx + B u_t + G with u_t = (next - prev) / (2 dt), solved for next.
                const int km = (k + m - 1) % m, kp = (k + 1) % m;
                const cplx uxx = (cur[kp] - 2.0 * cur[k] + cur[km]) / (h * h);
                const cplx a = spec.coefficient(t, x[k], cur[k]);
                if (!(a.real() > 0.0)) throw DomainError("wave coefficient is not hyperbolic (Re A <= 0)");
                // Step chosen at cfl from the initial data; leapfrog is stable up to 1.
                if (std::abs(dt) * std::sqrt(std::abs(a)) > h * (1.0 + 1e-12))
                    throw CflViolation("finite-difference step violates the CFL restriction");
                const cplx b = spec.damping ? spec.damping(t, x[k]) : cplx(0.0);
                const cplx src = spec.source ? spec.source(t, x[k]) : cplx(0.0);
                const cplx rhs = 2.0 * cur[k] - prev[k] * (1.0 + 0.5 * b * dt) + dt * dt * (a * uxx + src);
                next[k] = rhs / (1.0 - 0.5 * b * dt);
            }
            prev = std::move(cur);
            cur = std::move(next);
        }
    }
    return out;
}

}  // namespace detail

inline ReferenceSolution finite_difference_reference(const WaveSpec& spec, const TorusGrid& g,
                                                     const std::vector<double>& t_nodes,
                                                     const FiniteDifferenceOptions& opts = {}) {
    if (g.dim() != 1) throw DomainError("finite-difference oracle is one-dimensional");
    if (!spec.coefficient || !spec.initial) throw DomainError("wave spec needs a coefficient and initial data");
    if (t_nodes.empty()) throw DomainError("finite-difference oracle needs time nodes");
    std::array<std::vector<std::vector<cplx>>, 3> levels;
    for (int level = 0; level < 3; ++level) {
        const int stride = opts.refinement << level;
        levels[level] = detail::wave_march(spec, g.modes() * stride, stride, t_nodes, opts.cfl);
    }
    return detail::finish_reference(g, t_nodes, levels, "finite differences", 2);
}

// ---------------------------------------------------------------------------
// Manufactured forcing

// f = Op(p with jets of w) w on the grid of w.
inline GridFunction manufacture(const Symbol& p, const GridFunction& w, int jet_depth = 0, QuantOptions opts = {}) {
    std::optional<JetField> jets;
    if (p.jet_arity() > 0) {
        jets = make_jet_field(w, jet_depth);
        if (jets->arity < p.jet_arity()) throw DomainError("jet depth too small for the symbol");
    }
    return QuantizedOp(p, w.grid, opts, jets).apply(w);
}

}  // namespace microsolve
