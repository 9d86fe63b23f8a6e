#pragma once
/*
 * First-order evolution Q u = D_t u + a(t, x, D_x) u = g with u(t0) = 0,
 * integrated as  d/dt u = -i a u + i g  by classical RK4 with spectral
 * application of a.  Behavioural checks of the propagator: bicharacteristic
 * tracking of wave packets, pseudolocality of disjointly cut-off
 * propagators, and a fitted Gronwall constant for Sobolev energies.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "cutoffs.hpp"
#include "grid.hpp"
#include "quantization.hpp"
#include "symbol.hpp"

namespace microsolve {

inline constexpr double default_cfl = 0.5;

// The spatial operator a(t, x, D_x) of a first-order evolution.
struct Generator {
    std::function<GridFunction(double t, const GridFunction& u)> apply;
    double speed_bound = 0.0;  // max |a| over the lattice, used for the step restriction
};

// Right side g(t) given procedurally or by samples (cubic interpolation in t).
class Forcing {
public:
    Forcing() = default;
    static Forcing function(std::function<GridFunction(double)> f) {
        Forcing out;
        out.fn_ = std::move(f);
        return out;
    }
    static Forcing samples(SpaceTimeFunction s) {
        Forcing out;
        out.samples_ = std::move(s);
        return out;
    }

    bool empty() const { return !fn_ && !samples_; }

    GridFunction at(double t, const TorusGrid& g) const {
        if (fn_) {
            GridFunction v = fn_(t);
            if (v.grid != g) throw DimensionMismatch("forcing lives on a different grid");
            return v;
        }
        if (!samples_) return GridFunction(g);
        if (samples_->grid() != g) throw DimensionMismatch("forcing lives on a different grid");
        return interpolate(t);
    }

private:
    std::function<GridFunction(double)> fn_;
    std::optional<SpaceTimeFunction> samples_;

    GridFunction interpolate(double t) const {
        const auto& tn = samples_->t_nodes();
        const std::size_t n = tn.size();
        if (n == 0) throw DomainError("forcing has no samples");
        const double slack = 1e-12 * std::max(1.0, std::abs(tn.back() - tn.front()));
        if (t < tn.front() - slack || t > tn.back() + slack) throw DomainError("forcing sampled outside its time range");
        if (n == 1) return samples_->slice(0);
        std::size_t i = std::size_t(std::upper_bound(tn.begin(), tn.end(), t) - tn.begin());
        i = std::clamp<std::size_t>(i, 1, n - 1) - 1;  // tn[i] <= t <= tn[i+1]
        const std::size_t width = std::min<std::size_t>(4, n);
        std::size_t lo = i >= 1 ? i - 1 : 0;
        lo = std::min(lo, n - width);
        GridFunction out(samples_->grid());
        for (std::size_t a = lo; a < lo + width; ++a) {
            double w = 1.0;
            for (std::size_t b = lo; b < lo + width; ++b)
                if (b != a) w *= (t - tn[b]) / (tn[a] - tn[b]);
            if (w == 0.0) continue;
            const auto& s = samples_->slice(a);
            for (std::size_t k = 0; k < out.size(); ++k) out.values[k] += w * s.values[k];
        }
        return out;
    }
};

struct EvolutionProblem {
    TorusGrid grid;
    std::vector<Symbol> A;  // coefficients of D_{x_j}, real symbols of order 0
    Symbol A0;              // order-0 part
    std::optional<JetField> jet_field;
    std::vector<double> t_nodes;  // t_nodes[0] is the initial time
    Forcing forcing;
    int substeps = 1;       // RK4 steps per node interval
    bool dealias = false;   // 2/3 rule in every application of a
    bool centered = false;  // evaluate coefficients at x in [-pi, pi)
    std::optional<Generator> generator;  // replaces A, A0 when set
};

namespace detail {

inline Symbol transport_symbol(const std::vector<Symbol>& A, const Symbol& A0) {
    bool all_expr = A0.is_expression();
    for (auto& a : A) all_expr = all_expr && a.is_expression();
    if (all_expr) {
        Expr e = A0.expression();
        for (std::size_t j = 0; j < A.size(); ++j)
            e = expr::add(e, expr::mul(A[j].expression(), expr::variable(var_xi(int(j)))));
        return Symbol(e, 1.0, std::nullopt, false, false);
    }
    expr::Usage u = A0.usage();
    for (std::size_t j = 0; j < A.size(); ++j) {
        const auto& ua = A[j].usage();
        u.t |= ua.t;
        u.tau |= ua.tau;
        u.x_dims = std::max(u.x_dims, ua.x_dims);
        u.xi_dims = std::max({u.xi_dims, ua.xi_dims, int(j) + 1});
        u.jet_arity = std::max(u.jet_arity, ua.jet_arity);
    }
    return Symbol::native(
        [A, A0](const EvalPoint& p) {
            cplx acc = A0.eval(p);
            for (std::size_t j = 0; j < A.size(); ++j) acc += A[j].eval(p) * p.xi[j];
            return acc;
        },
        "transport", 1.0, std::nullopt, false, u);
}

// Lattice frequencies used to bound |a|: all of them in 1-D, the outer ring in 2-D.
inline std::vector<Freq> bound_frequencies(const TorusGrid& g) {
    std::vector<Freq> out;
    const int ny = g.nyquist();
    for (std::size_t q = 0; q < g.size(); ++q) {
        auto f = g.freq(q);
        if (g.dim() == 1 || std::max(std::abs(f[0]), std::abs(f[1])) >= ny - 1 || (f[0] == 0 || f[1] == 0))
            out.push_back(f);
    }
    return out;
}

inline void check_real_coefficient(const Symbol& a, const TorusGrid& g, const std::optional<JetField>& jets,
                                   double t, std::size_t j) {
    const std::size_t stride = std::max<std::size_t>(1, g.size() / 64);
    const int ny = g.nyquist();
    for (std::size_t k = 0; k < g.size(); k += stride) {
        for (int f : {1, 3, std::max(1, ny / 2), ny - 1}) {
            for (int dir = 0; dir < g.dim(); ++dir) {
                EvalPoint p;
                p.t = t;
                p.x = g.point(k);
                if (jets) p.jet = jets->at(k);
                p.xi[dir] = f;
                EvalPoint m = p;
                m.xi[dir] = -f;
                cplx ap = a.eval(p), am = a.eval(m);
                if (std::abs(ap - std::conj(am)) > 1e-12 * std::max(1.0, std::abs(ap)))
                    throw DomainError("coefficient A_" + std::to_string(j + 1) + " fails the real-symbol condition");
            }
        }
    }
}

}  // namespace detail

// Generator a(t, x, D) for a full symbol on a spatial grid.
inline Generator symbol_generator(const Symbol& a, const TorusGrid& g, std::optional<JetField> jets = std::nullopt,
                                  bool dealias = false, bool centered = false,
                                  std::span<const double> bound_times = {}) {
    if (a.jet_arity() > 0 && !jets) throw DomainError("jet field missing for a coefficient with jet arity > 0");
    QuantOptions base;
    base.dealias = dealias;
    base.centered = centered;
    const bool time_dependent = a.usage().t;
    auto fixed = std::make_shared<const QuantizedOp>(a, g, base, jets);

    Generator gen;
    gen.apply = [a, g, base, jets, time_dependent, fixed](double t, const GridFunction& u) {
        if (!time_dependent) return fixed->apply(u);
        QuantOptions o = base;
        o.time = t;
        return QuantizedOp(a, g, o, jets).apply(u);
    };

    std::vector<double> times(bound_times.begin(), bound_times.end());
    if (times.empty()) times.push_back(0.0);
    auto freqs = detail::bound_frequencies(g);
    double bound = 0.0;
    for (double t : times)
        for (std::size_t k = 0; k < g.size(); ++k) {
            EvalPoint p;
            p.t = t;
            p.x = centered ? g.centered_point(k) : g.point(k);
            if (jets) p.jet = jets->at(k);
            for (auto f : freqs) {
                p.xi = {double(f[0]), double(f[1])};
                bound = std::max(bound, std::abs(a.eval(p)));
            }
        }
    gen.speed_bound = bound;
    return gen;
}

inline Generator problem_generator(const EvolutionProblem& prob) {
    if (prob.generator) return *prob.generator;
    if (!prob.A.empty() && int(prob.A.size()) != prob.grid.dim())
        throw DimensionMismatch("need one transport coefficient per spatial dimension");
    const double t0 = prob.t_nodes.empty() ? 0.0 : prob.t_nodes.front();
    for (std::size_t j = 0; j < prob.A.size(); ++j) {
        if (prob.A[j].jet_arity() > 0 && !prob.jet_field) throw DomainError("jet field missing");
        detail::check_real_coefficient(prob.A[j], prob.grid, prob.jet_field, t0, j);
    }
    if (prob.A0.jet_arity() > 0 && !prob.jet_field) throw DomainError("jet field missing");
    std::vector<double> times;
    if (!prob.t_nodes.empty()) times = {prob.t_nodes.front(), prob.t_nodes[prob.t_nodes.size() / 2], prob.t_nodes.back()};
    return symbol_generator(detail::transport_symbol(prob.A, prob.A0), prob.grid, prob.jet_field, prob.dealias,
                            prob.centered, times);
}

// Largest RK4 step admitted by the c_cfl restriction.
inline double stable_step(const Generator& gen, double c_cfl = default_cfl) {
    if (gen.speed_bound <= 0.0) return std::numeric_limits<double>::infinity();
    return c_cfl / gen.speed_bound;
}

// Integrates d/dt u = -i a(t) u + i g(t) from u(t_nodes[0]) = u0, storing u at every node.
inline SpaceTimeFunction evolve(const Generator& gen, const TorusGrid& grid, const GridFunction& u0,
                                const std::vector<double>& t_nodes, const Forcing& forcing, int substeps = 1,
                                double c_cfl = default_cfl) {
    if (t_nodes.empty()) throw DomainError("evolution needs at least one time node");
    if (substeps < 1) throw DomainError("substeps must be positive");
    if (u0.grid != grid) throw DimensionMismatch("initial value lives on a different grid");
    const double hmax = stable_step(gen, c_cfl);
    for (std::size_t i = 0; i + 1 < t_nodes.size(); ++i) {
        const double h = std::abs(t_nodes[i + 1] - t_nodes[i]) / substeps;
        if (h > hmax * (1.0 + 1e-12))
            throw CflViolation("time step " + std::to_string(h) + " exceeds c_cfl / max|a| = " + std::to_string(hmax));
    }
    const bool forced = !forcing.empty();
    auto rhs = [&](double t, const GridFunction& u) {
        GridFunction out = gen.apply(t, u);
        if (forced) out -= forcing.at(t, grid);
        out *= cplx(0.0, -1.0);
        return out;
    };
    auto axpy = [](const GridFunction& u, double h, const GridFunction& k) {
        GridFunction r = u;
        for (std::size_t i = 0; i < r.size(); ++i) r.values[i] += h * k.values[i];
        return r;
    };

    std::vector<GridFunction> slices;
    slices.reserve(t_nodes.size());
    slices.push_back(u0);
    GridFunction u = u0;
    for (std::size_t i = 0; i + 1 < t_nodes.size(); ++i) {
        const double h = (t_nodes[i + 1] - t_nodes[i]) / substeps;
        for (int s = 0; s < substeps; ++s) {
            const double t = t_nodes[i] + s * h;
            auto k1 = rhs(t, u);
            auto k2 = rhs(t + 0.5 * h, axpy(u, 0.5 * h, k1));
            auto k3 = rhs(t + 0.5 * h, axpy(u, 0.5 * h, k2));
            auto k4 = rhs(t + h, axpy(u, h, k3));
            for (std::size_t q = 0; q < u.size(); ++q)
                u.values[q] += h / 6.0 * (k1.values[q] + 2.0 * k2.values[q] + 2.0 * k3.values[q] + k4.values[q]);
        }
        slices.push_back(u);
    }
    return SpaceTimeFunction(grid, t_nodes, std::move(slices));
}

// Solves Q u = g with u(t_nodes[0]) = 0.
inline SpaceTimeFunction propagate(const EvolutionProblem& prob, double c_cfl = default_cfl) {
    Generator gen = problem_generator(prob);
    return evolve(gen, prob.grid, GridFunction(prob.grid), prob.t_nodes, prob.forcing, prob.substeps, c_cfl);
}

struct ResidualReport {
    std::vector<double> per_node;  // ||Q u - g||_0 at each node
    double max = 0.0;
};

// Re-applies Q with fourth-order differences in t (uniform nodes, at least 5).
inline ResidualReport evolution_residual(const EvolutionProblem& prob, const SpaceTimeFunction& u) {
    const auto& t = u.t_nodes();
    const std::size_t n = t.size();
    if (n < 5) throw DomainError("residual needs at least five time nodes");
    const double dt = t[1] - t[0];
    for (std::size_t i = 1; i < n; ++i)
        if (std::abs((t[i] - t[i - 1]) - dt) > 1e-9 * std::abs(dt)) throw DomainError("residual needs uniform nodes");
    static constexpr double c[5][5] = {{-25.0 / 12, 4.0, -3.0, 4.0 / 3, -0.25},
                                       {-0.25, -5.0 / 6, 1.5, -0.5, 1.0 / 12},
                                       {1.0 / 12, -2.0 / 3, 0.0, 2.0 / 3, -1.0 / 12},
                                       {-1.0 / 12, 0.5, -1.5, 5.0 / 6, 0.25},
                                       {0.25, -4.0 / 3, 3.0, -4.0, 25.0 / 12}};
    Generator gen = problem_generator(prob);
    ResidualReport rep;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t lo = i < 2 ? 0 : std::min(i - 2, n - 5);
        const auto& row = c[i - lo];
        GridFunction dudt(u.grid());
        for (int s = 0; s < 5; ++s) dudt += cplx(row[s] / dt) * u.slice(lo + s);
        GridFunction r = cplx(0.0, -1.0) * dudt + gen.apply(t[i], u.slice(i));
        if (!prob.forcing.empty()) r -= prob.forcing.at(t[i], u.grid());
        rep.per_node.push_back(l2_norm(r));
        rep.max = std::max(rep.max, rep.per_node.back());
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Bicharacteristics

struct Bicharacteristic {
    std::vector<double> t_nodes;
    std::vector<Point> x;
    std::vector<FreqVec> xi;
};

struct BicharOptions {
    int steps = 1000;
    double freq_min = 1.0;
    double freq_max = std::numeric_limits<double>::infinity();
    std::vector<cplx> jet;
};

// RK4 for x' = d_xi a1, xi' = -d_x a1 from (x0, xi0) over t_range.
inline Bicharacteristic bicharacteristics(const Symbol& a1, Point x0, FreqVec xi0, std::array<double, 2> t_range,
                                          int dim = 1, const BicharOptions& opts = {}) {
    if (dim != 1 && dim != 2) throw DomainError("bicharacteristics need dimension 1 or 2");
    const double n0 = dim == 1 ? std::abs(xi0[0]) : std::hypot(xi0[0], xi0[1]);
    if (n0 == 0.0) throw DomainError("bicharacteristics need xi0 != 0");
    if (int(opts.jet.size()) < a1.jet_arity()) throw DomainError("jet shorter than the symbol's jet arity");
    if (opts.steps < 1) throw DomainError("bicharacteristics need at least one step");
    std::vector<Symbol> dxi, dx;
    for (int j = 0; j < dim; ++j) {
        dxi.push_back(differentiate_symbol(a1, var_xi(j)));
        dx.push_back(differentiate_symbol(a1, var_x(j)));
    }
    using State = std::array<double, 4>;
    auto field = [&](double t, const State& s) {
        EvalPoint p;
        p.t = t;
        p.x = {s[0], s[1]};
        p.xi = {s[2], s[3]};
        p.jet = opts.jet;
        State d{};
        for (int j = 0; j < dim; ++j) {
            d[j] = dxi[j].eval(p).real();
            d[2 + j] = -dx[j].eval(p).real();
        }
        return d;
    };
    auto band_check = [&](const State& s) {
        const double n = dim == 1 ? std::abs(s[2]) : std::hypot(s[2], s[3]);
        if (n < opts.freq_min || n > opts.freq_max || !std::isfinite(n))
            throw DomainError("bicharacteristic leaves the resolvable frequency band");
    };
    Bicharacteristic out;
    State s{x0[0], dim == 2 ? x0[1] : 0.0, xi0[0], dim == 2 ? xi0[1] : 0.0};
    band_check(s);
    const double h = (t_range[1] - t_range[0]) / opts.steps;
    auto record = [&](double t) {
        out.t_nodes.push_back(t);
        out.x.push_back({s[0], s[1]});
        out.xi.push_back({s[2], s[3]});
    };
    record(t_range[0]);
    auto add = [](const State& a, double c, const State& b) {
        State r;
        for (int i = 0; i < 4; ++i) r[i] = a[i] + c * b[i];
        return r;
    };
    for (int i = 0; i < opts.steps; ++i) {
        const double t = t_range[0] + i * h;
        auto k1 = field(t, s);
        auto k2 = field(t + 0.5 * h, add(s, 0.5 * h, k1));
        auto k3 = field(t + 0.5 * h, add(s, 0.5 * h, k2));
        auto k4 = field(t + h, add(s, h, k3));
        for (int q = 0; q < 4; ++q) s[q] += h / 6.0 * (k1[q] + 2 * k2[q] + 2 * k3[q] + k4[q]);
        band_check(s);
        record(t + h);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Structure checks of the propagator

struct PacketSpec {
    double x0 = 1.0;
    double lambda = 32.0;  // carrier frequency; spatial width lambda^{-1/2}
    int modes = 256;
};

struct StraighteningReport {
    double t = 0.0;
    double center_x = 0.0, center_xi = 0.0;
    double predicted_x = 0.0, predicted_xi = 0.0;
    double tracking_error = 0.0;  // max(|dx|, |dxi| / lambda)
    double packet_width = 0.0;    // lambda^{-1/2}
};

namespace detail {

inline GridFunction coherent_packet(const TorusGrid& g, double x0, double lambda) {
    return GridFunction::sample(g, [&](Point x) {
        double d = wrapped_angle(x[0] - x0);
        return std::exp(-0.5 * lambda * d * d) * std::polar(1.0, lambda * x[0]);
    });
}

// First moments in space (relative to a reference point) and frequency.
inline std::pair<double, double> packet_center(const GridFunction& u, double x_ref) {
    double mass = 0.0, mx = 0.0;
    for (std::size_t k = 0; k < u.size(); ++k) {
        double w = std::norm(u.values[k]);
        mass += w;
        mx += w * wrapped_angle(u.grid.point(k)[0] - x_ref);
    }
    auto s = forward_transform(u);
    double fmass = 0.0, mf = 0.0;
    for (std::size_t q = 0; q < s.coeffs.size(); ++q) {
        double w = std::norm(s.coeffs[q]);
        fmass += w;
        mf += w * s.grid.freq(q)[0];
    }
    if (mass == 0.0 || fmass == 0.0) throw DomainError("packet vanished");
    return {x_ref + mx / mass, mf / fmass};
}

}  // namespace detail

inline StraighteningReport straightening_check(const Symbol& a1, const PacketSpec& packet, double t) {
    if (a1.space_dims() > 1) throw DomainError("straightening check is one-dimensional");
    if (a1.jet_arity() > 0) throw DomainError("straightening check takes a symbol without jets");
    if (!(packet.lambda >= 1.0)) throw DomainError("packet frequency must be at least 1");
    const TorusGrid g(1, packet.modes);
    if (packet.lambda + 6.0 * std::sqrt(packet.lambda) > g.nyquist())
        throw DomainError("packet leaves the grid resolution");

    BicharOptions bo;
    bo.steps = std::max(200, int(std::ceil(std::abs(t) * 400)));
    bo.freq_max = g.nyquist() - 4.0 * std::sqrt(packet.lambda);
    auto ray = bicharacteristics(a1, {packet.x0, 0.0}, {packet.lambda, 0.0}, {0.0, t}, 1, bo);

    Generator gen = symbol_generator(a1, g, std::nullopt, false, false, std::array{0.0, t});
    StraighteningReport rep;
    rep.t = t;
    rep.packet_width = 1.0 / std::sqrt(packet.lambda);
    rep.predicted_x = ray.x.back()[0];
    rep.predicted_xi = ray.xi.back()[0];
    GridFunction u0 = detail::coherent_packet(g, packet.x0, packet.lambda);
    GridFunction u = u0;
    if (t != 0.0) {
        const int steps = std::max(1, int(std::ceil(std::abs(t) / stable_step(gen))));
        u = evolve(gen, g, u0, {0.0, t}, Forcing{}, steps).slice(1);
    }
    auto [cx, cxi] = detail::packet_center(u, rep.predicted_x);
    rep.center_x = cx;
    rep.center_xi = cxi;
    rep.tracking_error = std::max(std::abs(detail::wrapped_angle(cx - rep.predicted_x)),
                                  std::abs(cxi - rep.predicted_xi) / packet.lambda);
    return rep;
}

struct Interval {
    double lo = 0.0, hi = 0.0;
};

struct PseudolocalityOptions {
    std::vector<double> lambdas{8.0, 16.0, 32.0};
    int modes = 512;
};

struct PseudolocalityReport {
    std::vector<double> lambdas;
    std::vector<double> couplings;  // ||c1 E(t) c2 u|| / ||u|| for u = exp(i lambda x)
    double slope = 0.0;             // least-squares log-log slope
    double max_coupling = 0.0;
    double max_speed = 0.0;
    double separation = 0.0;
};

namespace detail {

// C-infinity transition from 0 (u <= 0) to 1 (u >= 1).
inline double smooth_transition(double u) {
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return 1.0;
    const double a = std::exp(-1.0 / u), b = std::exp(-1.0 / (1.0 - u));
    return a / (a + b);
}

// C-infinity bump supported in [lo, hi], rising over each half and equal to 1 at the midpoint.
inline GridFunction interval_cutoff(const TorusGrid& g, Interval I) {
    const double w = 0.5 * (I.hi - I.lo);
    return GridFunction::sample(g, [&](Point x) {
        double y = x[0];
        return cplx(smooth_transition((y - I.lo) / w) * smooth_transition((I.hi - y) / w));
    });
}

inline double interval_gap(Interval a, Interval b) {
    double direct = std::max(b.lo - a.hi, a.lo - b.hi);
    double around = two_pi - (std::max(a.hi, b.hi) - std::min(a.lo, b.lo));
    if (direct <= 0.0) return direct;
    return std::min(direct, around);
}

inline double loglog_fit(const std::vector<double>& x, const std::vector<double>& y) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = double(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double lx = std::log(x[i]), ly = std::log(y[i]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

}  // namespace detail

// Coupling of disjointly supported cutoffs through the propagator of D_t + a1 over t_span.
inline PseudolocalityReport pseudolocality_check(const Symbol& a1, Interval c1, Interval c2, double t_span,
                                                 const PseudolocalityOptions& opts = {}) {
    if (a1.space_dims() > 1 || a1.jet_arity() > 0) throw DomainError("pseudolocality check takes a 1-D symbol without jets");
    for (auto I : {c1, c2})
        if (!(I.lo < I.hi) || I.lo < 0.0 || I.hi > two_pi) throw DomainError("cutoff intervals must lie in [0, 2pi)");
    if (opts.lambdas.empty()) throw DomainError("pseudolocality check needs at least one frequency");
    const TorusGrid g(1, opts.modes);

    PseudolocalityReport rep;
    rep.separation = detail::interval_gap(c1, c2);
    Symbol speed = differentiate_symbol(a1, var_xi(0));
    for (std::size_t k = 0; k < g.size(); ++k)
        for (int f = 1; f <= g.nyquist(); f *= 2)
            for (double s : {1.0, -1.0}) {
                EvalPoint p;
                p.x = g.point(k);
                p.xi = {s * f, 0.0};
                for (double t : {0.0, t_span}) {
                    p.t = t;
                    rep.max_speed = std::max(rep.max_speed, std::abs(speed.eval(p)));
                }
            }
    if (!(rep.separation > rep.max_speed * std::abs(t_span)))
        throw DomainError("cutoff separation does not exceed the flow speed times the time span");

    const GridFunction cut1 = detail::interval_cutoff(g, c1), cut2 = detail::interval_cutoff(g, c2);
    Generator gen = symbol_generator(a1, g, std::nullopt, false, false, std::array{0.0, t_span});
    const int steps = t_span == 0.0 ? 0 : std::max(1, int(std::ceil(std::abs(t_span) / stable_step(gen))));
    for (double lam : opts.lambdas) {
        if (lam >= g.nyquist()) throw DomainError("input frequency exceeds the grid resolution");
        GridFunction u = GridFunction::sample(g, [lam](Point x) { return std::polar(1.0, lam * x[0]); });
        GridFunction w = cut2 * u;
        if (steps > 0) w = evolve(gen, g, w, {0.0, t_span}, Forcing{}, steps).slice(1);
        double c = l2_norm(cut1 * w) / l2_norm(u);
        rep.lambdas.push_back(lam);
        rep.couplings.push_back(c);
        rep.max_coupling = std::max(rep.max_coupling, c);
    }
    bool positive = rep.couplings.size() >= 2;
    for (double c : rep.couplings) positive = positive && c > 0.0;
    rep.slope = positive ? detail::loglog_fit(rep.lambdas, rep.couplings) : -std::numeric_limits<double>::infinity();
    return rep;
}

// ---------------------------------------------------------------------------
// Energy monitor

struct EnergyReport {
    double k = 0.0;
    std::vector<double> norm_trace;  // ||u(t)||_k per node
    double fitted_C = 0.0;           // smallest C with d/dt ||u||^2 <= C (||u||^2 + ||g||^2) at all nodes
    int ell_used = 0;                // jet depth of the coefficients
    double sup_norm_sq = 0.0;        // max_t ||u(t)||_k^2
    double implied_bound = 0.0;      // 2 exp(2 C T) int ||g||_k^2 dt
};

inline int jet_depth(const JetField& j) {
    const int axes = j.grid.dim();
    int depth = -1;
    while (int(jet_multi_indices(axes, depth + 1).size()) <= j.arity) ++depth;
    return std::max(depth, 0);
}

inline EnergyReport energy_monitor(const SpaceTimeFunction& u, const Forcing& g, const EvolutionProblem& prob,
                                   double k) {
    EnergyReport rep;
    rep.k = k;
    rep.ell_used = prob.jet_field ? jet_depth(*prob.jet_field) : 0;
    const auto& t = u.t_nodes();
    const std::size_t n = t.size();
    std::vector<double> y(n), gk(n);
    for (std::size_t i = 0; i < n; ++i) {
        double nu = sobolev_norm(u.slice(i), k);
        rep.norm_trace.push_back(nu);
        y[i] = nu * nu;
        double ng = g.empty() ? 0.0 : sobolev_norm(g.at(t[i], u.grid()), k);
        gk[i] = ng * ng;
        rep.sup_norm_sq = std::max(rep.sup_norm_sq, y[i]);
    }
    for (std::size_t i = 0; n >= 3 && i < n; ++i) {
        double d;
        if (i == 0) {
            double h1 = t[1] - t[0], h2 = t[2] - t[1];
            d = -(2 * h1 + h2) / (h1 * (h1 + h2)) * y[0] + (h1 + h2) / (h1 * h2) * y[1] - h1 / (h2 * (h1 + h2)) * y[2];
        } else if (i == n - 1) {
            double h1 = t[n - 2] - t[n - 3], h2 = t[n - 1] - t[n - 2];
            d = h2 / (h1 * (h1 + h2)) * y[n - 3] - (h1 + h2) / (h1 * h2) * y[n - 2] + (2 * h2 + h1) / (h2 * (h1 + h2)) * y[n - 1];
        } else {
            double h1 = t[i] - t[i - 1], h2 = t[i + 1] - t[i];
            d = -h2 / (h1 * (h1 + h2)) * y[i - 1] + (h2 - h1) / (h1 * h2) * y[i] + h1 / (h2 * (h1 + h2)) * y[i + 1];
        }
        const double denom = y[i] + gk[i];
        const double scale = std::max({y[i], gk[i], 1e-300});
        if (denom <= 1e-14 * scale || denom == 0.0) {
            if (d > 1e-12 * std::max(1.0, scale)) rep.fitted_C = std::numeric_limits<double>::infinity();
            continue;
        }
        rep.fitted_C = std::max(rep.fitted_C, d / denom);
    }
    double gint = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) gint += 0.5 * (t[i + 1] - t[i]) * (gk[i] + gk[i + 1]);
    const double T = n ? std::abs(t.back() - t.front()) : 0.0;
    rep.implied_bound = 2.0 * std::exp(2.0 * rep.fitted_C * T) * gint;
    return rep;
}

}  // namespace microsolve
