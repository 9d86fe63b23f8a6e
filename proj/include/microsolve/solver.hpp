#pragma once
/*
 * Linearized microlocal solve and the quasilinear Picard driver on the
 * space-time torus (axis 0 = t, axis 1 = x), solution point at the origin.
 *
 * Linearized solve for P = Op(p_m + p_{m-1}) with frozen jets:
 *   U g   = sum_j out_j(D) [Phi u_j],  Q_j u_j = in_j(D) g,  u_j(t = 0) = 0
 *   R     = P U - id,   R_1 = chi_rho(D) R,   R_0 = R - R_1
 *   T_1   = Phi_delta R_1 Phi_delta
 *   T_2   = Phi_delta0 R_0 Phi_delta (id + T_1)^-1 Phi_delta0
 *   k = (id + T_2)^-1 Phi_delta0 f,  h = (id + T_1)^-1 Phi_delta0 k,  u = U Phi_delta h
 * which gives P u = f where Phi_delta0 = 1.  On characteristic cones
 * in_j = phi_j / a_j and out_j = b_j psi_{j,rho} with a_j, b_j frozen at the
 * origin, and Q_j = D_t + rate(t, x) D_x + lower(t, x) is integrated by RK4
 * with tabulated coefficients.  On elliptic cones u_j = Op(phi_j / p) g and
 * out_j = psi_{j,rho}.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cutoffs.hpp"
#include "errors.hpp"
#include "evolution.hpp"
#include "grid.hpp"
#include "inversion.hpp"
#include "normal_form.hpp"
#include "parallel.hpp"
#include "quantization.hpp"
#include "symbol.hpp"

namespace microsolve {

// ---------------------------------------------------------------------------
// Parameters

struct SolveParams {
    double cone_aperture = 0.9;  // eps of the cone partition
    double rho = 8.0;            // frequency cutoff
    double delta = 0.25;         // outer localization scale
    double delta0 = 0.1;         // inner localization scale
    double c0 = 1.0;             // delta0 <= c0 / rho
    double c2 = 1.0;             // window radius c2 delta0
    double outer_radius = 1.0;   // Phi = 1 on |x| <= outer_radius, 0 beyond twice that
    int sobolev_index = 2;       // k of the Cauchy stopping rule
    int jet_depth = 4;           // l
    int max_picard_iters = 20;
    double picard_tol = 1e-8;
    double neumann_tol = 1e-12;
    double c_cfl = 0.5;
    bool single_cone = false;    // first-order operators only: one cone, trivial cutoffs
    int preferred_time_index = 0;

    double inner_bound() const { return std::min(c0 / rho, delta / 2.0); }

    void validate() const {
        auto fail = [](const std::string& what) { throw ConfigError(what); };
        if (!(cone_aperture > 0.0) || cone_aperture > max_cone_aperture) fail("cone_aperture must lie in (0, 2]");
        if (!(rho >= 2.0)) fail("freq_cutoff rho must be >= 2");
        if (!(outer_radius > 0.0) || !(4.0 * outer_radius < two_pi)) fail("outer_radius must lie in (0, pi/2)");
        if (!(delta > 0.0) || delta > 1.0) fail("outer_scale delta must lie in (0, 1]");
        if (2.0 * delta > outer_radius + 1e-12)
            fail("outer_scale delta must satisfy 2 delta <= outer_radius (Phi = 1 on supp Phi_delta)");
        if (!(c0 > 0.0) || !(c2 > 0.0) || c2 > 1.0) fail("c0 must be positive and c2 must lie in (0, 1]");
        if (!(delta0 > 0.0) || delta0 > inner_bound() * (1.0 + 1e-12))
            fail("inner_scale delta0 = " + std::to_string(delta0) + " violates 0 < delta0 <= min(c0/rho, delta/2) = " +
                 std::to_string(inner_bound()));
        if (sobolev_index < 0 || jet_depth < 0) fail("sobolev_index and jet_depth must be non-negative");
        if (max_picard_iters < 1) fail("max_picard_iters must be positive");
        if (!(picard_tol > 0.0) || !(neumann_tol > 0.0)) fail("tolerances must be positive");
        if (!(c_cfl > 0.0)) fail("c_cfl must be positive");
    }
};

// Copy with the given rho and the largest admissible delta0.
inline SolveParams at_rho(SolveParams p, double rho) {
    p.rho = rho;
    p.delta0 = p.inner_bound();
    return p;
}

// ---------------------------------------------------------------------------
// Problem and state

struct LinearProblem {
    Symbol principal;               // p_m
    Symbol subprincipal;            // p_{m-1}
    TorusGrid grid;                 // 2-D space-time grid
    std::optional<JetField> jets;   // frozen coefficient jets
};

struct ConePiece {
    ConeCutoff cone;
    ConeKind kind = ConeKind::Elliptic;
    std::optional<NormalFormDecomposition> normal_form;
    std::vector<cplx> in_mult;    // on lattice frequencies; empty = identity
    std::vector<cplx> in_weight;  // pointwise weight; empty = identity
    std::vector<cplx> out_mult;   // empty = identity
    std::vector<cplx> rate;       // tabulated coefficient of D_x
    std::vector<cplx> lower;      // tabulated order-0 coefficient
    std::vector<cplx> rate_fine;  // rate and lower refined to the RK4 stage times
    std::vector<cplx> lower_fine;
    double speed_bound = 0.0;
};

struct LinearDiagnostics {
    double t1_norm = 0.0;
    double t2_norm = 0.0;
    bool t1_converged = true;
    bool t2_converged = true;
    std::size_t t1_columns = 0;
    std::size_t t2_columns = 0;
    double linf_bound_t2 = 0.0;
    int substeps = 1;
    int horizon_nodes = 0;
    std::size_t characteristic_cones = 0;
    std::size_t elliptic_cones = 0;
};

struct MicroSolveState {
    SolveParams params;
    LinearProblem problem;
    int order = 1;
    std::vector<ConePiece> cones;
    SpatialBump outer;      // Phi
    SpatialBump scale;      // Phi_delta
    SpatialBump inner;      // Phi_delta0
    std::vector<double> high_pass;  // chi_rho on lattice frequencies
    std::shared_ptr<const QuantizedOp> op;  // P with frozen jets
    std::shared_ptr<const KernelOperator> T1;
    std::shared_ptr<const KernelOperator> T2;
    LinearDiagnostics diag;
    std::vector<cplx> base_jet;
};

struct LinearSolution {
    GridFunction u;
    GridFunction rhs;                 // the right side the solve targets
    std::vector<GridFunction> pieces; // u_{j,rho} per cone
    double residual = 0.0;            // ||P u - f||_0 on the window
    double relative_residual = 0.0;
    double tolerance = 0.0;           // floor set by the Neumann tolerance
    bool residual_ok = false;
    int inner_terms = 0;              // Neumann terms of the final (id + T_1)^-1
    int outer_terms = 0;              // Neumann terms of (id + T_2)^-1
    double window_radius = 0.0;
    std::size_t window_points = 0;
};

namespace detail {

inline TorusGrid line_grid(const TorusGrid& st) { return TorusGrid(1, st.modes()); }

// Centered (t, x) of a space-time index.
inline Point st_coords(const TorusGrid& g, std::size_t k) { return g.centered_point(k); }

inline double freq_norm(const TorusGrid& g, std::size_t k) { return std::sqrt(g.freq_norm2(k)); }

inline EvalPoint frozen_point(const std::vector<cplx>& jet, Freq f) {
    EvalPoint p;
    p.tau = f[0];
    p.xi = {double(f[1]), 0.0};
    p.jet = jet;
    return p;
}

inline std::vector<cplx> spectrum_of(const GridFunction& u) { return forward_transform(u).coeffs; }

inline GridFunction from_spectrum(const TorusGrid& g, std::vector<cplx> c) {
    SpectrumFunction s(g);
    s.coeffs = std::move(c);
    return inverse_transform(s);
}

inline GridFunction apply_mult(const GridFunction& u, const std::vector<cplx>& m) {
    if (m.empty()) return u;
    auto c = spectrum_of(u);
    for (std::size_t k = 0; k < c.size(); ++k) c[k] *= m[k];
    return from_spectrum(u.grid, std::move(c));
}

// Values at t = m h / factor, m in [-M/2, M/2) stored in FFT order, for every x,
// by zero-padded trigonometric interpolation in t (M = N factor).
inline std::vector<cplx> refine_in_time(const GridFunction& st, int factor) {
    const TorusGrid& g = st.grid;
    const int n = g.modes(), m = n * factor;
    auto s = spectrum_of(st);
    const TorusGrid fine(1, m), line(1, n);
    std::vector<cplx> cols(std::size_t(m) * n);
    std::vector<cplx> buf(m);
    for (int ix = 0; ix < n; ++ix) {
        std::fill(buf.begin(), buf.end(), cplx(0.0));
        for (int it = 0; it < n; ++it) {
            const int kt = g.freq_of(it);
            const cplx c = s[std::size_t(it) * n + ix];
            if (kt == -n / 2 && factor > 1) {
                buf[std::size_t(m - n / 2)] += 0.5 * c;
                buf[std::size_t(n / 2)] += 0.5 * c;
            } else {
                buf[std::size_t((kt + m) % m)] += c;
            }
        }
        detail::fft_inplace(fine, buf, FFTW_BACKWARD);
        for (int r = 0; r < m; ++r) cols[std::size_t(r) * n + ix] = buf[r];
    }
    std::vector<cplx> row(n);
    for (int r = 0; r < m; ++r) {
        std::copy_n(cols.begin() + std::ptrdiff_t(r) * n, n, row.begin());
        detail::fft_inplace(line, row, FFTW_BACKWARD);
        std::copy(row.begin(), row.end(), cols.begin() + std::ptrdiff_t(r) * n);
    }
    return cols;
}

inline std::size_t table_row(double t, double dt, int rows) {
    long m = std::lround(t / dt);
    return std::size_t(((m % rows) + rows) % rows);
}

// D_x on a line grid, zero at the Nyquist frequency.
inline GridFunction line_derivative(const GridFunction& u) {
    const int nyq = u.grid.nyquist();
    return apply_multiplier(u, [nyq](Freq f) { return f[0] == -nyq ? 0.0 : double(f[0]); });
}

// Q u = g, u(0) = 0 on |t| <= horizon nodes; Q = D_t + rate D_x + lower with refined tables.
inline GridFunction cone_evolve(const TorusGrid& st, const std::vector<cplx>& rate, const std::vector<cplx>& lower,
                                const std::vector<cplx>& forcing, int factor, int substeps, int horizon,
                                double speed_bound, double c_cfl) {
    const int n = st.modes(), rows = n * factor;
    const double h = st.spacing(), dt = h / factor;
    const TorusGrid line = line_grid(st);
    GridFunction out(st);
    for (double dir : {1.0, -1.0}) {
        Generator gen;
        gen.speed_bound = speed_bound;
        gen.apply = [&, dir](double s, const GridFunction& u) {
            const std::size_t r = table_row(dir * s, dt, rows) * n;
            GridFunction du = line_derivative(u);
            for (int i = 0; i < n; ++i) du.values[i] = dir * (rate[r + i] * du.values[i] + lower[r + i] * u.values[i]);
            return du;
        };
        Forcing g = Forcing::function([&, dir](double s) {
            const std::size_t r = table_row(dir * s, dt, rows) * n;
            GridFunction v(line);
            for (int i = 0; i < n; ++i) v.values[i] = dir * forcing[r + i];
            return v;
        });
        const int steps = dir > 0 ? std::min(horizon, n / 2 - 1) : std::min(horizon, n / 2);
        std::vector<double> nodes(steps + 1);
        for (int i = 0; i <= steps; ++i) nodes[i] = i * h;
        auto sol = evolve(gen, line, GridFunction(line), nodes, g, substeps, c_cfl);
        for (int i = 0; i <= steps; ++i) {
            const int it = dir > 0 ? i : (n - i) % n;
            if (dir < 0 && i == 0) continue;
            for (int ix = 0; ix < n; ++ix) out.values[std::size_t(it) * n + ix] = sol.slice(i).values[ix];
        }
    }
    return out;
}

inline bool on_nyquist(const TorusGrid& g, std::size_t k) {
    const Freq f = g.freq(k);
    return f[0] == -g.nyquist() || f[1] == -g.nyquist();
}

inline void zero_nyquist(const TorusGrid& g, std::vector<cplx>& spectrum) {
    for (std::size_t k = 0; k < spectrum.size(); ++k)
        if (on_nyquist(g, k)) spectrum[k] = 0.0;
}

inline GridFunction drop_nyquist(const GridFunction& u) {
    auto c = spectrum_of(u);
    zero_nyquist(u.grid, c);
    return from_spectrum(u.grid, std::move(c));
}

inline bool coefficient_constant(const Symbol& p) { return !p.usage().t && p.usage().x_dims == 0; }

// Tabulates rate and lower on the grid, reusing values for repeated jets when the symbol has no explicit (t, x).
inline void tabulate_cone(ConePiece& piece, const LinearProblem& prob, const QuantizedOp& op) {
    const auto& nf = *piece.normal_form;
    const TorusGrid& g = prob.grid;
    const double side = nf.preparation->side;
    const bool by_jet = coefficient_constant(prob.principal) && coefficient_constant(prob.subprincipal);
    const int arity = std::max(prob.principal.jet_arity(), prob.subprincipal.jet_arity());
    piece.rate.assign(g.size(), 0.0);
    piece.lower.assign(g.size(), 0.0);
    std::map<std::vector<double>, std::pair<cplx, cplx>> cache;
    for (std::size_t k = 0; k < g.size(); ++k) {
        EvalPoint p = op.eval_point(k, {0, 0});
        p.xi = {side, 0.0};
        p.tau = 0.0;
        std::vector<double> key;
        if (by_jet) {
            for (int j = 0; j < arity; ++j) {
                key.push_back(p.jet[j].real());
                key.push_back(p.jet[j].imag());
            }
            auto it = cache.find(key);
            if (it != cache.end()) {
                piece.rate[k] = it->second.first;
                piece.lower[k] = it->second.second;
                continue;
            }
        }
        piece.rate[k] = nf.A[0].eval(p);
        piece.lower[k] = nf.r0.eval(p);
        if (by_jet) cache.emplace(std::move(key), std::make_pair(piece.rate[k], piece.lower[k]));
    }
    double rmax = 0.0, lmax = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
        rmax = std::max(rmax, std::abs(piece.rate[k]));
        lmax = std::max(lmax, std::abs(piece.lower[k]));
    }
    piece.speed_bound = rmax * g.nyquist() + lmax;
}

// One cone with trivial cutoffs for a first-order symbol A_t tau + A_x xi + p_0.
inline ConePiece single_cone_piece(const LinearProblem& prob, const QuantizedOp& op) {
    auto hom = prob.principal.homogeneous_degree();
    if (!hom || std::abs(*hom - 1.0) > 1e-12) throw ConfigError("single-cone mode needs a first-order principal symbol");
    ConePiece piece;
    piece.kind = ConeKind::Characteristic;
    const TorusGrid& g = prob.grid;
    Symbol dt = differentiate_symbol(prob.principal, var_tau()), dx = differentiate_symbol(prob.principal, var_xi(0));
    piece.rate.assign(g.size(), 0.0);
    piece.lower.assign(g.size(), 0.0);
    piece.in_weight.assign(g.size(), 0.0);
    double rmax = 0.0, lmax = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
        EvalPoint p = op.eval_point(k, {1, 1});
        const cplx at = dt.eval(p);
        if (std::abs(at) < 1e-12) throw DomainError("single-cone mode needs a nonvanishing time coefficient");
        piece.rate[k] = dx.eval(p) / at;
        piece.lower[k] = prob.subprincipal.eval(p) / at;
        piece.in_weight[k] = 1.0 / at;
        rmax = std::max(rmax, std::abs(piece.rate[k]));
        lmax = std::max(lmax, std::abs(piece.lower[k]));
    }
    piece.speed_bound = rmax * g.nyquist() + lmax;
    return piece;
}

}  // namespace detail

// Builds the cone pieces, the operator P and the localizing bumps (no inner operators yet).
inline MicroSolveState prepare_cones(const LinearProblem& prob, const SolveParams& params) {
    params.validate();
    if (prob.grid.dim() != 2) throw DimensionMismatch("the linearized solve runs on a 2-D space-time grid");
    auto hom = prob.principal.homogeneous_degree();
    if (!hom || *hom < 1.0) throw DomainError("principal symbol must be homogeneous of degree m >= 1");
    MicroSolveState st;
    st.params = params;
    st.problem = prob;
    st.order = int(std::lround(*hom));
    const TorusGrid& g = prob.grid;
    QuantOptions qo;
    qo.layout = Layout::SpaceTime;
    qo.centered = true;
    st.op = std::make_shared<const QuantizedOp>(detail::symbol_sum(prob.principal, prob.subprincipal, *hom), g, qo,
                                                prob.jets);
    if (prob.jets) {
        auto j = prob.jets->at(0);
        st.base_jet.assign(j.begin(), j.end());
    }
    st.outer = spatial_bump(g, {0.0, 0.0}, params.outer_radius);
    st.scale = spatial_bump(g, {0.0, 0.0}, params.delta);
    st.inner = spatial_bump(g, {0.0, 0.0}, params.delta0);
    st.high_pass.resize(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) st.high_pass[k] = smoothstep(detail::freq_norm(g, k) / params.rho - 1.0);

    if (params.single_cone) {
        st.cones.push_back(with_stage("single-cone", [&] { return detail::single_cone_piece(prob, *st.op); }));
    } else {
        BasePoint base{0.0, {0.0, 0.0}, st.base_jet};
        auto partition = build_cone_partition(2, params.cone_aperture, FreqAxes::TauXi);
        NormalFormOptions nfo;
        nfo.preferred_time_index = params.preferred_time_index;
        nfo.probe_lambdas.clear();
        const Symbol full = detail::symbol_sum(prob.principal, prob.subprincipal, *hom);
        for (auto& cone : partition) {
            ConePiece piece;
            piece.cone = cone;
            piece.normal_form =
                with_stage("normal-form", [&] { return build_normal_form(prob.principal, prob.subprincipal, base, cone, nfo); });
            const auto& nf = *piece.normal_form;
            piece.kind = nf.kind;
            if (nf.kind == ConeKind::Characteristic && nf.frame.time_index != 0)
                throw ConfigError("all characteristic cones must share the time direction t");
            const Symbol psi = localized_psi(cone.psi, params.rho);
            piece.in_mult.assign(g.size(), 0.0);
            piece.out_mult.assign(g.size(), 0.0);
            for (std::size_t k = 0; k < g.size(); ++k) {
                const Freq f = g.freq(k);
                if (f[0] == 0 && f[1] == 0) continue;
                EvalPoint p = detail::frozen_point(st.base_jet, f);
                const double phi = cone.phi.eval(p).real();
                if (phi != 0.0) {
                    const cplx den = nf.kind == ConeKind::Characteristic ? nf.a.eval(p) : full.eval(p);
                    if (std::abs(den) > 1e-12 && std::isfinite(std::abs(den))) piece.in_mult[k] = phi / den;
                }
                const double ps = psi.eval(p).real();
                if (ps != 0.0) piece.out_mult[k] = ps * (nf.kind == ConeKind::Characteristic ? nf.b.eval(p) : cplx(1.0));
            }
            if (nf.kind == ConeKind::Characteristic) with_stage("tabulate", [&] { detail::tabulate_cone(piece, prob, *st.op); });
            st.cones.push_back(std::move(piece));
        }
    }
    double speed = 0.0;
    for (auto& c : st.cones) {
        if (c.kind == ConeKind::Characteristic) ++st.diag.characteristic_cones;
        else ++st.diag.elliptic_cones;
        speed = std::max(speed, c.speed_bound);
    }
    st.diag.substeps = std::max(1, int(std::ceil(g.spacing() * speed / params.c_cfl - 1e-12)));
    for (auto& c : st.cones)
        if (c.kind == ConeKind::Characteristic) {
            c.rate_fine = detail::refine_in_time(GridFunction(g, c.rate), 2 * st.diag.substeps);
            c.lower_fine = detail::refine_in_time(GridFunction(g, c.lower), 2 * st.diag.substeps);
        }
    // Nodes up to the support of Phi.
    st.diag.horizon_nodes = std::min(g.modes() / 2, int(std::ceil(2.0 * params.outer_radius / g.spacing())) + 1);
    return st;
}

// U g = sum_j out_j(D) [Phi u_j]; per-cone outputs are stored when requested.
inline GridFunction assemble_microsolution(const MicroSolveState& st, const GridFunction& g,
                                           std::vector<GridFunction>* pieces = nullptr) {
    const TorusGrid& grid = st.problem.grid;
    if (g.grid != grid) throw DimensionMismatch("right side lives on a different grid");
    const int factor = 2 * st.diag.substeps;
    auto G = detail::spectrum_of(g);
    std::vector<std::vector<cplx>> out(st.cones.size());
    parallel_for(
        st.cones.size(),
        [&](std::size_t j) {
            const auto& c = st.cones[j];
            std::vector<cplx> in = G;
            if (!c.in_mult.empty())
                for (std::size_t k = 0; k < in.size(); ++k) in[k] *= c.in_mult[k];
            // Nyquist-line forcing drives near-resonant responses that P cannot reproduce.
            detail::zero_nyquist(grid, in);
            GridFunction gj = detail::from_spectrum(grid, std::move(in));
            if (!c.in_weight.empty()) {
                for (std::size_t k = 0; k < gj.size(); ++k) gj.values[k] *= c.in_weight[k];
                gj = detail::drop_nyquist(gj);
            }
            GridFunction uj = gj;
            if (c.kind == ConeKind::Characteristic) {
                auto ftab = detail::refine_in_time(gj, factor);
                uj = detail::cone_evolve(grid, c.rate_fine, c.lower_fine, ftab, factor, st.diag.substeps, st.diag.horizon_nodes,
                                         c.speed_bound, st.params.c_cfl);
            }
            out[j] = detail::spectrum_of(st.outer.values * uj);
            if (!c.out_mult.empty())
                for (std::size_t k = 0; k < out[j].size(); ++k) out[j][k] *= c.out_mult[k];
        },
        1);
    std::vector<cplx> acc(grid.size());
    if (pieces) pieces->clear();
    for (auto& W : out) {
        for (std::size_t k = 0; k < W.size(); ++k) acc[k] += W[k];
        if (pieces) pieces->push_back(detail::from_spectrum(grid, std::move(W)));
    }
    return detail::from_spectrum(grid, std::move(acc));
}

inline GridFunction apply_operator(const MicroSolveState& st, const GridFunction& u) { return st.op->apply(u); }

// R g = P U g - g.
inline GridFunction remainder(const MicroSolveState& st, const GridFunction& g) {
    return apply_operator(st, assemble_microsolution(st, g)) - g;
}

// R_1 = chi_rho(D) R (order -1 part) and R_0 = R - R_1 (frequencies below 2 rho).
inline std::pair<GridFunction, GridFunction> split_remainder(const MicroSolveState& st, const GridFunction& g) {
    GridFunction r = remainder(st, g);
    auto c = detail::spectrum_of(r);
    std::vector<cplx> hi(c.size()), lo(c.size());
    for (std::size_t k = 0; k < c.size(); ++k) {
        hi[k] = st.high_pass[k] * c[k];
        lo[k] = c[k] - hi[k];
    }
    return {detail::from_spectrum(g.grid, std::move(lo)), detail::from_spectrum(g.grid, std::move(hi))};
}

namespace detail {

// A series that stalls despite an estimated norm below 1 has spectral radius >= 1.
inline NeumannResult contracting_series(const KernelOperator& S, const GridFunction& f, double tol, double norm,
                                        const char* name) {
    try {
        return neumann_series(S, f, tol, norm);
    } catch (const ConvergenceError&) {
        throw NotContractive(std::string("(id + ") + name + ") series does not converge (estimated norm " +
                                 std::to_string(norm) + ")",
                             norm);
    }
}

inline NeumannResult invert_inner(const MicroSolveState& st, const GridFunction& f, double tol) {
    return contracting_series(*st.T1, f, tol, st.diag.t1_norm, "T_1");
}

}  // namespace detail

// Assembles T_1 = Phi_delta R_1 Phi_delta.
inline void assemble_t1(MicroSolveState& st) {
    const TorusGrid& g = st.problem.grid;
    const Point origin{0.0, 0.0};
    auto t1 = with_stage("assemble-T1", [&] {
        return localize_operator(g, [&st](const GridFunction& v) { return split_remainder(st, v).second; },
                                 st.params.delta, origin);
    });
    st.T1 = std::make_shared<const KernelOperator>(std::move(t1));
    st.diag.t1_columns = st.T1->cols().size();
    auto n1 = estimate_norm(*st.T1);
    st.diag.t1_norm = n1.value;
    st.diag.t1_converged = n1.converged;
    if (!(n1.value < 1.0))
        throw NotContractive("(id + T_1) is not contractive: raise rho (norm " + std::to_string(n1.value) + ")", n1.value);
}

// Assembles T_2 = Phi_delta0 R_0 Phi_delta (id + T_1)^-1 Phi_delta0 at the current delta0; needs T_1.
inline void assemble_t2(MicroSolveState& st) {
    if (!st.T1) throw StageError("assemble-T2", "T_1 has not been assembled");
    const TorusGrid& g = st.problem.grid;
    const Point origin{0.0, 0.0};
    const double tol = st.params.neumann_tol;
    auto t2 = with_stage("assemble-T2", [&] {
        return localize_operator(
            g,
            [&st, tol](const GridFunction& v) {
                GridFunction h = detail::invert_inner(st, v, tol).w;
                return st.scale.values * split_remainder(st, st.scale.values * h).first;
            },
            st.params.delta0, origin);
    });
    st.T2 = std::make_shared<const KernelOperator>(std::move(t2));
    st.diag.t2_columns = st.T2->cols().size();
    auto n2 = estimate_norm(*st.T2);
    st.diag.t2_norm = n2.value;
    st.diag.t2_converged = n2.converged;
    st.diag.linf_bound_t2 = linf_kernel_bound(*st.T2, st.params.delta0);
}

inline void assemble_inner_operators(MicroSolveState& st) {
    assemble_t1(st);
    assemble_t2(st);
}

// Moves the inner scale to delta0 and reassembles T_2; T_1 does not depend on delta0.
inline void set_inner_scale(MicroSolveState& st, double delta0) {
    SolveParams p = st.params;
    p.delta0 = delta0;
    p.validate();
    st.params = p;
    st.inner = spatial_bump(st.problem.grid, {0.0, 0.0}, delta0);
    assemble_t2(st);
}

inline MicroSolveState prepare_linearized(const LinearProblem& prob, const SolveParams& params) {
    MicroSolveState st = prepare_cones(prob, params);
    assemble_inner_operators(st);
    return st;
}

// Points with |(t, x)| <= c2 delta0.
inline std::vector<std::size_t> window_points(const TorusGrid& g, double radius) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < g.size(); ++k) {
        Point p = g.centered_point(k);
        if (std::hypot(p[0], p[1]) <= radius + 1e-12) out.push_back(k);
    }
    return out;
}

inline double window_norm(const GridFunction& u, const std::vector<std::size_t>& pts) {
    double acc = 0.0;
    for (auto k : pts) acc += std::norm(u.values[k]);
    return std::sqrt(acc * u.grid.cell_volume());
}

// Solves P u = f on |x| <= c2 delta0 with the prepared operators.
inline LinearSolution solve_prepared(const MicroSolveState& st, const GridFunction& f) {
    if (!st.T1 || !st.T2) throw DomainError("inner operators are not assembled");
    if (!(st.diag.t2_norm < 1.0))
        throw NotContractive("(id + T_2) is not contractive: shrink delta0 (norm " + std::to_string(st.diag.t2_norm) + ")",
                             st.diag.t2_norm);
    const double tol = st.params.neumann_tol;
    LinearSolution sol;
    sol.rhs = f;
    GridFunction F = st.inner.values * f;
    auto outer = detail::contracting_series(*st.T2, F, tol, st.diag.t2_norm, "T_2");
    auto inner = detail::invert_inner(st, st.inner.values * outer.w, tol);
    sol.outer_terms = outer.terms;
    sol.inner_terms = inner.terms;
    const GridFunction data = st.scale.values * inner.w;
    sol.u = assemble_microsolution(st, data, &sol.pieces);
    sol.window_radius = st.params.c2 * st.params.delta0;
    auto pts = window_points(f.grid, sol.window_radius);
    sol.window_points = pts.size();
    GridFunction r = apply_operator(st, sol.u) - f;
    sol.residual = window_norm(r, pts);
    const double fn = window_norm(f, pts);
    sol.relative_residual = fn > 0.0 ? sol.residual / fn : sol.residual;
    sol.tolerance = 1e3 * tol * std::max(1.0, l2_norm(F));
    sol.residual_ok = sol.residual <= sol.tolerance;
    return sol;
}

inline std::pair<LinearSolution, MicroSolveState> solve_linearized(const LinearProblem& prob, const GridFunction& f,
                                                                   const SolveParams& params) {
    MicroSolveState st = prepare_linearized(prob, params);
    LinearSolution sol = solve_prepared(st, f);
    return {std::move(sol), std::move(st)};
}

// ---------------------------------------------------------------------------
// Derivative functionals

struct DerivativeValue {
    std::array<int, 2> alpha{0, 0};
    cplx value;
    double scaled = 0.0;  // rho^{m-1-|alpha|} |d^alpha u(x)|
};

struct DerivativeReport {
    Point x{0.0, 0.0};
    std::vector<DerivativeValue> values;
    double tail_sum = 0.0;  // sum of |u_hat| over |xi| >= rho / 2
};

// d^alpha u(x) by spectral differentiation at a grid-free point.
inline cplx spectral_derivative(const GridFunction& u, std::array<int, 2> alpha, Point x) {
    auto s = forward_transform(u);
    const auto& g = u.grid;
    cplx acc = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) {
        auto f = g.freq(k);
        bool nyq = (alpha[0] % 2 == 1 && f[0] == -g.nyquist()) || (alpha[1] % 2 == 1 && f[1] == -g.nyquist());
        if (nyq) continue;
        const double phase = f[0] * x[0] + (g.dim() == 2 ? f[1] * x[1] : 0.0);
        acc += s.coeffs[k] * std::pow(cplx(0, f[0]), alpha[0]) * std::pow(cplx(0, f[1]), alpha[1]) * std::polar(1.0, phase);
    }
    return acc;
}

inline DerivativeReport derivative_functionals(const MicroSolveState& st, const GridFunction& u, Point x, int m) {
    if (std::hypot(x[0], x[1]) > st.params.c2 * st.params.delta0 + 1e-12)
        throw DomainError("derivative functionals are evaluated inside the window |x| <= c2 delta0");
    DerivativeReport rep;
    rep.x = x;
    for (auto a : jet_multi_indices(2, m - 1)) {
        DerivativeValue d;
        d.alpha = a;
        d.value = spectral_derivative(u, a, x);
        d.scaled = std::pow(st.params.rho, m - 1 - (a[0] + a[1])) * std::abs(d.value);
        rep.values.push_back(d);
    }
    auto s = forward_transform(u);
    for (std::size_t k = 0; k < s.coeffs.size(); ++k)
        if (detail::freq_norm(u.grid, k) >= 0.5 * st.params.rho) rep.tail_sum += std::abs(s.coeffs[k]);
    return rep;
}

// ---------------------------------------------------------------------------
// Data reduction

struct ReducedData {
    Symbol principal;
    Symbol subprincipal;
    int order = 1;
    std::vector<cplx> prescribed;  // u_alpha in jet_multi_indices(2, m - 1) order
    GridFunction offset;           // Phi sum u_alpha x^alpha / alpha!
    GridFunction f0;               // f - P(jets of offset) offset
    int jet_depth = 0;
};

namespace detail {

inline double factorial_int(int k) {
    double r = 1.0;
    for (int i = 2; i <= k; ++i) r *= i;
    return r;
}

inline int needed_jet_depth(const Symbol& a, const Symbol& b, int depth) {
    const int arity = std::max(a.jet_arity(), b.jet_arity());
    int d = depth;
    while (int(jet_multi_indices(2, d).size()) < arity) ++d;
    return d;
}

inline QuantizedOp full_operator(const Symbol& p_m, const Symbol& p_sub, int order, const TorusGrid& g,
                                 std::optional<JetField> jets) {
    QuantOptions qo;
    qo.layout = Layout::SpaceTime;
    qo.centered = true;
    return QuantizedOp(detail::symbol_sum(p_m, p_sub, order), g, qo, std::move(jets));
}

}  // namespace detail

// P_0(v) = P(v + offset); f_0 = f - P(jets of offset) offset.
inline ReducedData reduce_data(const std::vector<cplx>& prescribed, const GridFunction& f, const Symbol& p_m,
                               const Symbol& p_sub, const SolveParams& params) {
    auto hom = p_m.homogeneous_degree();
    if (!hom || *hom < 1.0) throw DomainError("principal symbol must be homogeneous of degree m >= 1");
    ReducedData red;
    red.principal = p_m;
    red.subprincipal = p_sub;
    red.order = int(std::lround(*hom));
    const auto alphas = jet_multi_indices(2, red.order - 1);
    if (prescribed.size() != alphas.size())
        throw DimensionMismatch("need " + std::to_string(alphas.size()) + " prescribed derivatives for order " +
                                std::to_string(red.order));
    red.prescribed = prescribed;
    red.jet_depth = detail::needed_jet_depth(p_m, p_sub, params.jet_depth);
    const TorusGrid& g = f.grid;
    SpatialBump phi = spatial_bump(g, {0.0, 0.0}, params.outer_radius);
    red.offset = GridFunction(g);
    for (std::size_t k = 0; k < g.size(); ++k) {
        Point p = g.centered_point(k);
        cplx acc = 0.0;
        for (std::size_t i = 0; i < alphas.size(); ++i)
            acc += prescribed[i] * std::pow(p[0], alphas[i][0]) * std::pow(p[1], alphas[i][1]) /
                   (detail::factorial_int(alphas[i][0]) * detail::factorial_int(alphas[i][1]));
        red.offset.values[k] = phi.values.values[k] * acc;
    }
    // The principal type must hold at the prescribed jet.
    auto jets = make_jet_field(red.offset, red.jet_depth);
    auto j0 = jets.at(0);
    BasePoint base{0.0, {0.0, 0.0}, std::vector<cplx>(j0.begin(), j0.end())};
    for (auto& cone : build_cone_partition(2, params.cone_aperture, FreqAxes::TauXi)) {
        try {
            check_principal_type(p_m, base, cone);
        } catch (const DomainError& e) {
            throw DomainError(std::string("prescribed data outside the principal-type neighbourhood: ") + e.what());
        }
    }
    bool zero = true;
    for (auto c : prescribed) zero = zero && c == cplx(0.0);
    if (zero) {
        red.f0 = f;
        return red;
    }
    auto P = detail::full_operator(p_m, p_sub, red.order, g, jets);
    red.f0 = f - P.apply(red.offset);
    return red;
}

// ---------------------------------------------------------------------------
// Quasilinear Picard driver

struct PicardStep {
    int iteration = 0;
    double phi_v_norm = 0.0;   // ||Phi v^j||_(l)
    double update_norm = 0.0;  // ||Phi (v^{j+1} - v^j)||_(k)
    std::vector<double> update_norms;  // the same for Sobolev indices 0..l
    double envelope_ratio = 0.0;  // ||Phi v^j||_(l)^2 / ||f0||_(l)^2
    double linear_residual = 0.0;
    double t1_norm = 0.0;
    double t2_norm = 0.0;
    double imag_before_projection = 0.0;  // ||Im v||_inf / ||v||_inf before Re projection
};

struct SolveReport {
    std::string status = "ok";
    SolveParams params;
    int order = 1;
    int iterations = 0;
    bool converged = false;
    double residual = 0.0;           // ||P(u) u - f||_0 on the window
    double relative_residual = 0.0;
    double window_radius = 0.0;
    std::size_t window_points = 0;
    double f0_norm = 0.0;            // ||f0||_(l)
    double fitted_C = 0.0;           // C_l(1): max envelope ratio
    double fitted_C_tilde = 0.0;     // (rho^{m-1} ||Phi v|| / sum_k ||Phi v_k||)^2
    double rho0 = 0.0;               // rho_0 from the cutoff rule
    std::vector<PicardStep> steps;
    LinearDiagnostics linear;
    std::vector<std::string> cone_kinds;
    double imag_ratio = 0.0;         // ||Im u||_inf / ||u||_inf
};

struct QuasiSolution {
    GridFunction u;
    GridFunction v;
    std::vector<cplx> matched_w;
    std::vector<cplx> derivative_deviation;  // d^alpha u(0) - u_alpha
    bool real_mode = false;
    SolveReport report;
};

struct QuasiOptions {
    bool real_mode = false;
    bool auto_raise_rho = true;
    double max_rho = 0.0;  // 0: half the grid Nyquist frequency
    // Prepared operators reused across solves of a jet-free operator at equal rho.
    std::shared_ptr<std::optional<MicroSolveState>> linear_cache;
};

namespace detail {

// Largest |i^m p(xi) - conj(i^m p(-xi))| over sampled points.
inline double real_operator_defect(const Symbol& p, int m, int jet_arity) {
    std::mt19937 gen(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<cplx> jet(std::max(1, jet_arity));
    const cplx im = std::pow(cplx(0.0, 1.0), m);
    double worst = 0.0;
    for (int s = 0; s < 64; ++s) {
        for (auto& j : jet) j = u(gen);
        EvalPoint a;
        a.t = 3 * u(gen);
        a.x = {3 * u(gen), 0.0};
        a.tau = 8 * u(gen);
        a.xi = {8 * u(gen), 0.0};
        a.jet = jet;
        EvalPoint b = a;
        b.tau = -a.tau;
        b.xi = {-a.xi[0], 0.0};
        const cplx pa = im * p.eval(a), pb = im * p.eval(b);
        worst = std::max(worst, std::abs(pa - std::conj(pb)) / std::max(1.0, std::abs(pa)));
    }
    return worst;
}

inline GridFunction real_part(const GridFunction& v) {
    GridFunction r = v;
    for (auto& c : r.values) c = c.real();
    return r;
}

inline double imag_ratio(const GridFunction& v) {
    double im = 0.0, all = 0.0;
    for (auto c : v.values) {
        im = std::max(im, std::abs(c.imag()));
        all = std::max(all, std::abs(c));
    }
    return all > 0.0 ? im / all : 0.0;
}

}  // namespace detail

inline QuasiSolution quasilinear_solve(const Symbol& p_m, const Symbol& p_sub, const GridFunction& f,
                                       const std::vector<cplx>& prescribed, SolveParams params,
                                       const QuasiOptions& opts = {}) {
    params.validate();
    const TorusGrid& g = f.grid;
    ReducedData red = with_stage("reduce", [&] { return reduce_data(prescribed, f, p_m, p_sub, params); });
    const int m = red.order;
    const cplx im = std::pow(cplx(0.0, 1.0), m);
    if (opts.real_mode) {
        const Symbol full = detail::symbol_sum(p_m, p_sub, m);
        const int arity = std::max(p_m.jet_arity(), p_sub.jet_arity());
        if (detail::real_operator_defect(full, m, arity) > 1e-10)
            throw ConfigError("real mode needs i^m p to be a real symbol");
        double bad = 0.0;
        for (auto c : f.values) bad = std::max(bad, std::abs((im * c).imag()));
        for (auto c : prescribed) bad = std::max(bad, std::abs(c.imag()));
        if (bad > 1e-12 * std::max(1.0, sup_norm(f))) throw ConfigError("real mode needs i^m f and the prescribed data real");
    }
    const double max_rho = opts.max_rho > 0.0 ? opts.max_rho : 0.5 * g.nyquist();
    const int ell = red.jet_depth;
    SpatialBump phi = spatial_bump(g, {0.0, 0.0}, params.outer_radius);
    const double f0_norm = sobolev_norm(red.f0, ell);
    const double f0_k = sobolev_norm(red.f0, params.sobolev_index);

    QuasiSolution out;
    out.real_mode = opts.real_mode;
    SolveReport& rep = out.report;
    rep.order = m;
    rep.f0_norm = f0_norm;
    // Plateau of Phi for the Cauchy rule.
    GridFunction plateau = spatial_bump(g, {0.0, 0.0}, 0.5 * params.outer_radius).values;

    for (;;) {
        rep.params = params;
        rep.steps.clear();
        GridFunction v(g);
        bool raised = false;
        std::optional<MicroSolveState> last;
        for (int j = 0; j < params.max_picard_iters; ++j) {
            GridFunction frozen = phi.values * v + red.offset;
            std::optional<JetField> jets;
            if (std::max(p_m.jet_arity(), p_sub.jet_arity()) > 0) jets = make_jet_field(frozen, ell);
            // Graph of the jets on the window must stay where P is of principal type.
            if (jets && j > 0) {
                auto pts = window_points(g, params.c2 * params.delta0);
                auto cones = build_cone_partition(2, params.cone_aperture, FreqAxes::TauXi);
                for (auto k : pts) {
                    auto jk = jets->at(k);
                    Point c = g.centered_point(k);
                    BasePoint bp{c[0], {c[1], 0.0}, std::vector<cplx>(jk.begin(), jk.end())};
                    for (auto& cone : cones) {
                        try {
                            check_principal_type(p_m, bp, cone);
                        } catch (const DomainError& e) {
                            throw DomainError(std::string("iterate left the principal-type neighbourhood: ") + e.what());
                        }
                    }
                }
            }
            LinearProblem prob{p_m, p_sub, g, jets};
            MicroSolveState st = !jets && opts.linear_cache && *opts.linear_cache &&
                                         (*opts.linear_cache)->params.rho == params.rho
                                     ? **opts.linear_cache
                                     : with_stage("linearized-solve", [&] { return prepare_linearized(prob, params); });
            if (!jets && opts.linear_cache) *opts.linear_cache = st;
            GridFunction rhs = red.f0;
            if (j > 0 && jets) rhs = f - detail::full_operator(p_m, p_sub, m, g, jets).apply(red.offset);
            LinearSolution sol = with_stage("linearized-solve", [&] { return solve_prepared(st, rhs); });
            PicardStep step;
            step.iteration = j + 1;
            step.imag_before_projection = detail::imag_ratio(sol.u);
            GridFunction next = opts.real_mode ? detail::real_part(sol.u) : sol.u;
            step.linear_residual = sol.residual;
            step.t1_norm = st.diag.t1_norm;
            step.t2_norm = st.diag.t2_norm;
            const double pv = sobolev_norm(phi.values * next, ell);
            step.phi_v_norm = pv;
            step.envelope_ratio = f0_norm > 0.0 ? pv * pv / (f0_norm * f0_norm) : 0.0;
            const GridFunction update = plateau * (next - v);
            step.update_norm = sobolev_norm(update, params.sobolev_index);
            for (int k = 0; k <= ell; ++k) step.update_norms.push_back(sobolev_norm(update, k));
            rep.steps.push_back(step);
            rep.fitted_C = std::max(rep.fitted_C, step.envelope_ratio);
            // Strip estimate constant from the per-cone pieces.
            double pieces = 0.0;
            for (auto& pc : sol.pieces) pieces += sobolev_norm(phi.values * pc, ell);
            if (pieces > 0.0)
                rep.fitted_C_tilde =
                    std::max(rep.fitted_C_tilde, std::pow(std::pow(params.rho, m - 1) * pv / pieces, 2));
            if (j > 0 && step.envelope_ratio > 2.0 * rep.steps.front().envelope_ratio)
                throw ConvergenceError("Picard iterate left the fitted envelope 2 C_l(1)");
            v = next;
            last.emplace(std::move(st));
            rep.iterations = j + 1;
            // Without jets the iteration map is constant, so v^1 is the fixed point.
            if (!jets || step.update_norm <= params.picard_tol * std::max(f0_k, 1e-300) || f0_k == 0.0) {
                rep.converged = true;
                break;
            }
        }
        // rho_0^{m-1} = N sqrt(C~ C) ||f0||_(l).
        if (m > 1) {
            const double ncones = last ? double(last->cones.size()) : 1.0;
            rep.rho0 = std::pow(ncones * std::sqrt(rep.fitted_C_tilde * rep.fitted_C) * f0_norm, 1.0 / (m - 1));
            if (opts.auto_raise_rho && params.rho < rep.rho0 && 2.0 * params.rho <= max_rho) {
                params = at_rho(params, 2.0 * params.rho);
                raised = true;
            }
        }
        if (raised) continue;
        if (!rep.converged)
            throw ConvergenceError("Picard iteration did not converge in " + std::to_string(params.max_picard_iters) +
                                   " iterations");
        out.v = v;
        out.u = v + red.offset;
        std::optional<JetField> jets;
        if (std::max(p_m.jet_arity(), p_sub.jet_arity()) > 0) jets = make_jet_field(phi.values * v + red.offset, ell);
        auto P = detail::full_operator(p_m, p_sub, m, g, jets);
        auto pts = window_points(g, params.c2 * params.delta0);
        GridFunction r = P.apply(out.u) - f;
        rep.residual = window_norm(r, pts);
        const double fn = window_norm(f, pts);
        rep.relative_residual = fn > 0.0 ? rep.residual / fn : rep.residual;
        rep.window_radius = params.c2 * params.delta0;
        rep.window_points = pts.size();
        rep.imag_ratio = detail::imag_ratio(out.u);
        if (last) {
            rep.linear = last->diag;
            for (auto& c : last->cones) rep.cone_kinds.push_back(cone_kind_name(c.kind));
        }
        out.matched_w = prescribed;
        const auto alphas = jet_multi_indices(2, m - 1);
        for (std::size_t i = 0; i < alphas.size(); ++i)
            out.derivative_deviation.push_back(spectral_derivative(out.u, alphas[i], {0.0, 0.0}) - prescribed[i]);
        return out;
    }
}

// ---------------------------------------------------------------------------
// Matching prescribed derivatives

struct MatchReport {
    std::vector<cplx> w;                   // solved offsets
    std::vector<double> deviations;        // max_alpha |d^alpha u(0) - u_alpha| per step
    std::vector<double> contraction;       // successive deviation ratios
    int steps = 0;
    bool converged = false;
};

// Fixed point w <- target - (D(w) - w) for a derivative map D.
inline MatchReport match_fixed_point(const std::function<std::vector<cplx>(const std::vector<cplx>&)>& derivatives,
                                     const std::vector<cplx>& target, double tol, int max_steps = 10) {
    MatchReport rep;
    rep.w = target;
    for (int s = 0; s <= max_steps; ++s) {
        auto d = derivatives(rep.w);
        if (d.size() != target.size()) throw DimensionMismatch("derivative map returned the wrong number of values");
        double dev = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) dev = std::max(dev, std::abs(d[i] - target[i]));
        rep.deviations.push_back(dev);
        if (rep.deviations.size() > 1) {
            const double prev = rep.deviations[rep.deviations.size() - 2];
            rep.contraction.push_back(prev > 0.0 ? dev / prev : 0.0);
        }
        if (dev < tol) {
            rep.converged = true;
            return rep;
        }
        if (s == max_steps) break;
        for (std::size_t i = 0; i < d.size(); ++i) rep.w[i] -= d[i] - target[i];
        ++rep.steps;
    }
    std::string factors;
    for (double c : rep.contraction) factors += " " + std::to_string(c);
    throw ConvergenceError("derivative matching did not converge; contraction factors:" + factors);
}

// Solves P(u) u = f near 0 with d^alpha u(0) = u_alpha for |alpha| < m.
inline std::pair<QuasiSolution, MatchReport> match_initial_derivatives(const Symbol& p_m, const Symbol& p_sub,
                                                                       const GridFunction& f,
                                                                       const std::vector<cplx>& target,
                                                                       const SolveParams& params, double match_tol,
                                                                       const QuasiOptions& opts = {},
                                                                       int max_steps = 10) {
    std::optional<QuasiSolution> last;
    QuasiOptions solve_opts = opts;
    if (!solve_opts.linear_cache) solve_opts.linear_cache = std::make_shared<std::optional<MicroSolveState>>();
    auto derivs = [&](const std::vector<cplx>& w) {
        last = quasilinear_solve(p_m, p_sub, f, w, params, solve_opts);
        std::vector<cplx> d(w.size());
        for (std::size_t i = 0; i < w.size(); ++i) d[i] = w[i] + last->derivative_deviation[i];
        return d;
    };
    MatchReport rep = match_fixed_point(derivs, target, match_tol, max_steps);
    QuasiSolution sol = std::move(*last);
    sol.matched_w = rep.w;
    for (std::size_t i = 0; i < target.size(); ++i)
        sol.derivative_deviation[i] += rep.w[i] - target[i];
    return {std::move(sol), std::move(rep)};
}

}  // namespace microsolve
