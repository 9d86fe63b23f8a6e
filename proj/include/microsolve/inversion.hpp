#pragma once
/*
 * Localized kernels and Neumann-series inversion of id + S.
 *
 * A KernelOperator acts by (S f)(x_i) = sum_j K(x_i, y_j) f(y_j) dV with dV
 * the grid cell volume.  Only the rows and columns listed in its support sets
 * are stored, so the kernel is exactly zero elsewhere.
 */

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "cutoffs.hpp"
#include "grid.hpp"
#include "parallel.hpp"

namespace microsolve {

struct SupportBall {
    Point center{0.0, 0.0};
    double radius = std::numeric_limits<double>::infinity();  // infinite: whole torus
};

class KernelOperator {
public:
    KernelOperator() = default;
    KernelOperator(TorusGrid g, std::vector<std::size_t> rows, std::vector<std::size_t> cols, std::vector<cplx> kernel,
                   SupportBall row_support = {}, SupportBall col_support = {})
        : grid_(g), rows_(std::move(rows)), cols_(std::move(cols)), k_(std::move(kernel)), row_ball_(row_support),
          col_ball_(col_support) {
        if (k_.size() != rows_.size() * cols_.size()) throw DimensionMismatch("kernel size does not match its supports");
    }

    // Kernel K(x, y) sampled on the full grid.
    template <class F>
    static KernelOperator from_function(const TorusGrid& g, F&& kernel) {
        std::vector<std::size_t> all(g.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        std::vector<cplx> k(g.size() * g.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t j = 0; j < g.size(); ++j) k[i * g.size() + j] = kernel(g.point(i), g.point(j));
        return KernelOperator(g, all, all, std::move(k));
    }

    // Columns of a linear operator, K(., y_j) = op(e_j) / dV, for the listed input points.
    static KernelOperator assemble(const TorusGrid& g, const std::function<GridFunction(const GridFunction&)>& op,
                                   std::vector<std::size_t> cols, SupportBall col_support = {}) {
        std::vector<std::size_t> rows(g.size());
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
        const std::size_t nr = rows.size(), nc = cols.size();
        std::vector<cplx> k(nr * nc);
        const double inv_dv = 1.0 / g.cell_volume();
        parallel_for(nc, [&](std::size_t c) {
            GridFunction e(g);
            e.values[cols[c]] = inv_dv;
            GridFunction col = op(e);
            for (std::size_t r = 0; r < nr; ++r) k[r * nc + c] = col.values[r];
        }, 1);
        return KernelOperator(g, std::move(rows), std::move(cols), std::move(k), SupportBall{}, col_support);
    }

    const TorusGrid& grid() const { return grid_; }
    const std::vector<std::size_t>& rows() const { return rows_; }
    const std::vector<std::size_t>& cols() const { return cols_; }
    const std::vector<cplx>& kernel() const { return k_; }
    const SupportBall& row_support() const { return row_ball_; }
    const SupportBall& col_support() const { return col_ball_; }
    cplx at(std::size_t r, std::size_t c) const { return k_[r * cols_.size() + c]; }

    // K(x_i, y_j) for grid indices, zero outside the supports.
    cplx kernel_at(std::size_t i, std::size_t j) const {
        auto r = std::find(rows_.begin(), rows_.end(), i);
        auto c = std::find(cols_.begin(), cols_.end(), j);
        if (r == rows_.end() || c == cols_.end()) return 0.0;
        return at(std::size_t(r - rows_.begin()), std::size_t(c - cols_.begin()));
    }

    GridFunction apply(const GridFunction& f) const {
        if (f.grid != grid_) throw DimensionMismatch("input lives on a different grid than the kernel");
        GridFunction out(grid_);
        const double dv = grid_.cell_volume();
        const std::size_t nc = cols_.size();
        parallel_for(rows_.size(), [&](std::size_t r) {
            cplx acc = 0.0;
            for (std::size_t c = 0; c < nc; ++c) acc += k_[r * nc + c] * f.values[cols_[c]];
            out.values[rows_[r]] = acc * dv;
        });
        return out;
    }
    GridFunction operator()(const GridFunction& f) const { return apply(f); }

    GridFunction apply_adjoint(const GridFunction& f) const {
        if (f.grid != grid_) throw DimensionMismatch("input lives on a different grid than the kernel");
        GridFunction out(grid_);
        const double dv = grid_.cell_volume();
        const std::size_t nc = cols_.size();
        for (std::size_t r = 0; r < rows_.size(); ++r) {
            const cplx fr = f.values[rows_[r]];
            if (fr == cplx(0.0)) continue;
            for (std::size_t c = 0; c < nc; ++c) out.values[cols_[c]] += std::conj(k_[r * nc + c]) * fr * dv;
        }
        return out;
    }

    double sup_kernel() const {
        double m = 0.0;
        for (auto& v : k_) m = std::max(m, std::abs(v));
        return m;
    }

private:
    TorusGrid grid_;
    std::vector<std::size_t> rows_, cols_;
    std::vector<cplx> k_;
    SupportBall row_ball_, col_ball_;
};

namespace detail {

inline std::vector<std::size_t> bump_support(const SpatialBump& b) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < b.values.size(); ++k)
        if (b.values.values[k] != cplx(0.0)) out.push_back(k);
    return out;
}

}  // namespace detail

// S_delta(x, y) = Phi_delta(x) S(x, y) Phi_delta(y), supported in the 2 delta ball on each side.
inline KernelOperator localize_kernel(const KernelOperator& S, double delta, Point center) {
    const auto& g = S.grid();
    SpatialBump bump = spatial_bump(g, center, delta);
    std::vector<std::size_t> rows, cols;
    std::vector<std::size_t> row_pos, col_pos;
    for (std::size_t r = 0; r < S.rows().size(); ++r)
        if (bump.values.values[S.rows()[r]] != cplx(0.0)) {
            rows.push_back(S.rows()[r]);
            row_pos.push_back(r);
        }
    for (std::size_t c = 0; c < S.cols().size(); ++c)
        if (bump.values.values[S.cols()[c]] != cplx(0.0)) {
            cols.push_back(S.cols()[c]);
            col_pos.push_back(c);
        }
    std::vector<cplx> k(rows.size() * cols.size());
    for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < cols.size(); ++c)
            k[r * cols.size() + c] = bump.values.values[rows[r]] * S.at(row_pos[r], col_pos[c]) * bump.values.values[cols[c]];
    const SupportBall ball{center, 2.0 * delta};
    return KernelOperator(g, std::move(rows), std::move(cols), std::move(k), ball, ball);
}

// Localizes an operator given as a probe; only the columns inside the bump support are assembled.
inline KernelOperator localize_operator(const TorusGrid& g, const std::function<GridFunction(const GridFunction&)>& op,
                                        double delta, Point center) {
    SpatialBump bump = spatial_bump(g, center, delta);
    auto cols = detail::bump_support(bump);
    KernelOperator S = KernelOperator::assemble(g, op, cols, SupportBall{center, 2.0 * delta});
    return localize_kernel(S, delta, center);
}

// c_d (2 delta)^d sup|K|, the L-infinity bound of a kernel supported in 2 delta balls.
inline double linf_kernel_bound(const KernelOperator& S, double delta) {
    const int d = S.grid().dim();
    const double ball = d == 1 ? 2.0 * (2.0 * delta) : std::numbers::pi * std::pow(2.0 * delta, 2);
    return ball * S.sup_kernel();
}

enum class NormSpace { L2, Linf };

struct NormEstimate {
    double value = 0.0;
    bool converged = true;
    int iterations = 0;
};

// sqrt of the top eigenvalue of op* op by power iteration from a seeded random start.
inline NormEstimate power_norm(const TorusGrid& g, const std::function<GridFunction(const GridFunction&)>& op,
                               const std::function<GridFunction(const GridFunction&)>& adjoint, int max_iter = 30,
                               double rel_tol = 1e-3, unsigned seed = 7) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n01;
    GridFunction x(g);
    for (auto& v : x.values) v = cplx(n01(rng), n01(rng));
    NormEstimate est;
    est.converged = false;
    double prev = 0.0;
    double nx = l2_norm(x);
    for (int it = 1; it <= max_iter; ++it) {
        x *= cplx(1.0 / nx);
        GridFunction y = adjoint(op(x));
        nx = l2_norm(y);
        est.iterations = it;
        est.value = std::sqrt(nx);
        if (nx == 0.0) {
            est.converged = true;
            break;
        }
        if (it > 1 && std::abs(est.value - prev) <= rel_tol * est.value) {
            est.converged = true;
            break;
        }
        prev = est.value;
        x = y;
    }
    return est;
}

inline NormEstimate estimate_norm(const KernelOperator& S, NormSpace space = NormSpace::L2, int max_iter = 30,
                                  double rel_tol = 1e-3) {
    if (space == NormSpace::Linf) {
        NormEstimate est;
        const double dv = S.grid().cell_volume();
        const std::size_t nc = S.cols().size();
        for (std::size_t r = 0; r < S.rows().size(); ++r) {
            double row = 0.0;
            for (std::size_t c = 0; c < nc; ++c) row += std::abs(S.at(r, c));
            est.value = std::max(est.value, row * dv);
        }
        return est;
    }
    return power_norm(
        S.grid(), [&S](const GridFunction& f) { return S.apply(f); },
        [&S](const GridFunction& f) { return S.apply_adjoint(f); }, max_iter, rel_tol);
}

struct NeumannResult {
    GridFunction w;
    int terms = 0;
    std::vector<double> term_norms;
    double operator_norm = 0.0;
    double residual = 0.0;  // ||(id + S) w - f||
};

struct NeumannOptions {
    int max_terms = 1000;
    int norm_iterations = 30;
};

// w = sum_j (-S)^j f, stopped when the term norm drops below tol (1 - ||S||); S applied via apply().
template <class Op>
NeumannResult neumann_series(const Op& S, const GridFunction& f, double tol, double norm,
                             const NeumannOptions& opts = {}) {
    if (!(norm < 1.0)) throw NotContractive("operator norm " + std::to_string(norm) + " is not below 1", norm);
    NeumannResult res;
    res.operator_norm = norm;
    GridFunction term = f;
    res.w = f;
    double tn = l2_norm(term);
    res.term_norms.push_back(tn);
    const double stop = tol * (1.0 - norm);
    while (tn >= stop) {
        if (res.terms >= opts.max_terms) throw ConvergenceError("Neumann series did not reach the tolerance");
        term = S.apply(term);
        term *= cplx(-1.0);
        res.w += term;
        ++res.terms;
        tn = l2_norm(term);
        res.term_norms.push_back(tn);
    }
    GridFunction r = res.w + S.apply(res.w) - f;
    res.residual = l2_norm(r);
    return res;
}

inline NeumannResult neumann_invert(const KernelOperator& S, const GridFunction& f, double tol,
                                    const NeumannOptions& opts = {}) {
    auto est = estimate_norm(S, NormSpace::L2, opts.norm_iterations);
    return neumann_series(S, f, tol, est.value, opts);
}

// ---------------------------------------------------------------------------
// Smallness scaling law

struct ScalingSample {
    double rho = 0.0;
    double delta0 = 0.0;
    double norm = 0.0;
};

struct ScalingReport {
    int n = 0;
    double exponent_rho = 0.0;     // fitted p in norm ~ C rho^p delta0^q
    double exponent_delta = 0.0;   // fitted q
    double fitted_constant = 0.0;  // C of that fit
    double C0 = 0.0;               // calibrated on the smallest rho delta0 products
    double max_ratio = 0.0;        // max norm / (rho delta0)^n over the family
    bool holds = true;             // every sample satisfies norm <= C0 (rho delta0)^n
    bool degenerate = false;       // some norm vanished, no exponent fit
};

// Calibrates C0 where rho delta0 is smallest and checks norm <= C0 rho^n delta0^n across the family.
inline ScalingReport smallness_scaling_check(std::span<const ScalingSample> family, int n, double slack = 1e-9) {
    ScalingReport rep;
    rep.n = n;
    if (family.empty()) return rep;
    double min_prod = std::numeric_limits<double>::infinity();
    for (auto& s : family) min_prod = std::min(min_prod, s.rho * s.delta0);
    for (auto& s : family) {
        const double ratio = s.norm / std::pow(s.rho * s.delta0, n);
        rep.max_ratio = std::max(rep.max_ratio, ratio);
        if (s.rho * s.delta0 <= min_prod * (1.0 + 1e-12)) rep.C0 = std::max(rep.C0, ratio);
        rep.degenerate = rep.degenerate || !(s.norm > 0.0);
    }
    for (auto& s : family)
        rep.holds = rep.holds && s.norm <= rep.C0 * std::pow(s.rho * s.delta0, n) * (1.0 + slack);
    if (!rep.degenerate && family.size() >= 3) {
        // Least squares for log norm = log C + p log rho + q log delta0.
        double a[3][3] = {}, b[3] = {};
        for (auto& s : family) {
            const double v[3] = {1.0, std::log(s.rho), std::log(s.delta0)};
            const double y = std::log(s.norm);
            for (int i = 0; i < 3; ++i) {
                b[i] += v[i] * y;
                for (int j = 0; j < 3; ++j) a[i][j] += v[i] * v[j];
            }
        }
        // Gaussian elimination with partial pivoting.
        for (int c = 0; c < 3; ++c) {
            int p = c;
            for (int r = c + 1; r < 3; ++r)
                if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
            std::swap(a[c], a[p]);
            std::swap(b[c], b[p]);
            if (std::abs(a[c][c]) < 1e-300) {
                rep.degenerate = true;
                return rep;
            }
            for (int r = c + 1; r < 3; ++r) {
                const double m = a[r][c] / a[c][c];
                for (int j = c; j < 3; ++j) a[r][j] -= m * a[c][j];
                b[r] -= m * b[c];
            }
        }
        double x[3];
        for (int c = 2; c >= 0; --c) {
            double acc = b[c];
            for (int j = c + 1; j < 3; ++j) acc -= a[c][j] * x[j];
            x[c] = acc / a[c][c];
        }
        rep.fitted_constant = std::exp(x[0]);
        rep.exponent_rho = x[1];
        rep.exponent_delta = x[2];
    }
    return rep;
}

}  // namespace microsolve
