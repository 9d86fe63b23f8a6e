#pragma once
/*
 * Kohn-Nirenberg quantization on the torus:
 *   (A u)(x_k) = sum_xi a(v(x_k), x_k, xi) u_hat(xi) exp(i x_k . xi)
 * with D = -i d/dx.  At a Nyquist component the symbol is averaged over
 * xi_j = +-N/2 so that real symbols give real operators.
 */

#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <vector>

#include "grid.hpp"
#include "parallel.hpp"
#include "symbol.hpp"

namespace microsolve {

// Which symbol variables the grid axes carry.
enum class Layout {
    Spatial,    // axes are x1 (, x2); frequencies xi1 (, xi2)
    SpaceTime,  // 2-D grid: axis 0 is t / tau, axis 1 is x1 / xi1
};

struct QuantOptions {
    Layout layout = Layout::Spatial;
    bool centered = false;  // evaluate symbols at coordinates in [-pi, pi)
    double time = 0.0;      // value of t for Spatial layouts
    bool dealias = false;   // 2/3 rule on input and output spectra
};

// Multi-indices of jet slots, graded lexicographic over the grid axes.
inline std::vector<std::array<int, 2>> jet_multi_indices(int axes, int depth) {
    std::vector<std::array<int, 2>> out;
    for (int order = 0; order <= depth; ++order) {
        if (axes == 1) {
            out.push_back({order, 0});
            continue;
        }
        for (int a = order; a >= 0; --a) out.push_back({a, order - a});
    }
    return out;
}

// Per-point jet values (derivatives of a frozen function v).
struct JetField {
    TorusGrid grid;
    int arity = 0;
    std::vector<cplx> data;  // point-major

    std::span<const cplx> at(std::size_t k) const {
        if (arity == 0) return {};
        return std::span<const cplx>(data).subspan(k * arity, arity);
    }
};

// Spectral derivatives d^alpha v for all slots up to the given depth.
inline JetField make_jet_field(const GridFunction& v, int depth) {
    const auto& g = v.grid;
    auto slots = jet_multi_indices(g.dim(), depth);
    JetField j{g, int(slots.size()), std::vector<cplx>(g.size() * slots.size())};
    auto s = forward_transform(v);
    for (std::size_t q = 0; q < slots.size(); ++q) {
        auto a = slots[q];
        SpectrumFunction d(g);
        for (std::size_t i = 0; i < g.size(); ++i) {
            auto f = g.freq(i);
            // Odd derivatives vanish at the Nyquist frequency.
            bool nyq = (a[0] % 2 == 1 && f[0] == -g.nyquist()) || (a[1] % 2 == 1 && f[1] == -g.nyquist());
            d.coeffs[i] = nyq ? 0.0 : s.coeffs[i] * std::pow(cplx(0, f[0]), a[0]) * std::pow(cplx(0, f[1]), a[1]);
        }
        auto dv = inverse_transform(d);
        for (std::size_t k = 0; k < g.size(); ++k) j.data[k * slots.size() + q] = dv.values[k];
    }
    return j;
}

inline JetField constant_jet_field(const TorusGrid& g, std::span<const cplx> jet) {
    JetField j{g, int(jet.size()), {}};
    j.data.reserve(g.size() * jet.size());
    for (std::size_t k = 0; k < g.size(); ++k) j.data.insert(j.data.end(), jet.begin(), jet.end());
    return j;
}

namespace detail {

inline bool dealias_keep(const TorusGrid& g, Freq f) {
    const int cut = g.modes() / 3;
    return std::abs(f[0]) <= cut && std::abs(f[1]) <= cut;
}

// Roots of unity exp(2 pi i m / N).
inline std::vector<cplx> roots_of_unity(int n) {
    std::vector<cplx> w(n);
    for (int m = 0; m < n; ++m) w[m] = std::polar(1.0, two_pi * m / n);
    return w;
}

}  // namespace detail

class QuantizedOp {
public:
    QuantizedOp(Symbol s, TorusGrid g, QuantOptions opts = {}, std::optional<JetField> jet = std::nullopt)
        : sym_(std::move(s)), grid_(g), opts_(opts), jet_(std::move(jet)), cache_(std::make_shared<Cache>()) {
        if (opts_.layout == Layout::SpaceTime && grid_.dim() != 2)
            throw DimensionMismatch("space-time layout needs a 2-D grid");
        if (sym_.jet_arity() > 0 && !jet_) throw DomainError("jet field missing for a symbol with jet arity > 0");
        if (jet_) {
            if (jet_->grid != grid_) throw DimensionMismatch("jet field lives on a different grid");
            if (jet_->arity < sym_.jet_arity()) throw DomainError("jet field has fewer slots than the symbol needs");
        }
        build_separable();
    }

    const Symbol& symbol() const { return sym_; }
    const TorusGrid& grid() const { return grid_; }
    const QuantOptions& options() const { return opts_; }
    bool has_fast_path() const { return !terms_.empty() || separable_zero_; }

    // Symbol variables at grid point k and lattice frequency f.
    EvalPoint eval_point(std::size_t k, Freq f) const {
        EvalPoint p;
        Point x = opts_.centered ? grid_.centered_point(k) : grid_.point(k);
        if (opts_.layout == Layout::SpaceTime) {
            p.t = x[0];
            p.x = {x[1], 0.0};
            p.tau = f[0];
            p.xi = {double(f[1]), 0.0};
        } else {
            p.t = opts_.time;
            p.x = x;
            p.xi = {double(f[0]), double(f[1])};
        }
        if (jet_) p.jet = jet_->at(k);
        return p;
    }

    // Symbol value with Nyquist averaging.
    cplx entry(std::size_t k, Freq f) const {
        return nyquist_average(f, [&](Freq g) { return sym_.eval(eval_point(k, g)); });
    }

    GridFunction apply(const GridFunction& u) const {
        if (has_fast_path()) return apply_fast(u);
        return apply_naive(u);
    }

    // Direct O(N^2d) summation.
    GridFunction apply_naive(const GridFunction& u) const {
        check_grid(u);
        auto s = spectrum(u);
        const auto& tab = table();
        const int n = grid_.modes();
        auto roots = detail::roots_of_unity(n);
        GridFunction out(grid_);
        const std::size_t sz = grid_.size();
        std::vector<std::size_t> active;
        for (std::size_t q = 0; q < sz; ++q)
            if (s.coeffs[q] != cplx(0.0)) active.push_back(q);
        parallel_for(sz, [&](std::size_t k) {
            auto mk = grid_.multi_index(k);
            cplx acc = 0.0;
            for (std::size_t q : active) {
                auto f = grid_.freq(q);
                long m = (long(mk[0]) * f[0] + long(mk[1]) * f[1]) % n;
                if (m < 0) m += n;
                cplx a = tab.empty() ? entry(k, f) : tab[k * sz + q];
                acc += a * s.coeffs[q] * roots[m];
            }
            out.values[k] = acc;
        });
        return finish(out);
    }

    // Sum over separable terms alpha_r(x) * beta_r(D) u.
    GridFunction apply_fast(const GridFunction& u) const {
        check_grid(u);
        auto s = spectrum(u);
        GridFunction out(grid_);
        SpectrumFunction tmp(grid_);
        for (const auto& t : terms_) {
            for (std::size_t q = 0; q < s.coeffs.size(); ++q) tmp.coeffs[q] = t.freq[q] * s.coeffs[q];
            auto w = inverse_transform(tmp);
            if (t.pos.empty()) {
                out += w;
            } else {
                for (std::size_t k = 0; k < out.size(); ++k) out.values[k] += t.pos[k] * w.values[k];
            }
        }
        return finish(out);
    }

    // Full symbol table a(x_k, xi_q), built once when it fits in memory.
    const std::vector<cplx>& table() const {
        std::call_once(cache_->once, [this] {
            const std::size_t sz = grid_.size();
            if (sz * sz > max_table_entries) return;
            cache_->table.resize(sz * sz);
            parallel_for(sz, [&](std::size_t k) {
                for (std::size_t q = 0; q < sz; ++q) cache_->table[k * sz + q] = entry(k, grid_.freq(q));
            });
        });
        return cache_->table;
    }

    static constexpr std::size_t max_table_entries = std::size_t(1) << 21;

private:
    struct Term {
        std::vector<cplx> pos;   // empty: identically 1
        std::vector<cplx> freq;  // per lattice index
    };
    struct Cache {
        std::once_flag once;
        std::vector<cplx> table;
    };

    Symbol sym_;
    TorusGrid grid_;
    QuantOptions opts_;
    std::optional<JetField> jet_;
    std::vector<Term> terms_;
    bool separable_zero_ = false;
    std::shared_ptr<Cache> cache_;

    template <class F>
    cplx nyquist_average(Freq f, F&& value) const {
        const int ny = -grid_.nyquist();
        const bool n0 = f[0] == ny, n1 = grid_.dim() == 2 && f[1] == ny;
        if (!n0 && !n1) return value(f);
        cplx acc = 0.0;
        int count = 0;
        for (int s0 : {1, -1}) {
            if (!n0 && s0 == -1) continue;
            for (int s1 : {1, -1}) {
                if (!n1 && s1 == -1) continue;
                acc += value(Freq{n0 ? s0 * f[0] : f[0], n1 ? s1 * f[1] : f[1]});
                ++count;
            }
        }
        return acc / double(count);
    }

    void build_separable() {
        auto terms = sym_.separable_terms();
        if (!terms) return;
        if (terms->empty()) {
            separable_zero_ = true;
            return;
        }
        const std::size_t sz = grid_.size();
        for (const auto& t : *terms) {
            Term term;
            term.freq.resize(sz);
            for (std::size_t q = 0; q < sz; ++q)
                term.freq[q] = nyquist_average(grid_.freq(q), [&](Freq f) { return t.frequency(eval_point(0, f)); });
            bool all_one = true;
            std::vector<cplx> pos(sz);
            for (std::size_t k = 0; k < sz; ++k) {
                pos[k] = t.position(eval_point(k, Freq{0, 0}));
                all_one = all_one && pos[k] == cplx(1.0);
            }
            if (!all_one) term.pos = std::move(pos);
            // Merge terms with identical position factors.
            bool merged = false;
            for (auto& existing : terms_) {
                if (existing.pos == term.pos) {
                    for (std::size_t q = 0; q < sz; ++q) existing.freq[q] += term.freq[q];
                    merged = true;
                    break;
                }
            }
            if (!merged) terms_.push_back(std::move(term));
        }
    }

    void check_grid(const GridFunction& u) const {
        if (u.grid != grid_) throw DimensionMismatch("input lives on a different grid than the operator");
        if (u.values.size() != grid_.size()) throw DimensionMismatch("value count does not match grid");
    }
    SpectrumFunction spectrum(const GridFunction& u) const {
        auto s = forward_transform(u);
        if (opts_.dealias)
            for (std::size_t q = 0; q < s.coeffs.size(); ++q)
                if (!detail::dealias_keep(grid_, grid_.freq(q))) s.coeffs[q] = 0.0;
        return s;
    }
    GridFunction finish(GridFunction out) const {
        if (!opts_.dealias) return out;
        auto s = forward_transform(out);
        for (std::size_t q = 0; q < s.coeffs.size(); ++q)
            if (!detail::dealias_keep(grid_, grid_.freq(q))) s.coeffs[q] = 0.0;
        return inverse_transform(s);
    }
};

inline GridFunction apply_op(const QuantizedOp& a, const GridFunction& u) { return a.apply(u); }

// ---------------------------------------------------------------------------
// Dense matrices

struct DenseMatrix {
    std::size_t n = 0;
    std::vector<cplx> m;  // row-major

    DenseMatrix() = default;
    explicit DenseMatrix(std::size_t size) : n(size), m(size * size) {}
    static DenseMatrix identity(std::size_t size) {
        DenseMatrix d(size);
        for (std::size_t i = 0; i < size; ++i) d(i, i) = 1.0;
        return d;
    }

    cplx& operator()(std::size_t i, std::size_t j) { return m[i * n + j]; }
    cplx operator()(std::size_t i, std::size_t j) const { return m[i * n + j]; }

    std::vector<cplx> apply(std::span<const cplx> x) const {
        std::vector<cplx> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            cplx acc = 0.0;
            const cplx* row = &m[i * n];
            for (std::size_t j = 0; j < n; ++j) acc += row[j] * x[j];
            y[i] = acc;
        }
        return y;
    }
    DenseMatrix adjoint() const {
        DenseMatrix a(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) a(j, i) = std::conj((*this)(i, j));
        return a;
    }
    friend DenseMatrix operator*(const DenseMatrix& a, const DenseMatrix& b) {
        if (a.n != b.n) throw DimensionMismatch("matrix sizes differ");
        DenseMatrix c(a.n);
        parallel_for(a.n, [&](std::size_t i) {
            for (std::size_t k = 0; k < a.n; ++k) {
                const cplx aik = a(i, k);
                if (aik == cplx(0.0)) continue;
                for (std::size_t j = 0; j < a.n; ++j) c.m[i * a.n + j] += aik * b.m[k * a.n + j];
            }
        }, 8);
        return c;
    }
    friend DenseMatrix operator-(DenseMatrix a, const DenseMatrix& b) {
        for (std::size_t i = 0; i < a.m.size(); ++i) a.m[i] -= b.m[i];
        return a;
    }
    friend DenseMatrix operator+(DenseMatrix a, const DenseMatrix& b) {
        for (std::size_t i = 0; i < a.m.size(); ++i) a.m[i] += b.m[i];
        return a;
    }
    DenseMatrix& operator*=(cplx s) {
        for (auto& v : m) v *= s;
        return *this;
    }
    double frobenius() const {
        double acc = 0;
        for (auto& v : m) acc += std::norm(v);
        return std::sqrt(acc);
    }
};

inline constexpr std::size_t dense_size_limit = 64 * 64;

// Matrix of the operator in the point basis; each row is one FFT of
// a(x_k, .) exp(i x_k .) over the lattice.
inline DenseMatrix dense_matrix(const QuantizedOp& a) {
    const auto& g = a.grid();
    const std::size_t sz = g.size();
    if (sz > dense_size_limit) throw DomainError("dense matrix limited to N^d <= 64^2");
    DenseMatrix d(sz);
    const int n = g.modes();
    auto roots = detail::roots_of_unity(n);
    const bool dealias = a.options().dealias;
    parallel_for(sz, [&](std::size_t k) {
        auto mk = g.multi_index(k);
        std::vector<cplx> row(sz);
        for (std::size_t q = 0; q < sz; ++q) {
            auto f = g.freq(q);
            if (dealias && !detail::dealias_keep(g, f)) continue;
            long m = (long(mk[0]) * f[0] + long(mk[1]) * f[1]) % n;
            if (m < 0) m += n;
            row[q] = a.entry(k, f) * roots[m];
        }
        detail::fft_inplace(g, row, FFTW_FORWARD);
        for (std::size_t j = 0; j < sz; ++j) d.m[k * sz + j] = row[j] / double(sz);
    }, 4);
    if (dealias) {
        // Output projection, applied column by column.
        for (std::size_t j = 0; j < sz; ++j) {
            GridFunction col(g);
            for (std::size_t i = 0; i < sz; ++i) col.values[i] = d(i, j);
            auto s = forward_transform(col);
            for (std::size_t q = 0; q < sz; ++q)
                if (!detail::dealias_keep(g, g.freq(q))) s.coeffs[q] = 0.0;
            col = inverse_transform(s);
            for (std::size_t i = 0; i < sz; ++i) d(i, j) = col.values[i];
        }
    }
    return d;
}

// Dense matrix of a Fourier multiplier.
template <class M>
DenseMatrix multiplier_matrix(const TorusGrid& g, M&& mult) {
    const std::size_t sz = g.size();
    if (sz > dense_size_limit) throw DomainError("dense matrix limited to N^d <= 64^2");
    DenseMatrix d(sz);
    for (std::size_t j = 0; j < sz; ++j) {
        GridFunction e(g);
        e.values[j] = 1.0;
        auto col = apply_multiplier(e, mult);
        for (std::size_t i = 0; i < sz; ++i) d(i, j) = col.values[i];
    }
    return d;
}

inline DenseMatrix bessel_matrix(const TorusGrid& g, double s) {
    return multiplier_matrix(g, [s](Freq f) { return std::pow(1.0 + double(f[0]) * f[0] + double(f[1]) * f[1], 0.5 * s); });
}

// Largest singular value by power iteration on M^H M.
inline double spectral_norm(const DenseMatrix& m, int max_iter = 500, double tol = 1e-12) {
    if (m.n == 0) return 0.0;
    std::mt19937_64 rng(12345);
    std::normal_distribution<double> nd;
    std::vector<cplx> x(m.n);
    for (auto& v : x) v = {nd(rng), nd(rng)};
    auto mh = m.adjoint();
    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        double nx = 0;
        for (auto& v : x) nx += std::norm(v);
        nx = std::sqrt(nx);
        if (nx == 0.0) return 0.0;
        for (auto& v : x) v /= nx;
        auto y = m.apply(x);
        double ny = 0;
        for (auto& v : y) ny += std::norm(v);
        double next = std::sqrt(ny);
        x = mh.apply(y);
        if (std::abs(next - sigma) <= tol * next) return next;
        sigma = next;
    }
    return sigma;
}

// ---------------------------------------------------------------------------
// Asymptotic calculus

namespace detail {

inline Expr conjugate_expr(const Expr& e) {
    using namespace expr;
    switch (e->op) {
        case Op::Const: return constant(std::conj(e->value));
        case Op::Var:
        case Op::AbsXi: return e;
        case Op::Add: return add(conjugate_expr(e->a), conjugate_expr(e->b));
        case Op::Sub: return sub(conjugate_expr(e->a), conjugate_expr(e->b));
        case Op::Mul: return mul(conjugate_expr(e->a), conjugate_expr(e->b));
        case Op::Div: return div(conjugate_expr(e->a), conjugate_expr(e->b));
        case Op::Neg: return neg(conjugate_expr(e->a));
        case Op::Pow: return pow(conjugate_expr(e->a), conjugate_expr(e->b));
        case Op::Sin:
        case Op::Cos:
        case Op::Exp:
        case Op::Step: return func(e->op, conjugate_expr(e->a), e->deriv);
        case Op::Hom: return hom(conjugate_expr(e->a), e->degree);
    }
    return e;
}

// (frequency, position) variable pairs that the calculus acts on.
inline std::vector<std::pair<Var, Var>> dual_pairs(const Symbol& a, const Symbol& b) {
    std::vector<std::pair<Var, Var>> pairs;
    const auto& ua = a.usage();
    const auto& ub = b.usage();
    if (ua.t || ua.tau || ub.t || ub.tau) pairs.push_back({var_tau(), var_t()});
    const int dims = std::max({ua.x_dims, ua.xi_dims, ub.x_dims, ub.xi_dims, 1});
    for (int j = 0; j < dims; ++j) pairs.push_back({var_xi(j), var_x(j)});
    return pairs;
}

inline void multi_indices(int slots, int below, std::vector<std::vector<int>>& out) {
    std::vector<int> cur(slots, 0);
    std::function<void(int, int)> rec = [&](int pos, int left) {
        if (pos == slots) {
            out.push_back(cur);
            return;
        }
        for (int k = 0; k <= left; ++k) {
            cur[pos] = k;
            rec(pos + 1, left - k);
        }
        cur[pos] = 0;
    };
    rec(0, below - 1);
}

inline double factorial(int k) {
    double f = 1;
    for (int i = 2; i <= k; ++i) f *= i;
    return f;
}

inline Symbol symbol_sum(const Symbol& a, const Symbol& b, double order) {
    if (a.is_expression() && b.is_expression())
        return Symbol(expr::add(a.expression(), b.expression()), order, std::nullopt, false, false);
    expr::Usage u = a.usage();
    const auto& ub = b.usage();
    u.t |= ub.t;
    u.tau |= ub.tau;
    u.x_dims = std::max(u.x_dims, ub.x_dims);
    u.xi_dims = std::max(u.xi_dims, ub.xi_dims);
    u.jet_arity = std::max(u.jet_arity, ub.jet_arity);
    return Symbol::native([a, b](const EvalPoint& p) { return a.eval(p) + b.eval(p); },
                          a.expression_string() + "+" + b.expression_string(), order, std::nullopt, false, u);
}

}  // namespace detail

// sum_{|gamma| < K} (1/gamma!) d_xi^gamma a * D_x^gamma b.
inline Symbol compose_symbols(const Symbol& a, const Symbol& b, int K = 2) {
    if (K < 1 || K > 3) throw DomainError("composition expansion supports 1 <= K <= 3");
    auto pairs = detail::dual_pairs(a, b);
    std::vector<std::vector<int>> gammas;
    detail::multi_indices(int(pairs.size()), K, gammas);
    const double order = a.order() + b.order();
    std::optional<Symbol> acc;
    for (const auto& g : gammas) {
        Symbol da = a, db = b;
        int total = 0;
        double fact = 1;
        for (std::size_t j = 0; j < pairs.size(); ++j) {
            for (int r = 0; r < g[j]; ++r) {
                da = differentiate_symbol(da, pairs[j].first);
                db = differentiate_symbol(db, pairs[j].second);
            }
            total += g[j];
            fact *= detail::factorial(g[j]);
        }
        cplx coef = std::pow(cplx(0, -1), total) / fact;
        Symbol term = symbol_scale(symbol_product(da, db), coef);
        acc = acc ? detail::symbol_sum(*acc, term, order) : term;
    }
    Symbol out = *acc;
    if (out.is_expression()) return Symbol(out.expression(), order, std::nullopt, false, false);
    return out;
}

// sum_{|gamma| < K} (1/gamma!) d_xi^gamma D_x^gamma conj(a); jet values are taken real.
inline Symbol adjoint_symbol(const Symbol& a, int K = 2) {
    if (K < 1 || K > 3) throw DomainError("adjoint expansion supports 1 <= K <= 3");
    Symbol abar;
    if (a.is_expression()) {
        abar = Symbol(detail::conjugate_expr(a.expression()), a.order(), a.homogeneous_degree(), a.real_symbol(), false);
    } else {
        abar = Symbol::native([a](const EvalPoint& p) { return std::conj(a.eval(p)); }, "conj(" + a.expression_string() + ")",
                              a.order(), a.homogeneous_degree(), a.real_symbol(), a.usage());
    }
    auto pairs = detail::dual_pairs(a, a);
    std::vector<std::vector<int>> gammas;
    detail::multi_indices(int(pairs.size()), K, gammas);
    std::optional<Symbol> acc;
    for (const auto& g : gammas) {
        Symbol d = abar;
        int total = 0;
        double fact = 1;
        for (std::size_t j = 0; j < pairs.size(); ++j) {
            for (int r = 0; r < g[j]; ++r) {
                d = differentiate_symbol(d, pairs[j].first);
                d = differentiate_symbol(d, pairs[j].second);
            }
            total += g[j];
            fact *= detail::factorial(g[j]);
        }
        Symbol term = symbol_scale(d, std::pow(cplx(0, -1), total) / fact);
        acc = acc ? detail::symbol_sum(*acc, term, a.order()) : term;
    }
    Symbol out = *acc;
    if (out.is_expression()) return Symbol(out.expression(), a.order(), std::nullopt, false, false);
    return out;
}

// ---------------------------------------------------------------------------
// Measured calculus constants

enum class BoundMode { Est1, Est2, Est3 };

struct BoundSample {
    double v_norm = 0;    // ||v||_(ell)
    double constant = 0;  // measured operator norm
};

struct BoundReport {
    BoundMode mode = BoundMode::Est1;
    int ell = 4;
    std::vector<BoundSample> samples;  // sorted by v_norm
    std::vector<double> envelope;      // running maximum: bounded nondecreasing fit
    double fitted = 0;                 // sup over the sample set
};

inline BoundReport measure_bound_constants(const Symbol& a, double k, std::span<const GridFunction> v_samples,
                                           BoundMode mode, const Symbol* b = nullptr, int ell = 4,
                                           QuantOptions opts = {}) {
    if (v_samples.empty()) throw DomainError("at least one v sample is required");
    if (mode == BoundMode::Est1 && a.order() != 0.0) throw DomainError("est1 mode needs an order-0 symbol");
    if (mode == BoundMode::Est2 && !b) throw DomainError("est2 mode needs a second symbol");
    const TorusGrid g = v_samples.front().grid;
    BoundReport rep;
    rep.mode = mode;
    rep.ell = ell;
    const auto left = bessel_matrix(g, k);
    for (const auto& v : v_samples) {
        const int depth = std::max(a.jet_arity(), b ? b->jet_arity() : 0) > 0 ? ell : 0;
        std::optional<JetField> jet;
        if (depth > 0) jet = make_jet_field(v, depth);
        auto A = dense_matrix(QuantizedOp(a, g, opts, jet));
        DenseMatrix T;
        switch (mode) {
            case BoundMode::Est1: T = left * A * bessel_matrix(g, -k); break;
            case BoundMode::Est2: {
                auto B = dense_matrix(QuantizedOp(*b, g, opts, jet));
                auto C = A * B - B * A;
                T = left * C * bessel_matrix(g, -(k + a.order() + b->order() - 1.0));
                break;
            }
            case BoundMode::Est3: {
                auto im = A - A.adjoint();
                im *= cplx(0, -0.5);
                T = left * im * bessel_matrix(g, -(k + a.order() - 1.0));
                break;
            }
        }
        rep.samples.push_back({sobolev_norm(v, ell), spectral_norm(T)});
    }
    std::stable_sort(rep.samples.begin(), rep.samples.end(),
                     [](const BoundSample& x, const BoundSample& y) { return x.v_norm < y.v_norm; });
    double run = 0;
    for (auto& s : rep.samples) {
        run = std::max(run, s.constant);
        rep.envelope.push_back(run);
    }
    rep.fitted = run;
    return rep;
}

}  // namespace microsolve
