#pragma once
/*
 * Periodic grids on [0, 2pi)^d, discrete Fourier transforms and Bessel
 * potentials.
 *
 * Conventions:
 *   points       x_k = 2 pi k / N per dimension, row-major (dimension 0 slowest)
 *   frequencies  xi in [-N/2, N/2)^d, stored in FFT order (same layout)
 *   forward      u_hat(xi) = N^-d sum_k u(x_k) exp(-i x_k . xi)
 *   inverse      u(x)      = sum_xi u_hat(xi) exp(i x . xi)
 *   L2 norm      ||u||^2 = (2pi/N)^d sum |u(x_k)|^2 = (2pi)^d sum |u_hat|^2
 */

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <numbers>
#include <span>
#include <tuple>
#include <vector>

#include "errors.hpp"

namespace microsolve {

using cplx = std::complex<double>;
using Point = std::array<double, 2>;
using Freq = std::array<int, 2>;

constexpr double two_pi = 2.0 * std::numbers::pi;

class TorusGrid {
public:
    TorusGrid() = default;
    TorusGrid(int dim, int n) : dim_(dim), n_(n) {
        if (dim < 1 || dim > 2) throw DomainError("grid dimension must be 1 or 2");
        if (n < 8 || n % 2 != 0) throw DomainError("modes per dimension must be even and >= 8");
    }

    int dim() const { return dim_; }
    int modes() const { return n_; }
    std::size_t size() const { return dim_ == 1 ? std::size_t(n_) : std::size_t(n_) * n_; }
    double spacing() const { return two_pi / n_; }
    double cell_volume() const { return std::pow(spacing(), dim_); }
    int nyquist() const { return n_ / 2; }

    std::array<int, 2> multi_index(std::size_t idx) const {
        if (dim_ == 1) return {int(idx), 0};
        return {int(idx / n_), int(idx % n_)};
    }
    std::size_t flat(int i0, int i1 = 0) const {
        auto wrap = [this](int i) { return ((i % n_) + n_) % n_; };
        return dim_ == 1 ? std::size_t(wrap(i0)) : std::size_t(wrap(i0)) * n_ + wrap(i1);
    }

    Point point(std::size_t idx) const {
        auto mi = multi_index(idx);
        return {spacing() * mi[0], dim_ == 2 ? spacing() * mi[1] : 0.0};
    }
    // Representative of the point in [-pi, pi)^d.
    Point centered_point(std::size_t idx) const {
        auto mi = multi_index(idx);
        auto c = [this](int i) { return spacing() * (i < n_ / 2 ? i : i - n_); };
        return {c(mi[0]), dim_ == 2 ? c(mi[1]) : 0.0};
    }
    int freq_of(int i) const { return i < n_ / 2 ? i : i - n_; }
    Freq freq(std::size_t idx) const {
        auto mi = multi_index(idx);
        return {freq_of(mi[0]), dim_ == 2 ? freq_of(mi[1]) : 0};
    }
    double freq_norm2(std::size_t idx) const {
        auto f = freq(idx);
        return double(f[0]) * f[0] + double(f[1]) * f[1];
    }
    std::size_t freq_index(Freq f) const { return flat(f[0], f[1]); }

    bool operator==(const TorusGrid& o) const { return dim_ == o.dim_ && n_ == o.n_; }
    bool operator!=(const TorusGrid& o) const { return !(*this == o); }

private:
    int dim_ = 1;
    int n_ = 8;
};

struct GridFunction {
    TorusGrid grid;
    std::vector<cplx> values;

    GridFunction() = default;
    explicit GridFunction(const TorusGrid& g) : grid(g), values(g.size()) {}
    GridFunction(const TorusGrid& g, std::vector<cplx> v) : grid(g), values(std::move(v)) {
        if (values.size() != grid.size()) throw DimensionMismatch("value count does not match grid");
    }
    template <class F>
    static GridFunction sample(const TorusGrid& g, F&& f) {
        GridFunction u(g);
        for (std::size_t k = 0; k < g.size(); ++k) u.values[k] = f(g.point(k));
        return u;
    }

    std::size_t size() const { return values.size(); }
    cplx& operator[](std::size_t i) { return values[i]; }
    const cplx& operator[](std::size_t i) const { return values[i]; }

    GridFunction& operator+=(const GridFunction& o) {
        check(o);
        for (std::size_t i = 0; i < size(); ++i) values[i] += o.values[i];
        return *this;
    }
    GridFunction& operator-=(const GridFunction& o) {
        check(o);
        for (std::size_t i = 0; i < size(); ++i) values[i] -= o.values[i];
        return *this;
    }
    GridFunction& operator*=(cplx s) {
        for (auto& v : values) v *= s;
        return *this;
    }
    friend GridFunction operator+(GridFunction a, const GridFunction& b) { return a += b; }
    friend GridFunction operator-(GridFunction a, const GridFunction& b) { return a -= b; }
    friend GridFunction operator*(cplx s, GridFunction a) { return a *= s; }
    // Pointwise product.
    friend GridFunction operator*(const GridFunction& a, const GridFunction& b) {
        a.check(b);
        GridFunction r(a.grid);
        for (std::size_t i = 0; i < a.size(); ++i) r.values[i] = a.values[i] * b.values[i];
        return r;
    }

    void check(const GridFunction& o) const {
        if (grid != o.grid) throw DimensionMismatch("grid functions live on different grids");
    }
};

struct SpectrumFunction {
    TorusGrid grid;
    std::vector<cplx> coeffs;

    SpectrumFunction() = default;
    explicit SpectrumFunction(const TorusGrid& g) : grid(g), coeffs(g.size()) {}
    cplx& at(Freq f) { return coeffs[grid.freq_index(f)]; }
    cplx at(Freq f) const { return coeffs[grid.freq_index(f)]; }
};

namespace detail {

class FftPlans {
public:
    static FftPlans& instance() {
        static FftPlans p;
        return p;
    }
    fftw_plan get(int dim, int n, int sign) {
        std::lock_guard lock(mu_);
        auto key = std::make_tuple(dim, n, sign);
        auto it = plans_.find(key);
        if (it != plans_.end()) return it->second;
        std::size_t total = dim == 1 ? n : std::size_t(n) * n;
        std::vector<cplx> buf(total);
        auto* p = reinterpret_cast<fftw_complex*>(buf.data());
        int dims[2] = {n, n};
        fftw_plan plan = fftw_plan_dft(dim, dims, p, p, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
        plans_.emplace(key, plan);
        return plan;
    }
    ~FftPlans() {
        for (auto& [k, p] : plans_) fftw_destroy_plan(p);
    }

private:
    std::mutex mu_;
    std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

// In-place unnormalized transform of a buffer laid out on grid g.
inline void fft_inplace(const TorusGrid& g, std::vector<cplx>& data, int sign) {
    fftw_plan plan = FftPlans::instance().get(g.dim(), g.modes(), sign);
    auto* p = reinterpret_cast<fftw_complex*>(data.data());
    fftw_execute_dft(plan, p, p);
}

}  // namespace detail

inline SpectrumFunction forward_transform(const GridFunction& u) {
    if (u.values.size() != u.grid.size()) throw DimensionMismatch("value count does not match grid");
    SpectrumFunction s(u.grid);
    s.coeffs = u.values;
    detail::fft_inplace(u.grid, s.coeffs, FFTW_FORWARD);
    const double scale = 1.0 / double(u.grid.size());
    for (auto& c : s.coeffs) c *= scale;
    return s;
}

inline GridFunction inverse_transform(const SpectrumFunction& s) {
    if (s.coeffs.size() != s.grid.size()) throw DimensionMismatch("coefficient count does not match grid");
    GridFunction u(s.grid);
    u.values = s.coeffs;
    detail::fft_inplace(s.grid, u.values, FFTW_BACKWARD);
    return u;
}

// Applies the Fourier multiplier m(xi) given per lattice index.
template <class M>
GridFunction apply_multiplier(const GridFunction& u, M&& m) {
    auto s = forward_transform(u);
    for (std::size_t k = 0; k < s.coeffs.size(); ++k) s.coeffs[k] *= m(s.grid.freq(k));
    return inverse_transform(s);
}

// <D>^s u, the multiplier (1 + |xi|^2)^{s/2}.
inline GridFunction bessel_power(const GridFunction& u, double s) {
    if (s == 0.0) return u;
    return apply_multiplier(u, [s](Freq f) {
        return std::pow(1.0 + double(f[0]) * f[0] + double(f[1]) * f[1], 0.5 * s);
    });
}

inline double l2_norm(const GridFunction& u) {
    double acc = 0.0;
    for (auto& v : u.values) acc += std::norm(v);
    return std::sqrt(acc * u.grid.cell_volume());
}

inline double sup_norm(const GridFunction& u) {
    double m = 0.0;
    for (auto& v : u.values) m = std::max(m, std::abs(v));
    return m;
}

// ||<D>^k u|| on the torus.
inline double sobolev_norm(const GridFunction& u, double k) {
    auto s = forward_transform(u);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.coeffs.size(); ++i)
        acc += std::pow(1.0 + s.grid.freq_norm2(i), k) * std::norm(s.coeffs[i]);
    return std::sqrt(acc * std::pow(two_pi, u.grid.dim()));
}

class SpaceTimeFunction {
public:
    SpaceTimeFunction() = default;
    SpaceTimeFunction(TorusGrid grid, std::vector<double> t_nodes, std::vector<GridFunction> slices)
        : grid_(grid), t_(std::move(t_nodes)), slices_(std::move(slices)) {
        if (t_.size() != slices_.size()) throw DimensionMismatch("slice count differs from node count");
        for (std::size_t i = 1; i < t_.size(); ++i)
            if (!(t_[i] > t_[i - 1])) throw DomainError("time nodes must be strictly increasing");
        for (auto& s : slices_)
            if (s.grid != grid_) throw DimensionMismatch("slice grid differs from function grid");
    }

    const TorusGrid& grid() const { return grid_; }
    const std::vector<double>& t_nodes() const { return t_; }
    const std::vector<GridFunction>& slices() const { return slices_; }
    const GridFunction& slice(std::size_t i) const { return slices_[i]; }
    std::size_t node_count() const { return t_.size(); }

private:
    TorusGrid grid_;
    std::vector<double> t_;
    std::vector<GridFunction> slices_;
};

// sqrt of the trapezoid rule for t -> ||u(t)||_k^2 over |t| <= T.
inline double local_sobolev_norm(const SpaceTimeFunction& u, double k, double T) {
    const auto& t = u.t_nodes();
    if (t.empty()) return 0.0;
    double tmax = 0.0;
    for (double s : t) tmax = std::max(tmax, std::abs(s));
    if (T > tmax + 1e-12) throw DomainError("T exceeds the time range of the function");
    auto sq = [&](std::size_t i) {
        double n = sobolev_norm(u.slice(i), k);
        return n * n;
    };
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) {
        double a = std::max(t[i], -T), b = std::min(t[i + 1], T);
        if (b <= a) continue;
        // Linear interpolation of the integrand inside a partially covered interval.
        double h = t[i + 1] - t[i];
        double fi = sq(i), fj = sq(i + 1);
        auto lerp = [&](double s) { return fi + (fj - fi) * (s - t[i]) / h; };
        acc += 0.5 * (b - a) * (lerp(a) + lerp(b));
    }
    return std::sqrt(acc);
}

}  // namespace microsolve
