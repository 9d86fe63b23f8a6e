#include <catch_amalgamated.hpp>

#include <microsolve/grid.hpp>

#include <random>

using namespace microsolve;
using Catch::Approx;

namespace {

GridFunction random_function(const TorusGrid& g, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> n;
    GridFunction u(g);
    for (auto& v : u.values) v = {n(rng), n(rng)};
    return u;
}

// Direct O(N^2d) DFT with the library's normalization.
std::vector<cplx> direct_dft(const GridFunction& u) {
    const auto& g = u.grid;
    std::vector<cplx> out(g.size());
    for (std::size_t q = 0; q < g.size(); ++q) {
        auto f = g.freq(q);
        cplx acc = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k) {
            auto x = g.point(k);
            acc += u.values[k] * std::polar(1.0, -(x[0] * f[0] + x[1] * f[1]));
        }
        out[q] = acc / double(g.size());
    }
    return out;
}

double rel_diff(const std::vector<cplx>& a, const std::vector<cplx>& b) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += std::norm(a[i] - b[i]);
        den += std::norm(b[i]);
    }
    return std::sqrt(num / std::max(den, 1e-300));
}

}  // namespace

TEST_CASE("grid construction validates dimension and modes") {
    CHECK_THROWS_AS(TorusGrid(3, 16), DomainError);
    CHECK_THROWS_AS(TorusGrid(1, 6), DomainError);
    CHECK_THROWS_AS(TorusGrid(1, 15), DomainError);
    TorusGrid g(2, 16);
    CHECK(g.size() == 256);
    CHECK(g.freq(g.freq_index({-8, 7})) == Freq{-8, 7});
    CHECK(g.point(g.flat(3, 5))[1] == Approx(two_pi * 5 / 16));
}

TEST_CASE("constant function has only the zero mode") {
    TorusGrid g(1, 16);
    GridFunction u(g, std::vector<cplx>(16, 1.0));
    auto s = forward_transform(u);
    CHECK(std::abs(s.at({0, 0}) - 1.0) < 1e-15);
    for (std::size_t k = 1; k < s.coeffs.size(); ++k) CHECK(std::abs(s.coeffs[k]) < 1e-15);
}

TEST_CASE("pure mode maps to a single coefficient") {
    TorusGrid g(1, 16);
    auto u = GridFunction::sample(g, [](Point x) { return std::polar(1.0, 3 * x[0]); });
    auto s = forward_transform(u);
    for (std::size_t k = 0; k < s.coeffs.size(); ++k) {
        cplx expect = g.freq(k)[0] == 3 ? 1.0 : 0.0;
        CHECK(std::abs(s.coeffs[k] - expect) < 1e-14);
    }
}

TEST_CASE("transforms match a direct DFT and round-trip") {
    for (auto [d, n] : {std::pair{1, 8}, {1, 64}, {2, 8}, {2, 16}}) {
        TorusGrid g(d, n);
        auto u = random_function(g, unsigned(d * 100 + n));
        auto s = forward_transform(u);
        CHECK(rel_diff(s.coeffs, direct_dft(u)) < 1e-12);
        auto back = inverse_transform(s);
        CHECK(rel_diff(back.values, u.values) < 1e-12);
    }
}

TEST_CASE("transform rejects mismatched buffers") {
    GridFunction bad;
    bad.grid = TorusGrid(1, 8);
    bad.values.resize(5);
    CHECK_THROWS_AS(forward_transform(bad), DimensionMismatch);
    CHECK_THROWS_AS(GridFunction(TorusGrid(1, 8), std::vector<cplx>(7)), DimensionMismatch);
}

TEST_CASE("Parseval identity on all small grids") {
    for (int d : {1, 2}) {
        for (int n = 8; n <= (d == 1 ? 256 : 128); n *= 2) {
            TorusGrid g(d, n);
            auto u = random_function(g, unsigned(n + d));
            auto s = forward_transform(u);
            double spec = 0;
            for (auto& c : s.coeffs) spec += std::norm(c);
            spec *= std::pow(two_pi, d);
            double phys = l2_norm(u);
            CHECK(std::abs(phys * phys - spec) < 1e-12 * spec);
        }
    }
    TorusGrid g(2, 256);
    auto u = random_function(g, 7);
    auto s = forward_transform(u);
    double spec = 0;
    for (auto& c : s.coeffs) spec += std::norm(c);
    spec *= two_pi * two_pi;
    CHECK(std::abs(std::pow(l2_norm(u), 2) - spec) < 1e-12 * spec);
}

TEST_CASE("Bessel potential") {
    TorusGrid g(1, 16);
    auto e3 = GridFunction::sample(g, [](Point x) { return std::polar(1.0, 3 * x[0]); });
    auto r = bessel_power(e3, 2.0);
    for (std::size_t k = 0; k < g.size(); ++k) CHECK(std::abs(r.values[k] - 10.0 * e3.values[k]) < 1e-12);
    auto same = bessel_power(e3, 0.0);
    CHECK(same.values == e3.values);

    for (auto [d, n] : {std::pair{1, 32}, {2, 16}}) {
        TorusGrid gg(d, n);
        auto u = random_function(gg, 11);
        // u - Laplacian u, the Laplacian taken as a spectral second derivative per axis.
        auto lap = apply_multiplier(u, [](Freq f) { return -double(f[0] * f[0] + f[1] * f[1]); });
        auto oracle = u - lap;
        CHECK(rel_diff(bessel_power(u, 2.0).values, oracle.values) < 1e-12);
        for (double s : {0.5, 1.0, 3.0, -2.5}) {
            auto round = bessel_power(bessel_power(u, s), -s);
            CHECK(rel_diff(round.values, u.values) < 1e-11);
        }
    }
}

TEST_CASE("Sobolev norms") {
    TorusGrid g(1, 16);
    GridFunction zero(g);
    for (double k : {0.0, 1.0, 2.5}) CHECK(sobolev_norm(zero, k) == 0.0);
    auto e3 = GridFunction::sample(g, [](Point x) { return std::polar(1.0, 3 * x[0]); });
    CHECK(sobolev_norm(e3, 1.0) == Approx(std::sqrt(10.0) * l2_norm(e3)).epsilon(1e-13));

    TorusGrid g2(2, 16);
    auto u = random_function(g2, 5);
    auto s = forward_transform(u);
    double acc = 0;
    for (std::size_t i = 0; i < s.coeffs.size(); ++i) {
        auto f = g2.freq(i);
        double b = 1.0 + f[0] * f[0] + f[1] * f[1];
        acc += b * b * std::norm(s.coeffs[i]);
    }
    CHECK(sobolev_norm(u, 2.0) == Approx(std::sqrt(acc * two_pi * two_pi)).epsilon(1e-13));

    double prev = 0;
    for (double k = -1.0; k <= 3.0; k += 0.5) {
        double cur = sobolev_norm(u, k);
        CHECK(cur >= prev);
        prev = cur;
    }
}

TEST_CASE("local Sobolev norm") {
    TorusGrid g(1, 16);
    std::vector<double> t;
    for (int i = -10; i <= 10; ++i) t.push_back(0.1 * i);
    std::vector<GridFunction> zeros(t.size(), GridFunction(g));
    CHECK(local_sobolev_norm(SpaceTimeFunction(g, t, zeros), 1.0, 1.0) == 0.0);

    auto e3 = GridFunction::sample(g, [](Point x) { return std::polar(1.0, 3 * x[0]); });
    SpaceTimeFunction c(g, t, std::vector<GridFunction>(t.size(), e3));
    CHECK(local_sobolev_norm(c, 0.0, 1.0) == Approx(std::sqrt(2.0) * l2_norm(e3)).epsilon(1e-13));
    CHECK_THROWS_AS(local_sobolev_norm(c, 0.0, 1.5), DomainError);

    // Second-order convergence toward the exact integral of (1+t^2)^2 ||u||^2 over [-T, T].
    auto u = random_function(g, 3);
    const double base = std::pow(l2_norm(u), 2);
    const double T = 0.8;
    const double exact = std::sqrt(base * (2 * T + 4 * std::pow(T, 3) / 3 + 2 * std::pow(T, 5) / 5));
    double prev_err = 0;
    for (int m : {20, 40, 80}) {
        std::vector<double> tn;
        std::vector<GridFunction> sl;
        for (int i = -m; i <= m; ++i) {
            double s = double(i) / m;
            tn.push_back(s);
            sl.push_back((1.0 + s * s) * u);
        }
        double err = std::abs(local_sobolev_norm(SpaceTimeFunction(g, tn, sl), 0.0, T) - exact);
        if (prev_err > 0) CHECK(prev_err / err > 3.5);
        prev_err = err;
    }

    CHECK_THROWS_AS(SpaceTimeFunction(g, {0.0, 0.0}, {GridFunction(g), GridFunction(g)}), DomainError);
    CHECK_THROWS_AS(SpaceTimeFunction(g, {0.0}, {}), DimensionMismatch);
}
