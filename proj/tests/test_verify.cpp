#include <catch_amalgamated.hpp>

#include <microsolve/verify.hpp>

using namespace microsolve;
using Catch::Approx;

namespace {

std::vector<double> nodes(double a, double b, int count) {
    std::vector<double> t(count + 1);
    for (int i = 0; i <= count; ++i) t[i] = a + (b - a) * i / count;
    return t;
}

double max_error(const SpaceTimeFunction& u, const std::function<cplx(double, double)>& exact) {
    double e = 0.0;
    for (std::size_t n = 0; n < u.node_count(); ++n)
        for (std::size_t k = 0; k < u.grid().size(); ++k)
            e = std::max(e, std::abs(u.slice(n).values[k] - exact(u.t_nodes()[n], u.grid().point(k)[0])));
    return e;
}

// Analytic periodic window, 1 at 0 and below 1e-17 at +-pi.
double window(double t) { return std::exp(20.0 * (std::cos(t) - 1.0)); }
double window_rate(double t) { return -20.0 * std::sin(t) * window(t); }

}  // namespace

TEST_CASE("characteristics oracle") {
    const TorusGrid g(1, 32);
    SECTION("constant speed translates the data") {
        TransportSpec spec{[](double) { return 0.5; }, {}, [](double x) { return std::sin(x) + 0.3 * std::cos(2 * x); }};
        auto ref = characteristics_reference(spec, g, nodes(0.0, 1.0, 5));
        CHECK(ref.declared_order == 4);
        CHECK(ref.self_converged);
        CHECK(max_error(ref.u, [](double t, double x) {
                  return cplx(std::sin(x - 0.5 * t) + 0.3 * std::cos(2 * (x - 0.5 * t)));
              }) < 1e-12);
    }
    SECTION("Burgers against its Taylor series") {
        const double eps = 0.1;
        TransportSpec spec{[](double u) { return u; }, {}, [eps](double x) { return eps * std::sin(x); }};
        auto ref = characteristics_reference(spec, g, {0.0, 0.05, 0.1, 0.2});
        for (std::size_t n = 0; n < ref.u.node_count(); ++n) {
            const double t = ref.u.t_nodes()[n];
            for (std::size_t k = 0; k < g.size(); ++k) {
                const double x = g.point(k)[0];
                const double phi = eps * std::sin(x), dphi = eps * std::cos(x), ddphi = -eps * std::sin(x);
                // u = phi - t phi phi' + t^2/2 (phi^2 phi')'
                const double series = phi - t * phi * dphi + 0.5 * t * t * (2 * phi * dphi * dphi + phi * phi * ddphi);
                CHECK(std::abs(ref.u.slice(n).values[k].real() - series) <= 1e-3 * t * t * t + 1e-13);
            }
        }
    }
    SECTION("self-convergence with a source") {
        TransportSpec spec{[](double u) { return 1.0 + 0.5 * u; }, [](double t, double x) { return 0.5 * std::cos(x - t); },
                           [](double x) { return 0.2 * std::sin(x); }};
        auto ref = characteristics_reference(spec, g, nodes(-0.5, 0.5, 4));
        CHECK(ref.observed_order >= 3.5);
        CHECK(ref.error_estimate < 1e-8);
    }
    SECTION("crossing characteristics are detected") {
        TransportSpec spec{[](double u) { return u; }, {}, [](double x) { return std::sin(x); }};
        CHECK_THROWS_AS(characteristics_reference(spec, g, {0.0, 1.3}), Error);
    }
}

TEST_CASE("finite-difference oracle") {
    const TorusGrid g(1, 32);
    SECTION("standing mode") {
        WaveSpec spec;
        spec.coefficient = [](double, double, cplx) { return cplx(1.0); };
        spec.initial = [](double x) { return cplx(std::sin(x)); };
        auto ref = finite_difference_reference(spec, g, nodes(-1.0, 1.0, 8));
        CHECK(ref.declared_order == 2);
        CHECK(ref.observed_order >= 1.8);
        const double err = max_error(ref.u, [](double t, double x) { return cplx(std::cos(t) * std::sin(x)); });
        CHECK(err < 1e-4);
        CHECK(err < 3.0 * ref.error_estimate);
    }
    SECTION("manufactured quasilinear problem") {
        // u = sin x sin t solves u_tt = (1 + u^2/4) u_xx + u_t/2 + G.
        WaveSpec spec;
        spec.coefficient = [](double, double, cplx u) { return 1.0 + 0.25 * u * u; };
        spec.damping = [](double, double) { return cplx(0.5); };
        spec.source = [](double t, double x) {
            const double u = std::sin(x) * std::sin(t);
            return cplx(0.25 * u * u * u - 0.5 * std::sin(x) * std::cos(t));
        };
        spec.initial = [](double) { return cplx(0.0); };
        spec.initial_rate = [](double x) { return cplx(std::sin(x)); };
        auto ref = finite_difference_reference(spec, g, nodes(0.0, 1.0, 4));
        CHECK(ref.observed_order >= 1.8);
        CHECK(max_error(ref.u, [](double t, double x) { return cplx(std::sin(x) * std::sin(t)); }) < 1e-4);
    }
    SECTION("hyperbolicity violation") {
        WaveSpec spec;
        spec.coefficient = [](double, double, cplx) { return cplx(-1.0); };
        spec.initial = [](double x) { return cplx(std::sin(x)); };
        CHECK_THROWS_AS(finite_difference_reference(spec, g, nodes(0.0, 1.0, 4)), DomainError);
    }
}

TEST_CASE("independent oracles agree") {
    const TorusGrid g(1, 32);
    auto phi = [](double x) { return std::exp(std::cos(x)) - 1.0; };
    auto dphi = [](double x) { return -std::sin(x) * std::exp(std::cos(x)); };
    TransportSpec transport{[](double) { return 1.0; }, {}, phi};
    WaveSpec wave;
    wave.coefficient = [](double, double, cplx) { return cplx(1.0); };
    wave.initial = [phi](double x) { return cplx(phi(x)); };
    wave.initial_rate = [dphi](double x) { return cplx(-dphi(x)); };
    auto t = nodes(0.0, 1.0, 4);
    auto a = characteristics_reference(transport, g, t);
    auto b = finite_difference_reference(wave, g, t);
    double diff = 0.0;
    for (std::size_t n = 0; n < t.size(); ++n) diff = std::max(diff, sup_norm(a.u.slice(n) - b.u.slice(n)));
    CHECK(diff < 3.0 * (a.error_estimate + b.error_estimate));
}

TEST_CASE("manufactured forcing") {
    const TorusGrid st(2, 128);
    QuantOptions opts;
    opts.layout = Layout::SpaceTime;
    opts.centered = true;
    auto bump = [](double x) { return std::exp(2.0 * (std::cos(x) - 1.0)); };

    SECTION("zero input") {
        auto p = parse_symbol("tau + v0*xi1; order=1");
        auto f = manufacture(p, GridFunction(st), 0, opts);
        CHECK(sup_norm(f) == 0.0);
    }
    SECTION("time derivative of t times a bump") {
        auto w = GridFunction(st);
        for (std::size_t k = 0; k < st.size(); ++k) {
            auto p = st.centered_point(k);
            w.values[k] = p[0] * window(p[0]) * bump(p[1]);
        }
        auto f = manufacture(parse_symbol("tau; order=1; homogeneous=1"), w, 0, opts);
        double err = 0.0;
        for (std::size_t k = 0; k < st.size(); ++k) {
            auto p = st.centered_point(k);
            cplx exact = cplx(0.0, -1.0) * bump(p[1]) * (window(p[0]) + p[0] * window_rate(p[0]));
            err = std::max(err, std::abs(f.values[k] - exact));
        }
        CHECK(err < 1e-9);
    }
    SECTION("quasilinear transport against the closed form") {
        auto w = GridFunction(st);
        for (std::size_t k = 0; k < st.size(); ++k) {
            auto p = st.centered_point(k);
            w.values[k] = p[0] * std::sin(p[1]) * window(p[0]);
        }
        auto f = manufacture(parse_symbol("tau + v0*xi1; order=1"), w, 0, opts);
        double err = 0.0;
        for (std::size_t k = 0; k < st.size(); ++k) {
            auto p = st.centered_point(k);
            const double t = p[0], x = p[1];
            const double wv = t * std::sin(x) * window(t);
            const double wt = std::sin(x) * (window(t) + t * window_rate(t));
            const double wx = t * std::cos(x) * window(t);
            err = std::max(err, std::abs(f.values[k] - cplx(0.0, -1.0) * (wt + wv * wx)));
        }
        CHECK(err < 1e-10);
    }
}
