#include <catch_amalgamated.hpp>

#include <microsolve/evolution.hpp>

using namespace microsolve;
using Catch::Approx;

namespace {

Symbol sym(const char* text) { return parse_symbol(text); }

std::vector<double> uniform_nodes(double T, int count) {
    std::vector<double> t(count + 1);
    for (int i = 0; i <= count; ++i) t[i] = T * i / count;
    return t;
}

double max_diff(const GridFunction& a, const GridFunction& b) { return sup_norm(a - b); }

// Manufactured w(t, x) = sin(t)^2 exp(cos x) for D_t + sin(x) D_x.
GridFunction manufactured_w(const TorusGrid& g, double t) {
    return GridFunction::sample(g, [t](Point x) { return cplx(std::pow(std::sin(t), 2) * std::exp(std::cos(x[0]))); });
}
Forcing manufactured_forcing(const TorusGrid& g) {
    return Forcing::function([g](double t) {
        return GridFunction::sample(g, [t](Point x) {
            const double e = std::exp(std::cos(x[0]));
            const double wt = 2.0 * std::sin(t) * std::cos(t) * e;
            const double wx = -std::pow(std::sin(t), 2) * std::sin(x[0]) * e;
            return cplx(0.0, -1.0) * (wt + std::sin(x[0]) * wx);
        });
    });
}

EvolutionProblem manufactured_problem(int substeps) {
    EvolutionProblem prob;
    prob.grid = TorusGrid(1, 32);
    prob.A = {sym("sin(x1); order=0; real=true")};
    prob.A0 = Symbol::constant(0.0);
    prob.t_nodes = uniform_nodes(1.0, 10);
    prob.forcing = manufactured_forcing(prob.grid);
    prob.substeps = substeps;
    return prob;
}

}  // namespace

TEST_CASE("propagate without transport integrates the forcing") {
    const TorusGrid g(1, 16);
    EvolutionProblem prob;
    prob.grid = g;
    prob.A = {Symbol::constant(0.0)};
    prob.t_nodes = uniform_nodes(1.0, 50);
    prob.forcing = Forcing::function([g](double t) {
        return GridFunction::sample(g, [t](Point x) { return cplx(std::cos(t) * std::sin(x[0])); });
    });
    auto u = propagate(prob);
    for (std::size_t i = 0; i < u.node_count(); ++i) {
        const double t = u.t_nodes()[i];
        auto exact = GridFunction::sample(g, [t](Point x) { return cplx(0.0, std::sin(t) * std::sin(x[0])); });
        CHECK(max_diff(u.slice(i), exact) < 1e-8);
    }
    for (auto v : u.slice(0).values) CHECK(v == cplx(0.0));
}

TEST_CASE("constant-coefficient Duhamel formula") {
    const TorusGrid g(1, 32);
    const double c = 0.7, omega = 2.0;
    const int k = 3;
    EvolutionProblem prob;
    prob.grid = g;
    prob.A = {sym("0.7; order=0; real=true")};
    prob.t_nodes = uniform_nodes(1.0, 20);
    prob.substeps = 4;
    prob.forcing = Forcing::function([g, omega, k](double t) {
        return GridFunction::sample(g, [=](Point x) { return std::polar(std::cos(omega * t), k * x[0]); });
    });
    auto u = propagate(prob);
    const double beta = k * c;
    const cplx I(0.0, 1.0);
    double err = 0.0;
    for (std::size_t n = 0; n < u.node_count(); ++n) {
        const double t = u.t_nodes()[n];
        // int_0^t cos(omega s) exp(i beta s) ds
        cplx integral = 0.5 * ((std::exp(I * (beta + omega) * t) - 1.0) / (I * (beta + omega)) +
                               (std::exp(I * (beta - omega) * t) - 1.0) / (I * (beta - omega)));
        auto exact = GridFunction::sample(g, [&](Point x) {
            return I * std::polar(1.0, k * x[0]) * std::exp(-I * beta * t) * integral;
        });
        err = std::max(err, max_diff(u.slice(n), exact));
    }
    CHECK(err < 1e-6);
}

TEST_CASE("manufactured solution and temporal order") {
    std::vector<double> errors;
    for (int sub : {4, 8, 16}) {
        auto prob = manufactured_problem(sub);
        auto u = propagate(prob);
        double e = 0.0;
        for (std::size_t n = 0; n < u.node_count(); ++n)
            e = std::max(e, max_diff(u.slice(n), manufactured_w(prob.grid, u.t_nodes()[n])));
        errors.push_back(e);
    }
    CHECK(errors.back() < 1e-6);
    const double order = std::log2(errors[1] / errors[2]);
    CHECK(order >= 3.5);
    CHECK(std::log2(errors[0] / errors[1]) >= 3.5);

    auto prob = manufactured_problem(16);
    prob.t_nodes = uniform_nodes(1.0, 40);
    prob.substeps = 4;
    auto u = propagate(prob);
    auto res = evolution_residual(prob, u);
    CHECK(res.max < 1e-4);
}

TEST_CASE("sampled forcing with cubic interpolation") {
    auto prob = manufactured_problem(8);
    const auto g = prob.grid;
    auto fine = uniform_nodes(1.0, 80);
    std::vector<GridFunction> slices;
    for (double t : fine) slices.push_back(prob.forcing.at(t, g));
    prob.forcing = Forcing::samples(SpaceTimeFunction(g, fine, slices));
    auto u = propagate(prob);
    CHECK(max_diff(u.slice(u.node_count() - 1), manufactured_w(g, 1.0)) < 1e-6);
    CHECK_THROWS_AS(prob.forcing.at(1.5, g), DomainError);
}

TEST_CASE("propagate preconditions") {
    auto prob = manufactured_problem(1);
    CHECK_THROWS_AS(propagate(prob), CflViolation);

    auto jet = manufactured_problem(8);
    jet.A = {sym("v0; order=0; real=true")};
    CHECK_THROWS_AS(propagate(jet), DomainError);

    auto complex_coeff = manufactured_problem(8);
    complex_coeff.A = {sym("i; order=0")};
    CHECK_THROWS_AS(propagate(complex_coeff), DomainError);

    auto with_jets = manufactured_problem(8);
    with_jets.A = {sym("v0; order=0; real=true")};
    auto v = GridFunction::sample(with_jets.grid, [](Point x) { return cplx(std::sin(x[0])); });
    with_jets.jet_field = make_jet_field(v, 0);
    auto u = propagate(with_jets);
    CHECK(max_diff(u.slice(u.node_count() - 1), manufactured_w(with_jets.grid, 1.0)) < 1e-6);
}

TEST_CASE("bicharacteristics") {
    SECTION("constant speed gives straight lines") {
        auto ray = bicharacteristics(sym("0.7*xi1; order=1; homogeneous=1"), {1.0, 0.0}, {5.0, 0.0}, {0.0, 2.0});
        CHECK(ray.x.back()[0] == Approx(1.0 + 1.4).margin(1e-12));
        CHECK(ray.xi.back()[0] == Approx(5.0).margin(1e-12));
    }
    SECTION("sin(x) xi against the closed form") {
        auto a1 = sym("sin(x1)*xi1; order=1; homogeneous=1");
        const double x0 = 1.0, xi0 = 10.0, T = 0.5;
        auto ray = bicharacteristics(a1, {x0, 0.0}, {xi0, 0.0}, {0.0, T});
        for (std::size_t i = 0; i < ray.t_nodes.size(); i += 100) {
            const double t = ray.t_nodes[i];
            const double x = 2.0 * std::atan(std::tan(0.5 * x0) * std::exp(t));
            CHECK(ray.x[i][0] == Approx(x).margin(1e-8));
            CHECK(ray.xi[i][0] == Approx(xi0 * std::sin(x0) / std::sin(x)).margin(1e-8));
            // Hamiltonian conservation.
            CHECK(std::sin(ray.x[i][0]) * ray.xi[i][0] == Approx(std::sin(x0) * xi0).margin(1e-8));
        }
    }
    SECTION("two-dimensional flow conserves the Hamiltonian") {
        auto a1 = sym("(1 + 0.3*cos(x1 - x2))*xi1 + 0.2*xi2; order=1; homogeneous=1");
        auto ray = bicharacteristics(a1, {0.3, 1.1}, {4.0, -3.0}, {0.0, 1.0}, 2);
        auto h = [](Point x, FreqVec xi) { return (1 + 0.3 * std::cos(x[0] - x[1])) * xi[0] + 0.2 * xi[1]; };
        for (std::size_t i = 0; i < ray.t_nodes.size(); ++i)
            CHECK(std::abs(h(ray.x[i], ray.xi[i]) - h(ray.x[0], ray.xi[0])) < 1e-8);
    }
    SECTION("errors") {
        auto a1 = sym("sin(x1)*xi1; order=1; homogeneous=1");
        CHECK_THROWS_AS(bicharacteristics(a1, {1.0, 0.0}, {0.0, 0.0}, {0.0, 1.0}), DomainError);
        BicharOptions o;
        o.freq_max = 11.0;
        CHECK_THROWS_AS(bicharacteristics(a1, {2.0, 0.0}, {10.0, 0.0}, {0.0, 1.0}, 1, o), DomainError);
    }
}

TEST_CASE("straightening of wave packets") {
    PacketSpec p;
    p.x0 = 1.0;
    p.lambda = 32.0;
    auto zero = straightening_check(Symbol::constant(0.0), p, 0.5);
    CHECK(std::abs(zero.center_x - p.x0) < 1e-10);
    CHECK(zero.center_xi == Approx(p.lambda).margin(1e-8));

    auto shift = straightening_check(sym("0.8*xi1; order=1; homogeneous=1"), p, 0.5);
    CHECK(shift.predicted_x == Approx(1.4).margin(1e-12));
    CHECK(shift.tracking_error < shift.packet_width);

    auto curved = straightening_check(sym("sin(x1)*xi1; order=1; homogeneous=1"), p, 0.5);
    CHECK(curved.tracking_error < 3.0 / std::sqrt(32.0));

    PacketSpec wide = p;
    wide.lambda = 120.0;
    CHECK_THROWS_AS(straightening_check(Symbol::constant(0.0), wide, 0.1), DomainError);
}

TEST_CASE("pseudolocality of the propagator") {
    const Interval c1{0.2, 2.2}, c2{3.2, 5.2};
    auto identity = pseudolocality_check(Symbol::constant(0.0), c1, c2, 0.0);
    for (double c : identity.couplings) CHECK(c == 0.0);

    auto shift = pseudolocality_check(sym("0.5*xi1; order=1; homogeneous=1"), c1, c2, 0.5);
    CHECK(shift.couplings.back() < 1e-8);

    auto half_wave = pseudolocality_check(sym("0.5*absxi; order=1"), c1, c2, 0.5);
    INFO("couplings " << half_wave.couplings[0] << " " << half_wave.couplings[1] << " " << half_wave.couplings[2]);
    CHECK(half_wave.slope <= -2.0);

    CHECK_THROWS_AS(pseudolocality_check(sym("4*xi1; order=1; homogeneous=1"), c1, c2, 1.0), DomainError);
}

TEST_CASE("energy monitor") {
    SECTION("zero forcing") {
        auto prob = manufactured_problem(8);
        prob.forcing = Forcing{};
        auto u = propagate(prob);
        auto rep = energy_monitor(u, prob.forcing, prob, 1.0);
        CHECK(rep.fitted_C == 0.0);
        for (double n : rep.norm_trace) CHECK(n == 0.0);
    }
    SECTION("pure integration") {
        auto prob = manufactured_problem(8);
        prob.A = {Symbol::constant(0.0)};
        prob.t_nodes = uniform_nodes(1.0, 100);
        prob.substeps = 1;
        auto u = propagate(prob);
        auto rep = energy_monitor(u, prob.forcing, prob, 0.0);
        CHECK(rep.norm_trace[0] == 0.0);
        CHECK(std::isfinite(rep.fitted_C));
        CHECK(rep.fitted_C <= 1.0 + 1e-3);
        CHECK(rep.sup_norm_sq <= rep.implied_bound);
    }
    SECTION("frozen quasilinear coefficients on an amplitude ladder") {
        std::vector<double> fitted;
        for (double amp : {0.0, 0.25, 0.5, 1.0}) {
            auto prob = manufactured_problem(8);
            prob.A = {sym("1 + v0; order=0; real=true")};
            auto v = GridFunction::sample(prob.grid, [amp](Point x) { return cplx(amp * std::cos(x[0])); });
            prob.jet_field = make_jet_field(v, 1);
            // Steady source centred where v' > 0, so the coefficient drives the growth.
            const auto g = prob.grid;
            prob.forcing = Forcing::function([g](double) {
                return GridFunction::sample(g, [](Point x) { return cplx(std::exp(-4.0 * (1.0 - std::cos(x[0] - 4.2)))); });
            });
            prob.substeps = 16;
            auto u = propagate(prob);
            auto rep = energy_monitor(u, prob.forcing, prob, 1.0);
            CHECK(rep.ell_used == 1);
            CHECK(std::isfinite(rep.fitted_C));
            fitted.push_back(rep.fitted_C);
        }
        for (std::size_t i = 1; i < fitted.size(); ++i) CHECK(fitted[i] >= fitted[i - 1] - 1e-6);
    }
}
