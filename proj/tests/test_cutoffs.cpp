#include <catch_amalgamated.hpp>

#include <microsolve/cutoffs.hpp>
#include <microsolve/quantization.hpp>

using namespace microsolve;
using Catch::Approx;

namespace {

cplx at_freq(const Symbol& s, double a, double b = 0.0) {
    EvalPoint p;
    p.xi = {a, b};
    return s.eval(p);
}

}  // namespace

TEST_CASE("cone membership") {
    CHECK(cone_membership({5, 0}, {1, 0}, 1e-6));
    CHECK(cone_membership({0, -3}, {0, -1}, 0.01));
    CHECK_FALSE(cone_membership({-1, 0}, {1, 0}, 1.999));
    CHECK_FALSE(cone_membership({-2}, {1}, 1.5, 1));
    const double chord = std::sqrt(2.0 - std::sqrt(2.0));
    CHECK(chord == Approx(0.7654).margin(1e-4));
    CHECK(cone_membership({1, 1}, {1, 0}, chord + 1e-9));
    CHECK_FALSE(cone_membership({1, 1}, {1, 0}, chord - 1e-9));
    CHECK_THROWS_AS(cone_membership({0, 0}, {1, 0}, 0.5), DomainError);
}

TEST_CASE("radial cutoff") {
    auto chi = radial_cutoff(8);
    CHECK(at_freq(chi, 4) == cplx(0.0));
    CHECK(at_freq(chi, 8) == cplx(0.0));
    CHECK(at_freq(chi, 20) == cplx(1.0));
    CHECK(at_freq(chi, 0, -16) == cplx(1.0));
    CHECK(at_freq(chi, 12).real() == Approx(0.5));
    CHECK_THROWS_AS(radial_cutoff(0.5), DomainError);

    std::vector<double> sn;
    for (double rho : {8.0, 16.0, 32.0}) {
        SeminormSamples spec;
        spec.spatial_dims = 2;
        spec.freq_radius = int(2.5 * rho);
        spec.freq_stride = int(rho / 8);
        spec.x_points = 1;
        sn.push_back(estimate_seminorm(symbol_scale(radial_cutoff(rho), rho), 1.0, 2, spec));
    }
    CHECK(*std::max_element(sn.begin(), sn.end()) / *std::min_element(sn.begin(), sn.end()) < 1.5);
}

TEST_CASE("one-dimensional partition") {
    auto cones = build_cone_partition(1, 1.0);
    REQUIRE(cones.size() == 2);
    for (int xi = -40; xi <= 40; ++xi) {
        double sum = (at_freq(cones[0].phi, xi) + at_freq(cones[1].phi, xi)).real();
        if (std::abs(xi) >= 1) {
            CHECK(std::abs(sum - 1.0) < 1e-15);
            CHECK(at_freq(cones[0].phi, xi).real() == (xi > 0 ? 1.0 : 0.0));
        }
        for (auto& c : cones) CHECK(at_freq(c.psi, xi) * at_freq(c.phi, xi) == at_freq(c.phi, xi));
    }
}

TEST_CASE("two-dimensional partition") {
    CHECK_THROWS_AS(build_cone_partition(2, 0.0), DomainError);
    CHECK_THROWS_AS(build_cone_partition(2, 2.5), DomainError);
    for (double eps : {0.3, 0.5, 1.0, 2.0}) {
        auto cones = build_cone_partition(2, eps);
        CHECK(int(cones.size()) == int(std::ceil(two_pi / (eps / 2))));
        double worst = 0;
        for (int a = -64; a <= 64; ++a)
            for (int b = -64; b <= 64; ++b) {
                if (a * a + b * b < 1) continue;
                double sum = 0;
                for (auto& c : cones) {
                    double phi = at_freq(c.phi, a, b).real(), psi = at_freq(c.psi, a, b).real();
                    sum += phi;
                    CHECK(phi >= 0.0);
                    CHECK(phi <= 1.0);
                    CHECK(psi * phi == phi);
                    if (a * a + b * b >= 16) {
                        if (phi > 0) CHECK(cone_membership({double(a), double(b)}, c.axis, c.aperture));
                        if (psi > 0) CHECK(cone_membership({double(a), double(b)}, c.axis, c.aperture));
                    }
                }
                worst = std::max(worst, std::abs(sum - 1.0));
            }
        CHECK(worst < 1e-12);
    }
    // Ring |xi| = 16 with eps = 0.5.
    auto cones = build_cone_partition(2, 0.5);
    for (int k = 0; k < 200; ++k) {
        double th = two_pi * k / 200;
        double sum = 0;
        for (auto& c : cones) sum += at_freq(c.phi, 16 * std::cos(th), 16 * std::sin(th)).real();
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("localized cutoffs") {
    const double rho = 8;
    for (auto& c : build_cone_partition(2, 1.0)) {
        auto phir = localized_phi(c.phi, rho), psir = localized_psi(c.psi, rho);
        for (int a = -40; a <= 40; ++a)
            for (int b = -40; b <= 40; ++b) {
                cplx phi = at_freq(c.phi, a, b), pr = at_freq(phir, a, b), sr = at_freq(psir, a, b);
                CHECK(sr * pr == pr);
                if (a * a + b * b >= 4 * rho * rho) CHECK(phi - pr == cplx(0.0));
                if (a * a + b * b <= rho * rho) CHECK(pr == cplx(0.0));
            }
    }
    // Tau-xi axes read the frequency vector from (tau, xi1).
    auto st = build_cone_partition(2, 1.0, FreqAxes::TauXi);
    EvalPoint p;
    p.tau = 5;
    CHECK(st[0].phi.eval(p) == cplx(1.0));
    TorusGrid g(2, 16);
    QuantizedOp op(st[0].phi, g, {Layout::SpaceTime});
    CHECK(op.has_fast_path());
}

TEST_CASE("spatial bumps") {
    TorusGrid g(1, 64);
    auto b = spatial_bump(g, {0.0, 0.0}, std::numbers::pi / 4);
    CHECK(b.values.values[0] == cplx(1.0));
    CHECK(bump_profile(3.0) == 0.0);
    for (std::size_t k = 0; k < g.size(); ++k) {
        double r = periodic_distance(g.point(k), {0, 0}, 1);
        double v = b.values.values[k].real();
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        if (r <= b.delta) CHECK(v == 1.0);
        if (r >= 2 * b.delta) CHECK(v == 0.0);
    }
    CHECK_THROWS_AS(spatial_bump(g, {0, 0}, 1.6), DomainError);
    CHECK_THROWS_AS(spatial_bump(g, {0, 0}, 0.0), DomainError);

    for (int d : {1, 2}) {
        TorusGrid gg(d, 256);
        auto integral = [&](double delta) {
            auto s = spatial_bump(gg, {3.0, 3.0}, delta);
            double acc = 0;
            for (auto& v : s.values.values) acc += v.real();
            return acc * gg.cell_volume();
        };
        CHECK(integral(0.3) / integral(0.6) == Approx(std::pow(2.0, -d)).epsilon(0.02));
    }
}
