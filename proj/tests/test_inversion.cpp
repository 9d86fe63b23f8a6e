#include <catch_amalgamated.hpp>

#include <microsolve/inversion.hpp>

#include <random>

using namespace microsolve;
using Catch::Approx;

namespace {

GridFunction random_function(const TorusGrid& g, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    GridFunction f(g);
    for (auto& v : f.values) v = cplx(u(rng), u(rng));
    return f;
}

KernelOperator identity_kernel(const TorusGrid& g) {
    std::vector<std::size_t> all(g.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return KernelOperator::assemble(g, [](const GridFunction& f) { return f; }, all);
}

// Kernel with a dominant smooth low-rank part plus noise.
KernelOperator random_kernel(const TorusGrid& g, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> n01;
    std::vector<std::array<double, 4>> modes;
    for (int r = 0; r < 4; ++r) modes.push_back({n01(rng), n01(rng), n01(rng), n01(rng)});
    std::vector<double> noise(g.size() * g.size());
    for (auto& v : noise) v = 0.05 * n01(rng);
    auto K = KernelOperator::from_function(g, [&](Point x, Point y) {
        cplx acc = 0.0;
        for (int r = 0; r < 4; ++r)
            acc += std::pow(0.5, r) * cplx(std::cos((r + 1) * x[0] + modes[r][0]), std::sin((r + 1) * y[0] + modes[r][1]));
        return acc;
    });
    std::vector<cplx> k = K.kernel();
    for (std::size_t i = 0; i < k.size(); ++i) k[i] += noise[i];
    return KernelOperator(g, K.rows(), K.cols(), k);
}

}  // namespace

TEST_CASE("kernel localization") {
    const TorusGrid g(1, 64);
    const Point c{1.0, 0.0};
    auto one = KernelOperator::from_function(g, [](Point, Point) { return cplx(1.0); });

    SECTION("constant kernel becomes a product of bumps") {
        const double delta = 0.4;
        auto S = localize_kernel(one, delta, c);
        auto bump = spatial_bump(g, c, delta);
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t j = 0; j < g.size(); ++j)
                CHECK(std::abs(S.kernel_at(i, j) - bump.values[i] * bump.values[j]) < 1e-15);
        // Support exactness: nothing stored outside the 2 delta ball.
        for (auto r : S.rows()) CHECK(periodic_distance(g.point(r), c, 1) < 2.0 * delta);
        for (auto col : S.cols()) CHECK(periodic_distance(g.point(col), c, 1) < 2.0 * delta);
        auto f = random_function(g, 1);
        auto Sf = S.apply(f);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (periodic_distance(g.point(i), c, 1) >= 2.0 * delta) CHECK(Sf.values[i] == cplx(0.0));
    }
    SECTION("wide bump keeps the kernel on its plateau") {
        auto K = random_kernel(g, 3);
        const double delta = 1.5;
        auto S = localize_kernel(K, delta, c);
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t j = 0; j < g.size(); ++j)
                if (periodic_distance(g.point(i), c, 1) <= delta && periodic_distance(g.point(j), c, 1) <= delta)
                    CHECK(S.kernel_at(i, j) == K.kernel_at(i, j));
    }
    SECTION("L-infinity kernel bound") {
        auto K = random_kernel(g, 5);
        for (double delta : {0.1, 0.3, 0.6}) {
            auto S = localize_kernel(K, delta, c);
            const double bound = linf_kernel_bound(S, delta);
            for (unsigned s = 0; s < 20; ++s) {
                auto f = random_function(g, 100 + s);
                CHECK(sup_norm(S.apply(f)) <= bound * sup_norm(f));
            }
        }
    }
    SECTION("operator probes localize like kernels") {
        auto K = random_kernel(g, 9);
        auto direct = localize_kernel(K, 0.5, c);
        auto probed = localize_operator(g, [&K](const GridFunction& f) { return K.apply(f); }, 0.5, c);
        REQUIRE(direct.rows() == probed.rows());
        REQUIRE(direct.cols() == probed.cols());
        for (std::size_t i = 0; i < direct.kernel().size(); ++i)
            CHECK(std::abs(direct.kernel()[i] - probed.kernel()[i]) < 1e-11);
    }
    CHECK_THROWS_AS(localize_kernel(one, 1.7, c), DomainError);
}

TEST_CASE("norm estimation") {
    const TorusGrid g(1, 32);
    SECTION("identity") {
        auto est = estimate_norm(identity_kernel(g));
        CHECK(est.value == Approx(1.0).margin(1e-3));
        CHECK(est.converged);
    }
    SECTION("rank one") {
        auto phi = GridFunction::sample(g, [](Point x) { return cplx(std::exp(std::sin(x[0]))); });
        auto psi = GridFunction::sample(g, [](Point x) { return cplx(std::cos(x[0]), 0.5); });
        auto K = KernelOperator::from_function(g, [](Point x, Point y) {
            return std::exp(std::sin(x[0])) * cplx(std::cos(y[0]), 0.5);
        });
        CHECK(estimate_norm(K).value == Approx(l2_norm(phi) * l2_norm(psi)).epsilon(1e-10));
    }
    SECTION("random kernel against a converged power iteration") {
        for (unsigned seed : {11u, 12u, 13u}) {
            auto K = random_kernel(g, seed);
            auto oracle = estimate_norm(K, NormSpace::L2, 5000, 1e-14);
            auto est = estimate_norm(K);
            CHECK(est.value == Approx(oracle.value).epsilon(5e-3));
        }
    }
    SECTION("non-convergence is flagged") {
        // Nearly equal top singular values make the iteration slow.
        auto K = KernelOperator::from_function(g, [](Point x, Point y) {
            return std::polar(1.0, x[0] - y[0]) + 0.999 * std::polar(1.0, 2.0 * (x[0] - y[0]));
        });
        auto est = estimate_norm(K, NormSpace::L2, 3, 1e-15);
        CHECK_FALSE(est.converged);
        CHECK(est.value > 0.0);
    }
    SECTION("L-infinity row sums") {
        auto one = KernelOperator::from_function(g, [](Point, Point) { return cplx(2.0); });
        CHECK(estimate_norm(one, NormSpace::Linf).value == Approx(2.0 * two_pi).epsilon(1e-12));
    }
}

TEST_CASE("Neumann inversion") {
    const TorusGrid g(1, 32);
    auto f = random_function(g, 21);
    SECTION("zero operator") {
        auto zero = KernelOperator::from_function(g, [](Point, Point) { return cplx(0.0); });
        auto res = neumann_invert(zero, f, 1e-12);
        CHECK(l2_norm(res.w - f) == 0.0);
    }
    SECTION("scaled rank-one projector has a closed form") {
        auto phi = GridFunction::sample(g, [](Point x) { return cplx(std::cos(x[0]) + 0.3, std::sin(2 * x[0])); });
        const double nphi2 = std::pow(l2_norm(phi), 2);
        const double s0 = 0.6;
        std::vector<cplx> k(g.size() * g.size());
        for (std::size_t i = 0; i < g.size(); ++i)
            for (std::size_t j = 0; j < g.size(); ++j) k[i * g.size() + j] = s0 * phi[i] * std::conj(phi[j]) / nphi2;
        std::vector<std::size_t> all(g.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        KernelOperator P(g, all, all, k);
        auto res = neumann_invert(P, f, 1e-12);
        CHECK(res.residual < 1e-10);
        cplx proj = 0.0;
        for (std::size_t j = 0; j < g.size(); ++j) proj += std::conj(phi[j]) * f[j] * g.cell_volume();
        GridFunction closed = f - cplx(s0 / (1.0 + s0) / nphi2) * proj * phi;
        CHECK(l2_norm(res.w - closed) < 1e-10);
        CHECK(res.operator_norm == Approx(s0).epsilon(1e-3));
        for (std::size_t j = 1; j < res.term_norms.size(); ++j)
            CHECK(res.term_norms[j] <= (res.operator_norm + 1e-3) * res.term_norms[j - 1] + 1e-300);
    }
    SECTION("random contraction") {
        auto K = random_kernel(g, 31);
        auto norm = estimate_norm(K).value;
        std::vector<cplx> k = K.kernel();
        for (auto& v : k) v *= 0.7 / norm;
        KernelOperator S(g, K.rows(), K.cols(), k);
        auto res = neumann_invert(S, f, 1e-11);
        CHECK(res.residual < 1e-10);
    }
    SECTION("expanding operator is rejected") {
        auto K = random_kernel(g, 41);
        auto norm = estimate_norm(K).value;
        std::vector<cplx> k = K.kernel();
        for (auto& v : k) v *= 1.5 / norm;
        KernelOperator S(g, K.rows(), K.cols(), k);
        CHECK_THROWS_AS(neumann_invert(S, f, 1e-10), NotContractive);
    }
}

TEST_CASE("contraction threshold along a delta ladder") {
    const TorusGrid g(1, 128);
    const Point c{3.0, 0.0};
    auto K = KernelOperator::from_function(g, [](Point, Point) { return cplx(1.5); });
    auto f = random_function(g, 51);
    int first_failure = -1, first_bound_crossing = -1;
    int step = 0;
    for (double delta = 0.02; 2.0 * delta < std::numbers::pi; delta *= 1.5, ++step) {
        auto S = localize_kernel(K, delta, c);
        if (first_bound_crossing < 0 && linf_kernel_bound(S, delta) >= 1.0) first_bound_crossing = step;
        if (first_failure < 0) {
            try {
                auto res = neumann_invert(S, f, 1e-10);
                CHECK(res.residual < 1e-10);
            } catch (const NotContractive& e) {
                first_failure = step;
                CHECK(e.norm() >= 1.0);
            }
        }
    }
    REQUIRE(first_failure >= 0);
    REQUIRE(first_bound_crossing >= 0);
    CHECK(std::abs(first_failure - first_bound_crossing) <= 1);
}

TEST_CASE("smallness scaling law") {
    SECTION("zero family") {
        std::vector<ScalingSample> fam{{8, 0.2, 0.0}, {16, 0.1, 0.0}, {32, 0.05, 0.0}};
        auto rep = smallness_scaling_check(fam, 2);
        CHECK(rep.C0 == 0.0);
        CHECK(rep.holds);
        CHECK(rep.degenerate);
    }
    SECTION("constructed box kernels have exponents (n, n)") {
        const TorusGrid g(2, 128);
        const double h = g.spacing();
        std::vector<ScalingSample> fam;
        for (double rho : {8.0, 16.0, 32.0})
            for (int m : {8, 4, 2}) {
                const double delta0 = m * h;
                std::vector<std::size_t> box;
                for (std::size_t k = 0; k < g.size(); ++k) {
                    auto p = g.centered_point(k);
                    if (p[0] >= -delta0 - 1e-12 && p[0] < delta0 - 1e-12 && p[1] >= -delta0 - 1e-12 && p[1] < delta0 - 1e-12)
                        box.push_back(k);
                }
                KernelOperator S(g, box, box, std::vector<cplx>(box.size() * box.size(), cplx(rho * rho)));
                fam.push_back({rho, delta0, estimate_norm(S).value});
            }
        auto rep = smallness_scaling_check(fam, 2);
        CHECK(rep.exponent_rho == Approx(2.0).margin(1e-6));
        CHECK(rep.exponent_delta == Approx(2.0).margin(1e-6));
        CHECK(rep.holds);
        CHECK(rep.C0 == Approx(4.0).epsilon(1e-6));
    }
    SECTION("a family growing faster than the law fails") {
        std::vector<ScalingSample> fam;
        for (double rho : {8.0, 16.0, 32.0})
            for (double d : {0.2, 0.1, 0.05}) fam.push_back({rho, d, std::pow(rho, 3) * std::pow(d, 2)});
        CHECK_FALSE(smallness_scaling_check(fam, 2).holds);
    }
}
