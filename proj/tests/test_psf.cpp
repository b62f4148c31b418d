#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "polarsynth/psf.hpp"
#include "support/gradcheck.hpp"

using namespace polarsynth;
using namespace polarsynth::psf;

namespace {

metasurface::MetasurfaceDesign random_design(uint64_t seed, double aperture = 60e-6,
                                             double pitch = 1e-6) {
    auto d = metasurface::make_phase_only(aperture, pitch);
    metasurface::random_phase_init(d, seed);
    return d;
}

field::SimulationRegion natural_region(const metasurface::MetasurfaceDesign& d, double lambda,
                                       double dist, int px, int pool = 1) {
    field::FresnelPlan plan = field::make_fresnel_plan(d.ny, d.nx, d.pitch, lambda, dist, 2.0);
    field::SimulationRegion r;
    r.px = r.py = px;
    r.sample_pitch = plan.out_pitch * pool;
    return r;
}

} // namespace

TEST_CASE("interfere: hand cases from the interference formula") {
    RGrid h0(1, 3), h90(1, 3), p0(1, 3, 0.0), p90(1, 3, 0.0);
    // case 1: equal unit intensities in phase -> (0, 2)
    h0(0, 0) = 1;
    h90(0, 0) = 1;
    // case 2: equal unit intensities in quadrature -> (1, 1)
    h0(0, 1) = 1;
    h90(0, 1) = 1;
    p0(0, 1) = M_PI / 2;
    // case 3: h0 = 4, h90 = 1, delta psi = pi -> (4.5, 0.5)
    h0(0, 2) = 4;
    h90(0, 2) = 1;
    p0(0, 2) = M_PI;
    auto [h45, h135] = interfere(h0, p0, h90, p90);
    CHECK(h45(0, 0) == doctest::Approx(0.0).epsilon(1e-14));
    CHECK(h135(0, 0) == doctest::Approx(2.0).epsilon(1e-14));
    CHECK(h45(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h135(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(h45(0, 2) == doctest::Approx(4.5).epsilon(1e-12));
    CHECK(h135(0, 2) == doctest::Approx(0.5).epsilon(1e-12));

    RGrid wrong(2, 2);
    CHECK_THROWS_AS(interfere(h0, p0, wrong, p90), DomainError);
}

TEST_CASE("psf stack: conservation identity and channel rank") {
    auto d = random_design(7);
    double lambda = 532e-9, dist = 0.02;
    auto region = natural_region(d, lambda, dist, 48);
    std::vector<BatchKey> keys = {{true, 0, lambda}, {false, 0.03, lambda}};
    auto stack = make_psf_stack(d, nullptr, keys, dist, region);

    CHECK(interference_residual(stack) < 1e-12);
    for (int b = 0; b < stack.batch(); ++b)
        for (int c = 0; c < 4; ++c) CHECK(min_val(stack.h[b][c]) >= -1e-14);
    CHECK(gram_rank_ratio(stack) < 1e-6);
}

TEST_CASE("identical profiles give identical channels") {
    auto d = random_design(3);
    d.phase_y = d.phase_x;
    double lambda = 532e-9, dist = 0.02;
    auto region = natural_region(d, lambda, dist, 32);
    BatchKey key{true, 0, lambda};
    auto pair = compute_psf_pair(d, nullptr, key, dist, region);
    for (size_t i = 0; i < pair.h0.size(); ++i) {
        CHECK(pair.h0[i] == doctest::Approx(pair.h90[i]).epsilon(1e-12));
        CHECK(pair.psi0[i] == doctest::Approx(pair.psi90[i]).epsilon(1e-9));
        // identical fields: h45 extinguishes, h135 carries everything
        CHECK(pair.h45[i] <= 1e-12 * std::max(1.0, pair.h135[i]));
    }
}

TEST_CASE("doubling the profile amplitude quadruples intensities") {
    auto d = random_design(9, 30e-6);
    double lambda = 532e-9, dist = 0.02;
    auto [tx, ty] = metasurface::assemble_profiles(d, nullptr, lambda);
    field::FresnelPlan plan = field::make_fresnel_plan(d.ny, d.nx, d.pitch, lambda, dist, 2.0);
    CGrid tx2 = tx;
    tx2 *= cplx(2.0, 0.0);
    auto u1 = field::fresnel_execute(plan, tx);
    auto u2 = field::fresnel_execute(plan, tx2);
    for (size_t i = 0; i < u1.size(); i += 97)
        CHECK(std::norm(u2[i]) == doctest::Approx(4 * std::norm(u1[i])).epsilon(1e-12));
}

TEST_CASE("lens-initialized design peaks at the designed offset") {
    double lambda = 532e-9, dist = 0.02, aperture = 0.2e-3;
    auto d = metasurface::make_phase_only(aperture, 1e-6, 1.28);
    auto region = natural_region(d, lambda, dist, 96);
    double off = 6 * region.sample_pitch;
    metasurface::lens_phase_init(d, lambda, dist, dist, {off, 0}, {0, -off});
    BatchKey key{true, 0, lambda};
    auto pair = compute_psf_pair(d, nullptr, key, dist, region);

    auto argmax = [&](const RGrid& h) {
        int by = 0, bx = 0;
        for (int y = 0; y < h.rows(); ++y)
            for (int x = 0; x < h.cols(); ++x)
                if (h(y, x) > h(by, bx)) {
                    by = y;
                    bx = x;
                }
        return std::make_pair(axis_coord(bx, h.cols(), region.sample_pitch),
                              axis_coord(by, h.rows(), region.sample_pitch));
    };
    auto [ux, vy] = argmax(pair.h0);
    CHECK(std::abs(ux - off) <= region.sample_pitch);
    CHECK(std::abs(vy) <= region.sample_pitch);
    auto [ux9, vy9] = argmax(pair.h90);
    CHECK(std::abs(ux9) <= region.sample_pitch);
    CHECK(std::abs(vy9 + off) <= region.sample_pitch);
}

TEST_CASE("focusing efficiency: full-support unity, zero field, monotonicity") {
    // plain disk aperture, full output support -> Parseval gives unity
    auto d = metasurface::make_phase_only(40e-6, 1e-6);
    double lambda = 532e-9, dist = 0.02;
    field::FresnelPlan plan = field::make_fresnel_plan(d.ny, d.nx, d.pitch, lambda, dist, 2.0);
    field::SimulationRegion full;
    full.px = full.py = plan.n_pad;
    full.sample_pitch = plan.out_pitch;
    BatchKey key{true, 0, lambda};
    auto stack = make_psf_stack(d, nullptr, {key}, dist, full);
    CHECK(focusing_efficiency(stack) == doctest::Approx(1.0).epsilon(1e-3));

    // halving the region never increases the efficiency
    field::SimulationRegion half = full;
    half.px = half.py = plan.n_pad / 2;
    auto stack_half = make_psf_stack(d, nullptr, {key}, dist, half);
    CHECK(focusing_efficiency(stack_half) <= focusing_efficiency(stack) + 1e-12);

    // zero transmittance -> zero efficiency (aperture larger than the window
    // masks nothing; shrink the aperture to zero instead)
    RGrid zero(4, 4, 0.0);
    CHECK(focusing_efficiency(zero, zero, 1e-6, 1e-9) == doctest::Approx(0.0));
    CHECK_THROWS_AS(focusing_efficiency(zero, zero, 1e-6, 0.0), DomainError);
}

TEST_CASE("resample_to_sensor: identity, constants, energy bookkeeping") {
    RGrid a(8, 8);
    Rng rng(5);
    for (size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(0, 2);

    auto same = resample_to_sensor(a, 1);
    for (size_t i = 0; i < a.size(); ++i) CHECK(same[i] == a[i]);

    RGrid c(8, 8, 3.7);
    auto pooled = resample_to_sensor(c, 4);
    CHECK(pooled.rows() == 2);
    for (size_t i = 0; i < pooled.size(); ++i) CHECK(pooled[i] == doctest::Approx(3.7));

    // mean pooling: sum before = sum after x ratio^2
    auto p2 = resample_to_sensor(a, 2);
    CHECK(sum(a) == doctest::Approx(sum(p2) * 4).epsilon(1e-12));

    CHECK_THROWS_AS(resample_to_sensor(a, 3), ConfigError);
    CHECK_THROWS_AS(resample_to_sensor(a, 1e-6, 2.5e-6), ConfigError);
    auto ok = resample_to_sensor(a, 1e-6, 2e-6);
    CHECK(ok.rows() == 4);
}

TEST_CASE("pooled stacks preserve the conservation identity") {
    auto d = random_design(13);
    double lambda = 532e-9, dist = 0.02;
    auto region = natural_region(d, lambda, dist, 16, 2);
    auto stack = make_psf_stack(d, nullptr, {{true, 0, lambda}}, dist, region);
    CHECK(stack.pool == 2);
    CHECK(interference_residual(stack) < 1e-12);
}

TEST_CASE("jacobi eigenvalues on a known matrix") {
    RGrid m(3, 3, 0.0);
    // eigenvalues of [[2,1,0],[1,2,0],[0,0,5]] are 1, 3, 5
    m(0, 0) = 2;
    m(0, 1) = 1;
    m(1, 0) = 1;
    m(1, 1) = 2;
    m(2, 2) = 5;
    auto ev = jacobi_eigenvalues(m);
    CHECK(ev[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ev[1] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(ev[2] == doctest::Approx(5.0).epsilon(1e-12));
}
