#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "polarsynth/filters.hpp"
#include "polarsynth/random.hpp"

using namespace polarsynth;
using namespace polarsynth::filters;

TEST_CASE("gaussian derivative: zero mean, antisymmetry, rotation") {
    KernelSpec spec;
    spec.sigma = 3.0;
    auto k0 = gaussian_derivative_kernel(spec);
    CHECK(std::abs(sum(k0)) < 1e-10);
    CHECK(all_finite(k0));

    // theta = pi equals the negated theta = 0 kernel
    KernelSpec specpi = spec;
    specpi.theta = M_PI;
    auto kpi = gaussian_derivative_kernel(specpi);
    for (size_t i = 0; i < k0.size(); ++i) CHECK(kpi[i] == doctest::Approx(-k0[i]).epsilon(1e-12));

    // steerability: K(theta) = cos(theta) Kx + sin(theta) Ky
    KernelSpec spec90 = spec;
    spec90.theta = M_PI / 2;
    auto k90 = gaussian_derivative_kernel(spec90);
    Rng rng(4);
    for (int trial = 0; trial < 16; ++trial) {
        double theta = rng.uniform(0, 2 * M_PI);
        KernelSpec st = spec;
        st.theta = theta;
        auto kt = gaussian_derivative_kernel(st);
        double worst = 0;
        for (size_t i = 0; i < kt.size(); ++i)
            worst = std::max(worst,
                             std::abs(kt[i] - (std::cos(theta) * k0[i] + std::sin(theta) * k90[i])));
        CHECK(worst < 1e-8);
    }
}

TEST_CASE("second-order directional derivative kernel") {
    KernelSpec spec;
    spec.sigma = 3.0;
    spec.order = 2;
    spec.theta = 0.7;
    auto k = gaussian_derivative_kernel(spec);
    CHECK(std::abs(sum(k)) < 1e-10);
    // even under point reflection: K(-x, -y) = K(x, y)
    int n = k.rows();
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x)
            CHECK(k(y, x) == doctest::Approx(k(n - 1 - y, n - 1 - x)).epsilon(1e-12));
}

TEST_CASE("kernel spec validation") {
    KernelSpec bad;
    bad.sigma = 4.0;
    bad.support = 9; // below 6 sigma
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.support = 26; // even
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.support = 0;
    auto r = bad.resolved();
    CHECK(r.support % 2 == 1);
    CHECK(r.support >= 24);
    KernelSpec neg;
    neg.sigma = -1;
    CHECK_THROWS_AS(neg.resolved(), ConfigError);
}

TEST_CASE("laplacian of gaussian: zero mean, symmetry, edge zero-crossing") {
    auto k = log_kernel(2.0, 13);
    CHECK(std::abs(sum(k)) < 1e-9);
    // radial symmetry: K(x, y) = K(y, x) = K(-x, -y); with an odd support all
    // mirrored lattice points exist
    int n = k.rows();
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            CHECK(k(y, x) == doctest::Approx(k(x, y)).epsilon(1e-12));
            CHECK(k(y, x) == doctest::Approx(k(n - 1 - y, n - 1 - x)).epsilon(1e-12));
        }

    // response to a constant image is zero
    double resp = 0;
    for (size_t i = 0; i < k.size(); ++i) resp += k[i] * 7.3;
    CHECK(std::abs(resp) < 1e-8);

    // 1D step edge: convolve rows of a step image, find the sign change
    int w = 64;
    RGrid img(1, w);
    for (int x = 0; x < w; ++x) img(0, x) = x < w / 2 ? 0.0 : 1.0;
    // direct 1D convolution with the kernel's middle row marginal (sum over y)
    std::vector<double> k1(n, 0.0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) k1[x] += k(y, x);
    std::vector<double> out(w, 0.0);
    for (int x = 0; x < w; ++x)
        for (int s = 0; s < n; ++s) {
            int xi = x - (s - n / 2);
            xi = std::clamp(xi, 0, w - 1);
            out[x] += k1[s] * img(0, xi);
        }
    int crossing = -1;
    for (int x = w / 4; x < 3 * w / 4 - 1; ++x)
        if (out[x] > 0 && out[x + 1] <= 0) crossing = x;
    CHECK(crossing >= 0);
    CHECK(std::abs((crossing + 0.5) - (w / 2 - 0.5)) <= 1.0);
}

TEST_CASE("depth orientation schedule") {
    DepthSchedule sched;
    sched.z_min = 0.014;
    sched.z_max = 0.022;
    sched.theta_min = 0.0;
    sched.theta_max = M_PI / 2;
    sched.depths = {0.014, 0.018, 0.022};
    KernelSpec spec;
    spec.sigma = 3.0;
    auto batch = depth_orientation_targets(sched, spec);
    CHECK(batch.size() == 3);

    // endpoints and midpoint angles
    CHECK(sched.theta_at(0.014) == doctest::Approx(0.0));
    CHECK(sched.theta_at(0.022) == doctest::Approx(M_PI / 2));
    CHECK(sched.theta_at(0.018) == doctest::Approx(M_PI / 4));

    // realized kernels match directly constructed ones
    KernelSpec mid = spec;
    mid.theta = M_PI / 4;
    auto want = gaussian_derivative_kernel(mid);
    for (size_t i = 0; i < want.size(); ++i)
        CHECK(batch[1][i] == doctest::Approx(want[i]).epsilon(1e-12));

    DepthSchedule bad = sched;
    bad.z_max = bad.z_min;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = sched;
    bad.depths = {0.018};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("embed kernel centers on the region lattice") {
    auto k = log_kernel(1.0, 7);
    auto e = embed_kernel(k, 32, 32);
    CHECK(e.rows() == 32);
    // kernel center lands at the region origin pixel (16, 16)
    CHECK(e(16, 16) == doctest::Approx(k(3, 3)));
    CHECK(std::abs(sum(e) - sum(k)) < 1e-12);
    CHECK_THROWS_AS(embed_kernel(k, 5, 5), ConfigError);
}
