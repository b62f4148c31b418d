#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <numeric>

#include "polarsynth/crc32.hpp"
#include "polarsynth/fft.hpp"
#include "polarsynth/grid.hpp"
#include "polarsynth/random.hpp"
#include "polarsynth/threading.hpp"

using namespace polarsynth;

TEST_CASE("grid basics") {
    RGrid g(3, 4, 1.5);
    CHECK(g.rows() == 3);
    CHECK(g.cols() == 4);
    CHECK(sum(g) == doctest::Approx(18.0));
    g(2, 3) = -2.0;
    CHECK(max_abs(g) == doctest::Approx(2.0));
    CHECK_THROWS_AS(g += RGrid(2, 2), DomainError);
}

TEST_CASE("axis_coord centers the lattice") {
    // odd axis: symmetric around zero
    CHECK(axis_coord(2, 5, 1.0) == doctest::Approx(0.0));
    CHECK(axis_coord(0, 5, 1.0) == doctest::Approx(-2.0));
    CHECK(axis_coord(4, 5, 1.0) == doctest::Approx(2.0));
    // even axis: origin on the lattice, one extra sample on the negative side
    CHECK(axis_coord(2, 4, 0.5) == doctest::Approx(0.0));
    CHECK(axis_coord(0, 4, 0.5) == doctest::Approx(-1.0));
}

TEST_CASE("fft2 matches a direct dft on a small grid") {
    Rng rng(7);
    int ny = 4, nx = 8;
    CGrid a(ny, nx);
    for (size_t i = 0; i < a.size(); ++i) a[i] = cplx(rng.normal(), rng.normal());
    CGrid want(ny, nx, cplx(0, 0));
    for (int ky = 0; ky < ny; ++ky)
        for (int kx = 0; kx < nx; ++kx) {
            cplx acc(0, 0);
            for (int y = 0; y < ny; ++y)
                for (int x = 0; x < nx; ++x)
                    acc += a(y, x) * std::polar(1.0, -2.0 * M_PI *
                                                         (double(ky) * y / ny + double(kx) * x / nx));
            want(ky, kx) = acc;
        }
    CGrid got = a;
    Fft2::forward(got);
    for (size_t i = 0; i < got.size(); ++i) CHECK(std::abs(got[i] - want[i]) < 1e-10);

    // unnormalized round trip: inverse(forward(x)) = N x
    Fft2::inverse(got);
    for (size_t i = 0; i < got.size(); ++i)
        CHECK(std::abs(got[i] - a[i] * double(ny * nx)) < 1e-9);
}

TEST_CASE("rng determinism and fork independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
    Rng c(42);
    Rng d = c.fork(1), e = c.fork(2);
    CHECK(d.next_u64() != e.next_u64());
}

TEST_CASE("rng moments") {
    Rng rng(123);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double x = rng.normal();
        s += x;
        s2 += x * x;
    }
    CHECK(std::abs(s / n) < 0.01);
    CHECK(s2 / n == doctest::Approx(1.0).epsilon(0.02));

    // Poisson mean/variance at small and large rates
    for (double mean : {3.0, 200.0, 50000.0}) {
        double ps = 0, ps2 = 0;
        const int m = 20000;
        for (int i = 0; i < m; ++i) {
            double x = static_cast<double>(rng.poisson(mean));
            ps += x;
            ps2 += x * x;
        }
        double mu = ps / m, var = ps2 / m - mu * mu;
        CHECK(mu == doctest::Approx(mean).epsilon(0.02));
        CHECK(var == doctest::Approx(mean).epsilon(0.06));
    }
}

TEST_CASE("parallel_for covers every index once") {
    std::vector<int> hits(1000, 0);
    parallel_for(1000, [&](int i) { hits[i] += 1; });
    CHECK(std::accumulate(hits.begin(), hits.end(), 0) == 1000);
    CHECK(*std::min_element(hits.begin(), hits.end()) == 1);
}

TEST_CASE("crc32 known vector") {
    // standard test vector: crc32("123456789") = 0xCBF43926
    const char* s = "123456789";
    CHECK(crc32(s, 9) == 0xCBF43926u);
}
