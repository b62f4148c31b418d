#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <memory>

#include "polarsynth/autodiff.hpp"
#include "polarsynth/random.hpp"
#include "support/gradcheck.hpp"

using namespace polarsynth;
using namespace polarsynth::ad;

namespace {

RGrid random_grid(int ny, int nx, Rng& rng, double lo = -1, double hi = 1) {
    RGrid g(ny, nx);
    for (size_t i = 0; i < g.size(); ++i) g[i] = rng.uniform(lo, hi);
    return g;
}

// Pack a real grid from a parameter vector slice.
RGrid unpack(const std::vector<double>& x, size_t off, int ny, int nx) {
    RGrid g(ny, nx);
    for (size_t i = 0; i < g.size(); ++i) g[i] = x[off + i];
    return g;
}

CGrid unpack_c(const std::vector<double>& x, size_t off, int ny, int nx) {
    CGrid g(ny, nx);
    for (size_t i = 0; i < g.size(); ++i) g[i] = cplx(x[off + 2 * i], x[off + 2 * i + 1]);
    return g;
}

// Generic FD check of a tape program with one real-grid variable.
void check_real_op(const std::function<RT(Tape&, RT)>& program, int ny, int nx, uint64_t seed,
                   double tol = 1e-6) {
    Rng rng(seed);
    RGrid x0 = random_grid(ny, nx, rng);
    auto loss_of = [&](const std::vector<double>& x) {
        Tape t;
        RT v = t.var(unpack(x, 0, ny, nx));
        return t.value(program(t, v));
    };
    std::vector<double> x(x0.size());
    for (size_t i = 0; i < x0.size(); ++i) x[i] = x0[i];

    Tape t;
    RT v = t.var(x0);
    RT loss = program(t, v);
    t.backward(loss);
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) g[i] = t.grad(v)[i];

    auto idx = gradcheck::sample_indices(static_cast<int>(x.size()),
                                         std::min<int>(24, static_cast<int>(x.size())), rng);
    int argmax = 0;
    for (size_t i = 1; i < g.size(); ++i)
        if (std::abs(g[i]) > std::abs(g[argmax])) argmax = static_cast<int>(i);
    idx.push_back(argmax);
    auto rep = gradcheck::check(loss_of, x, g, idx, 1e-6);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_err < tol);
}

void check_complex_op(const std::function<RT(Tape&, CT)>& program, int ny, int nx, uint64_t seed,
                      double tol = 1e-6) {
    Rng rng(seed);
    CGrid x0(ny, nx);
    for (size_t i = 0; i < x0.size(); ++i) x0[i] = cplx(rng.uniform(-1, 1), rng.uniform(-1, 1));
    auto loss_of = [&](const std::vector<double>& x) {
        Tape t;
        CT v = t.var(unpack_c(x, 0, ny, nx));
        return t.value(program(t, v));
    };
    std::vector<double> x(2 * x0.size());
    for (size_t i = 0; i < x0.size(); ++i) {
        x[2 * i] = x0[i].real();
        x[2 * i + 1] = x0[i].imag();
    }
    Tape t;
    CT v = t.var(x0);
    RT loss = program(t, v);
    t.backward(loss);
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x0.size(); ++i) {
        g[2 * i] = t.grad(v)[i].real();
        g[2 * i + 1] = t.grad(v)[i].imag();
    }
    auto idx = gradcheck::sample_indices(static_cast<int>(x.size()), 24, rng);
    int argmax = 0;
    for (size_t i = 1; i < g.size(); ++i)
        if (std::abs(g[i]) > std::abs(g[argmax])) argmax = static_cast<int>(i);
    idx.push_back(argmax);
    auto rep = gradcheck::check(loss_of, x, g, idx, 1e-6);
    CHECK(rep.checked > 0);
    CHECK(rep.max_rel_err < tol);
}

} // namespace

TEST_CASE("elementary real ops pass finite differences") {
    Rng wrng(99);
    RGrid w = random_grid(6, 5, wrng);

    check_real_op([&](Tape& t, RT v) { return dot(t, add(t, v, v), t.constant(w)); }, 6, 5, 1);
    check_real_op([&](Tape& t, RT v) { return dot(t, sub(t, scale(t, v, 1.7), v), t.constant(w)); },
                  6, 5, 2);
    check_real_op([&](Tape& t, RT v) { return dot(t, mul(t, v, v), t.constant(w)); }, 6, 5, 3);
    check_real_op([&](Tape& t, RT v) { return sum(t, mul(t, v, t.constant(w))); }, 6, 5, 4);
    check_real_op([&](Tape& t, RT v) { return l1(t, v); }, 6, 5, 5);
    check_real_op([&](Tape& t, RT v) { return sqrt_s(t, dot(t, v, v)); }, 6, 5, 6);
    check_real_op([&](Tape& t, RT v) { return dot(t, abs_grid(t, v), t.constant(w)); }, 6, 5, 7);
    check_real_op([&](Tape& t, RT v) { return pixel(t, mul(t, v, v), 3, 2); }, 6, 5, 8);
}

TEST_CASE("normalization ops pass finite differences") {
    Rng wrng(98);
    RGrid w = random_grid(6, 6, wrng);
    // v / ||v||_2 against a fixed projection
    check_real_op(
        [&](Tape& t, RT v) {
            RT n = sqrt_s(t, dot(t, v, v));
            return dot(t, div_by_scalar(t, v, n, 1e-30), t.constant(w));
        },
        6, 6, 11);
    // scalar multiply path
    check_real_op(
        [&](Tape& t, RT v) {
            RT s = sum(t, v);
            return dot(t, smul(t, v, s), t.constant(w));
        },
        6, 6, 12);
}

TEST_CASE("combine and sign-mask ops pass finite differences") {
    Rng rng(55);
    int ny = 5, nx = 4;
    std::vector<RGrid> hs;
    for (int c = 0; c < 4; ++c) hs.push_back(random_grid(ny, nx, rng, 0, 1));
    RGrid w = random_grid(ny, nx, rng);
    RGrid w44 = random_grid(4, 4, rng);

    auto loss_of = [&](const std::vector<double>& x) {
        Tape t;
        RT alpha = t.var(unpack(x, 0, 4, 1));
        std::vector<RT> parts;
        for (auto& h : hs) parts.push_back(t.constant(h));
        RT net = combine(t, parts, alpha);
        RT m = mask_opposite_sign(t, alpha);
        return t.value(add(t, dot(t, net, t.constant(w)), dot(t, m, t.constant(w44))));
    };
    std::vector<double> x = {0.7, -0.3, 0.45, -0.9};
    Tape t;
    RT alpha = t.var(unpack(x, 0, 4, 1));
    std::vector<RT> parts;
    for (auto& h : hs) parts.push_back(t.constant(h));
    RT net = combine(t, parts, alpha);
    RT m = mask_opposite_sign(t, alpha);
    RT loss = add(t, dot(t, net, t.constant(w)), dot(t, m, t.constant(w44)));
    t.backward(loss);
    std::vector<double> g(4);
    for (int i = 0; i < 4; ++i) g[i] = t.grad(alpha)[i];
    auto rep = gradcheck::check(loss_of, x, g, {0, 1, 2, 3}, 1e-6);
    CHECK(rep.checked == 4);
    CHECK(rep.max_rel_err < 1e-6);

    // combine also propagates into the channel grids
    check_real_op(
        [&](Tape& t2, RT v) {
            RGrid coef(4, 1);
            coef[0] = 1;
            coef[1] = -0.5;
            coef[2] = 0.25;
            coef[3] = 2;
            std::vector<RT> ps = {v, t2.constant(hs[1]), v, t2.constant(hs[3])};
            return dot(t2, combine(t2, ps, t2.constant(coef)), t2.constant(w));
        },
        ny, nx, 77);
}

TEST_CASE("pool op: forward identity and gradient") {
    Tape t;
    RGrid a(4, 4, 3.25);
    RT v = t.var(a);
    RT p1 = pool(t, v, 1);
    CHECK(t.val(p1)(2, 2) == doctest::Approx(3.25));
    RT p4 = pool(t, v, 4);
    CHECK(t.val(p4).rows() == 1);
    CHECK(t.val(p4)(0, 0) == doctest::Approx(3.25));

    check_real_op(
        [&](Tape& t2, RT v2) {
            Rng r(3);
            RGrid w2 = random_grid(3, 3, r);
            return dot(t2, pool(t2, v2, 2), t2.constant(w2));
        },
        6, 6, 21);
    CHECK_THROWS_AS(pool(t, v, 3), ConfigError);
}

TEST_CASE("complex ops pass finite differences") {
    Rng wrng(44);
    int ny = 5, nx = 5;
    RGrid w = random_grid(ny, nx, wrng);
    auto proj = [&](Tape& t, CT u) {
        return add(t, dot(t, abs2(t, u), t.constant(w)),
                   sum(t, abs2(t, cscale(t, u, cplx(0.3, -0.8)))));
    };
    check_complex_op([&](Tape& t, CT u) { return proj(t, u); }, ny, nx, 31);
    check_complex_op([&](Tape& t, CT u) { return proj(t, cadd(t, u, cscale(t, u, cplx(0, 1)))); },
                     ny, nx, 32);
    check_complex_op([&](Tape& t, CT u) { return proj(t, csub(t, u, cscale(t, u, cplx(0.5, 0)))); },
                     ny, nx, 33);

    CGrid k(ny, nx);
    Rng krng(7);
    for (size_t i = 0; i < k.size(); ++i) k[i] = cplx(krng.normal(), krng.normal());
    auto kptr = std::make_shared<const CGrid>(k);
    check_complex_op([&](Tape& t, CT u) { return proj(t, cmul_const(t, u, kptr)); }, ny, nx, 34,
                     3e-5);

    check_complex_op(
        [&](Tape& t, CT u) {
            Rng r(9);
            RGrid w2 = random_grid(3, 3, r);
            return dot(t, abs2(t, crop_c(t, u, 1, 1, 3, 3)), t.constant(w2));
        },
        ny, nx, 35);
}

TEST_CASE("phase and polar builders pass finite differences") {
    Rng wrng(12);
    RGrid mask(6, 6, 1.0);
    mask(0, 0) = 0.0;
    RGrid w = random_grid(6, 6, wrng);
    Rng crng(17);
    CGrid ref(6, 6);
    for (size_t i = 0; i < ref.size(); ++i) ref[i] = cplx(crng.normal(), crng.normal());
    check_real_op(
        [&](Tape& t, RT phi) {
            CT u = unit_phasor(t, phi, mask);
            return dot(t, abs2(t, cadd(t, u, t.constant(ref))), t.constant(w));
        },
        6, 6, 41);

    // polar_parts: gradients wrt transmittance and (cos, sin) heads
    Rng rng(42);
    int n = 4;
    RGrid t0 = random_grid(n, n, rng, 0.1, 1.0);
    RGrid c0 = random_grid(n, n, rng), s0 = random_grid(n, n, rng);
    RGrid w2 = random_grid(n, n, rng);
    auto loss_of = [&](const std::vector<double>& x) {
        Tape t;
        RT tr = t.var(unpack(x, 0, n, n));
        RT cr = t.var(unpack(x, n * n, n, n));
        RT si = t.var(unpack(x, 2 * n * n, n, n));
        CT u = polar_parts(t, tr, cr, si);
        return t.value(dot(t, abs2(t, u), t.constant(w2)));
    };
    std::vector<double> x(3 * n * n);
    for (int i = 0; i < n * n; ++i) {
        x[i] = t0[i];
        x[n * n + i] = c0[i];
        x[2 * n * n + i] = s0[i];
    }
    Tape t;
    RT tr = t.var(t0), cr = t.var(c0), si = t.var(s0);
    CT u = polar_parts(t, tr, cr, si);
    RT loss = dot(t, abs2(t, u), t.constant(w2));
    t.backward(loss);
    std::vector<double> g(3 * n * n);
    for (int i = 0; i < n * n; ++i) {
        g[i] = t.grad(tr)[i];
        g[n * n + i] = t.grad(cr)[i];
        g[2 * n * n + i] = t.grad(si)[i];
    }
    auto idx = gradcheck::sample_indices(3 * n * n, 30, rng);
    auto rep = gradcheck::check(loss_of, x, g, idx, 1e-6);
    CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("propagate vjp matches finite differences at random coordinates") {
    double lambda = 532e-9, d = 0.02, pitch = 2e-6;
    int n = 16;
    auto plan = std::make_shared<const field::FresnelPlan>(
        field::make_fresnel_plan(n, n, pitch, lambda, d, 2.0));
    Rng wrng(5);
    RGrid w = random_grid(plan->n_pad, plan->n_pad, wrng);
    // dense random projection, plus a few single-pixel intensity losses
    check_complex_op(
        [&](Tape& t, CT u) { return dot(t, abs2(t, propagate(t, u, plan)), t.constant(w)); }, n, n,
        51, 1e-4);
    for (uint64_t s = 0; s < 3; ++s) {
        Rng prng(60 + s);
        int py = static_cast<int>(prng.uniform(0, plan->n_pad));
        int px = static_cast<int>(prng.uniform(0, plan->n_pad));
        check_complex_op(
            [&](Tape& t, CT u) { return pixel(t, abs2(t, propagate(t, u, plan)), py, px); }, n, n,
            70 + s, 1e-4);
    }
}

TEST_CASE("conv_same_reflect forward matches a direct sum") {
    Rng rng(8);
    RGrid img = random_grid(9, 7, rng);
    RGrid ker = random_grid(5, 3, rng);
    auto plan = std::make_shared<const ConvPlan>(make_conv_plan(img, 5, 3));
    Tape t;
    RGrid got = t.val(conv_same_reflect(t, t.var(ker), plan));

    auto reflect = [](int i, int n) {
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
        return i;
    };
    for (int y = 0; y < 9; ++y)
        for (int x = 0; x < 7; ++x) {
            double acc = 0;
            for (int s = 0; s < 5; ++s)
                for (int u = 0; u < 3; ++u)
                    acc += ker(s, u) * img(reflect(y - (s - 2), 9), reflect(x - (u - 1), 7));
            CHECK(got(y, x) == doctest::Approx(acc).epsilon(1e-10));
        }
}

TEST_CASE("conv_same_reflect gradient passes finite differences") {
    Rng rng(13);
    RGrid img = random_grid(12, 12, rng);
    auto plan = std::make_shared<const ConvPlan>(make_conv_plan(img, 7, 7));
    RGrid w = random_grid(12, 12, rng);
    check_real_op(
        [&](Tape& t, RT ker) { return dot(t, conv_same_reflect(t, ker, plan), t.constant(w)); }, 7,
        7, 91, 1e-6);
}

TEST_CASE("interference built from complex fields conserves energy") {
    // h45 = |u0 - u90|^2 / 2, h135 = |u0 + u90|^2 / 2
    Rng rng(21);
    int n = 6;
    CGrid u0(n, n), u90(n, n);
    for (size_t i = 0; i < u0.size(); ++i) {
        u0[i] = cplx(rng.normal(), rng.normal());
        u90[i] = cplx(rng.normal(), rng.normal());
    }
    Tape t;
    CT a = t.var(u0), b = t.var(u90);
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    RT h45 = abs2(t, cscale(t, csub(t, a, b), inv_sqrt2));
    RT h135 = abs2(t, cscale(t, cadd(t, a, b), inv_sqrt2));
    RT h0 = abs2(t, a), h90 = abs2(t, b);
    RGrid lhs = t.val(h45);
    lhs += t.val(h135);
    RGrid rhs = t.val(h0);
    rhs += t.val(h90);
    for (size_t i = 0; i < lhs.size(); ++i)
        CHECK(lhs[i] == doctest::Approx(rhs[i]).epsilon(1e-13));
}
