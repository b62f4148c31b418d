#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "polarsynth/errors.hpp"
#include "polarsynth/field.hpp"
#include "polarsynth/fft.hpp"
#include "polarsynth/grid.hpp"

namespace polarsynth::ad {

struct RT {
    int id = -1;
};
struct CT {
    int id = -1;
};

// Reverse-mode tape over real and complex grids. Every operation records a
// hand-written vector-Jacobian product. Cotangents of complex slots are stored
// as complex grids g = dL/dRe + i*dL/dIm.
class Tape {
public:
    RT var(RGrid v) { return make_r(std::move(v), true); }
    CT var(CGrid v) { return make_c(std::move(v), true); }
    RT constant(RGrid v) { return make_r(std::move(v), false); }
    CT constant(CGrid v) { return make_c(std::move(v), false); }
    RT scalar(double v) { return make_r(RGrid(1, 1, v), false); }

    const RGrid& val(RT t) const { return rs_[t.id].v; }
    const CGrid& val(CT t) const { return cs_[t.id].v; }
    const RGrid& grad(RT t) const { return rs_[t.id].g; }
    const CGrid& grad(CT t) const { return cs_[t.id].g; }
    double value(RT t) const {
        const RGrid& g = rs_[t.id].v;
        if (g.size() != 1) throw DomainError("Tape::value: slot is not a scalar");
        return g[0];
    }

    void backward(RT loss) {
        if (rs_[loss.id].v.size() != 1) throw DomainError("Tape::backward: loss must be scalar");
        for (auto& s : rs_)
            if (s.needs_grad) s.g.fill(0.0);
        for (auto& s : cs_)
            if (s.needs_grad) s.g.fill(cplx(0, 0));
        if (!rs_[loss.id].needs_grad)
            throw DomainError("Tape::backward: loss does not depend on any variable");
        rs_[loss.id].g[0] = 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(*this);
    }

    // --- op-author surface ---
    RT make_r(RGrid v, bool needs_grad) {
        RSlot s;
        if (needs_grad) s.g = RGrid(v.rows(), v.cols(), 0.0);
        s.v = std::move(v);
        s.needs_grad = needs_grad;
        rs_.push_back(std::move(s));
        return RT{static_cast<int>(rs_.size()) - 1};
    }
    CT make_c(CGrid v, bool needs_grad) {
        CSlot s;
        if (needs_grad) s.g = CGrid(v.rows(), v.cols(), cplx(0, 0));
        s.v = std::move(v);
        s.needs_grad = needs_grad;
        cs_.push_back(std::move(s));
        return CT{static_cast<int>(cs_.size()) - 1};
    }
    void push_node(std::function<void(Tape&)> back) { nodes_.push_back(std::move(back)); }
    bool needs_grad(RT t) const { return rs_[t.id].needs_grad; }
    bool needs_grad(CT t) const { return cs_[t.id].needs_grad; }
    RGrid* adj(RT t) { return rs_[t.id].needs_grad ? &rs_[t.id].g : nullptr; }
    CGrid* adj(CT t) { return cs_[t.id].needs_grad ? &cs_[t.id].g : nullptr; }

private:
    struct RSlot {
        RGrid v, g;
        bool needs_grad = false;
    };
    struct CSlot {
        CGrid v, g;
        bool needs_grad = false;
    };
    std::vector<RSlot> rs_;
    std::vector<CSlot> cs_;
    std::vector<std::function<void(Tape&)>> nodes_;
};

// ---------------------------------------------------------------- real ops

inline RT add(Tape& t, RT a, RT b) {
    RGrid v = t.val(a);
    v += t.val(b);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([a, b, out](Tape& tp) {
        const RGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a)) *ga += g;
        if (auto* gb = tp.adj(b)) *gb += g;
    });
    return out;
}

inline RT sub(Tape& t, RT a, RT b) {
    RGrid v = t.val(a);
    v -= t.val(b);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([a, b, out](Tape& tp) {
        const RGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a)) *ga += g;
        if (auto* gb = tp.adj(b)) {
            for (size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
    });
    return out;
}

inline RT mul(Tape& t, RT a, RT b) {
    const RGrid &va = t.val(a), &vb = t.val(b);
    va.require_same(vb);
    RGrid v(va.rows(), va.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = va[i] * vb[i];
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([a, b, out](Tape& tp) {
        const RGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a)) {
            const RGrid& vb2 = tp.val(b);
            for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * vb2[i];
        }
        if (auto* gb = tp.adj(b)) {
            const RGrid& va2 = tp.val(a);
            for (size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * va2[i];
        }
    });
    return out;
}

inline RT scale(Tape& t, RT a, double k) {
    RGrid v = t.val(a);
    v *= k;
    bool ng = t.needs_grad(a);
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([a, out, k](Tape& tp) {
        const RGrid& g = tp.grad(out);
        auto* ga = tp.adj(a);
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += k * g[i];
    });
    return out;
}

inline RT sum(Tape& t, RT a) {
    RT out = t.make_r(RGrid(1, 1, polarsynth::sum(t.val(a))), t.needs_grad(a));
    if (t.needs_grad(a)) t.push_node([a, out](Tape& tp) {
        double g = tp.grad(out)[0];
        auto* ga = tp.adj(a);
        for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g;
    });
    return out;
}

inline RT dot(Tape& t, RT a, RT b) {
    double v = polarsynth::dot(t.val(a), t.val(b));
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    RT out = t.make_r(RGrid(1, 1, v), ng);
    if (ng) t.push_node([a, b, out](Tape& tp) {
        double g = tp.grad(out)[0];
        if (auto* ga = tp.adj(a)) {
            const RGrid& vb = tp.val(b);
            for (size_t i = 0; i < ga->size(); ++i) (*ga)[i] += g * vb[i];
        }
        if (auto* gb = tp.adj(b)) {
            const RGrid& va = tp.val(a);
            for (size_t i = 0; i < gb->size(); ++i) (*gb)[i] += g * va[i];
        }
    });
    return out;
}

// L1 norm with sign subgradient (0 at 0).
inline RT l1(Tape& t, RT a) {
    RT out = t.make_r(RGrid(1, 1, norm_l1(t.val(a))), t.needs_grad(a));
    if (t.needs_grad(a)) t.push_node([a, out](Tape& tp) {
        double g = tp.grad(out)[0];
        const RGrid& v = tp.val(a);
        auto* ga = tp.adj(a);
        for (size_t i = 0; i < v.size(); ++i)
            (*ga)[i] += g * (v[i] > 0 ? 1.0 : (v[i] < 0 ? -1.0 : 0.0));
    });
    return out;
}

// scalar ops on 1x1 slots
inline RT sqrt_s(Tape& t, RT s, double eps = 0.0) {
    double v = std::sqrt(std::max(t.value(s), eps));
    RT out = t.make_r(RGrid(1, 1, v), t.needs_grad(s));
    if (t.needs_grad(s)) t.push_node([s, out, v](Tape& tp) {
        if (v > 0) (*tp.adj(s))[0] += tp.grad(out)[0] * 0.5 / v;
    });
    return out;
}

// grid / max(scalar, eps); the clamp freezes the scalar's gradient when active
inline RT div_by_scalar(Tape& t, RT a, RT s, double eps) {
    double sv = t.value(s);
    double denom = std::max(sv, eps);
    bool clamped = sv < eps;
    RGrid v = t.val(a);
    v *= 1.0 / denom;
    bool ng = t.needs_grad(a) || t.needs_grad(s);
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([a, s, out, denom, clamped](Tape& tp) {
        const RGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a)) {
            for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / denom;
        }
        if (!clamped)
            if (auto* gs = tp.adj(s)) {
                const RGrid& va = tp.val(a);
                double acc = 0;
                for (size_t i = 0; i < g.size(); ++i) acc += g[i] * va[i];
                (*gs)[0] -= acc / (denom * denom);
            }
    });
    return out;
}

inline RT smul(Tape& t, RT a, RT s) {
    double sv = t.value(s);
    RGrid v = t.val(a);
    v *= sv;
    bool ng = t.needs_grad(a) || t.needs_grad(s);
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([a, s, out, sv](Tape& tp) {
        const RGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a))
            for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * sv;
        if (auto* gs = tp.adj(s)) {
            const RGrid& va = tp.val(a);
            double acc = 0;
            for (size_t i = 0; i < g.size(); ++i) acc += g[i] * va[i];
            (*gs)[0] += acc;
        }
    });
    return out;
}

// Linear channel combination: out = sum_c coeffs[c] * parts[c].
// coeffs is a (C x 1) slot.
inline RT combine(Tape& t, const std::vector<RT>& parts, RT coeffs) {
    const RGrid& cv = t.val(coeffs);
    if (cv.size() != parts.size()) throw DomainError("combine: coefficient count mismatch");
    const RGrid& first = t.val(parts[0]);
    RGrid v(first.rows(), first.cols(), 0.0);
    bool ng = t.needs_grad(coeffs);
    for (size_t c = 0; c < parts.size(); ++c) {
        const RGrid& pc = t.val(parts[c]);
        pc.require_same(first);
        ng = ng || t.needs_grad(parts[c]);
        for (size_t i = 0; i < v.size(); ++i) v[i] += cv[c] * pc[i];
    }
    RT out = t.make_r(std::move(v), ng);
    if (ng) t.push_node([parts, coeffs, out](Tape& tp) {
        const RGrid& g = tp.grad(out);
        const RGrid& cv2 = tp.val(coeffs);
        for (size_t c = 0; c < parts.size(); ++c) {
            if (auto* gp = tp.adj(parts[c]))
                for (size_t i = 0; i < g.size(); ++i) (*gp)[i] += cv2[c] * g[i];
            if (auto* gc = tp.adj(coeffs)) {
                const RGrid& pv = tp.val(parts[c]);
                double acc = 0;
                for (size_t i = 0; i < g.size(); ++i) acc += g[i] * pv[i];
                (*gc)[c] += acc;
            }
        }
    });
    return out;
}

// M = max(-alpha alpha^T, 0) for a (C x 1) weight slot; same-sign pairs mask to zero.
inline RT mask_opposite_sign(Tape& t, RT alpha) {
    const RGrid& av = t.val(alpha);
    int c = static_cast<int>(av.size());
    RGrid m(c, c, 0.0);
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = std::max(-av[i] * av[j], 0.0);
    RT out = t.make_r(std::move(m), t.needs_grad(alpha));
    if (t.needs_grad(alpha)) t.push_node([alpha, out, c](Tape& tp) {
        const RGrid& g = tp.grad(out);
        const RGrid& av2 = tp.val(alpha);
        auto* ga = tp.adj(alpha);
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < c; ++j) {
                if (-av2[i] * av2[j] <= 0) continue;
                (*ga)[i] += g(i, j) * (-av2[j]);
                (*ga)[j] += g(i, j) * (-av2[i]);
            }
    });
    return out;
}

inline RT abs_grid(Tape& t, RT a) {
    const RGrid& va = t.val(a);
    RGrid v(va.rows(), va.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::abs(va[i]);
    RT out = t.make_r(std::move(v), t.needs_grad(a));
    if (t.needs_grad(a)) t.push_node([a, out](Tape& tp) {
        const RGrid& g = tp.grad(out);
        const RGrid& v2 = tp.val(a);
        auto* ga = tp.adj(a);
        for (size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] * (v2[i] > 0 ? 1.0 : (v2[i] < 0 ? -1.0 : 0.0));
    });
    return out;
}

// Box-mean pooling by an integer factor.
inline RT pool(Tape& t, RT a, int ratio) {
    const RGrid& va = t.val(a);
    if (ratio < 1 || va.rows() % ratio || va.cols() % ratio)
        throw ConfigError("pool: grid dimensions must be divisible by the pooling ratio");
    int ny = va.rows() / ratio, nx = va.cols() / ratio;
    RGrid v(ny, nx, 0.0);
    double inv = 1.0 / (ratio * ratio);
    for (int y = 0; y < va.rows(); ++y)
        for (int x = 0; x < va.cols(); ++x) v(y / ratio, x / ratio) += va(y, x) * inv;
    RT out = t.make_r(std::move(v), t.needs_grad(a));
    if (t.needs_grad(a)) t.push_node([a, out, ratio, inv](Tape& tp) {
        const RGrid& g = tp.grad(out);
        auto* ga = tp.adj(a);
        for (int y = 0; y < ga->rows(); ++y)
            for (int x = 0; x < ga->cols(); ++x)
                (*ga)(y, x) += g(y / ratio, x / ratio) * inv;
    });
    return out;
}

inline RT pixel(Tape& t, RT a, int y, int x) {
    RT out = t.make_r(RGrid(1, 1, t.val(a)(y, x)), t.needs_grad(a));
    if (t.needs_grad(a)) t.push_node([a, out, y, x](Tape& tp) {
        (*tp.adj(a))(y, x) += tp.grad(out)[0];
    });
    return out;
}

// ------------------------------------------------------------- complex ops

// out = mask .* e^{i phi}
inline CT unit_phasor(Tape& t, RT phi, const RGrid& mask) {
    const RGrid& pv = t.val(phi);
    pv.require_same(mask);
    CGrid v(pv.rows(), pv.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::polar(mask[i], pv[i]);
    CT out = t.make_c(std::move(v), t.needs_grad(phi));
    if (t.needs_grad(phi)) t.push_node([phi, out](Tape& tp) {
        const CGrid& g = tp.grad(out);
        const CGrid& ov = tp.val(out);
        auto* gp = tp.adj(phi);
        for (size_t i = 0; i < g.size(); ++i) {
            // d out = i*out dphi;  dL = Re(conj(g) . d out)
            cplx iout = cplx(0, 1) * ov[i];
            (*gp)[i] += iout.real() * g[i].real() + iout.imag() * g[i].imag();
        }
    });
    return out;
}

// out = tr .* (cr + i si)
inline CT polar_parts(Tape& t, RT tr, RT cr, RT si) {
    const RGrid &tv = t.val(tr), &cv = t.val(cr), &sv = t.val(si);
    tv.require_same(cv);
    tv.require_same(sv);
    CGrid v(tv.rows(), tv.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = cplx(tv[i] * cv[i], tv[i] * sv[i]);
    bool ng = t.needs_grad(tr) || t.needs_grad(cr) || t.needs_grad(si);
    CT out = t.make_c(std::move(v), ng);
    if (ng) t.push_node([tr, cr, si, out](Tape& tp) {
        const CGrid& g = tp.grad(out);
        const RGrid &tv2 = tp.val(tr), &cv2 = tp.val(cr), &sv2 = tp.val(si);
        if (auto* gt = tp.adj(tr))
            for (size_t i = 0; i < g.size(); ++i)
                (*gt)[i] += cv2[i] * g[i].real() + sv2[i] * g[i].imag();
        if (auto* gc = tp.adj(cr))
            for (size_t i = 0; i < g.size(); ++i) (*gc)[i] += tv2[i] * g[i].real();
        if (auto* gs = tp.adj(si))
            for (size_t i = 0; i < g.size(); ++i) (*gs)[i] += tv2[i] * g[i].imag();
    });
    return out;
}

inline CT cmul_const(Tape& t, CT u, std::shared_ptr<const CGrid> k) {
    const CGrid& uv = t.val(u);
    uv.require_same(*k);
    CGrid v(uv.rows(), uv.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = uv[i] * (*k)[i];
    CT out = t.make_c(std::move(v), t.needs_grad(u));
    if (t.needs_grad(u)) t.push_node([u, out, k](Tape& tp) {
        const CGrid& g = tp.grad(out);
        auto* gu = tp.adj(u);
        for (size_t i = 0; i < g.size(); ++i) (*gu)[i] += std::conj((*k)[i]) * g[i];
    });
    return out;
}

inline CT cadd(Tape& t, CT a, CT b) {
    CGrid v = t.val(a);
    v += t.val(b);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    CT out = t.make_c(std::move(v), ng);
    if (ng) t.push_node([a, b, out](Tape& tp) {
        const CGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a)) *ga += g;
        if (auto* gb = tp.adj(b)) *gb += g;
    });
    return out;
}

inline CT csub(Tape& t, CT a, CT b) {
    CGrid v = t.val(a);
    v -= t.val(b);
    bool ng = t.needs_grad(a) || t.needs_grad(b);
    CT out = t.make_c(std::move(v), ng);
    if (ng) t.push_node([a, b, out](Tape& tp) {
        const CGrid& g = tp.grad(out);
        if (auto* ga = tp.adj(a)) *ga += g;
        if (auto* gb = tp.adj(b))
            for (size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    });
    return out;
}

inline CT cscale(Tape& t, CT a, cplx k) {
    CGrid v = t.val(a);
    for (auto i = 0u; i < v.size(); ++i) v[i] *= k;
    CT out = t.make_c(std::move(v), t.needs_grad(a));
    if (t.needs_grad(a)) t.push_node([a, out, k](Tape& tp) {
        const CGrid& g = tp.grad(out);
        auto* ga = tp.adj(a);
        cplx kc = std::conj(k);
        for (size_t i = 0; i < g.size(); ++i) (*ga)[i] += kc * g[i];
    });
    return out;
}

// Single-step Fresnel transform as one linear node; the VJP applies the exact
// conjugate-transpose map.
inline CT propagate(Tape& t, CT u, std::shared_ptr<const field::FresnelPlan> plan) {
    CT out = t.make_c(field::fresnel_execute(*plan, t.val(u)), t.needs_grad(u));
    if (t.needs_grad(u)) t.push_node([u, out, plan](Tape& tp) {
        CGrid back = field::fresnel_execute_adjoint(*plan, tp.grad(out));
        auto* gu = tp.adj(u);
        *gu += back;
    });
    return out;
}

inline CT crop_c(Tape& t, CT u, int y0, int x0, int ny, int nx) {
    const CGrid& uv = t.val(u);
    if (y0 < 0 || x0 < 0 || y0 + ny > uv.rows() || x0 + nx > uv.cols())
        throw DomainError("crop_c: window out of bounds");
    CGrid v(ny, nx);
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) v(y, x) = uv(y0 + y, x0 + x);
    CT out = t.make_c(std::move(v), t.needs_grad(u));
    if (t.needs_grad(u)) t.push_node([u, out, y0, x0, ny, nx](Tape& tp) {
        const CGrid& g = tp.grad(out);
        auto* gu = tp.adj(u);
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) (*gu)(y0 + y, x0 + x) += g(y, x);
    });
    return out;
}

inline RT abs2(Tape& t, CT u) {
    const CGrid& uv = t.val(u);
    RGrid v(uv.rows(), uv.cols());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::norm(uv[i]);
    RT out = t.make_r(std::move(v), t.needs_grad(u));
    if (t.needs_grad(u)) t.push_node([u, out](Tape& tp) {
        const RGrid& g = tp.grad(out);
        const CGrid& uv2 = tp.val(u);
        auto* gu = tp.adj(u);
        for (size_t i = 0; i < g.size(); ++i) (*gu)[i] += 2.0 * g[i] * uv2[i];
    });
    return out;
}

// --------------------------------------------------- convolution (by FFT)

// 2D "same" convolution of a fixed image with a variable kernel, reflect
// padding at the image boundary. The image spectrum is precomputed once.
struct ConvPlan {
    int img_ny = 0, img_nx = 0;
    int ker_ny = 0, ker_nx = 0;
    int pad_y = 0, pad_x = 0;
    int L = 0;
    CGrid img_spec;         // FFT of the reflect-padded image, zero-embedded in LxL
    double norm = 0;        // 1/L^2
};

inline ConvPlan make_conv_plan(const RGrid& image, int ker_ny, int ker_nx) {
    ConvPlan p;
    p.img_ny = image.rows();
    p.img_nx = image.cols();
    p.ker_ny = ker_ny;
    p.ker_nx = ker_nx;
    p.pad_y = ker_ny / 2;
    p.pad_x = ker_nx / 2;
    if (p.pad_y >= p.img_ny || p.pad_x >= p.img_nx)
        throw ConfigError("conv: kernel half-width exceeds image size (reflect padding)");
    int py = p.img_ny + 2 * p.pad_y, px = p.img_nx + 2 * p.pad_x;
    int need = std::max(py + ker_ny, px + ker_nx);
    int L = 1;
    while (L < need) L <<= 1;
    p.L = L;
    p.norm = 1.0 / (static_cast<double>(L) * L);

    auto reflect = [](int i, int n) {
        // symmetric reflection with edge repeat: -1 -> 0, n -> n-1
        if (i < 0) i = -i - 1;
        if (i >= n) i = 2 * n - i - 1;
        return i;
    };
    CGrid padded(L, L, cplx(0, 0));
    for (int y = 0; y < py; ++y)
        for (int x = 0; x < px; ++x)
            padded(y, x) = image(reflect(y - p.pad_y, p.img_ny), reflect(x - p.pad_x, p.img_nx));
    Fft2::forward(padded);
    p.img_spec = std::move(padded);
    return p;
}

inline RGrid conv_forward(const ConvPlan& p, const RGrid& kernel) {
    if (kernel.rows() != p.ker_ny || kernel.cols() != p.ker_nx)
        throw DomainError("conv_forward: kernel shape does not match plan");
    CGrid buf(p.L, p.L, cplx(0, 0));
    for (int y = 0; y < p.ker_ny; ++y)
        for (int x = 0; x < p.ker_nx; ++x) buf(y, x) = kernel(y, x);
    Fft2::forward(buf);
    for (size_t i = 0; i < buf.size(); ++i) buf[i] *= p.img_spec[i];
    Fft2::inverse(buf);
    // out(y,x) = linear_conv(kernel, padded)(y + cy + pad, x + cx + pad)
    int oy = p.ker_ny / 2 + p.pad_y, ox = p.ker_nx / 2 + p.pad_x;
    RGrid out(p.img_ny, p.img_nx);
    for (int y = 0; y < p.img_ny; ++y)
        for (int x = 0; x < p.img_nx; ++x) out(y, x) = buf(y + oy, x + ox).real() * p.norm;
    return out;
}

inline RGrid conv_adjoint_kernel(const ConvPlan& p, const RGrid& g_out) {
    if (g_out.rows() != p.img_ny || g_out.cols() != p.img_nx)
        throw DomainError("conv_adjoint_kernel: cotangent shape mismatch");
    CGrid buf(p.L, p.L, cplx(0, 0));
    for (int y = 0; y < p.img_ny; ++y)
        for (int x = 0; x < p.img_nx; ++x) buf(y, x) = g_out(y, x);
    Fft2::forward(buf);
    // correlation: IFFT(spec(P) . conj(spec(g)))[delta], delta = c + pad - s
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = p.img_spec[i] * std::conj(buf[i]);
    Fft2::inverse(buf);
    int oy = p.ker_ny / 2 + p.pad_y, ox = p.ker_nx / 2 + p.pad_x;
    RGrid gk(p.ker_ny, p.ker_nx);
    for (int s = 0; s < p.ker_ny; ++s)
        for (int t2 = 0; t2 < p.ker_nx; ++t2) {
            int dy = oy - s, dx = ox - t2;
            gk(s, t2) = buf(dy, dx).real() * p.norm;
        }
    return gk;
}

inline RT conv_same_reflect(Tape& t, RT kernel, std::shared_ptr<const ConvPlan> plan) {
    RT out = t.make_r(conv_forward(*plan, t.val(kernel)), t.needs_grad(kernel));
    if (t.needs_grad(kernel)) t.push_node([kernel, out, plan](Tape& tp) {
        RGrid gk = conv_adjoint_kernel(*plan, tp.grad(out));
        auto* g = tp.adj(kernel);
        *g += gk;
    });
    return out;
}

} // namespace polarsynth::ad
