#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <utility>
#include <vector>

#include "polarsynth/errors.hpp"
#include "polarsynth/fft.hpp"
#include "polarsynth/grid.hpp"

namespace polarsynth::field {

enum class Plane { Optic, Sensor };

// Scalar complex amplitude on a uniform grid with square pixels. Sample (y,x)
// sits at physical coordinate ((x - nx/2)*pitch, (y - ny/2)*pitch).
struct ComplexField {
    CGrid amplitude;
    double pitch = 0;      // meters per sample
    double wavelength = 0; // meters
    Plane origin = Plane::Optic;

    void validate() const {
        if (amplitude.rows() < 2 || amplitude.cols() < 2)
            throw DomainError("ComplexField: grid must be at least 2x2");
        if (pitch <= 0 || wavelength <= 0)
            throw DomainError("ComplexField: pitch and wavelength must be positive");
    }
};

// Finite sensor-plane window over which PSFs are evaluated.
struct SimulationRegion {
    int px = 0, py = 0;        // samples along u (cols) and v (rows)
    double sample_pitch = 0;   // meters
    double center_u = 0, center_v = 0;

    double width() const { return px * sample_pitch; }
    double height() const { return py * sample_pitch; }
};

inline double wavenumber(double wavelength) { return 2.0 * M_PI / wavelength; }

// Spherical wavefront e^{ikr}/r from an on-axis point source at distance z.
inline ComplexField spherical_wavefront(int ny, int nx, double pitch, double source_z,
                                        double wavelength) {
    if (source_z <= 0) throw DomainError("spherical_wavefront: source depth must be positive");
    if (pitch <= 0 || wavelength <= 0)
        throw DomainError("spherical_wavefront: pitch/wavelength must be positive");
    double k = wavenumber(wavelength);
    ComplexField f;
    f.amplitude = CGrid(ny, nx);
    f.pitch = pitch;
    f.wavelength = wavelength;
    f.origin = Plane::Optic;
    for (int y = 0; y < ny; ++y) {
        double yy = axis_coord(y, ny, pitch);
        for (int x = 0; x < nx; ++x) {
            double xx = axis_coord(x, nx, pitch);
            double r = std::sqrt(xx * xx + yy * yy + source_z * source_z);
            f.amplitude(y, x) = std::polar(1.0 / r, k * r);
        }
    }
    return f;
}

inline double field_energy(const ComplexField& f) {
    double s = 0;
    for (size_t i = 0; i < f.amplitude.size(); ++i) s += std::norm(f.amplitude[i]);
    return s * f.pitch * f.pitch;
}

// Single-step Fresnel transform: U_out = A * post .* FFT2(pre .* embed(U_in)).
// The padded grid is a square power of two, >= pad_factor times the input, so
// the output pitch is lambda*d/(n_pad*pitch) on both axes. The factorization
// is exact: the result equals the Riemann sum of Eq.-style quadrature at every
// output lattice point.
struct FresnelPlan {
    int in_ny = 0, in_nx = 0;
    double in_pitch = 0;
    double wavelength = 0, distance = 0;
    int n_pad = 0;
    double out_pitch = 0;
    int off_y = 0, off_x = 0; // embedding offset of the input block
    std::vector<cplx> pre_x, pre_y, post_x, post_y;
    cplx amp;
};

// Padded sizes proportional to the wavelengths (in their smallest integer
// ratio), so every batch wavelength shares one output pitch
// g*d/(s*pitch) with g the wavelength GCD. Monochromatic batches reduce to a
// power of two.
inline std::vector<int> commensurate_pads(const std::vector<double>& lambdas, int n_in,
                                          double pad_factor = 2.0) {
    if (lambdas.empty()) throw ConfigError("commensurate_pads: no wavelengths");
    std::vector<long> q(lambdas.size());
    for (size_t i = 0; i < lambdas.size(); ++i) {
        q[i] = std::lround(lambdas[i] * 1e12); // picometers
        if (q[i] <= 0) throw DomainError("commensurate_pads: non-positive wavelength");
        if (std::abs(q[i] - lambdas[i] * 1e12) > 1e-3)
            throw ConfigError("commensurate_pads: wavelengths must sit on a picometer lattice");
    }
    long g = q[0];
    for (long v : q) g = std::gcd(g, v);
    for (auto& v : q) v /= g;
    long qmin = *std::min_element(q.begin(), q.end());
    long qmax = *std::max_element(q.begin(), q.end());
    if (qmin == qmax) { // single distinct wavelength
        int need = static_cast<int>(std::ceil(pad_factor * n_in));
        int n = 1;
        while (n < need) n <<= 1;
        return std::vector<int>(lambdas.size(), n);
    }
    long s = (static_cast<long>(std::ceil(pad_factor * n_in)) + qmin - 1) / qmin;
    if (s % 2) ++s; // even padded sizes keep the lattice centered
    if (s * qmin > (1 << 22))
        throw ConfigError("commensurate_pads: wavelength grid too incommensurate; choose "
                          "wavelengths with a larger common divisor");
    std::vector<int> pads(lambdas.size());
    for (size_t i = 0; i < lambdas.size(); ++i) pads[i] = static_cast<int>(s * q[i]);
    return pads;
}

inline FresnelPlan make_fresnel_plan(int in_ny, int in_nx, double pitch, double wavelength,
                                     double distance, double pad_factor = 2.0, int n_pad = 0) {
    if (distance <= 0) throw DomainError("fresnel: propagation distance must be positive");
    if (pad_factor < 2.0) throw ConfigError("fresnel: zero-padding factor must be >= 2");
    FresnelPlan p;
    p.in_ny = in_ny;
    p.in_nx = in_nx;
    p.in_pitch = pitch;
    p.wavelength = wavelength;
    p.distance = distance;
    int n;
    if (n_pad > 0) {
        if (n_pad < static_cast<int>(std::ceil(pad_factor * std::max(in_ny, in_nx))))
            throw ConfigError("fresnel: explicit padded size below the padding factor");
        n = n_pad;
    } else {
        int need = static_cast<int>(std::ceil(pad_factor * std::max(in_ny, in_nx)));
        n = 1;
        while (n < need) n <<= 1;
    }
    p.n_pad = n;
    p.out_pitch = wavelength * distance / (n * pitch);

    // Sampling guard: the quadratic kernel phase may advance at most pi per
    // sample at the padded-grid edge, i.e. k*(n/2*dx)*dx/d <= pi, which is
    // equivalent to out_pitch >= in_pitch.
    if (p.out_pitch < pitch * (1.0 - 1e-12)) {
        std::ostringstream msg;
        msg << "fresnel: sampling violation, quadratic phase exceeds pi per sample at the "
               "grid edge (input pitch "
            << pitch << " m, output pitch " << p.out_pitch
            << " m); increase distance, wavelength, or coarsen the input grid";
        throw ConfigError(msg.str());
    }

    p.off_y = n / 2 - in_ny / 2;
    p.off_x = n / 2 - in_nx / 2;

    double k = wavenumber(wavelength);
    double c = n / 2; // both input and output lattices are centered at index n/2
    p.pre_x.resize(n);
    p.pre_y.resize(n);
    p.post_x.resize(n);
    p.post_y.resize(n);
    for (int j = 0; j < n; ++j) {
        double xj = (j - c) * pitch;
        double ramp = 2.0 * M_PI * c * j / n;
        p.pre_x[j] = std::polar(1.0, k * xj * xj / (2.0 * distance) + ramp);
        p.pre_y[j] = p.pre_x[j];
        double um = (j - c) * p.out_pitch;
        p.post_x[j] = std::polar(1.0, k * um * um / (2.0 * distance) + ramp);
        p.post_y[j] = p.post_x[j];
    }
    // A = e^{ikd}/(i lambda d) * dx*dy * e^{-i 2 pi c^2 / n} per axis
    cplx a = std::polar(1.0, k * distance) / (cplx(0, 1) * wavelength * distance);
    a *= pitch * pitch;
    a *= std::polar(1.0, -2.0 * M_PI * c * c / n * 2.0);
    p.amp = a;
    return p;
}

// Full padded-grid output. Linear in the input.
inline CGrid fresnel_execute(const FresnelPlan& p, const CGrid& in) {
    if (in.rows() != p.in_ny || in.cols() != p.in_nx)
        throw DomainError("fresnel_execute: input shape does not match plan");
    CGrid buf(p.n_pad, p.n_pad, cplx(0, 0));
    for (int y = 0; y < p.in_ny; ++y) {
        int py = y + p.off_y;
        for (int x = 0; x < p.in_nx; ++x)
            buf(py, x + p.off_x) = in(y, x) * p.pre_y[py] * p.pre_x[x + p.off_x];
    }
    Fft2::forward(buf);
    for (int y = 0; y < p.n_pad; ++y) {
        cplx fy = p.amp * p.post_y[y];
        for (int x = 0; x < p.n_pad; ++x) buf(y, x) *= fy * p.post_x[x];
    }
    return buf;
}

// Conjugate-transpose of fresnel_execute: maps a cotangent on the padded
// output grid back onto the input grid. Exact adjoint of the linear map.
inline CGrid fresnel_execute_adjoint(const FresnelPlan& p, const CGrid& cot) {
    if (cot.rows() != p.n_pad || cot.cols() != p.n_pad)
        throw DomainError("fresnel_execute_adjoint: cotangent shape does not match plan");
    CGrid buf(p.n_pad, p.n_pad);
    for (int y = 0; y < p.n_pad; ++y) {
        cplx fy = std::conj(p.amp * p.post_y[y]);
        for (int x = 0; x < p.n_pad; ++x) buf(y, x) = cot(y, x) * fy * std::conj(p.post_x[x]);
    }
    // FFT^H = conj . FFT . conj
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = std::conj(buf[i]);
    Fft2::forward(buf);
    CGrid out(p.in_ny, p.in_nx);
    for (int y = 0; y < p.in_ny; ++y) {
        int py = y + p.off_y;
        for (int x = 0; x < p.in_nx; ++x) {
            int px = x + p.off_x;
            out(y, x) = std::conj(buf(py, px)) * std::conj(p.pre_y[py] * p.pre_x[px]);
        }
    }
    return out;
}

// Mapping from a plan's padded output lattice onto a simulation region:
// a crop window of px*pool x py*pool fine samples whose pool-blocks average
// onto the region pixels. The region center snaps to the fine lattice; the
// snapped value is reported.
struct RegionMap {
    int pool = 1;
    int m0_y = 0, m0_x = 0; // fine-lattice start of the crop window
    int fine_ny = 0, fine_nx = 0;
    double actual_center_u = 0, actual_center_v = 0;
};

inline RegionMap map_region(const FresnelPlan& p, const SimulationRegion& r) {
    if (r.px < 1 || r.py < 1 || r.sample_pitch <= 0)
        throw ConfigError("region: empty or non-positive geometry");
    double ratio = r.sample_pitch / p.out_pitch;
    int pool = static_cast<int>(std::lround(ratio));
    if (pool < 1 || std::abs(ratio - pool) > 1e-6 * ratio) {
        std::ostringstream msg;
        msg << "region: sample pitch " << r.sample_pitch
            << " m must be an integer multiple of the propagated pitch " << p.out_pitch << " m";
        throw ConfigError(msg.str());
    }
    RegionMap m;
    m.pool = pool;
    m.fine_nx = r.px * pool;
    m.fine_ny = r.py * pool;

    auto solve_axis = [&](int n_px, double center, int& m0, double& actual) {
        double s = center / p.out_pitch - (pool - 1) / 2.0;
        double m0_real = p.n_pad / 2.0 - (n_px / 2) * static_cast<double>(pool) + s;
        m0 = static_cast<int>(std::lround(m0_real));
        // a window flush against the support may sit up to half a region
        // pixel outside after centering; shift it inside (reported via
        // actual_center)
        double tol = pool / 2.0;
        if (m0 < 0 && m0_real >= -tol) m0 = 0;
        if (m0 + n_px * pool > p.n_pad && m0_real + n_px * pool <= p.n_pad + tol)
            m0 = p.n_pad - n_px * pool;
        actual = center + (m0 - m0_real) * p.out_pitch;
        if (m0 < 0 || m0 + n_px * pool > p.n_pad) {
            std::ostringstream msg;
            msg << "region: requested extent " << n_px * r.sample_pitch
                << " m at offset " << center << " m exceeds the propagated support; maximum "
                << "centered extent at this sampling is " << p.n_pad * p.out_pitch << " m";
            throw ConfigError(msg.str());
        }
    };
    solve_axis(r.px, r.center_u, m.m0_x, m.actual_center_u);
    solve_axis(r.py, r.center_v, m.m0_y, m.actual_center_v);
    return m;
}

// Full propagate-and-resample onto a region grid. For pool > 1 the complex
// field is block-averaged, i.e. the returned sample is the pixel-mean field.
inline ComplexField fresnel_propagate(const ComplexField& in, double distance,
                                      const SimulationRegion& region, double pad_factor = 2.0) {
    in.validate();
    FresnelPlan plan =
        make_fresnel_plan(in.amplitude.rows(), in.amplitude.cols(), in.pitch, in.wavelength,
                          distance, pad_factor);
    RegionMap rm = map_region(plan, region);
    CGrid full = fresnel_execute(plan, in.amplitude);
    CGrid out(region.py, region.px, cplx(0, 0));
    double inv = 1.0 / (rm.pool * rm.pool);
    for (int y = 0; y < region.py; ++y)
        for (int x = 0; x < region.px; ++x) {
            cplx acc(0, 0);
            for (int by = 0; by < rm.pool; ++by)
                for (int bx = 0; bx < rm.pool; ++bx)
                    acc += full(rm.m0_y + y * rm.pool + by, rm.m0_x + x * rm.pool + bx);
            out(y, x) = acc * inv;
        }
    ComplexField res;
    res.amplitude = std::move(out);
    res.pitch = region.sample_pitch;
    res.wavelength = in.wavelength;
    res.origin = Plane::Sensor;
    return res;
}

// Brute-force Riemann sum of the Fresnel integral at arbitrary sensor-plane
// points. Ground truth for fresnel_execute; shares no FFT machinery with it.
inline std::vector<cplx> direct_quadrature(const ComplexField& in, double distance,
                                           const std::vector<std::pair<double, double>>& points) {
    in.validate();
    if (distance <= 0) throw DomainError("direct_quadrature: distance must be positive");
    if (points.size() > 10000)
        throw DomainError("direct_quadrature: point list too large (max 10^4)");
    double k = wavenumber(in.wavelength);
    cplx a = std::polar(1.0, k * distance) / (cplx(0, 1) * in.wavelength * distance);
    a *= in.pitch * in.pitch;
    int ny = in.amplitude.rows(), nx = in.amplitude.cols();
    std::vector<cplx> out;
    out.reserve(points.size());
    for (auto [u, v] : points) {
        cplx acc(0, 0);
        for (int y = 0; y < ny; ++y) {
            double yy = axis_coord(y, ny, in.pitch) - v;
            for (int x = 0; x < nx; ++x) {
                double xx = axis_coord(x, nx, in.pitch) - u;
                acc += in.amplitude(y, x) *
                       std::polar(1.0, k * (xx * xx + yy * yy) / (2.0 * distance));
            }
        }
        out.push_back(a * acc);
    }
    return out;
}

} // namespace polarsynth::field
