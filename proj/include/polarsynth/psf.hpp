#pragma once

#include <array>
#include <memory>
#include <optional>
#include <vector>

#include "polarsynth/field.hpp"
#include "polarsynth/metasurface.hpp"
#include "polarsynth/threading.hpp"

namespace polarsynth::psf {

// One (depth, wavelength) batch entry; infinite depth encodes plane-wave
// illumination.
struct BatchKey {
    bool infinite_focus = true;
    double z = 0;          // meters, ignored when infinite_focus
    double wavelength = 532e-9;
};

enum Channel { CH0 = 0, CH45 = 1, CH90 = 2, CH135 = 3 };

struct PsfStack {
    field::SimulationRegion region;
    std::vector<BatchKey> keys;
    std::vector<std::array<RGrid, 4>> h; // intensities, region grid, batch major
    std::vector<RGrid> psi0, psi90;      // phases of the pixel-averaged fields
    std::vector<double> incident_energy; // per batch entry, over the aperture
    double fine_pitch = 0;               // propagated pitch before pooling
    int pool = 1;

    int batch() const { return static_cast<int>(keys.size()); }
};

inline CGrid illumination(const metasurface::MetasurfaceDesign& d, const BatchKey& key) {
    if (key.infinite_focus) return CGrid(d.ny, d.nx, cplx(1, 0));
    return field::spherical_wavefront(d.ny, d.nx, d.pitch, key.z, key.wavelength).amplitude;
}

// Energy incident on the metasurface aperture (before transmittance). Both
// polarization components see the illumination, hence the factor two; with
// perfect transmission the region-integrated h0 + h90 equals this value.
inline double incident_energy(const metasurface::MetasurfaceDesign& d, const BatchKey& key) {
    CGrid w = illumination(d, key);
    RGrid mask = d.aperture_mask();
    double acc = 0;
    for (size_t i = 0; i < w.size(); ++i) acc += mask[i] * std::norm(w[i]);
    return 2.0 * acc * d.pitch * d.pitch;
}

// The 45/135 interference channels from intensity and phase maps (Eq.-style
// form). Values only marginally negative from rounding are clamped to zero.
inline std::pair<RGrid, RGrid> interfere(const RGrid& h0, const RGrid& psi0, const RGrid& h90,
                                         const RGrid& psi90) {
    h0.require_same(psi0);
    h0.require_same(h90);
    h0.require_same(psi90);
    RGrid h45(h0.rows(), h0.cols()), h135(h0.rows(), h0.cols());
    for (size_t i = 0; i < h0.size(); ++i) {
        double mean = 0.5 * (h0[i] + h90[i]);
        double cross = std::sqrt(std::max(0.0, h0[i] * h90[i])) * std::cos(psi0[i] - psi90[i]);
        double a = mean - cross, b = mean + cross;
        if (a < 0 && a > -1e-14 * std::max(1.0, mean)) a = 0;
        if (b < 0 && b > -1e-14 * std::max(1.0, mean)) b = 0;
        h45[i] = a;
        h135[i] = b;
    }
    return {std::move(h45), std::move(h135)};
}

// Box-average pooling of a sensor-plane intensity map. Energy bookkeeping:
// sum_fine h * fine_area == sum_coarse h * coarse_area.
inline RGrid resample_to_sensor(const RGrid& intensity, int ratio) {
    if (ratio < 1 || intensity.rows() % ratio || intensity.cols() % ratio)
        throw ConfigError("resample_to_sensor: grid not divisible by the pooling ratio");
    RGrid out(intensity.rows() / ratio, intensity.cols() / ratio, 0.0);
    double inv = 1.0 / (ratio * ratio);
    for (int y = 0; y < intensity.rows(); ++y)
        for (int x = 0; x < intensity.cols(); ++x)
            out(y / ratio, x / ratio) += intensity(y, x) * inv;
    return out;
}

inline RGrid resample_to_sensor(const RGrid& intensity, double grid_pitch, double sensor_pitch) {
    double r = sensor_pitch / grid_pitch;
    int ratio = static_cast<int>(std::lround(r));
    if (ratio < 1 || std::abs(r - ratio) > 1e-6 * r)
        throw ConfigError("resample_to_sensor: sensor pitch must be an integer multiple of the "
                          "grid pitch");
    return resample_to_sensor(intensity, ratio);
}

struct PsfPair {
    RGrid h0, psi0, h90, psi90; // region grid (pooled)
    RGrid h45, h135;            // interference channels, pooled from fine fields
    double incident = 0;
};

// Propagate both polarization profiles of a design to the sensor region.
// Intensities (including the interference channels) are formed at the fine
// propagated pitch and then box-averaged onto the region pixels, like a
// photosensor integrating intensity over each pixel.
inline PsfPair compute_psf_pair(const metasurface::MetasurfaceDesign& d,
                                const surrogate::SurrogateModel* model, const BatchKey& key,
                                double sensor_distance, const field::SimulationRegion& region,
                                double pad_factor = 2.0, int n_pad = 0) {
    auto [tx, ty] = metasurface::assemble_profiles(d, model, key.wavelength);
    CGrid w = illumination(d, key);
    for (size_t i = 0; i < w.size(); ++i) {
        tx[i] *= w[i];
        ty[i] *= w[i];
    }
    field::FresnelPlan plan = field::make_fresnel_plan(d.ny, d.nx, d.pitch, key.wavelength,
                                                       sensor_distance, pad_factor, n_pad);
    field::RegionMap rm = field::map_region(plan, region);

    CGrid u0 = field::fresnel_execute(plan, tx);
    CGrid u90 = field::fresnel_execute(plan, ty);

    int fy = rm.fine_ny, fx = rm.fine_nx;
    RGrid h0f(fy, fx), h90f(fy, fx), h45f(fy, fx), h135f(fy, fx);
    CGrid u0c(region.py, region.px, cplx(0, 0)), u90c(region.py, region.px, cplx(0, 0));
    const double inv_pool = 1.0 / (rm.pool * rm.pool);
    for (int y = 0; y < fy; ++y)
        for (int x = 0; x < fx; ++x) {
            cplx a = u0(rm.m0_y + y, rm.m0_x + x);
            cplx b = u90(rm.m0_y + y, rm.m0_x + x);
            h0f(y, x) = std::norm(a);
            h90f(y, x) = std::norm(b);
            h45f(y, x) = 0.5 * std::norm(a - b);
            h135f(y, x) = 0.5 * std::norm(a + b);
            u0c(y / rm.pool, x / rm.pool) += a * inv_pool;
            u90c(y / rm.pool, x / rm.pool) += b * inv_pool;
        }

    PsfPair out;
    out.h0 = resample_to_sensor(h0f, rm.pool);
    out.h90 = resample_to_sensor(h90f, rm.pool);
    out.h45 = resample_to_sensor(h45f, rm.pool);
    out.h135 = resample_to_sensor(h135f, rm.pool);
    out.psi0 = arg(u0c);
    out.psi90 = arg(u90c);
    out.incident = incident_energy(d, key);
    return out;
}

// Padded sizes for a key batch; multi-wavelength batches get commensurate
// grids so the whole stack shares the region lattice.
inline std::vector<int> batch_pads(const metasurface::MetasurfaceDesign& d,
                                   const std::vector<BatchKey>& keys, double pad_factor) {
    std::vector<double> lambdas;
    for (const auto& k : keys) lambdas.push_back(k.wavelength);
    return field::commensurate_pads(lambdas, std::max(d.ny, d.nx), pad_factor);
}

inline PsfStack make_psf_stack(const metasurface::MetasurfaceDesign& d,
                               const surrogate::SurrogateModel* model,
                               const std::vector<BatchKey>& keys, double sensor_distance,
                               const field::SimulationRegion& region, double pad_factor = 2.0) {
    PsfStack stack;
    stack.region = region;
    stack.keys = keys;
    stack.h.resize(keys.size());
    stack.psi0.resize(keys.size());
    stack.psi90.resize(keys.size());
    stack.incident_energy.resize(keys.size());
    std::vector<int> pads = batch_pads(d, keys, pad_factor);
    {
        field::FresnelPlan plan = field::make_fresnel_plan(d.ny, d.nx, d.pitch,
                                                           keys.at(0).wavelength, sensor_distance,
                                                           pad_factor, pads[0]);
        field::RegionMap rm = field::map_region(plan, region);
        stack.fine_pitch = plan.out_pitch;
        stack.pool = rm.pool;
    }
    parallel_for(static_cast<int>(keys.size()), [&](int b) {
        PsfPair p =
            compute_psf_pair(d, model, keys[b], sensor_distance, region, pad_factor, pads[b]);
        stack.h[b] = {std::move(p.h0), std::move(p.h45), std::move(p.h90), std::move(p.h135)};
        stack.psi0[b] = std::move(p.psi0);
        stack.psi90[b] = std::move(p.psi90);
        stack.incident_energy[b] = p.incident;
    });
    return stack;
}

// Fraction of the light incident on the aperture that lands inside the
// simulation region on the 0/90 channels, averaged over the batch.
inline double focusing_efficiency_slice(const PsfStack& s, int b) {
    if (s.incident_energy[b] <= 0) throw DomainError("focusing_efficiency: zero incident energy");
    double px_area = s.region.sample_pitch * s.region.sample_pitch;
    double acc = 0;
    for (size_t i = 0; i < s.h[b][CH0].size(); ++i) acc += s.h[b][CH0][i] + s.h[b][CH90][i];
    return acc * px_area / s.incident_energy[b];
}

inline double focusing_efficiency(const PsfStack& s) {
    double acc = 0;
    for (int b = 0; b < s.batch(); ++b) acc += focusing_efficiency_slice(s, b);
    return acc / s.batch();
}

inline double focusing_efficiency(const RGrid& h0, const RGrid& h90, double pixel_pitch,
                                  double incident) {
    if (incident <= 0) throw DomainError("focusing_efficiency: zero incident energy");
    return (sum(h0) + sum(h90)) * pixel_pitch * pixel_pitch / incident;
}

// max |(h45 + h135) - (h0 + h90)| / max(h0 + h90) over the whole stack.
inline double interference_residual(const PsfStack& s) {
    double worst = 0, scale = 0;
    for (int b = 0; b < s.batch(); ++b) {
        for (size_t i = 0; i < s.h[b][CH0].size(); ++i) {
            double lhs = s.h[b][CH45][i] + s.h[b][CH135][i];
            double rhs = s.h[b][CH0][i] + s.h[b][CH90][i];
            worst = std::max(worst, std::abs(lhs - rhs));
            scale = std::max(scale, rhs);
        }
    }
    return scale > 0 ? worst / scale : 0.0;
}

// 4x4 Gram matrix of the channels accumulated over batch and pixels.
inline RGrid gram_matrix(const PsfStack& s) {
    RGrid g(4, 4, 0.0);
    for (int b = 0; b < s.batch(); ++b)
        for (int i = 0; i < 4; ++i)
            for (int j = i; j < 4; ++j) {
                double acc = dot(s.h[b][i], s.h[b][j]);
                g(i, j) += acc;
                if (i != j) g(j, i) += acc;
            }
    return g;
}

// Jacobi eigenvalues of a small symmetric matrix, ascending.
inline std::vector<double> jacobi_eigenvalues(RGrid a) {
    if (a.rows() != a.cols()) throw DomainError("jacobi_eigenvalues: matrix must be square");
    int n = a.rows();
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-26 * std::max(1.0, max_abs(a))) break;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (a(p, q) == 0) continue;
                double theta = (a(q, q) - a(p, p)) / (2 * a(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1));
                double c = 1 / std::sqrt(t * t + 1), s2 = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s2 * akq;
                    a(k, q) = s2 * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s2 * aqk;
                    a(q, k) = s2 * apk + c * aqk;
                }
            }
    }
    std::vector<double> ev(n);
    for (int i = 0; i < n; ++i) ev[i] = a(i, i);
    std::sort(ev.begin(), ev.end());
    return ev;
}

// Ratio of the smallest to largest singular value of the channel Gram matrix;
// the interference identity pins this near zero for noiseless stacks.
inline double gram_rank_ratio(const PsfStack& s) {
    auto ev = jacobi_eigenvalues(gram_matrix(s));
    double lo = std::max(0.0, ev.front()), hi = std::max(ev.back(), 1e-300);
    return lo / hi;
}

} // namespace polarsynth::psf
