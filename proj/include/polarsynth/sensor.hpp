#pragma once

#include <array>
#include <optional>
#include <vector>

#include "polarsynth/autodiff.hpp"
#include "polarsynth/errors.hpp"
#include "polarsynth/grid.hpp"
#include "polarsynth/random.hpp"
#include "polarsynth/threading.hpp"

namespace polarsynth::sensor {

// Scene radiance per (depth, wavelength) batch slice, aligned with a PsfStack.
struct Scene {
    std::vector<RGrid> radiance;
    std::optional<RGrid> depth_labels; // per-pixel depth index for piecewise scenes

    void validate() const {
        if (radiance.empty()) throw DomainError("Scene: no slices");
        for (const auto& s : radiance) {
            if (!s.same_shape(radiance[0])) throw DomainError("Scene: slices misaligned");
            if (min_val(s) < 0) throw DomainError("Scene: negative radiance");
        }
    }
};

struct SensorConfig {
    double pixel_pitch = 10e-6;       // meters
    double quantum_efficiency = 0.6;  // electrons per photon
    double full_well = 1e5;           // electrons
    double read_noise_sigma = 2.5;    // electrons
    int bit_depth = 12;
    double gain = 0;                  // DN per electron; 0 derives full-range gain
    double target_psnr_db = 30;       // <= 0 disables the brightness rescale
    uint64_t seed = 0;
    bool front_polarizer = false;

    void validate() const {
        if (pixel_pitch <= 0 || full_well <= 0 || quantum_efficiency <= 0 ||
            quantum_efficiency > 1 || read_noise_sigma < 0)
            throw ConfigError("sensor: non-physical parameter");
        if (bit_depth != 8 && bit_depth != 10 && bit_depth != 12 && bit_depth != 16)
            throw ConfigError("sensor: bit depth must be one of 8, 10, 12, 16");
    }
    double dn_max() const { return static_cast<double>((1 << bit_depth) - 1); }
    double dn_gain() const { return gain > 0 ? gain : dn_max() / full_well; }
};

// Incoherent image formation: per-slice 2D convolution (reflect padding) of
// the scene radiance with the channel PSF, summed over the batch.
inline RGrid render_channel(const Scene& scene, const std::vector<RGrid>& h_c) {
    scene.validate();
    if (scene.radiance.size() != h_c.size())
        throw DomainError("render_channel: scene/PSF batch mismatch");
    RGrid out(scene.radiance[0].rows(), scene.radiance[0].cols(), 0.0);
    for (size_t b = 0; b < h_c.size(); ++b) {
        auto plan = ad::make_conv_plan(scene.radiance[b], h_c[b].rows(), h_c[b].cols());
        out += ad::conv_forward(plan, h_c[b]);
    }
    return out;
}

// Split a radiance slice into per-depth masked slices for piecewise-planar
// composition.
inline std::vector<RGrid> split_by_depth(const RGrid& image, const RGrid& labels, int n_depths) {
    image.require_same(labels);
    std::vector<RGrid> out(n_depths, RGrid(image.rows(), image.cols(), 0.0));
    for (size_t i = 0; i < image.size(); ++i) {
        int d = static_cast<int>(labels[i]);
        if (d < 0 || d >= n_depths) throw DomainError("split_by_depth: label out of range");
        out[d][i] = image[i];
    }
    return out;
}

// Peak electron count at which the peak SNR (shot + read + quantization)
// equals the requested target.
inline double peak_electrons_for_psnr(const SensorConfig& cfg) {
    double r = std::pow(10.0, cfg.target_psnr_db / 20.0);
    double g = cfg.dn_gain();
    double var_floor = cfg.read_noise_sigma * cfg.read_noise_sigma + 1.0 / (12.0 * g * g);
    double p = 0.5 * (r * r + std::sqrt(r * r * r * r + 4.0 * r * r * var_floor));
    return p;
}

// EMVA-style measurement chain: brightness scaling to the target peak SNR,
// Poisson shot noise on electrons, full-well clipping, Gaussian read noise,
// gain and quantization to DN. Deterministic per seed; rows use independent
// forked streams so threading cannot reorder draws.
inline RGrid apply_noise(const RGrid& photons, const SensorConfig& cfg) {
    cfg.validate();
    if (min_val(photons) < 0) throw DomainError("apply_noise: negative photon count");
    double scale = 1.0;
    if (cfg.target_psnr_db > 0) {
        double peak = max_val(photons);
        if (peak > 0) scale = peak_electrons_for_psnr(cfg) / (cfg.quantum_efficiency * peak);
    }
    double g = cfg.dn_gain();
    RGrid out(photons.rows(), photons.cols());
    Rng base(cfg.seed);
    parallel_for(photons.rows(), [&](int y) {
        Rng rng = base.fork(static_cast<uint64_t>(y));
        for (int x = 0; x < photons.cols(); ++x) {
            double mean_e = cfg.quantum_efficiency * photons(y, x) * scale;
            double e = static_cast<double>(rng.poisson(mean_e));
            e = std::min(e, cfg.full_well);
            e += cfg.read_noise_sigma * rng.normal();
            double dn = std::round(g * e);
            out(y, x) = std::clamp(dn, 0.0, cfg.dn_max());
        }
    });
    return out;
}

// Polarizer mosaic pattern per 2x2 tile: [[0, 45], [135, 90]] degrees.
struct MosaicFrame {
    RGrid frame;
    int bit_depth = 12;
};

inline int mosaic_site(int y, int x) {
    if (y % 2 == 0) return x % 2 == 0 ? 0 : 1; // 0 deg, 45 deg
    return x % 2 == 0 ? 3 : 2;                 // 135 deg, 90 deg
}

inline MosaicFrame mosaic(const std::array<RGrid, 4>& channels, int bit_depth = 12) {
    for (int c = 1; c < 4; ++c) channels[0].require_same(channels[c]);
    if (channels[0].rows() % 2 || channels[0].cols() % 2)
        throw DomainError("mosaic: dimensions must be even");
    MosaicFrame f;
    f.bit_depth = bit_depth;
    f.frame = RGrid(channels[0].rows(), channels[0].cols());
    for (int y = 0; y < f.frame.rows(); ++y)
        for (int x = 0; x < f.frame.cols(); ++x)
            f.frame(y, x) = channels[mosaic_site(y, x)](y, x);
    return f;
}

// Nearest-neighbor demosaic: every pixel of a 2x2 tile takes the tile's own
// sample of each channel, preserving full input resolution.
inline std::array<RGrid, 4> demosaic_nearest(const MosaicFrame& f) {
    int ny = f.frame.rows(), nx = f.frame.cols();
    if (ny % 2 || nx % 2) throw DomainError("demosaic: dimensions must be even");
    std::array<RGrid, 4> out;
    for (auto& c : out) c = RGrid(ny, nx);
    for (int ty = 0; ty < ny; ty += 2)
        for (int tx = 0; tx < nx; tx += 2) {
            double v[4];
            v[0] = f.frame(ty, tx);
            v[1] = f.frame(ty, tx + 1);
            v[3] = f.frame(ty + 1, tx);
            v[2] = f.frame(ty + 1, tx + 1);
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    for (int c = 0; c < 4; ++c) out[c](ty + dy, tx + dx) = v[c];
        }
    return out;
}

// Per-pixel weighted summation across the four channels; cost independent of
// any filter size.
inline RGrid synthesize_image(const std::array<RGrid, 4>& channels,
                              const std::array<double, 4>& alpha) {
    for (int c = 1; c < 4; ++c) channels[0].require_same(channels[c]);
    RGrid out(channels[0].rows(), channels[0].cols(), 0.0);
    for (int c = 0; c < 4; ++c)
        for (size_t i = 0; i < out.size(); ++i) out[i] += alpha[c] * channels[c][i];
    return out;
}

// Front linear polarizer oriented to project equal intensity onto the 0/90
// basis: a global half-intensity factor on the (unpolarized) scene.
inline void apply_front_polarizer(Scene& scene) {
    for (auto& s : scene.radiance) s *= 0.5;
}

} // namespace polarsynth::sensor
