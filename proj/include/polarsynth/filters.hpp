#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "polarsynth/errors.hpp"
#include "polarsynth/grid.hpp"

namespace polarsynth::filters {

enum class KernelFamily { GaussianDerivative, LaplacianOfGaussian };

// Target-kernel recipe on the sensor-pixel lattice of the simulation region.
struct KernelSpec {
    KernelFamily family = KernelFamily::GaussianDerivative;
    double sigma = 4.0; // pixels
    int order = 1;      // derivative order (1 or 2)
    double theta = 0.0; // radians
    int support = 0;    // odd pixel count; 0 = derive from sigma

    void validate() const {
        if (sigma <= 0) throw ConfigError("kernel: sigma must be positive");
        if (order < 1 || order > 2) throw ConfigError("kernel: order must be 1 or 2");
        if (support < min_support()) throw ConfigError("kernel: support below 6 sigma");
        if (support % 2 == 0) throw ConfigError("kernel: support must be odd");
    }
    int min_support() const {
        int s = static_cast<int>(std::ceil(6.0 * sigma));
        return (s % 2 == 0) ? s + 1 : s;
    }
    KernelSpec resolved() const {
        KernelSpec s = *this;
        if (s.support == 0) s.support = s.min_support();
        s.validate();
        return s;
    }
};

// Directional Gaussian derivative, zero-mean after sampling.
inline RGrid gaussian_derivative_kernel(const KernelSpec& spec_in) {
    KernelSpec spec = spec_in.resolved();
    if (spec.family != KernelFamily::GaussianDerivative)
        throw ConfigError("gaussian_derivative_kernel: wrong family");
    int n = spec.support;
    double s2 = spec.sigma * spec.sigma;
    double ct = std::cos(spec.theta), st = std::sin(spec.theta);
    RGrid k(n, n);
    for (int y = 0; y < n; ++y) {
        double yy = axis_coord(y, n, 1.0);
        for (int x = 0; x < n; ++x) {
            double xx = axis_coord(x, n, 1.0);
            double g = std::exp(-(xx * xx + yy * yy) / (2 * s2));
            double u = ct * xx + st * yy;
            if (spec.order == 1) k(y, x) = -(u / s2) * g;
            else k(y, x) = (u * u / (s2 * s2) - 1.0 / s2) * g;
        }
    }
    double mean = sum(k) / k.size();
    for (size_t i = 0; i < k.size(); ++i) k[i] -= mean;
    return k;
}

// Laplacian of Gaussian, numerically zero-mean after DC correction.
inline RGrid log_kernel(double sigma, int support) {
    KernelSpec spec;
    spec.family = KernelFamily::LaplacianOfGaussian;
    spec.sigma = sigma;
    spec.support = support;
    spec.validate();
    int n = support;
    double s2 = sigma * sigma;
    RGrid k(n, n);
    for (int y = 0; y < n; ++y) {
        double yy = axis_coord(y, n, 1.0);
        for (int x = 0; x < n; ++x) {
            double xx = axis_coord(x, n, 1.0);
            double r2 = xx * xx + yy * yy;
            k(y, x) = (r2 / (s2 * s2) - 2.0 / s2) * std::exp(-r2 / (2 * s2));
        }
    }
    double mean = sum(k) / k.size();
    for (size_t i = 0; i < k.size(); ++i) k[i] -= mean;
    return k;
}

inline RGrid make_kernel(const KernelSpec& spec) {
    KernelSpec s = spec.resolved();
    if (s.family == KernelFamily::LaplacianOfGaussian) return log_kernel(s.sigma, s.support);
    return gaussian_derivative_kernel(s);
}

// Centered embedding of a small kernel into a region-sized slice.
inline RGrid embed_kernel(const RGrid& kernel, int region_py, int region_px) {
    if (kernel.rows() > region_py || kernel.cols() > region_px)
        throw ConfigError("embed_kernel: kernel larger than the region");
    RGrid out(region_py, region_px, 0.0);
    int oy = region_py / 2 - kernel.rows() / 2;
    int ox = region_px / 2 - kernel.cols() / 2;
    for (int y = 0; y < kernel.rows(); ++y)
        for (int x = 0; x < kernel.cols(); ++x) out(oy + y, ox + x) = kernel(y, x);
    return out;
}

// Orientation varying linearly over a depth range.
struct DepthSchedule {
    double z_min = 0, z_max = 0;       // meters
    double theta_min = 0, theta_max = 0; // radians
    std::vector<double> depths;

    void validate() const {
        if (!(z_min < z_max)) throw ConfigError("depth schedule: require z_min < z_max");
        if (depths.size() < 2) throw ConfigError("depth schedule: need at least 2 depths");
    }
    double theta_at(double z) const {
        double t = (z - z_min) / (z_max - z_min);
        return theta_min + (theta_max - theta_min) * t;
    }
};

inline std::vector<RGrid> depth_orientation_targets(const DepthSchedule& sched,
                                                    const KernelSpec& spec) {
    sched.validate();
    std::vector<RGrid> out;
    out.reserve(sched.depths.size());
    for (double z : sched.depths) {
        KernelSpec s = spec.resolved();
        s.theta = sched.theta_at(z);
        out.push_back(gaussian_derivative_kernel(s));
    }
    return out;
}

} // namespace polarsynth::filters
