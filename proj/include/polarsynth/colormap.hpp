#pragma once

#include <cmath>
#include <string>

#include "polarsynth/grid.hpp"
#include "polarsynth/png_io.hpp"

namespace polarsynth::io {

// Signed diverging preview: negative values render blue, positive red,
// zero white. Input is normalized by its max absolute value.
inline void write_signed_png(const std::string& path, const RGrid& img) {
    double m = max_abs(img);
    if (m <= 0) m = 1;
    RGrid r(img.rows(), img.cols()), g(img.rows(), img.cols()), b(img.rows(), img.cols());
    for (size_t i = 0; i < img.size(); ++i) {
        double v = img[i] / m; // [-1, 1]
        if (v >= 0) {
            r[i] = 1.0;
            g[i] = 1.0 - v;
            b[i] = 1.0 - v;
        } else {
            r[i] = 1.0 + v;
            g[i] = 1.0 + v;
            b[i] = 1.0;
        }
    }
    write_png_rgb8(path, r, g, b);
}

// Intensity preview with gamma 0.5 so faint PSF structure stays visible.
inline void write_intensity_png(const std::string& path, const RGrid& img) {
    double m = max_val(img);
    if (m <= 0) m = 1;
    RGrid out(img.rows(), img.cols());
    for (size_t i = 0; i < img.size(); ++i)
        out[i] = std::sqrt(std::max(0.0, img[i] / m));
    write_png_gray8(path, out);
}

} // namespace polarsynth::io
