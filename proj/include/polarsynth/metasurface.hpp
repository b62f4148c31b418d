#pragma once

#include <memory>
#include <utility>

#include "polarsynth/autodiff.hpp"
#include "polarsynth/errors.hpp"
#include "polarsynth/field.hpp"
#include "polarsynth/grid.hpp"
#include "polarsynth/random.hpp"
#include "polarsynth/surrogate.hpp"

namespace polarsynth::metasurface {

enum class Mode { PhaseOnly, CellBased };

// Wavelength behavior of a stored phase-only profile: FixedPhase applies the
// same radians at every wavelength (SLM-like), OpdScaled treats the profile
// as an optical path difference referenced to ref_wavelength (thin etched
// surface), phi(lambda) = phi_ref * ref_wavelength / lambda.
enum class Dispersion { FixedPhase, OpdScaled };

struct MetasurfaceDesign {
    Mode mode = Mode::PhaseOnly;
    int ny = 0, nx = 0;
    double pitch = 0;             // meters per cell/sample
    double aperture_diameter = 0; // meters

    // phase-only payload
    RGrid phase_x, phase_y;
    bool uniform_transmittance = true;
    double ref_wavelength = 532e-9;
    Dispersion dispersion = Dispersion::OpdScaled;

    // cell-based payload: unconstrained latents, reparameterized to widths
    RGrid latent_x, latent_y;
    int supersample = 1; // cell pitch = 350 nm * supersample

    uint64_t seed = 0;

    void validate() const {
        if (ny < 2 || nx < 2) throw DomainError("design: grid must be at least 2x2");
        if (pitch <= 0 || aperture_diameter <= 0)
            throw DomainError("design: pitch and aperture must be positive");
        if (mode == Mode::PhaseOnly) {
            if (phase_x.rows() != ny || phase_x.cols() != nx || !phase_x.same_shape(phase_y))
                throw DomainError("design: phase map shape mismatch");
        } else {
            if (latent_x.rows() != ny || latent_x.cols() != nx || !latent_x.same_shape(latent_y))
                throw DomainError("design: latent grid shape mismatch");
        }
    }

    RGrid aperture_mask() const {
        RGrid m(ny, nx, 0.0);
        double r = aperture_diameter / 2;
        for (int y = 0; y < ny; ++y) {
            double yy = axis_coord(y, ny, pitch);
            for (int x = 0; x < nx; ++x) {
                double xx = axis_coord(x, nx, pitch);
                if (xx * xx + yy * yy <= r * r) m(y, x) = 1.0;
            }
        }
        return m;
    }

    double phase_scale(double lambda) const {
        if (dispersion == Dispersion::FixedPhase) return 1.0;
        return ref_wavelength / lambda;
    }
};

inline MetasurfaceDesign make_phase_only(double aperture_diameter, double sample_pitch,
                                         double window_factor = 1.25) {
    MetasurfaceDesign d;
    d.mode = Mode::PhaseOnly;
    d.pitch = sample_pitch;
    d.aperture_diameter = aperture_diameter;
    int n = static_cast<int>(std::ceil(aperture_diameter * window_factor / sample_pitch));
    n += n % 2; // even window
    d.ny = d.nx = n;
    d.phase_x = RGrid(n, n, 0.0);
    d.phase_y = RGrid(n, n, 0.0);
    return d;
}

inline MetasurfaceDesign make_cell_based(double aperture_diameter, int supersample = 1,
                                         double window_factor = 1.25) {
    if (supersample < 1) throw ConfigError("design: supersample factor must be >= 1");
    MetasurfaceDesign d;
    d.mode = Mode::CellBased;
    d.supersample = supersample;
    d.pitch = surrogate::kCellPitch * supersample;
    d.aperture_diameter = aperture_diameter;
    int n = static_cast<int>(std::ceil(aperture_diameter * window_factor / d.pitch));
    n += n % 2;
    d.ny = d.nx = n;
    d.latent_x = RGrid(n, n, 0.0);
    d.latent_y = RGrid(n, n, 0.0);
    return d;
}

// Full-aperture per-polarization complex transmittance profiles t e^{i phi},
// aperture-masked. Cell-based mode evaluates the surrogate per cell.
inline std::pair<CGrid, CGrid> assemble_profiles(const MetasurfaceDesign& d,
                                                 const surrogate::SurrogateModel* model,
                                                 double lambda) {
    d.validate();
    RGrid mask = d.aperture_mask();
    CGrid tx(d.ny, d.nx, cplx(0, 0)), ty(d.ny, d.nx, cplx(0, 0));
    if (d.mode == Mode::PhaseOnly) {
        double s = d.phase_scale(lambda);
        for (size_t i = 0; i < mask.size(); ++i) {
            if (mask[i] == 0.0) continue;
            tx[i] = std::polar(1.0, d.phase_x[i] * s);
            ty[i] = std::polar(1.0, d.phase_y[i] * s);
        }
        return {std::move(tx), std::move(ty)};
    }
    if (!model) throw DomainError("assemble_profiles: cell-based design needs a surrogate model");
    for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
            if (mask(y, x) == 0.0) continue;
            surrogate::CellParams cell{surrogate::reparameterize(d.latent_x(y, x)),
                                       surrogate::reparameterize(d.latent_y(y, x))};
            auto r = surrogate::eval_response(*model, cell, lambda);
            tx(y, x) = r.field_x();
            ty(y, x) = r.field_y();
        }
    return {std::move(tx), std::move(ty)};
}

// Tape variant: variables are the phase maps (phase-only) or latent grids
// (cell-based); returns the two complex profile slots.
struct DesignVars {
    ad::RT a, b; // phase_x/phase_y or latent_x/latent_y
};

inline std::pair<ad::CT, ad::CT> assemble_on_tape(ad::Tape& t, const MetasurfaceDesign& d,
                                                  DesignVars vars,
                                                  std::shared_ptr<const surrogate::SurrogateModel> model,
                                                  double lambda) {
    d.validate();
    RGrid mask = d.aperture_mask();
    if (d.mode == Mode::PhaseOnly) {
        double s = d.phase_scale(lambda);
        ad::RT px = s == 1.0 ? vars.a : ad::scale(t, vars.a, s);
        ad::RT py = s == 1.0 ? vars.b : ad::scale(t, vars.b, s);
        return {ad::unit_phasor(t, px, mask), ad::unit_phasor(t, py, mask)};
    }
    if (!model) throw DomainError("assemble_on_tape: cell-based design needs a surrogate model");
    ad::RT wx = surrogate::reparameterize_op(t, vars.a);
    ad::RT wy = surrogate::reparameterize_op(t, vars.b);
    auto r = surrogate::surrogate_eval_op(t, wx, wy, lambda, std::move(model));
    ad::RT mtx = ad::mul(t, r.t_x, t.constant(mask));
    ad::RT mty = ad::mul(t, r.t_y, t.constant(mask));
    return {ad::polar_parts(t, mtx, r.cos_x, r.sin_x), ad::polar_parts(t, mty, r.cos_y, r.sin_y)};
}

// Hyperbolic focusing phase for one polarization:
// phi = -k (sqrt(|x - x0|^2 + f^2) - sqrt(|x0|^2 + f^2)).
inline RGrid lens_phase(int ny, int nx, double pitch, double wavelength, double focal_length,
                        double off_u, double off_v) {
    if (focal_length <= 0) throw DomainError("lens_phase: focal length must be positive");
    double k = field::wavenumber(wavelength);
    double r0 = std::sqrt(off_u * off_u + off_v * off_v + focal_length * focal_length);
    RGrid phi(ny, nx);
    for (int y = 0; y < ny; ++y) {
        double yy = axis_coord(y, ny, pitch) - off_v;
        for (int x = 0; x < nx; ++x) {
            double xx = axis_coord(x, nx, pitch) - off_u;
            phi(y, x) = -k * (std::sqrt(xx * xx + yy * yy + focal_length * focal_length) - r0);
        }
    }
    return phi;
}

// Initialize both polarization profiles as off-axis hyperbolic lenses.
// Cell-based designs additionally invert the target phases per cell by
// nearest-neighbor lookup over the surrogate's width grid.
inline void lens_phase_init(MetasurfaceDesign& d, double wavelength, double focal_x,
                            double focal_y, std::pair<double, double> offset_x,
                            std::pair<double, double> offset_y,
                            const surrogate::SurrogateModel* model = nullptr,
                            int lookup_grid = 48) {
    RGrid phx = lens_phase(d.ny, d.nx, d.pitch, wavelength, focal_x, offset_x.first,
                           offset_x.second);
    RGrid phy = lens_phase(d.ny, d.nx, d.pitch, wavelength, focal_y, offset_y.first,
                           offset_y.second);
    d.ref_wavelength = wavelength;
    if (d.mode == Mode::PhaseOnly) {
        d.phase_x = std::move(phx);
        d.phase_y = std::move(phy);
        return;
    }
    if (!model) throw DomainError("lens_phase_init: cell-based design needs a surrogate model");
    // tabulate the width grid once, then per cell pick the nearest response
    std::vector<double> widths(lookup_grid);
    for (int i = 0; i < lookup_grid; ++i)
        widths[i] = surrogate::kWidthMin +
                    (surrogate::kWidthMax - surrogate::kWidthMin) * i / (lookup_grid - 1.0);
    std::vector<cplx> px(lookup_grid), py(lookup_grid);
    for (int i = 0; i < lookup_grid; ++i) {
        auto r = surrogate::eval_response(*model, {widths[i], widths[i]}, wavelength);
        px[i] = cplx(r.cos_x, r.sin_x);
        py[i] = cplx(r.cos_y, r.sin_y);
    }
    d.latent_x = RGrid(d.ny, d.nx, 0.0);
    d.latent_y = RGrid(d.ny, d.nx, 0.0);
    for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
            cplx want_x = std::polar(1.0, phx(y, x));
            cplx want_y = std::polar(1.0, phy(y, x));
            int best_x = 0, best_y = 0;
            double bx = 1e300, by = 1e300;
            for (int i = 0; i < lookup_grid; ++i) {
                double ex = std::norm(px[i] - want_x);
                double ey = std::norm(py[i] - want_y);
                if (ex < bx) {
                    bx = ex;
                    best_x = i;
                }
                if (ey < by) {
                    by = ey;
                    best_y = i;
                }
            }
            d.latent_x(y, x) = surrogate::reparameterize_inverse(widths[best_x]);
            d.latent_y(y, x) = surrogate::reparameterize_inverse(widths[best_y]);
        }
}

// Seeded i.i.d. uniform phases in [0, 2 pi) per cell per polarization.
// Cell-based designs draw uniform widths instead.
inline void random_phase_init(MetasurfaceDesign& d, uint64_t seed) {
    Rng rng(seed);
    d.seed = seed;
    if (d.mode == Mode::PhaseOnly) {
        d.phase_x = RGrid(d.ny, d.nx);
        d.phase_y = RGrid(d.ny, d.nx);
        for (size_t i = 0; i < d.phase_x.size(); ++i) {
            d.phase_x[i] = rng.uniform(0, 2 * M_PI);
            d.phase_y[i] = rng.uniform(0, 2 * M_PI);
        }
        return;
    }
    d.latent_x = RGrid(d.ny, d.nx);
    d.latent_y = RGrid(d.ny, d.nx);
    for (size_t i = 0; i < d.latent_x.size(); ++i) {
        double wx = rng.uniform(surrogate::kWidthMin * 1.001, surrogate::kWidthMax * 0.999);
        double wy = rng.uniform(surrogate::kWidthMin * 1.001, surrogate::kWidthMax * 0.999);
        d.latent_x[i] = surrogate::reparameterize_inverse(wx);
        d.latent_y[i] = surrogate::reparameterize_inverse(wy);
    }
}

} // namespace polarsynth::metasurface
