#pragma once

#include <array>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "polarsynth/adam.hpp"
#include "polarsynth/autodiff.hpp"
#include "polarsynth/crc32.hpp"
#include "polarsynth/filters.hpp"
#include "polarsynth/metasurface.hpp"
#include "polarsynth/psf.hpp"

namespace polarsynth::synthesis {

// ------------------------------------------------------------------ types

struct SynthesisWeights {
    std::vector<std::array<double, 4>> alpha; // one 4-vector per target
    std::array<bool, 4> zero_mask{false, false, false, false};

    void apply_mask() {
        for (auto& a : alpha)
            for (int c = 0; c < 4; ++c)
                if (zero_mask[c]) a[c] = 0.0;
    }
    int targets() const { return static_cast<int>(alpha.size()); }
};

struct TargetFilter {
    std::vector<RGrid> slices; // one region-sized kernel per batch entry
    std::string name;

    void validate(int py, int px, int batch) const {
        if (static_cast<int>(slices.size()) != batch)
            throw DomainError("TargetFilter: batch size mismatch");
        for (const auto& s : slices) {
            if (s.rows() != py || s.cols() != px)
                throw DomainError("TargetFilter: slice does not match the region grid");
            if (max_abs(s) == 0.0) throw DomainError("TargetFilter: all-zero slice");
        }
    }
    double l2() const {
        double acc = 0;
        for (const auto& s : slices) acc += dot(s, s);
        return std::sqrt(acc);
    }
};

struct RegularizerConfig {
    double c1 = 0, c2 = 0;
    void validate() const {
        if (c1 < 0 || c2 < 0) throw ConfigError("regularizer: coefficients must be >= 0");
    }
};

// ------------------------------------------------------------------ metrics

// Mean signal-to-bias ratio: per-pixel |H alpha| / (H |alpha|), averaged over
// the pixels whose denominator clears the guard, then averaged over batch.
// Returns nullopt when every denominator is below the guard.
inline std::optional<double> msbr(const std::vector<std::array<RGrid, 4>>& h,
                                  const std::array<double, 4>& alpha,
                                  double eps_scale = 1e-12) {
    if (h.empty()) throw DomainError("msbr: empty stack");
    double max_h = 0;
    for (const auto& hb : h)
        for (const auto& hc : hb) max_h = std::max(max_h, max_val(hc));
    double eps = eps_scale * max_h;
    double batch_acc = 0;
    int batch_count = 0;
    for (const auto& hb : h) {
        double acc = 0;
        long count = 0;
        for (size_t i = 0; i < hb[0].size(); ++i) {
            double num = 0, den = 0;
            for (int c = 0; c < 4; ++c) {
                num += alpha[c] * hb[c][i];
                den += std::abs(alpha[c]) * hb[c][i];
            }
            if (den < eps || den == 0.0) continue;
            acc += std::abs(num) / den;
            ++count;
        }
        if (count > 0) {
            batch_acc += acc / count;
            ++batch_count;
        }
    }
    if (batch_count == 0) return std::nullopt;
    return batch_acc / batch_count;
}

inline std::optional<double> msbr(const psf::PsfStack& s, const std::array<double, 4>& alpha,
                                  double eps_scale = 1e-12) {
    return msbr(s.h, alpha, eps_scale);
}

// mSBR restricted to the pixels that define the target kernel (|F| at least
// `frac` of its peak). The full-region average is dominated by empty pixels
// whose net signal a converged design cancels, so the kernel-support reading
// is the one that grades decomposition quality.
inline std::optional<double> msbr_on_support(const std::vector<std::array<RGrid, 4>>& h,
                                             const std::array<double, 4>& alpha,
                                             const TargetFilter& f, double frac = 0.01,
                                             double eps_scale = 1e-12) {
    if (h.size() != f.slices.size()) throw DomainError("msbr_on_support: batch mismatch");
    double max_h = 0;
    for (const auto& hb : h)
        for (const auto& hc : hb) max_h = std::max(max_h, max_val(hc));
    double eps = eps_scale * max_h;
    double fmax = 0;
    for (const auto& s : f.slices) fmax = std::max(fmax, max_abs(s));
    double batch_acc = 0;
    int batch_count = 0;
    for (size_t b = 0; b < h.size(); ++b) {
        double acc = 0;
        long count = 0;
        for (size_t i = 0; i < h[b][0].size(); ++i) {
            if (std::abs(f.slices[b][i]) < frac * fmax) continue;
            double num = 0, den = 0;
            for (int c = 0; c < 4; ++c) {
                num += alpha[c] * h[b][c][i];
                den += std::abs(alpha[c]) * h[b][c][i];
            }
            if (den < eps || den == 0.0) continue;
            acc += std::abs(num) / den;
            ++count;
        }
        if (count > 0) {
            batch_acc += acc / count;
            ++batch_count;
        }
    }
    if (batch_count == 0) return std::nullopt;
    return batch_acc / batch_count;
}

inline std::vector<RGrid> net_psf(const std::vector<std::array<RGrid, 4>>& h,
                                  const std::array<double, 4>& alpha) {
    std::vector<RGrid> net;
    net.reserve(h.size());
    for (const auto& hb : h) {
        RGrid n(hb[0].rows(), hb[0].cols(), 0.0);
        for (int c = 0; c < 4; ++c)
            for (size_t i = 0; i < n.size(); ++i) n[i] += alpha[c] * hb[c][i];
        net.push_back(std::move(n));
    }
    return net;
}

// || F/||F||_2 - H alpha / ||H alpha||_2 ||_1 for one target over the batch.
inline double filter_loss_single(const TargetFilter& f, const std::vector<std::array<RGrid, 4>>& h,
                                 const std::array<double, 4>& alpha, double eps_scale = 1e-12) {
    auto net = net_psf(h, alpha);
    double fn = f.l2();
    double nn = 0, max_h = 0;
    for (const auto& n : net) nn += dot(n, n);
    nn = std::sqrt(nn);
    for (const auto& hb : h)
        for (const auto& hc : hb) max_h = std::max(max_h, max_val(hc));
    double eps = eps_scale * max_h + 1e-300;
    fn = std::max(fn, eps);
    nn = std::max(nn, eps);
    double acc = 0;
    for (size_t b = 0; b < net.size(); ++b)
        for (size_t i = 0; i < net[b].size(); ++i)
            acc += std::abs(f.slices[b][i] / fn - net[b][i] / nn);
    return acc;
}

inline double filter_loss(const std::vector<TargetFilter>& targets,
                          const std::vector<std::array<RGrid, 4>>& h,
                          const SynthesisWeights& w, double eps_scale = 1e-12) {
    double acc = 0;
    for (int i = 0; i < w.targets(); ++i)
        acc += filter_loss_single(targets[i], h, w.alpha[i], eps_scale);
    return acc;
}

// -c1 Tr(R) + c2 || M . R ||_1 with R = H^T H and M = max(-alpha alpha^T, 0),
// summed over targets and batch.
inline double regularizer(const std::vector<std::array<RGrid, 4>>& h,
                          const SynthesisWeights& w, double c1, double c2) {
    RGrid r(4, 4, 0.0);
    for (const auto& hb : h)
        for (int a = 0; a < 4; ++a)
            for (int b = a; b < 4; ++b) {
                double v = dot(hb[a], hb[b]);
                r(a, b) += v;
                if (a != b) r(b, a) += v;
            }
    double tr = r(0, 0) + r(1, 1) + r(2, 2) + r(3, 3);
    double acc = 0;
    for (const auto& alpha : w.alpha) {
        double bias = 0;
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) {
                double m = std::max(-alpha[a] * alpha[b], 0.0);
                bias += m * std::abs(r(a, b));
            }
        acc += -c1 * tr + c2 * bias;
    }
    return acc;
}

// Eq.-12-style image objective value (metric form): the rendered net image is
// normalized by the net-PSF norm, not by its own.
inline double image_loss(const std::vector<TargetFilter>& targets,
                         const std::vector<std::array<RGrid, 4>>& h, const SynthesisWeights& w,
                         const std::vector<RGrid>& scenes, double eps_scale = 1e-12) {
    double acc = 0;
    double max_h = 0;
    for (const auto& hb : h)
        for (const auto& hc : hb) max_h = std::max(max_h, max_val(hc));
    double eps = eps_scale * max_h + 1e-300;
    for (int i = 0; i < w.targets(); ++i) {
        auto net = net_psf(h, w.alpha[i]);
        double fn = std::max(targets[i].l2(), eps);
        double nn = 0;
        for (const auto& n : net) nn += dot(n, n);
        nn = std::max(std::sqrt(nn), eps);
        for (size_t b = 0; b < net.size(); ++b) {
            auto plan = ad::make_conv_plan(scenes[b], net[b].rows(), net[b].cols());
            RGrid want = ad::conv_forward(plan, targets[i].slices[b]);
            RGrid got = ad::conv_forward(plan, net[b]);
            for (size_t p = 0; p < want.size(); ++p)
                acc += std::abs(want[p] / fn - got[p] / nn);
        }
    }
    return acc;
}

// alpha(theta) = alpha1 cos(theta) + alpha2 sin(theta)
inline std::array<double, 4> steer_weights(const std::array<double, 4>& a1,
                                           const std::array<double, 4>& a2, double theta) {
    std::array<double, 4> out;
    for (int c = 0; c < 4; ++c) out[c] = a1[c] * std::cos(theta) + a2[c] * std::sin(theta);
    return out;
}

// Least-squares factors that bring each net PSF onto its target's absolute
// scale; applying them keeps steering consistent across targets.
inline std::vector<double> canonical_scales(const SynthesisWeights& w,
                                            const std::vector<TargetFilter>& targets,
                                            const std::vector<std::array<RGrid, 4>>& h) {
    std::vector<double> scales(w.targets(), 1.0);
    for (int i = 0; i < w.targets(); ++i) {
        auto net = net_psf(h, w.alpha[i]);
        double num = 0, den = 0;
        for (size_t b = 0; b < net.size(); ++b) {
            num += dot(net[b], targets[i].slices[b]);
            den += dot(net[b], net[b]);
        }
        if (den > 0) scales[i] = num / den;
    }
    return scales;
}

inline void canonicalize_scale(SynthesisWeights& w, const std::vector<TargetFilter>& targets,
                               const std::vector<std::array<RGrid, 4>>& h) {
    auto scales = canonical_scales(w, targets, h);
    for (int i = 0; i < w.targets(); ++i)
        for (int c = 0; c < 4; ++c) w.alpha[i][c] *= scales[i];
}

// ------------------------------------------------------------------ problem

enum class Objective { Filter, Image };

struct Problem {
    metasurface::MetasurfaceDesign design;
    std::shared_ptr<const surrogate::SurrogateModel> model; // cell-based only
    std::vector<psf::BatchKey> keys;
    double sensor_distance = 0.02;
    field::SimulationRegion region;
    double pad_factor = 2.0;
    std::vector<TargetFilter> targets;
    SynthesisWeights weights;
    RegularizerConfig reg;
    Objective objective = Objective::Filter;
    std::vector<RGrid> scenes; // per batch entry, image objective only
    double eps_scale = 1e-12;

    void validate() const {
        design.validate();
        if (keys.empty()) throw ConfigError("problem: empty batch");
        if (targets.empty()) throw ConfigError("problem: no targets");
        if (static_cast<int>(weights.alpha.size()) != static_cast<int>(targets.size()))
            throw ConfigError("problem: weights/targets count mismatch");
        for (const auto& t : targets)
            t.validate(region.py, region.px, static_cast<int>(keys.size()));
        reg.validate();
        if (objective == Objective::Image && scenes.size() != keys.size())
            throw ConfigError("problem: image objective needs one scene per batch entry");
        if (design.mode == metasurface::Mode::CellBased && !model)
            throw ConfigError("problem: cell-based design needs a surrogate model");
    }
};

// Geometry and constants resolved once per problem.
struct Prepared {
    std::vector<std::shared_ptr<const field::FresnelPlan>> plans;
    std::vector<field::RegionMap> rms;
    std::vector<std::shared_ptr<const CGrid>> illum;
    std::vector<double> incident; // per batch entry
    std::vector<std::shared_ptr<const ad::ConvPlan>> conv_plans;   // image mode
    std::vector<std::vector<RGrid>> conv_targets;                  // [i][b], already /||F||_2
    std::vector<double> target_norms;                              // ||F_i||_2
};

inline Prepared prepare(const Problem& p) {
    p.validate();
    Prepared prep;
    const auto& d = p.design;
    std::vector<int> pads = psf::batch_pads(d, p.keys, p.pad_factor);
    for (size_t b = 0; b < p.keys.size(); ++b) {
        const auto& key = p.keys[b];
        auto plan = std::make_shared<field::FresnelPlan>(field::make_fresnel_plan(
            d.ny, d.nx, d.pitch, key.wavelength, p.sensor_distance, p.pad_factor, pads[b]));
        prep.rms.push_back(field::map_region(*plan, p.region));
        prep.plans.push_back(std::move(plan));
        prep.illum.push_back(std::make_shared<const CGrid>(psf::illumination(d, key)));
        prep.incident.push_back(psf::incident_energy(d, key));
    }
    for (const auto& t : p.targets) prep.target_norms.push_back(t.l2());
    if (p.objective == Objective::Image) {
        for (size_t b = 0; b < p.keys.size(); ++b)
            prep.conv_plans.push_back(std::make_shared<const ad::ConvPlan>(
                ad::make_conv_plan(p.scenes[b], p.region.py, p.region.px)));
        prep.conv_targets.resize(p.targets.size());
        for (size_t i = 0; i < p.targets.size(); ++i)
            for (size_t b = 0; b < p.keys.size(); ++b) {
                RGrid want = ad::conv_forward(*prep.conv_plans[b], p.targets[i].slices[b]);
                want *= 1.0 / std::max(prep.target_norms[i], 1e-300);
                prep.conv_targets[i].push_back(std::move(want));
            }
    }
    return prep;
}

// Forward graph for one step. Returns the scalar loss plus the per-batch
// channel slots and the per-target filter-term slots.
struct ForwardGraph {
    ad::RT loss;
    std::vector<std::array<ad::RT, 4>> h; // [b][channel]
    std::vector<ad::RT> target_terms;     // filter/image residual per target
    metasurface::DesignVars vars;
    ad::RT alpha_flat;                    // (4*I x 1)
};

inline ForwardGraph build_forward(ad::Tape& t, const Problem& p, const Prepared& prep,
                                  const RGrid& var_a, const RGrid& var_b,
                                  const std::vector<std::array<double, 4>>& alpha) {
    ForwardGraph g;
    g.vars.a = t.var(var_a);
    g.vars.b = t.var(var_b);
    int n_targets = static_cast<int>(alpha.size());
    RGrid alpha_grid(4 * n_targets, 1);
    for (int i = 0; i < n_targets; ++i)
        for (int c = 0; c < 4; ++c) alpha_grid(4 * i + c, 0) = alpha[i][c];
    g.alpha_flat = t.var(alpha_grid);

    const int B = static_cast<int>(p.keys.size());
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    double max_h = 0;
    for (int b = 0; b < B; ++b) {
        auto [tx, ty] =
            metasurface::assemble_on_tape(t, p.design, g.vars, p.model, p.keys[b].wavelength);
        ad::CT u_in_x = ad::cmul_const(t, tx, prep.illum[b]);
        ad::CT u_in_y = ad::cmul_const(t, ty, prep.illum[b]);
        ad::CT u0 = ad::propagate(t, u_in_x, prep.plans[b]);
        ad::CT u90 = ad::propagate(t, u_in_y, prep.plans[b]);
        const auto& rm = prep.rms[b];
        u0 = ad::crop_c(t, u0, rm.m0_y, rm.m0_x, rm.fine_ny, rm.fine_nx);
        u90 = ad::crop_c(t, u90, rm.m0_y, rm.m0_x, rm.fine_ny, rm.fine_nx);
        ad::RT h0 = ad::abs2(t, u0);
        ad::RT h90 = ad::abs2(t, u90);
        ad::RT h45 = ad::abs2(t, ad::cscale(t, ad::csub(t, u0, u90), inv_sqrt2));
        ad::RT h135 = ad::abs2(t, ad::cscale(t, ad::cadd(t, u0, u90), inv_sqrt2));
        if (rm.pool > 1) {
            h0 = ad::pool(t, h0, rm.pool);
            h45 = ad::pool(t, h45, rm.pool);
            h90 = ad::pool(t, h90, rm.pool);
            h135 = ad::pool(t, h135, rm.pool);
        }
        g.h.push_back({h0, h45, h90, h135});
        for (int c = 0; c < 4; ++c) max_h = std::max(max_h, max_val(t.val(g.h.back()[c])));
    }
    double eps = p.eps_scale * max_h + 1e-300;

    // per-target residual + regularizer, Eq.-10/12 structure
    ad::RT total = t.scalar(0.0);
    // R = H^T H entries shared across targets
    std::vector<ad::RT> r_entries(16);
    bool need_r = p.reg.c1 > 0 || p.reg.c2 > 0;
    if (need_r) {
        for (int a = 0; a < 4; ++a)
            for (int c = a; c < 4; ++c) {
                ad::RT acc = t.scalar(0.0);
                for (int b = 0; b < B; ++b) acc = ad::add(t, acc, ad::dot(t, g.h[b][a], g.h[b][c]));
                r_entries[a * 4 + c] = acc;
                r_entries[c * 4 + a] = acc;
            }
    }

    for (int i = 0; i < n_targets; ++i) {
        std::vector<ad::RT> coeff_slots;
        // one 4x1 view per target out of the flat weight vector
        RGrid sel(4, 1);
        ad::RT alpha_i = [&] {
            // gather 4 entries as pixels
            std::vector<ad::RT> entries;
            for (int c = 0; c < 4; ++c) entries.push_back(ad::pixel(t, g.alpha_flat, 4 * i + c, 0));
            // pack into a 4x1 slot
            RGrid v(4, 1);
            for (int c = 0; c < 4; ++c) v(c, 0) = t.value(entries[c]);
            ad::RT packed = t.make_r(v, true);
            t.push_node([entries, packed](ad::Tape& tp) {
                const RGrid& gg = tp.grad(packed);
                for (int c = 0; c < 4; ++c)
                    if (auto* ge = tp.adj(entries[c])) (*ge)[0] += gg(c, 0);
            });
            return packed;
        }();

        // net PSF per batch entry and its stacked L2 norm
        std::vector<ad::RT> nets;
        ad::RT norm_sq = t.scalar(0.0);
        for (int b = 0; b < B; ++b) {
            std::vector<ad::RT> parts = {g.h[b][0], g.h[b][1], g.h[b][2], g.h[b][3]};
            ad::RT net = ad::combine(t, parts, alpha_i);
            norm_sq = ad::add(t, norm_sq, ad::dot(t, net, net));
            nets.push_back(net);
        }
        ad::RT norm = ad::sqrt_s(t, norm_sq);

        ad::RT term = t.scalar(0.0);
        if (p.objective == Objective::Filter) {
            for (int b = 0; b < B; ++b) {
                RGrid fhat = p.targets[i].slices[b];
                fhat *= 1.0 / std::max(prep.target_norms[i], eps);
                ad::RT nhat = ad::div_by_scalar(t, nets[b], norm, eps);
                term = ad::add(t, term, ad::l1(t, ad::sub(t, nhat, t.constant(fhat))));
            }
        } else {
            for (int b = 0; b < B; ++b) {
                ad::RT img = ad::conv_same_reflect(t, nets[b], prep.conv_plans[b]);
                ad::RT ihat = ad::div_by_scalar(t, img, norm, eps);
                term = ad::add(t, term,
                               ad::l1(t, ad::sub(t, ihat, t.constant(prep.conv_targets[i][b]))));
            }
        }
        g.target_terms.push_back(term);
        total = ad::add(t, total, term);

        if (need_r) {
            // -c1 Tr(R) + c2 ||M . R||_1
            ad::RT tr = t.scalar(0.0);
            for (int c = 0; c < 4; ++c) tr = ad::add(t, tr, r_entries[c * 4 + c]);
            total = ad::add(t, total, ad::scale(t, tr, -p.reg.c1));
            if (p.reg.c2 > 0) {
                ad::RT m = ad::mask_opposite_sign(t, alpha_i);
                // pack R into a 4x4 slot
                RGrid rv(4, 4);
                for (int a = 0; a < 16; ++a) rv[a] = t.value(r_entries[a]);
                ad::RT rpacked = t.make_r(rv, true);
                auto entries = r_entries;
                t.push_node([entries, rpacked](ad::Tape& tp) {
                    const RGrid& gg = tp.grad(rpacked);
                    for (int a = 0; a < 16; ++a)
                        if (auto* ge = tp.adj(entries[a])) (*ge)[0] += gg[a];
                });
                ad::RT bias = ad::l1(t, ad::mul(t, m, rpacked));
                total = ad::add(t, total, ad::scale(t, bias, p.reg.c2));
            }
        }
    }
    g.loss = total;
    return g;
}

// ------------------------------------------------------------------ optimize

struct OptimConfig {
    int steps = 1000;
    AdamConfig adam_design{1e-2, 0.9, 0.999, 1e-8, 0.995, 10};
    AdamConfig adam_weights{1e-1, 0.9, 0.999, 1e-8, 0.995, 10};
    int log_every = 10;
    uint64_t seed = 0;
    std::string trace_path; // optional CSV sink
};

struct TraceRow {
    long step;
    double loss;
    double msbr;
    double efficiency;
    double lr;
};

struct OptimState {
    AdamOptimizer design_opt, weights_opt;
    long step = 0;
};

struct OptimResult {
    metasurface::MetasurfaceDesign design;
    SynthesisWeights weights;
    std::vector<TraceRow> trace;
    std::vector<double> final_target_terms;
    double final_loss = 0;
    double final_msbr = 0;
    double final_efficiency = 0;
    OptimState state;
};

namespace detail {

inline void write_trace(const std::string& path, const std::vector<TraceRow>& rows) {
    if (path.empty()) return;
    std::ofstream f(path);
    f << "step,loss,msbr,efficiency,lr\n";
    for (const auto& r : rows)
        f << r.step << "," << std::setprecision(17) << r.loss << "," << r.msbr << ","
          << r.efficiency << "," << r.lr << "\n";
}

inline double stack_efficiency(const Problem& p, const Prepared& prep, ad::Tape& t,
                               const std::vector<std::array<ad::RT, 4>>& h) {
    double px_area = p.region.sample_pitch * p.region.sample_pitch;
    double acc = 0;
    for (size_t b = 0; b < h.size(); ++b) {
        double e = (sum(t.val(h[b][0])) + sum(t.val(h[b][2]))) * px_area;
        acc += e / prep.incident[b];
    }
    return acc / static_cast<double>(h.size());
}

inline std::vector<std::array<RGrid, 4>> stack_values(ad::Tape& t,
                                                      const std::vector<std::array<ad::RT, 4>>& h) {
    std::vector<std::array<RGrid, 4>> out;
    out.reserve(h.size());
    for (const auto& hb : h)
        out.push_back({t.val(hb[0]), t.val(hb[1]), t.val(hb[2]), t.val(hb[3])});
    return out;
}

} // namespace detail

// Gradient descent over (design variables, digital weights) with per-group
// Adam and an exponentially decaying learning rate. Deterministic per seed;
// NaN losses abort with the last finite state preserved in the result.
inline OptimResult optimize(const Problem& problem, const OptimConfig& cfg,
                            OptimState* resume = nullptr) {
    Problem p = problem;
    p.weights.apply_mask();
    Prepared prep = prepare(p);

    const bool phase_mode = p.design.mode == metasurface::Mode::PhaseOnly;
    RGrid var_a = phase_mode ? p.design.phase_x : p.design.latent_x;
    RGrid var_b = phase_mode ? p.design.phase_y : p.design.latent_y;
    const size_t n_design = 2 * var_a.size();
    const int n_targets = static_cast<int>(p.targets.size());
    const size_t n_weights = 4 * static_cast<size_t>(n_targets);

    OptimState state;
    if (resume) state = *resume;
    else {
        state.design_opt = AdamOptimizer(n_design, cfg.adam_design);
        state.weights_opt = AdamOptimizer(n_weights, cfg.adam_weights);
    }

    std::vector<double> design_params(n_design), weight_params(n_weights);
    auto gather = [&] {
        for (size_t i = 0; i < var_a.size(); ++i) {
            design_params[i] = var_a[i];
            design_params[var_a.size() + i] = var_b[i];
        }
        for (int i = 0; i < n_targets; ++i)
            for (int c = 0; c < 4; ++c) weight_params[4 * i + c] = p.weights.alpha[i][c];
    };
    auto scatter = [&] {
        for (size_t i = 0; i < var_a.size(); ++i) {
            var_a[i] = design_params[i];
            var_b[i] = design_params[var_a.size() + i];
        }
        for (int i = 0; i < n_targets; ++i)
            for (int c = 0; c < 4; ++c)
                p.weights.alpha[i][c] = p.weights.zero_mask[c] ? 0.0 : weight_params[4 * i + c];
    };
    gather();

    OptimResult result;
    auto log_metrics = [&](ad::Tape& t, const ForwardGraph& g, long step, double loss) {
        auto hv = detail::stack_values(t, g.h);
        double ms = 0;
        for (int i = 0; i < n_targets; ++i)
            ms += msbr(hv, p.weights.alpha[i], p.eps_scale).value_or(0.0);
        ms /= n_targets;
        double eff = detail::stack_efficiency(p, prep, t, g.h);
        result.trace.push_back({step, loss, ms, eff, state.design_opt.lr()});
        result.final_msbr = ms;
        result.final_efficiency = eff;
    };

    for (long step = state.step; step < cfg.steps; ++step) {
        ad::Tape t;
        ForwardGraph g = build_forward(t, p, prep, var_a, var_b, p.weights.alpha);
        double loss = t.value(g.loss);
        if (!std::isfinite(loss)) {
            detail::write_trace(cfg.trace_path, result.trace);
            result.design = p.design;
            result.weights = p.weights;
            throw NumericalError("optimize: loss is not finite at step " + std::to_string(step));
        }
        if (step % cfg.log_every == 0) log_metrics(t, g, step, loss);

        t.backward(g.loss);
        const RGrid& ga = t.grad(g.vars.a);
        const RGrid& gb = t.grad(g.vars.b);
        std::vector<double> dgrad(n_design), wgrad(n_weights);
        for (size_t i = 0; i < var_a.size(); ++i) {
            dgrad[i] = ga[i];
            dgrad[var_a.size() + i] = gb[i];
        }
        const RGrid& gal = t.grad(g.alpha_flat);
        for (int i = 0; i < n_targets; ++i)
            for (int c = 0; c < 4; ++c)
                wgrad[4 * i + c] = p.weights.zero_mask[c] ? 0.0 : gal(4 * i + c, 0);

        state.design_opt.step(design_params, dgrad);
        state.weights_opt.step(weight_params, wgrad);
        scatter();
        if (phase_mode) {
            p.design.phase_x = var_a;
            p.design.phase_y = var_b;
        } else {
            p.design.latent_x = var_a;
            p.design.latent_y = var_b;
        }
        state.step = step + 1;
    }

    // final forward for metrics
    {
        ad::Tape t;
        ForwardGraph g = build_forward(t, p, prep, var_a, var_b, p.weights.alpha);
        result.final_loss = t.value(g.loss);
        log_metrics(t, g, state.step, result.final_loss);
        result.final_target_terms.clear();
        for (auto& term : g.target_terms) result.final_target_terms.push_back(t.value(term));
    }
    result.design = p.design;
    result.weights = p.weights;
    result.state = std::move(state);
    detail::write_trace(cfg.trace_path, result.trace);
    return result;
}

// ------------------------------------------------------- phase inversion

enum class InversionLoss { Cosine, L1 };

struct InversionResult {
    RGrid phase;
    double similarity = 0;   // cosine similarity to the target over the region
    double efficiency = 0;   // in-region fraction of the transmitted energy
    std::vector<double> loss_trace;
};

// argmin_phi L(|P(t e^{i phi})|^2, h') with unit transmittance inside the
// aperture. The L1 variant compares against the target rescaled to the full
// transmitted energy, so it must pull light into the region; the cosine
// variant is scale-free and may discard light.
inline InversionResult phase_inversion(const metasurface::MetasurfaceDesign& design_in,
                                       const RGrid& target, InversionLoss loss_kind,
                                       double wavelength, double sensor_distance,
                                       const field::SimulationRegion& region, int steps,
                                       const AdamConfig& adam_cfg = {1e-1, 0.9, 0.999, 1e-8, 0.995,
                                                                     10},
                                       double pad_factor = 2.0, int log_every = 25) {
    metasurface::MetasurfaceDesign d = design_in;
    d.validate();
    if (d.mode != metasurface::Mode::PhaseOnly)
        throw ConfigError("phase_inversion: phase-only designs only");
    if (target.rows() != region.py || target.cols() != region.px)
        throw DomainError("phase_inversion: target does not match the region grid");

    auto plan = std::make_shared<const field::FresnelPlan>(field::make_fresnel_plan(
        d.ny, d.nx, d.pitch, wavelength, sensor_distance, pad_factor));
    field::RegionMap rm = field::map_region(*plan, region);
    RGrid mask = d.aperture_mask();
    psf::BatchKey key{true, 0, wavelength};
    double e_channel = psf::incident_energy(d, key) / 2.0; // one polarization
    double px_area = region.sample_pitch * region.sample_pitch;

    // L1 target: rescaled so its region energy equals the transmitted energy
    RGrid t_scaled = target;
    double t_energy = sum(target) * px_area;
    if (t_energy > 0) t_scaled *= e_channel / t_energy;
    double t_norm = norm_l2(target);

    RGrid phase = d.phase_x;
    AdamOptimizer adam(phase.size(), adam_cfg);
    std::vector<double> params(phase.size()), grad(phase.size());
    for (size_t i = 0; i < phase.size(); ++i) params[i] = phase[i];

    InversionResult out;
    auto forward = [&](ad::Tape& t, ad::RT var) {
        ad::CT u = ad::unit_phasor(t, var, mask);
        ad::CT up = ad::propagate(t, u, plan);
        up = ad::crop_c(t, up, rm.m0_y, rm.m0_x, rm.fine_ny, rm.fine_nx);
        ad::RT h = ad::abs2(t, up);
        if (rm.pool > 1) h = ad::pool(t, h, rm.pool);
        ad::RT loss;
        if (loss_kind == InversionLoss::L1) {
            loss = ad::l1(t, ad::sub(t, h, t.constant(t_scaled)));
        } else {
            // 1 - <h, h'> / (||h|| ||h'||)
            ad::RT num = ad::scale(t, ad::dot(t, h, t.constant(target)),
                                   1.0 / std::max(t_norm, 1e-300));
            ad::RT den = ad::sqrt_s(t, ad::dot(t, h, h));
            loss = ad::sub(t, t.scalar(1.0), ad::div_by_scalar(t, num, den, 1e-300));
        }
        return std::make_pair(loss, h);
    };

    for (int step = 0; step < steps; ++step) {
        ad::Tape t;
        ad::RT var = t.var(phase);
        auto [loss, h] = forward(t, var);
        double lv = t.value(loss);
        if (!std::isfinite(lv)) throw NumericalError("phase_inversion: loss is not finite");
        if (step % log_every == 0) out.loss_trace.push_back(lv);
        t.backward(loss);
        const RGrid& g = t.grad(var);
        for (size_t i = 0; i < grad.size(); ++i) grad[i] = g[i];
        adam.step(params, grad);
        for (size_t i = 0; i < phase.size(); ++i) phase[i] = params[i];
    }

    // final metrics
    {
        ad::Tape t;
        ad::RT var = t.var(phase);
        auto [loss, h] = forward(t, var);
        out.loss_trace.push_back(t.value(loss));
        const RGrid& hv = t.val(h);
        double num = dot(hv, target), den = norm_l2(hv) * std::max(t_norm, 1e-300);
        out.similarity = den > 0 ? num / den : 0.0;
        out.efficiency = sum(hv) * px_area / e_channel;
    }
    out.phase = std::move(phase);
    return out;
}

// --------------------------------------------- joint interference design

struct JointTargets {
    RGrid h0, h90, h45; // region grids
    double weight_h45 = 1.0;
};

struct JointResult {
    RGrid phase_x, phase_y;
    double sim_h0 = 0, sim_h90 = 0, sim_h45 = 0;
    std::vector<double> loss_trace;
};

// Optimize the two phase profiles so h0 and h90 approximate their targets
// while the interference channel h45 approximates a third, all cosine losses.
inline JointResult joint_interference_design(const metasurface::MetasurfaceDesign& design_in,
                                             const JointTargets& targets, double wavelength,
                                             double sensor_distance,
                                             const field::SimulationRegion& region, int steps,
                                             const AdamConfig& adam_cfg = {1e-1, 0.9, 0.999, 1e-8,
                                                                           0.995, 10},
                                             double pad_factor = 2.0) {
    metasurface::MetasurfaceDesign d = design_in;
    if (d.mode != metasurface::Mode::PhaseOnly)
        throw ConfigError("joint_interference_design: phase-only designs only");
    for (const RGrid* g : {&targets.h0, &targets.h90, &targets.h45})
        if (g->rows() != region.py || g->cols() != region.px)
            throw DomainError("joint_interference_design: target grid mismatch");

    auto plan = std::make_shared<const field::FresnelPlan>(field::make_fresnel_plan(
        d.ny, d.nx, d.pitch, wavelength, sensor_distance, pad_factor));
    field::RegionMap rm = field::map_region(*plan, region);
    RGrid mask = d.aperture_mask();
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);

    RGrid px = d.phase_x, py = d.phase_y;
    AdamOptimizer adam(2 * px.size(), adam_cfg);
    std::vector<double> params(2 * px.size()), grad(2 * px.size());
    for (size_t i = 0; i < px.size(); ++i) {
        params[i] = px[i];
        params[px.size() + i] = py[i];
    }

    auto cosine_term = [&](ad::Tape& t, ad::RT h, const RGrid& target) {
        double tn = std::max(norm_l2(target), 1e-300);
        ad::RT num = ad::dot(t, h, t.constant(target));
        ad::RT den = ad::sqrt_s(t, ad::dot(t, h, h));
        ad::RT sim = ad::div_by_scalar(t, ad::scale(t, num, 1.0 / tn), den, 1e-300);
        return ad::sub(t, t.scalar(1.0), sim);
    };

    JointResult out;
    auto forward = [&](ad::Tape& t, ad::RT vx, ad::RT vy) {
        ad::CT ux = ad::unit_phasor(t, vx, mask);
        ad::CT uy = ad::unit_phasor(t, vy, mask);
        ad::CT p0 = ad::crop_c(t, ad::propagate(t, ux, plan), rm.m0_y, rm.m0_x, rm.fine_ny,
                               rm.fine_nx);
        ad::CT p90 = ad::crop_c(t, ad::propagate(t, uy, plan), rm.m0_y, rm.m0_x, rm.fine_ny,
                                rm.fine_nx);
        ad::RT h0 = ad::abs2(t, p0);
        ad::RT h90 = ad::abs2(t, p90);
        ad::RT h45 = ad::abs2(t, ad::cscale(t, ad::csub(t, p0, p90), inv_sqrt2));
        if (rm.pool > 1) {
            h0 = ad::pool(t, h0, rm.pool);
            h90 = ad::pool(t, h90, rm.pool);
            h45 = ad::pool(t, h45, rm.pool);
        }
        ad::RT loss = ad::add(t, cosine_term(t, h0, targets.h0), cosine_term(t, h90, targets.h90));
        if (targets.weight_h45 != 0)
            loss = ad::add(t, loss,
                           ad::scale(t, cosine_term(t, h45, targets.h45), targets.weight_h45));
        return std::make_tuple(loss, h0, h90, h45);
    };

    for (int step = 0; step < steps; ++step) {
        ad::Tape t;
        ad::RT vx = t.var(px), vy = t.var(py);
        auto [loss, h0, h90, h45] = forward(t, vx, vy);
        double lv = t.value(loss);
        if (!std::isfinite(lv))
            throw NumericalError("joint_interference_design: loss is not finite");
        if (step % 25 == 0) out.loss_trace.push_back(lv);
        t.backward(loss);
        const RGrid& gx = t.grad(vx);
        const RGrid& gy = t.grad(vy);
        for (size_t i = 0; i < px.size(); ++i) {
            grad[i] = gx[i];
            grad[px.size() + i] = gy[i];
        }
        adam.step(params, grad);
        for (size_t i = 0; i < px.size(); ++i) {
            px[i] = params[i];
            py[i] = params[px.size() + i];
        }
    }
    {
        ad::Tape t;
        ad::RT vx = t.var(px), vy = t.var(py);
        auto [loss, h0, h90, h45] = forward(t, vx, vy);
        out.loss_trace.push_back(t.value(loss));
        auto sim = [&](ad::RT h, const RGrid& target) {
            const RGrid& hv = t.val(h);
            return dot(hv, target) / std::max(norm_l2(hv) * norm_l2(target), 1e-300);
        };
        out.sim_h0 = sim(h0, targets.h0);
        out.sim_h90 = sim(h90, targets.h90);
        out.sim_h45 = sim(h45, targets.h45);
    }
    out.phase_x = std::move(px);
    out.phase_y = std::move(py);
    return out;
}

// ----------------------------------------------------------- semi-NMF

struct SemiNmfResult {
    RGrid h; // N x C, nonnegative
    RGrid a; // C x I
    std::vector<double> residual_trace;
    double residual = 0;
};

namespace detail {

// least-squares A = (H^T H)^-1 H^T F via Gaussian elimination; returns false
// when the normal matrix is numerically singular.
inline bool solve_normal(const RGrid& h, const RGrid& f, RGrid& a) {
    int n = h.rows(), c = h.cols(), k = f.cols();
    RGrid m(c, c, 0.0), rhs(c, k, 0.0);
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < c; ++j) {
            double acc = 0;
            for (int p = 0; p < n; ++p) acc += h(p, i) * h(p, j);
            m(i, j) = acc;
        }
    for (int i = 0; i < c; ++i)
        for (int j = 0; j < k; ++j) {
            double acc = 0;
            for (int p = 0; p < n; ++p) acc += h(p, i) * f(p, j);
            rhs(i, j) = acc;
        }
    double scale = max_abs(m);
    if (scale <= 0) return false;
    // partial-pivot elimination
    std::vector<int> piv(c);
    for (int i = 0; i < c; ++i) piv[i] = i;
    for (int col = 0; col < c; ++col) {
        int best = col;
        for (int r = col + 1; r < c; ++r)
            if (std::abs(m(r, col)) > std::abs(m(best, col))) best = r;
        if (std::abs(m(best, col)) < 1e-12 * scale) return false;
        if (best != col)
            for (int j = 0; j < c; ++j) std::swap(m(best, j), m(col, j));
        if (best != col)
            for (int j = 0; j < k; ++j) std::swap(rhs(best, j), rhs(col, j));
        for (int r = col + 1; r < c; ++r) {
            double fct = m(r, col) / m(col, col);
            for (int j = col; j < c; ++j) m(r, j) -= fct * m(col, j);
            for (int j = 0; j < k; ++j) rhs(r, j) -= fct * rhs(col, j);
        }
    }
    a = RGrid(c, k, 0.0);
    for (int col = c - 1; col >= 0; --col)
        for (int j = 0; j < k; ++j) {
            double acc = rhs(col, j);
            for (int r = col + 1; r < c; ++r) acc -= m(col, r) * a(r, j);
            a(col, j) = acc / m(col, col);
        }
    return true;
}

inline double seminmf_residual(const RGrid& f, const RGrid& h, const RGrid& a) {
    double acc = 0;
    for (int p = 0; p < f.rows(); ++p)
        for (int j = 0; j < f.cols(); ++j) {
            double v = f(p, j);
            for (int c = 0; c < h.cols(); ++c) v -= h(p, c) * a(c, j);
            acc += v * v;
        }
    return std::sqrt(acc);
}

} // namespace detail

// Alternating semi-NMF: exact least squares for A, multiplicative update for
// the nonnegative H. A physics-free lower bound on the synthesis residual.
inline SemiNmfResult semi_nmf_baseline(const RGrid& f, int channels, int iterations,
                                       uint64_t seed = 0, int max_restarts = 4) {
    if (channels < 1) throw ConfigError("semi_nmf: need at least one channel");
    int n = f.rows(), k = f.cols();
    for (int attempt = 0; attempt <= max_restarts; ++attempt) {
        Rng rng(seed + attempt);
        RGrid h(n, channels);
        for (size_t i = 0; i < h.size(); ++i) h[i] = rng.uniform(0.1, 1.0) * max_abs(f);
        RGrid a;
        SemiNmfResult out;
        bool degenerate = false;
        for (int it = 0; it < iterations; ++it) {
            if (!detail::solve_normal(h, f, a)) {
                degenerate = true;
                break;
            }
            // H <- H .* sqrt( ((F A^T)+ + H (A A^T)-) / ((F A^T)- + H (A A^T)+) )
            RGrid fat(n, channels, 0.0);
            for (int p = 0; p < n; ++p)
                for (int c = 0; c < channels; ++c) {
                    double acc = 0;
                    for (int j = 0; j < k; ++j) acc += f(p, j) * a(c, j);
                    fat(p, c) = acc;
                }
            RGrid aat(channels, channels, 0.0);
            for (int c1 = 0; c1 < channels; ++c1)
                for (int c2 = 0; c2 < channels; ++c2) {
                    double acc = 0;
                    for (int j = 0; j < k; ++j) acc += a(c1, j) * a(c2, j);
                    aat(c1, c2) = acc;
                }
            for (int p = 0; p < n; ++p)
                for (int c = 0; c < channels; ++c) {
                    double hpos = 0, hneg = 0;
                    for (int c2 = 0; c2 < channels; ++c2) {
                        double v = aat(c2, c);
                        if (v > 0) hpos += h(p, c2) * v;
                        else hneg += h(p, c2) * (-v);
                    }
                    double fp = std::max(fat(p, c), 0.0), fm = std::max(-fat(p, c), 0.0);
                    double numer = fp + hneg, denom = fm + hpos;
                    h(p, c) *= std::sqrt((numer + 1e-300) / (denom + 1e-300));
                }
            out.residual_trace.push_back(detail::seminmf_residual(f, h, a));
        }
        if (degenerate) continue;
        if (!detail::solve_normal(h, f, a)) continue;
        out.h = std::move(h);
        out.a = std::move(a);
        out.residual = detail::seminmf_residual(f, out.h, out.a);
        return out;
    }
    throw NumericalError("semi_nmf: degenerate factorization after restarts");
}

} // namespace polarsynth::synthesis
