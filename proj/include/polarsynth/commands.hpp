#pragma once

#include <filesystem>
#include <iomanip>
#include <sstream>

#include "polarsynth/checkpoint.hpp"
#include "polarsynth/colormap.hpp"
#include "polarsynth/config.hpp"
#include "polarsynth/png_io.hpp"
#include "polarsynth/sensor.hpp"
#include "polarsynth/synthesis.hpp"
#include "polarsynth/tensor_io.hpp"

namespace polarsynth::commands {

namespace fs = std::filesystem;
using cfg::json;

// ------------------------------------------------------------ test scenes

// Seeded grayscale scenes in [0, 1]. "shapes" mixes disks, rectangles and a
// gradient; "bars" draws oriented bars; "disks" places uniform disks (used by
// the depth demo).
inline RGrid builtin_scene(const std::string& name, int size, uint64_t seed) {
    Rng rng(seed);
    RGrid img(size, size, 0.0);
    if (name == "shapes" || name == "shapes_test") {
        int variant = name == "shapes_test" ? 1 : 0;
        Rng r = rng.fork(variant + 1);
        for (int k = 0; k < 6; ++k) {
            double cx = r.uniform(0.15, 0.85) * size, cy = r.uniform(0.15, 0.85) * size;
            double rad = r.uniform(0.05, 0.16) * size;
            double level = r.uniform(0.35, 1.0);
            bool disk = r.uniform() < 0.5;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    if (disk) {
                        if (std::hypot(x - cx, y - cy) <= rad) img(y, x) = level;
                    } else {
                        if (std::abs(x - cx) <= rad && std::abs(y - cy) <= 0.7 * rad)
                            img(y, x) = level;
                    }
                }
        }
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x)
                img(y, x) = std::min(1.0, img(y, x) + 0.12 * x / size + 0.08 * y / size);
        return img;
    }
    if (name == "bars") {
        for (int k = 0; k < 5; ++k) {
            double theta = rng.uniform(0, M_PI);
            double c = std::cos(theta), s = std::sin(theta);
            double off = rng.uniform(-0.3, 0.3) * size;
            double half = rng.uniform(0.02, 0.05) * size;
            double level = rng.uniform(0.5, 1.0);
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    double d = c * (x - size / 2.0) + s * (y - size / 2.0) - off;
                    if (std::abs(d) <= half) img(y, x) = std::max(img(y, x), level);
                }
        }
        return img;
    }
    if (name == "disks") {
        for (int k = 0; k < 4; ++k) {
            double cx = (0.25 + 0.5 * (k % 2)) * size, cy = (0.25 + 0.5 * (k / 2)) * size;
            double rad = 0.12 * size;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    if (std::hypot(x - cx, y - cy) <= rad) img(y, x) = 0.9;
        }
        return img;
    }
    throw ConfigError("scene: unknown builtin '" + name + "'");
}

inline RGrid load_scene(const json& scene_cfg) {
    std::string path = scene_cfg.at("path").get<std::string>();
    if (!path.empty()) {
        if (!fs::exists(path)) throw IoError("scene: missing file " + path);
        if (path.size() > 5 && path.substr(path.size() - 5) == ".ptns")
            return io::grid_from_tensor(io::read_tensor(path));
        return io::luma_grid(io::read_png(path));
    }
    return builtin_scene(scene_cfg.at("builtin").get<std::string>(),
                         scene_cfg.at("size").get<int>(), scene_cfg.at("seed").get<uint64_t>());
}

// --------------------------------------------------------- setup resolve

struct Setup {
    metasurface::MetasurfaceDesign design;
    std::vector<psf::BatchKey> keys;
    double sensor_distance = 0;
    field::SimulationRegion region;
    double pad_factor = 2.0;
    double natural_pitch = 0; // region pitch before pooling
};

inline Setup resolve_setup(const json& c, int region_scale = 1) {
    Setup s;
    const json& o = c.at("optics");
    std::string mode = o.at("mode").get<std::string>();
    if (mode == "phase_only")
        s.design = metasurface::make_phase_only(o.at("aperture_diameter_m").get<double>(),
                                                o.at("sample_pitch_m").get<double>(),
                                                o.at("window_factor").get<double>());
    else
        s.design = metasurface::make_cell_based(o.at("aperture_diameter_m").get<double>(),
                                                o.at("supersample").get<int>(),
                                                o.at("window_factor").get<double>());
    s.design.dispersion = o.at("dispersion").get<std::string>() == "fixed_phase"
                              ? metasurface::Dispersion::FixedPhase
                              : metasurface::Dispersion::OpdScaled;
    s.sensor_distance = o.at("sensor_distance_m").get<double>();
    s.pad_factor = o.at("pad_factor").get<double>();

    std::vector<double> lambdas = o.at("wavelengths_m").get<std::vector<double>>();
    std::vector<double> depths = o.at("depths_m").get<std::vector<double>>();
    if (depths.empty()) {
        for (double l : lambdas) s.keys.push_back({true, 0.0, l});
    } else {
        for (double z : depths)
            for (double l : lambdas) s.keys.push_back({false, z, l});
    }

    auto pads = psf::batch_pads(s.design, s.keys, s.pad_factor);
    field::FresnelPlan plan0 = field::make_fresnel_plan(
        s.design.ny, s.design.nx, s.design.pitch, s.keys[0].wavelength, s.sensor_distance,
        s.pad_factor, pads[0]);
    s.natural_pitch = plan0.out_pitch;

    const json& r = c.at("region");
    s.region.px = s.region.py = r.at("pixels").get<int>() * region_scale;
    double sp = r.at("sample_pitch_m").get<double>();
    int pool = r.at("pool").get<int>();
    s.region.sample_pitch = sp > 0 ? sp : s.natural_pitch * pool;
    return s;
}

// --------------------------------------------------------- task problems

inline synthesis::Problem build_problem(const json& c,
                                        std::shared_ptr<const surrogate::SurrogateModel> model) {
    Setup s = resolve_setup(c);
    synthesis::Problem p;
    p.design = std::move(s.design);
    p.model = std::move(model);
    p.keys = s.keys;
    p.sensor_distance = s.sensor_distance;
    p.region = s.region;
    p.pad_factor = s.pad_factor;
    p.reg.c1 = c.at("regularizer").at("c1").get<double>();
    p.reg.c2 = c.at("regularizer").at("c2").get<double>();

    const std::string task = c.at("task").get<std::string>();
    const json& kcfg = c.at("kernels");
    auto kernel_at = [&](size_t i, double theta) {
        const json& k = kcfg.at(std::min(i, kcfg.size() - 1));
        filters::KernelSpec spec;
        spec.family = k.at("family").get<std::string>() == "laplacian_of_gaussian"
                          ? filters::KernelFamily::LaplacianOfGaussian
                          : filters::KernelFamily::GaussianDerivative;
        spec.sigma = k.at("sigma_px").get<double>();
        spec.order = k.at("order").get<int>();
        spec.theta = theta;
        spec.support = k.at("support_px").get<int>();
        return filters::make_kernel(spec);
    };
    const int B = static_cast<int>(p.keys.size());

    if (task == "steerable") {
        // two basis targets: derivative along x and along y
        for (double theta : {0.0, M_PI / 2}) {
            synthesis::TargetFilter f;
            for (int b = 0; b < B; ++b)
                f.slices.push_back(
                    filters::embed_kernel(kernel_at(0, theta), p.region.py, p.region.px));
            f.name = theta == 0.0 ? "gauss_dx" : "gauss_dy";
            p.targets.push_back(std::move(f));
        }
        p.weights.alpha = {{1, 0, -1, 0}, {0, 1, 0, -1}};
    } else if (task == "depth_derivative") {
        filters::DepthSchedule sched;
        const json& sc = c.at("schedule");
        std::vector<double> depths = c.at("optics").at("depths_m").get<std::vector<double>>();
        if (depths.size() < 2) throw ConfigError("depth_derivative: need at least 2 depths");
        sched.z_min = *std::min_element(depths.begin(), depths.end());
        sched.z_max = *std::max_element(depths.begin(), depths.end());
        sched.theta_min = sc.at("theta_min_rad").get<double>();
        sched.theta_max = sc.at("theta_max_rad").get<double>();
        sched.depths = depths;
        synthesis::TargetFilter f;
        for (const auto& key : p.keys) {
            double theta = sched.theta_at(key.z);
            f.slices.push_back(filters::embed_kernel(kernel_at(0, theta), p.region.py, p.region.px));
        }
        f.name = "depth_derivative";
        p.targets.push_back(std::move(f));
        p.weights.alpha = {{1, 0, -1, 0}};
        p.weights.zero_mask = {false, true, false, true}; // two-channel operation
    } else if (task == "broadband_log") {
        synthesis::TargetFilter f;
        for (int b = 0; b < B; ++b)
            f.slices.push_back(filters::embed_kernel(kernel_at(0, 0.0), p.region.py, p.region.px));
        f.name = "broadband_log";
        p.targets.push_back(std::move(f));
        p.weights.alpha = {{1, -0.5, 1, -0.5}};
        p.objective = synthesis::Objective::Image;
        RGrid scene = load_scene(c.at("scene"));
        if (scene.rows() != p.region.py || scene.cols() != p.region.px)
            throw ConfigError("broadband_log: scene size must match region.pixels");
        p.scenes.assign(p.keys.size(), scene);
    } else if (task == "custom") {
        // custom tasks take kernels verbatim, one target per kernel entry
        for (size_t i = 0; i < kcfg.size(); ++i) {
            synthesis::TargetFilter f;
            const json& k = kcfg.at(i);
            for (int b = 0; b < B; ++b)
                f.slices.push_back(filters::embed_kernel(
                    kernel_at(i, k.at("theta_rad").get<double>()), p.region.py, p.region.px));
            f.name = "kernel_" + std::to_string(i);
            p.targets.push_back(std::move(f));
            p.weights.alpha.push_back({1, 0, -1, 0});
        }
    } else {
        throw ConfigError("build_problem: task '" + task + "' is not an optimization task");
    }

    // explicit weight overrides
    const json& w = c.at("weights");
    if (!w.at("init").empty()) {
        auto init = w.at("init").get<std::vector<std::vector<double>>>();
        if (init.size() != p.targets.size())
            throw ConfigError("weights.init: need one 4-vector per target");
        p.weights.alpha.clear();
        for (auto& v : init) {
            if (v.size() != 4) throw ConfigError("weights.init: entries must have 4 components");
            p.weights.alpha.push_back({v[0], v[1], v[2], v[3]});
        }
    }
    // config mask adds to (never clears) the task's own channel mask
    auto mask = w.at("zero_mask").get<std::vector<bool>>();
    for (int i = 0; i < 4; ++i)
        p.weights.zero_mask[i] = p.weights.zero_mask[i] || mask.at(i);

    // initialization
    const json& init = c.at("init");
    uint64_t seed = init.at("seed").get<uint64_t>();
    if (init.at("type").get<std::string>() == "random") {
        metasurface::random_phase_init(p.design, seed);
    } else {
        double lambda0 = p.keys[0].wavelength;
        double fx = init.at("focal_x_m").get<double>();
        double fy = init.at("focal_y_m").get<double>();
        double d = p.sensor_distance;
        bool finite = !p.keys[0].infinite_focus;
        double z0 = finite ? p.keys[p.keys.size() / 2].z : 0.0;
        double conj = finite ? 1.0 / (1.0 / z0 + 1.0 / d) : d;
        if (fx <= 0) fx = conj;
        if (fy <= 0) fy = conj;
        double off = init.at("offset_px").get<double>() * p.region.sample_pitch;
        std::pair<double, double> ox{off, 0.0}, oy{-off, 0.0};
        if (task == "broadband_log") {
            ox = {0.0, 0.0};
            oy = {0.0, 0.0};
        }
        metasurface::lens_phase_init(p.design, lambda0, fx, fy, ox, oy, p.model.get());
        p.design.seed = seed;
    }
    return p;
}

// ------------------------------------------------------------- commands

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir);
}

inline void write_summary(const std::string& dir, const json& summary) {
    std::ofstream f(dir + "/summary.json");
    f << summary.dump(2) << "\n";
}

// train-surrogate: dataset (file or synthetic sweep) -> model checkpoint +
// per-epoch metrics CSV.
inline json cmd_train_surrogate(const json& c, const std::string& out_dir) {
    ensure_dir(out_dir);
    cfg::write_resolved(c, out_dir);
    const json& sc = c.at("surrogate");
    surrogate::ResponseDataset ds;
    if (!sc.at("dataset").get<std::string>().empty()) {
        ds = surrogate::read_dataset(sc.at("dataset").get<std::string>());
    } else {
        ds = surrogate::generate_synthetic_dataset(
            sc.at("widths").get<int>(), sc.at("lambdas").get<int>(),
            sc.at("lambda_min_m").get<double>(), sc.at("lambda_max_m").get<double>());
    }
    surrogate::TrainConfig tc;
    tc.h1 = tc.h2 = sc.at("hidden").get<int>();
    tc.epochs = sc.at("epochs").get<int>();
    tc.batch = sc.at("batch").get<int>();
    tc.lr = sc.at("lr").get<double>();
    tc.weight_decay = sc.at("weight_decay").get<double>();
    tc.seed = sc.at("seed").get<uint64_t>();
    surrogate::TrainReport rep;
    auto model = surrogate::train_surrogate(ds, tc, &rep);

    std::string hash = cfg::config_hash(c);
    std::string model_path = out_dir + "/surrogate_" + hash + ".psnn";
    surrogate::save_model(model_path, model);
    {
        std::ofstream f(out_dir + "/surrogate_metrics.csv");
        f << "epoch,train_mse,test_mae\n";
        for (const auto& row : rep.trace)
            f << row.epoch << "," << std::setprecision(17) << row.train_mse << "," << row.test_mae
              << "\n";
    }
    json summary = {{"model", model_path},
                    {"test_mae", rep.test_mae},
                    {"final_train_mse", rep.final_train_mse},
                    {"samples", ds.samples.size()},
                    {"config_hash", hash}};
    write_summary(out_dir, summary);
    return summary;
}

inline void write_psf_previews(const std::string& dir, const psf::PsfStack& stack,
                               const synthesis::SynthesisWeights& weights) {
    static const char* names[4] = {"h0", "h45", "h90", "h135"};
    for (int b = 0; b < stack.batch(); ++b) {
        for (int ch = 0; ch < 4; ++ch)
            io::write_intensity_png(dir + "/psf_b" + std::to_string(b) + "_" + names[ch] + ".png",
                                    stack.h[b][ch]);
        for (int i = 0; i < weights.targets(); ++i) {
            auto net = synthesis::net_psf(stack.h, weights.alpha[i]);
            io::write_signed_png(dir + "/net_psf_b" + std::to_string(b) + "_t" + std::to_string(i) +
                                     ".png",
                                 net[b]);
        }
    }
}

// Portable-tensor design serialization: [2, ny, nx] planes (phase_x/phase_y
// or the width latents) with the design metadata in the header.
inline io::Tensor design_to_tensor(const metasurface::MetasurfaceDesign& d) {
    io::Tensor t;
    t.shape = {2, d.ny, d.nx};
    bool phase = d.mode == metasurface::Mode::PhaseOnly;
    t.axes = {phase ? "phase_xy" : "latent_xy", "y", "x"};
    t.units = phase ? "rad" : "logit";
    t.extra["mode"] = phase ? "phase_only" : "cell_based";
    t.extra["pitch"] = std::to_string(d.pitch);
    t.extra["aperture"] = std::to_string(d.aperture_diameter);
    t.extra["seed"] = std::to_string(d.seed);
    t.extra["supersample"] = std::to_string(d.supersample);
    t.extra["ref_wavelength"] = std::to_string(d.ref_wavelength);
    t.extra["dispersion"] =
        d.dispersion == metasurface::Dispersion::OpdScaled ? "opd_scaled" : "fixed_phase";
    const RGrid& a = phase ? d.phase_x : d.latent_x;
    const RGrid& b = phase ? d.phase_y : d.latent_y;
    t.data.reserve(2 * a.size());
    for (size_t i = 0; i < a.size(); ++i) t.data.push_back(static_cast<float>(a[i]));
    for (size_t i = 0; i < b.size(); ++i) t.data.push_back(static_cast<float>(b[i]));
    return t;
}

inline metasurface::MetasurfaceDesign design_from_tensor(const io::Tensor& t) {
    if (t.shape.size() != 3 || t.shape[0] != 2)
        throw IoError("design_from_tensor: expected [2, ny, nx]");
    metasurface::MetasurfaceDesign d;
    d.mode = t.extra.at("mode") == "phase_only" ? metasurface::Mode::PhaseOnly
                                                : metasurface::Mode::CellBased;
    d.ny = static_cast<int>(t.shape[1]);
    d.nx = static_cast<int>(t.shape[2]);
    d.pitch = std::stod(t.extra.at("pitch"));
    d.aperture_diameter = std::stod(t.extra.at("aperture"));
    d.seed = std::stoull(t.extra.at("seed"));
    d.supersample = std::stoi(t.extra.at("supersample"));
    d.ref_wavelength = std::stod(t.extra.at("ref_wavelength"));
    d.dispersion = t.extra.at("dispersion") == "fixed_phase"
                       ? metasurface::Dispersion::FixedPhase
                       : metasurface::Dispersion::OpdScaled;
    RGrid a(d.ny, d.nx), b(d.ny, d.nx);
    for (size_t i = 0; i < a.size(); ++i) {
        a[i] = t.data[i];
        b[i] = t.data[a.size() + i];
    }
    if (d.mode == metasurface::Mode::PhaseOnly) {
        d.phase_x = std::move(a);
        d.phase_y = std::move(b);
    } else {
        d.latent_x = std::move(a);
        d.latent_y = std::move(b);
    }
    return d;
}

inline io::Tensor stack_tensor(const psf::PsfStack& stack) {
    io::Tensor t;
    t.shape = {stack.batch(), 4, stack.region.py, stack.region.px};
    t.axes = {"batch", "channel", "y", "x"};
    t.units = "intensity";
    t.extra["channels"] = "0,45,90,135";
    t.extra["sample_pitch"] = std::to_string(stack.region.sample_pitch);
    for (int b = 0; b < stack.batch(); ++b)
        for (int c = 0; c < 4; ++c)
            for (size_t i = 0; i < stack.h[b][c].size(); ++i)
                t.data.push_back(static_cast<float>(stack.h[b][c][i]));
    return t;
}

// optimize: run the synthesis loop (optionally a coarse c1 sweep), save the
// design + weights checkpoint, trace CSV, previews and a summary line.
inline json cmd_optimize(const json& c, const std::string& out_dir,
                         const std::string& resume_path = "") {
    ensure_dir(out_dir);
    cfg::write_resolved(c, out_dir);
    std::string hash = cfg::config_hash(c);

    std::shared_ptr<const surrogate::SurrogateModel> model;
    if (c.at("optics").at("mode").get<std::string>() == "cell_based") {
        std::string mp = c.at("surrogate").at("checkpoint").get<std::string>();
        if (mp.empty())
            throw ConfigError("cmd_optimize: cell_based mode needs surrogate.checkpoint");
        model = std::make_shared<const surrogate::SurrogateModel>(surrogate::load_model(mp));
    }

    synthesis::Problem p = build_problem(c, model);
    const json& oc = c.at("optimizer");
    synthesis::OptimConfig ocfg;
    ocfg.steps = oc.at("steps").get<int>();
    ocfg.adam_design.base_lr = oc.at("lr_design").get<double>();
    ocfg.adam_weights.base_lr = oc.at("lr_weights").get<double>();
    ocfg.adam_design.decay = ocfg.adam_weights.decay = oc.at("decay").get<double>();
    ocfg.adam_design.decay_every = ocfg.adam_weights.decay_every =
        oc.at("decay_every").get<int>();
    ocfg.log_every = oc.at("log_every").get<int>();
    ocfg.seed = oc.at("seed").get<uint64_t>();
    ocfg.trace_path = out_dir + "/trace.csv";

    synthesis::OptimState resume_state;
    bool resuming = false;
    if (!resume_path.empty()) {
        auto ck = io::load_checkpoint(resume_path);
        if (!ck.has_state) throw IoError("cmd_optimize: checkpoint has no optimizer state");
        p.design = ck.design;
        p.weights = ck.weights;
        resume_state = ck.state;
        resuming = true;
    }

    // coarse c1 sweep: re-run with increasing c1 until the in-region energy
    // fraction converges (2% absolute)
    auto sweep = c.at("regularizer").at("c1_sweep").get<std::vector<double>>();
    json sweep_log = json::array();
    synthesis::OptimResult result;
    if (!sweep.empty() && !resuming) {
        double prev_eff = -1;
        for (size_t i = 0; i < sweep.size(); ++i) {
            synthesis::Problem trial = p;
            trial.reg.c1 = sweep[i];
            result = synthesis::optimize(trial, ocfg);
            sweep_log.push_back({{"c1", sweep[i]}, {"efficiency", result.final_efficiency}});
            if (prev_eff >= 0 && std::abs(result.final_efficiency - prev_eff) < 0.02) break;
            prev_eff = result.final_efficiency;
        }
    } else {
        result = synthesis::optimize(p, ocfg, resuming ? &resume_state : nullptr);
    }

    // recompute the stack and record the canonical scale per target; the
    // stored weights stay raw so resume continues the exact trajectory
    auto stack = psf::make_psf_stack(result.design, model.get(), p.keys, p.sensor_distance,
                                     p.region, p.pad_factor);
    io::Checkpoint ck;
    ck.design = result.design;
    ck.weights = result.weights;
    ck.canonical_scale = synthesis::canonical_scales(result.weights, p.targets, stack.h);
    ck.state = result.state;
    ck.has_state = true;
    ck.config_hash = hash;
    std::string ck_path = out_dir + "/design_" + hash + ".psck";
    io::save_checkpoint(ck_path, ck);
    io::write_tensor(out_dir + "/design_" + hash + ".ptns", design_to_tensor(result.design));
    write_psf_previews(out_dir, stack, result.weights);
    io::write_tensor(out_dir + "/psf_stack_" + hash + ".ptns", stack_tensor(stack));

    json per_target = json::array();
    for (size_t i = 0; i < p.targets.size(); ++i) {
        double err = synthesis::filter_loss_single(p.targets[i], stack.h, result.weights.alpha[i]);
        auto ms = synthesis::msbr(stack.h, result.weights.alpha[i]);
        per_target.push_back({{"name", p.targets[i].name},
                              {"filter_error", err},
                              {"msbr", ms ? *ms : -1.0}});
    }
    json summary = {{"checkpoint", ck_path},
                    {"config_hash", hash},
                    {"final_loss", result.final_loss},
                    {"efficiency", psf::focusing_efficiency(stack)},
                    {"conservation_residual", psf::interference_residual(stack)},
                    {"per_target", per_target},
                    {"steps", result.state.step},
                    {"c1_sweep", sweep_log}};
    write_summary(out_dir, summary);
    // one summary line per run appended for sweep-style workflows
    {
        std::ofstream f(out_dir + "/runs.csv", std::ios::app);
        f << hash << "," << result.final_loss << "," << result.final_msbr << ","
          << result.final_efficiency << "\n";
    }
    return summary;
}

// render: channels, noise, mosaic, demosaic, net images for weight sets and
// steering angles.
inline json cmd_render(const json& c, const std::string& ckpt_path, const std::string& out_dir,
                       const std::vector<double>& thetas, double psnr_override = -1) {
    ensure_dir(out_dir);
    cfg::write_resolved(c, out_dir);
    if (!fs::exists(ckpt_path)) throw IoError("cmd_render: missing checkpoint " + ckpt_path);
    auto ck = io::load_checkpoint(ckpt_path);

    std::shared_ptr<const surrogate::SurrogateModel> model;
    if (ck.design.mode == metasurface::Mode::CellBased) {
        std::string mp = c.at("surrogate").at("checkpoint").get<std::string>();
        if (mp.empty()) throw ConfigError("cmd_render: cell_based design needs surrogate.checkpoint");
        model = std::make_shared<const surrogate::SurrogateModel>(surrogate::load_model(mp));
    }

    // rendering uses a larger region than optimization to catch scattered light
    int scale = c.at("region").at("render_scale").get<int>();
    Setup s = resolve_setup(c, scale);
    auto stack = psf::make_psf_stack(ck.design, model.get(), s.keys, s.sensor_distance, s.region,
                                     s.pad_factor);

    RGrid scene_img = load_scene(c.at("scene"));
    sensor::Scene scene;
    scene.radiance.assign(s.keys.size(), scene_img);
    sensor::SensorConfig sens;
    const json& scj = c.at("sensor");
    sens.pixel_pitch = scj.at("pixel_pitch_m").get<double>() > 0
                           ? scj.at("pixel_pitch_m").get<double>()
                           : s.region.sample_pitch;
    sens.quantum_efficiency = scj.at("quantum_efficiency").get<double>();
    sens.full_well = scj.at("full_well").get<double>();
    sens.read_noise_sigma = scj.at("read_noise_e").get<double>();
    sens.bit_depth = scj.at("bit_depth").get<int>();
    sens.gain = scj.at("gain_dn_per_e").get<double>();
    sens.target_psnr_db = psnr_override > 0 ? psnr_override : scj.at("target_psnr_db").get<double>();
    sens.seed = scj.at("seed").get<uint64_t>();
    if (scj.at("front_polarizer").get<bool>()) sensor::apply_front_polarizer(scene);

    // noiseless channel renders (photon domain)
    std::array<RGrid, 4> photons;
    for (int ch = 0; ch < 4; ++ch) {
        std::vector<RGrid> slices;
        for (int b = 0; b < stack.batch(); ++b) slices.push_back(stack.h[b][ch]);
        photons[ch] = sensor::render_channel(scene, slices);
        for (size_t i = 0; i < photons[ch].size(); ++i)
            photons[ch][i] = std::max(0.0, photons[ch][i]);
    }
    // joint brightness scale so all four channels share one exposure
    double peak = 0;
    for (const auto& ch : photons) peak = std::max(peak, max_val(ch));
    std::array<RGrid, 4> dn;
    sensor::SensorConfig chan_cfg = sens;
    for (int ch = 0; ch < 4; ++ch) {
        RGrid scaled = photons[ch];
        if (sens.target_psnr_db > 0 && peak > 0) {
            double target_e = sensor::peak_electrons_for_psnr(sens);
            scaled *= target_e / (sens.quantum_efficiency * peak);
        }
        chan_cfg.target_psnr_db = -1; // already scaled jointly
        chan_cfg.seed = sens.seed + 101 * ch;
        dn[ch] = sensor::apply_noise(scaled, chan_cfg);
    }
    auto frame = sensor::mosaic(dn, sens.bit_depth);
    auto demosaiced = sensor::demosaic_nearest(frame);

    io::write_tensor(out_dir + "/mosaic.ptns", io::tensor_from_grid(frame.frame));
    io::write_png_gray16(out_dir + "/mosaic.png", [&] {
        RGrid norm = frame.frame;
        norm *= 1.0 / sens.dn_max();
        return norm;
    }());
    for (int ch = 0; ch < 4; ++ch) {
        io::write_intensity_png(out_dir + "/channel_" + std::to_string(ch) + ".png", dn[ch]);
        io::write_tensor(out_dir + "/channel_" + std::to_string(ch) + ".ptns",
                         io::tensor_from_grid(dn[ch]));
    }

    // net images for each stored weight set plus steering angles from the
    // first two sets
    json nets = json::array();
    auto emit_net = [&](const std::string& tag, const std::array<double, 4>& alpha) {
        auto net = sensor::synthesize_image(demosaiced, alpha);
        io::write_signed_png(out_dir + "/net_" + tag + ".png", net);
        io::write_tensor(out_dir + "/net_" + tag + ".ptns", io::tensor_from_grid(net));
        nets.push_back({{"tag", tag}, {"alpha", alpha}});
    };
    // canonical per-target scales keep steering combinations consistent
    auto scaled_alpha = ck.weights.alpha;
    for (size_t i = 0; i < scaled_alpha.size() && i < ck.canonical_scale.size(); ++i)
        for (int cch = 0; cch < 4; ++cch) scaled_alpha[i][cch] *= ck.canonical_scale[i];
    for (size_t i = 0; i < scaled_alpha.size(); ++i)
        emit_net("t" + std::to_string(i), scaled_alpha[i]);
    if (scaled_alpha.size() >= 2)
        for (double theta : thetas) {
            auto a = synthesis::steer_weights(scaled_alpha[0], scaled_alpha[1], theta);
            std::ostringstream tag;
            tag << "theta_" << std::fixed << std::setprecision(1) << theta * 180.0 / M_PI;
            emit_net(tag.str(), a);
        }

    json summary = {{"checkpoint", ckpt_path},
                    {"psnr_db", sens.target_psnr_db},
                    {"nets", nets},
                    {"region_pixels", s.region.px}};
    write_summary(out_dir, summary);
    return summary;
}

// evaluate: recompute the stack from a checkpoint and gate the metrics.
inline json cmd_evaluate(const json& c, const std::string& ckpt_path, const std::string& out_dir,
                         bool* passed_out = nullptr) {
    ensure_dir(out_dir);
    cfg::write_resolved(c, out_dir);
    if (!fs::exists(ckpt_path)) throw IoError("cmd_evaluate: missing checkpoint " + ckpt_path);
    auto ck = io::load_checkpoint(ckpt_path);

    std::shared_ptr<const surrogate::SurrogateModel> model;
    if (ck.design.mode == metasurface::Mode::CellBased) {
        std::string mp = c.at("surrogate").at("checkpoint").get<std::string>();
        if (mp.empty())
            throw ConfigError("cmd_evaluate: cell_based design needs surrogate.checkpoint");
        model = std::make_shared<const surrogate::SurrogateModel>(surrogate::load_model(mp));
    }
    synthesis::Problem p = build_problem(c, model);
    p.design = ck.design; // evaluate the stored design, not a fresh init
    auto stack = psf::make_psf_stack(ck.design, model.get(), p.keys, p.sensor_distance, p.region,
                                     p.pad_factor);

    const json& ev = c.at("evaluate");
    double conservation = psf::interference_residual(stack);
    double rank_ratio = psf::gram_rank_ratio(stack);
    double efficiency = psf::focusing_efficiency(stack);
    bool pass = conservation <= ev.at("max_conservation_residual").get<double>() &&
                rank_ratio <= ev.at("max_rank_ratio").get<double>() &&
                efficiency >= ev.at("min_efficiency").get<double>();
    json per_target = json::array();
    for (size_t i = 0; i < p.targets.size() && i < ck.weights.alpha.size(); ++i) {
        double err = synthesis::filter_loss_single(p.targets[i], stack.h, ck.weights.alpha[i]);
        auto ms = synthesis::msbr(stack.h, ck.weights.alpha[i]);
        bool tpass = err <= ev.at("max_filter_error").get<double>() &&
                     ms.value_or(0.0) >= ev.at("min_msbr").get<double>();
        pass = pass && tpass;
        per_target.push_back({{"name", p.targets[i].name},
                              {"filter_error", err},
                              {"msbr", ms ? *ms : -1.0},
                              {"pass", tpass}});
    }
    json report = {{"checkpoint", ckpt_path},
                   {"conservation_residual", conservation},
                   {"rank_ratio", rank_ratio},
                   {"efficiency", efficiency},
                   {"per_target", per_target},
                   {"pass", pass}};
    {
        std::ofstream f(out_dir + "/evaluation.json");
        f << report.dump(2) << "\n";
        std::ofstream g(out_dir + "/evaluation.csv");
        g << "metric,value\nconservation_residual," << conservation << "\nrank_ratio,"
          << rank_ratio << "\nefficiency," << efficiency << "\n";
        for (const auto& t : per_target)
            g << t["name"].get<std::string>() << "_filter_error,"
              << t["filter_error"].get<double>() << "\n"
              << t["name"].get<std::string>() << "_msbr," << t["msbr"].get<double>() << "\n";
    }
    if (passed_out) *passed_out = pass;
    return report;
}

// export-psf: recompute and dump the stack tensors + previews.
inline json cmd_export_psf(const json& c, const std::string& ckpt_path,
                           const std::string& out_dir) {
    ensure_dir(out_dir);
    cfg::write_resolved(c, out_dir);
    if (!fs::exists(ckpt_path)) throw IoError("cmd_export_psf: missing checkpoint " + ckpt_path);
    auto ck = io::load_checkpoint(ckpt_path);
    std::shared_ptr<const surrogate::SurrogateModel> model;
    if (ck.design.mode == metasurface::Mode::CellBased) {
        std::string mp = c.at("surrogate").at("checkpoint").get<std::string>();
        if (mp.empty())
            throw ConfigError("cmd_export_psf: cell_based design needs surrogate.checkpoint");
        model = std::make_shared<const surrogate::SurrogateModel>(surrogate::load_model(mp));
    }
    Setup s = resolve_setup(c);
    auto stack = psf::make_psf_stack(ck.design, model.get(), s.keys, s.sensor_distance, s.region,
                                     s.pad_factor);
    std::string hash = cfg::config_hash(c);
    io::write_tensor(out_dir + "/psf_stack_" + hash + ".ptns", stack_tensor(stack));
    write_psf_previews(out_dir, stack, ck.weights);
    json summary = {{"tensor", out_dir + "/psf_stack_" + hash + ".ptns"},
                    {"batch", stack.batch()},
                    {"conservation_residual", psf::interference_residual(stack)}};
    write_summary(out_dir, summary);
    return summary;
}

} // namespace polarsynth::commands
