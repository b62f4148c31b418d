#pragma once

#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "polarsynth/crc32.hpp"
#include "polarsynth/errors.hpp"

namespace polarsynth::cfg {

using nlohmann::json;

// Schema-checked, default-completed experiment configuration. Unknown keys are
// rejected with their path; every default is echoed into the resolved config
// so no constant stays implicit.

inline json default_config() {
    return json{
        {"task", "steerable"}, // steerable | depth_derivative | broadband_log |
                               // phase_inversion | custom
        {"optics",
         {{"mode", "phase_only"},
          {"aperture_diameter_m", 0.2e-3},
          {"sample_pitch_m", 1e-6},
          {"supersample", 4},
          {"sensor_distance_m", 0.02},
          {"wavelengths_m", json::array({532e-9})},
          {"depths_m", json::array()}, // empty = infinity focus
          {"pad_factor", 2.0},
          {"dispersion", "opd_scaled"},
          {"window_factor", 1.25}}},
        {"region",
         {{"pixels", 128},
          {"sample_pitch_m", 0.0}, // 0 = natural propagated pitch
          {"pool", 1},
          {"render_scale", 2}}},
        {"kernels", json::array({json{{"family", "gaussian_derivative"},
                                      {"sigma_px", 4.0},
                                      {"order", 1},
                                      {"theta_rad", 0.0},
                                      {"support_px", 0}}})},
        {"schedule", {{"theta_min_rad", -M_PI / 4}, {"theta_max_rad", M_PI / 4}}},
        {"init",
         {{"type", "lens"}, // lens | random
          {"seed", 1},
          {"offset_px", 4.0},
          {"focal_x_m", 0.0}, // 0 = sensor distance (or mid-depth conjugate)
          {"focal_y_m", 0.0}}},
        {"regularizer", {{"c1", 0.0}, {"c2", 0.0}, {"c1_sweep", json::array()}}},
        {"optimizer",
         {{"steps", 2000},
          {"lr_design", 1e-2},
          {"lr_weights", 1e-1},
          {"decay", 0.995},
          {"decay_every", 10},
          {"log_every", 10},
          {"seed", 0}}},
        {"weights",
         {{"init", json::array()}, // empty = task default
          {"zero_mask", json::array({false, false, false, false})}}},
        {"sensor",
         {{"pixel_pitch_m", 0.0}, // 0 = region pitch
          {"quantum_efficiency", 0.6},
          {"full_well", 1e5},
          {"read_noise_e", 2.5},
          {"bit_depth", 12},
          {"gain_dn_per_e", 0.0},
          {"target_psnr_db", 30.0},
          {"seed", 0},
          {"front_polarizer", false}}},
        {"surrogate",
         {{"checkpoint", ""},
          {"dataset", ""}, // optional external PSRD1 file
          {"widths", 48},
          {"lambdas", 10},
          {"lambda_min_m", 450e-9},
          {"lambda_max_m", 650e-9},
          {"hidden", 512},
          {"epochs", 2000},
          {"batch", 256},
          {"lr", 1e-3},
          {"weight_decay", 0.01},
          {"seed", 0}}},
        {"scene",
         {{"builtin", "shapes"}, // shapes | bars | disks | "" (use path)
          {"path", ""},
          {"size", 128},
          {"seed", 0}}},
        {"inversion", {{"loss", "l1"}, {"target", "disk"}, {"target_radius_px", 8.0}}},
        {"evaluate",
         {{"max_filter_error", 0.15},
          {"min_msbr", 0.8},
          {"min_efficiency", 0.0},
          {"max_conservation_residual", 1e-12},
          {"max_rank_ratio", 1e-6}}},
        {"io", {{"out_dir", "out"}}},
    };
}

namespace detail {

inline void reject_unknown(const json& user, const json& schema, const std::string& path) {
    if (!user.is_object()) return;
    for (auto it = user.begin(); it != user.end(); ++it) {
        if (!schema.contains(it.key()))
            throw ConfigError("config: unknown key '" + path + it.key() + "'");
        if (it.value().is_object() && schema[it.key()].is_object())
            reject_unknown(it.value(), schema[it.key()], path + it.key() + ".");
    }
}

inline void merge(json& base, const json& user) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
            merge(base[it.key()], it.value());
        else base[it.key()] = it.value();
    }
}

} // namespace detail

// Merge a user config over the defaults, rejecting unknown keys, and validate
// the coarse value constraints.
inline json resolve_config(const json& user) {
    json base = default_config();
    if (!user.is_object()) throw ConfigError("config: top level must be a JSON object");
    detail::reject_unknown(user, base, "");
    detail::merge(base, user);

    const std::set<std::string> tasks = {"steerable", "depth_derivative", "broadband_log",
                                         "phase_inversion", "custom"};
    if (!tasks.count(base["task"].get<std::string>()))
        throw ConfigError("config: unknown task '" + base["task"].get<std::string>() + "'");
    const std::set<std::string> modes = {"phase_only", "cell_based"};
    if (!modes.count(base["optics"]["mode"].get<std::string>()))
        throw ConfigError("config: optics.mode must be phase_only or cell_based");
    if (base["optics"]["aperture_diameter_m"].get<double>() <= 0)
        throw ConfigError("config: optics.aperture_diameter_m must be positive");
    if (base["optics"]["wavelengths_m"].empty())
        throw ConfigError("config: optics.wavelengths_m must not be empty");
    if (base["region"]["pixels"].get<int>() < 4)
        throw ConfigError("config: region.pixels too small");
    if (base["optimizer"]["steps"].get<int>() < 0)
        throw ConfigError("config: optimizer.steps must be >= 0");
    for (const auto& k : base["kernels"]) {
        if (k.at("sigma_px").get<double>() <= 0)
            throw ConfigError("config: kernel sigma_px must be positive");
        std::string fam = k.at("family").get<std::string>();
        if (fam != "gaussian_derivative" && fam != "laplacian_of_gaussian")
            throw ConfigError("config: unknown kernel family '" + fam + "'");
    }
    return base;
}

inline json load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path);
    json user = json::parse(f, nullptr, false);
    if (user.is_discarded()) throw ConfigError("config: malformed JSON in " + path);
    return resolve_config(user);
}

inline std::string config_hash(const json& resolved) {
    std::string dump = resolved.dump();
    uint64_t h = fnv1a64(dump.data(), dump.size());
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf, 8); // first 8 hex digits of fnv1a64
}

inline void write_resolved(const json& resolved, const std::string& dir) {
    std::ofstream f(dir + "/config.resolved.json");
    if (!f) throw IoError("config: cannot write resolved config in " + dir);
    f << resolved.dump(2) << "\n";
}

} // namespace polarsynth::cfg
