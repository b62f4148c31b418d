#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polarsynth/crc32.hpp"
#include "polarsynth/errors.hpp"
#include "polarsynth/synthesis.hpp"

namespace polarsynth::io {

// Versioned binary container for a design + digital weights + optimizer
// state: "PSCK1 <json>\n" followed by a raw little-endian f64 payload. The
// exact f64 round trip is what makes resume bit-identical.
struct Checkpoint {
    metasurface::MetasurfaceDesign design;
    synthesis::SynthesisWeights weights; // raw weights: exact resume state
    std::vector<double> canonical_scale; // per target, onto the target's scale
    synthesis::OptimState state;
    bool has_state = false;
    std::string config_hash;
};

namespace ckdetail {

inline void append(std::vector<double>& payload, const RGrid& g) {
    for (size_t i = 0; i < g.size(); ++i) payload.push_back(g[i]);
}
inline void append(std::vector<double>& payload, const std::vector<double>& v) {
    payload.insert(payload.end(), v.begin(), v.end());
}
inline RGrid take_grid(const std::vector<double>& payload, size_t& off, int ny, int nx) {
    RGrid g(ny, nx);
    for (size_t i = 0; i < g.size(); ++i) g[i] = payload[off + i];
    off += g.size();
    return g;
}
inline std::vector<double> take_vec(const std::vector<double>& payload, size_t& off, size_t n) {
    std::vector<double> v(payload.begin() + off, payload.begin() + off + n);
    off += n;
    return v;
}
inline nlohmann::json adam_json(const AdamOptimizer& o) {
    const auto& c = o.config();
    return {{"base_lr", c.base_lr}, {"beta1", c.beta1},   {"beta2", c.beta2},
            {"eps", c.eps},         {"decay", c.decay},   {"decay_every", c.decay_every},
            {"step", o.step_count()}, {"n", o.m().size()}};
}
inline AdamConfig adam_config_from(const nlohmann::json& j) {
    AdamConfig c;
    c.base_lr = j.at("base_lr").get<double>();
    c.beta1 = j.at("beta1").get<double>();
    c.beta2 = j.at("beta2").get<double>();
    c.eps = j.at("eps").get<double>();
    c.decay = j.at("decay").get<double>();
    c.decay_every = j.at("decay_every").get<int>();
    return c;
}

} // namespace ckdetail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    using metasurface::Mode;
    nlohmann::json head;
    head["version"] = "PSCK1";
    const auto& d = ck.design;
    head["mode"] = d.mode == Mode::PhaseOnly ? "phase_only" : "cell_based";
    head["ny"] = d.ny;
    head["nx"] = d.nx;
    head["pitch"] = d.pitch;
    head["aperture_diameter"] = d.aperture_diameter;
    head["uniform_transmittance"] = d.uniform_transmittance;
    head["ref_wavelength"] = d.ref_wavelength;
    head["dispersion"] =
        d.dispersion == metasurface::Dispersion::OpdScaled ? "opd_scaled" : "fixed_phase";
    head["supersample"] = d.supersample;
    head["seed"] = d.seed;
    head["targets"] = ck.weights.alpha.size();
    head["zero_mask"] = ck.weights.zero_mask;
    head["canonical_scale"] = ck.canonical_scale;
    head["config_hash"] = ck.config_hash;
    head["has_state"] = ck.has_state;

    std::vector<double> payload;
    if (d.mode == Mode::PhaseOnly) {
        ckdetail::append(payload, d.phase_x);
        ckdetail::append(payload, d.phase_y);
    } else {
        ckdetail::append(payload, d.latent_x);
        ckdetail::append(payload, d.latent_y);
    }
    for (const auto& a : ck.weights.alpha)
        for (double v : a) payload.push_back(v);
    if (ck.has_state) {
        head["adam_design"] = ckdetail::adam_json(ck.state.design_opt);
        head["adam_weights"] = ckdetail::adam_json(ck.state.weights_opt);
        head["step"] = ck.state.step;
        ckdetail::append(payload, ck.state.design_opt.m());
        ckdetail::append(payload, ck.state.design_opt.v());
        ckdetail::append(payload, ck.state.weights_opt.m());
        ckdetail::append(payload, ck.state.weights_opt.v());
    }
    head["count"] = payload.size();
    char crcbuf[16];
    std::snprintf(crcbuf, sizeof crcbuf, "%08X",
                  crc32(payload.data(), payload.size() * sizeof(double)));
    head["crc32"] = crcbuf;

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("save_checkpoint: cannot open " + path);
    f << "PSCK1 " << head.dump() << "\n";
    f.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size() * sizeof(double)));
    if (!f) throw IoError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_checkpoint: cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("PSCK1 ", 0) != 0)
        throw IoError("load_checkpoint: bad header in " + path);
    nlohmann::json head = nlohmann::json::parse(line.substr(6), nullptr, false);
    if (head.is_discarded()) throw IoError("load_checkpoint: malformed header in " + path);

    Checkpoint ck;
    auto& d = ck.design;
    d.mode = head.at("mode").get<std::string>() == "phase_only" ? metasurface::Mode::PhaseOnly
                                                                : metasurface::Mode::CellBased;
    d.ny = head.at("ny").get<int>();
    d.nx = head.at("nx").get<int>();
    d.pitch = head.at("pitch").get<double>();
    d.aperture_diameter = head.at("aperture_diameter").get<double>();
    d.uniform_transmittance = head.value("uniform_transmittance", true);
    d.ref_wavelength = head.value("ref_wavelength", 532e-9);
    d.dispersion = head.value("dispersion", std::string("opd_scaled")) == "fixed_phase"
                       ? metasurface::Dispersion::FixedPhase
                       : metasurface::Dispersion::OpdScaled;
    d.supersample = head.value("supersample", 1);
    d.seed = head.value("seed", uint64_t{0});
    size_t n_targets = head.at("targets").get<size_t>();
    if (head.contains("zero_mask"))
        for (int c = 0; c < 4; ++c) ck.weights.zero_mask[c] = head["zero_mask"][c].get<bool>();
    if (head.contains("canonical_scale"))
        ck.canonical_scale = head["canonical_scale"].get<std::vector<double>>();
    ck.config_hash = head.value("config_hash", std::string());
    ck.has_state = head.value("has_state", false);

    size_t count = head.at("count").get<size_t>();
    std::vector<double> payload(count);
    f.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (f.gcount() != static_cast<std::streamsize>(count * sizeof(double)))
        throw IoError("load_checkpoint: truncated payload in " + path);
    if (head.contains("crc32")) {
        uint32_t want = std::stoul(head["crc32"].get<std::string>(), nullptr, 16);
        if (want != crc32(payload.data(), payload.size() * sizeof(double)))
            throw IoError("load_checkpoint: checksum mismatch in " + path);
    }

    size_t off = 0;
    if (d.mode == metasurface::Mode::PhaseOnly) {
        d.phase_x = ckdetail::take_grid(payload, off, d.ny, d.nx);
        d.phase_y = ckdetail::take_grid(payload, off, d.ny, d.nx);
    } else {
        d.latent_x = ckdetail::take_grid(payload, off, d.ny, d.nx);
        d.latent_y = ckdetail::take_grid(payload, off, d.ny, d.nx);
    }
    ck.weights.alpha.resize(n_targets);
    for (auto& a : ck.weights.alpha)
        for (double& v : a) v = payload[off++];
    if (ck.has_state) {
        auto dj = head.at("adam_design");
        auto wj = head.at("adam_weights");
        size_t dn = dj.at("n").get<size_t>(), wn = wj.at("n").get<size_t>();
        ck.state.design_opt = AdamOptimizer(dn, ckdetail::adam_config_from(dj));
        ck.state.weights_opt = AdamOptimizer(wn, ckdetail::adam_config_from(wj));
        auto dm = ckdetail::take_vec(payload, off, dn);
        auto dv = ckdetail::take_vec(payload, off, dn);
        auto wm = ckdetail::take_vec(payload, off, wn);
        auto wv = ckdetail::take_vec(payload, off, wn);
        ck.state.design_opt.restore(std::move(dm), std::move(dv), dj.at("step").get<long>());
        ck.state.weights_opt.restore(std::move(wm), std::move(wv), wj.at("step").get<long>());
        ck.state.step = head.at("step").get<long>();
    }
    if (off != payload.size()) throw IoError("load_checkpoint: payload size mismatch in " + path);
    return ck;
}

} // namespace polarsynth::io
