#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "polarsynth/commands.hpp"

using namespace polarsynth;

namespace {

cfg::json load_cfg(const std::string& path, uint64_t seed_override, bool has_seed) {
    cfg::json c = path.empty() ? cfg::resolve_config(cfg::json::object())
                               : cfg::load_config_file(path);
    if (has_seed) {
        c["optimizer"]["seed"] = seed_override;
        c["init"]["seed"] = seed_override;
        c["sensor"]["seed"] = seed_override;
        c["surrogate"]["seed"] = seed_override;
    }
    return c;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"polarsynth: polarization multi-image synthesis designer and simulator"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", ckpt_path, resume_path;
    uint64_t seed = 0;
    bool has_seed = false;
    std::vector<double> theta_deg;
    double psnr = -1;

    auto add_common = [&](CLI::App* sub, bool needs_ckpt) {
        sub->add_option("--config", config_path, "experiment config (JSON)");
        sub->add_option("--out", out_dir, "output directory");
        sub->add_option_function<uint64_t>(
               "--seed", [&](uint64_t v) {
                   seed = v;
                   has_seed = true;
               },
               "seed override for optimizer/init/sensor/surrogate");
        if (needs_ckpt)
            sub->add_option("--checkpoint", ckpt_path, "design checkpoint (.psck)")->required();
    };

    auto* train = app.add_subcommand("train-surrogate", "train the nanofin response surrogate");
    add_common(train, false);
    bool synthetic = false;
    train->add_flag("--synthetic", synthetic, "force the synthetic sweep dataset");

    auto* opt = app.add_subcommand("optimize", "run a multi-image synthesis design");
    add_common(opt, false);
    opt->add_option("--resume", resume_path, "resume from a design checkpoint");

    auto* render = app.add_subcommand("render", "render mosaicked captures and net images");
    add_common(render, true);
    render->add_option("--theta", theta_deg, "steering angles in degrees for net images");
    render->add_option("--psnr", psnr, "sensor peak SNR in dB (overrides config)");

    auto* eval = app.add_subcommand("evaluate", "recompute metrics and gate thresholds");
    add_common(eval, true);

    auto* exp = app.add_subcommand("export-psf", "export the PSF stack tensors and previews");
    add_common(exp, true);

    CLI11_PARSE(app, argc, argv);

    try {
        cfg::json c = load_cfg(config_path, seed, has_seed);
        if (*train) {
            if (!synthetic && c["surrogate"]["dataset"].get<std::string>().empty() &&
                config_path.empty())
                throw ConfigError("train-surrogate: provide --config with surrogate.dataset or "
                                  "pass --synthetic");
            auto summary = commands::cmd_train_surrogate(c, out_dir);
            std::cout << "test MAE " << summary["test_mae"].get<double>() << "\n"
                      << "model " << summary["model"].get<std::string>() << "\n";
        } else if (*opt) {
            auto summary = commands::cmd_optimize(c, out_dir, resume_path);
            std::cout << "final loss " << summary["final_loss"].get<double>() << "\n"
                      << "efficiency " << summary["efficiency"].get<double>() << "\n"
                      << "checkpoint " << summary["checkpoint"].get<std::string>() << "\n";
        } else if (*render) {
            std::vector<double> thetas;
            for (double t : theta_deg) thetas.push_back(t * M_PI / 180.0);
            auto summary = commands::cmd_render(c, ckpt_path, out_dir, thetas, psnr);
            std::cout << "rendered " << summary["nets"].size() << " net images to " << out_dir
                      << "\n";
        } else if (*eval) {
            bool pass = false;
            auto report = commands::cmd_evaluate(c, ckpt_path, out_dir, &pass);
            std::cout << report.dump(2) << "\n";
            if (!pass) return 1;
        } else if (*exp) {
            auto summary = commands::cmd_export_psf(c, ckpt_path, out_dir);
            std::cout << "exported " << summary["tensor"].get<std::string>() << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DomainError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 3;
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return 4;
    }
    return 0;
}
