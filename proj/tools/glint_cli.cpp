#include <CLI11.hpp>
#include <iostream>

#include "glint/glint.hpp"

using namespace glint;

namespace {

void apply_overrides(TrainConfig& cfg, const std::vector<std::string>& sets) {
    for (const auto& kv : sets) {
        auto eq = kv.find('=');
        require(eq != std::string::npos, "bad_config_key",
                "--set expects key=value, got: " + kv);
        config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"glint: surfel-based inverse rendering at desk scale"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    SynthOptions sopt;
    std::string out_dir;
    synth->add_option("--preset", sopt.preset,
                      "lambert-spheres | mixed-materials | mirror-ball");
    synth->add_option("--out", out_dir, "output directory")->required();
    synth->add_option("--views", sopt.views, "capture view count");
    synth->add_option("--seed", sopt.seed, "random seed");
    synth->add_option("--size", sopt.size, "image resolution");
    synth->add_option("--mc-samples", sopt.mc_samples, "MC samples per pixel");
    synth->add_option("--lift-views", sopt.lift_views, "orbit mask views");
    synth->add_option("--surfels-per-object", sopt.surfels_per_object, "surfel density");
    synth->add_flag("--biased-env", sopt.biased_env, "hard one-sided key light");

    // stage1 / stage2
    auto* stage1 = app.add_subcommand("stage1", "geometry reconstruction");
    auto* stage2 = app.add_subcommand("stage2", "material and lighting recovery");
    std::string manifest, ckpt;
    int iters = -1;
    uint64_t seed = 0;
    std::vector<std::string> sets;
    for (auto* sc : {stage1, stage2}) {
        sc->add_option("--manifest", manifest, "dataset manifest")->required();
        sc->add_option("--out", out_dir, "output directory")->required();
        sc->add_option("--iters", iters, "override iteration count");
        sc->add_option("--seed", seed, "random seed (default 0)");
        sc->add_option("--set", sets, "config override key=value")->take_all();
    }
    stage2->add_option("--checkpoint", ckpt, "stage-1 checkpoint")->required();

    // render / relight
    auto* render = app.add_subcommand("render", "render a checkpoint");
    auto* relight = app.add_subcommand("relight", "render under a replacement env map");
    std::string env_path, planes_csv;
    for (auto* sc : {render, relight}) {
        sc->add_option("--checkpoint", ckpt, "scene checkpoint")->required();
        sc->add_option("--manifest", manifest, "manifest providing the cameras")->required();
        sc->add_option("--out", out_dir, "output directory")->required();
        sc->add_option("--planes", planes_csv, "extra EXR planes (csv)");
    }
    relight->add_option("--env", env_path, "equirectangular EXR env map")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "compute the evaluation report");
    std::string render_dir, gt_dir, report_path;
    eval->add_option("--render-dir", render_dir, "rendered outputs")->required();
    eval->add_option("--gt-dir", gt_dir, "ground-truth directory")->required();
    eval->add_option("--out", report_path, "report JSON path");

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            run_synth(sopt, out_dir);
            std::cout << "dataset written to " << out_dir << "\n";
        } else if (stage1->parsed() || stage2->parsed()) {
            TrainConfig cfg;
            cfg.optim.seed = seed;
            apply_overrides(cfg, sets);
            if (iters > 0) {
                (stage1->parsed() ? cfg.stage1.iters : cfg.stage2.iters) = iters;
            }
            if (stage1->parsed())
                cmd_stage1(manifest, out_dir, cfg);
            else
                cmd_stage2(manifest, ckpt, out_dir, cfg);
            std::cout << "checkpoint written to " << out_dir << "\n";
        } else if (render->parsed()) {
            cmd_render(ckpt, manifest, out_dir, split_csv(planes_csv));
        } else if (relight->parsed()) {
            cmd_relight(ckpt, env_path, manifest, out_dir, split_csv(planes_csv));
        } else if (eval->parsed()) {
            nlohmann::json report = cmd_eval(render_dir, gt_dir);
            if (!report_path.empty()) {
                std::ofstream os(report_path);
                os << report.dump(1) << "\n";
            }
            std::cout << report["aggregate"].dump(1) << "\n";
        }
    } catch (const EngineError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
