// anofpdm: weakly-supervised anomaly detection on synthetic phantoms with a
// diffusion forward process. Subcommands cover the full experiment cycle:
// generate | train | calibrate | infer | evaluate | ablate | baseline.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "anofpdm/config.hpp"
#include "anofpdm/harness.hpp"

namespace {

struct CliOverrides {
    std::optional<std::string> config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> workers;
    std::optional<std::string> encoding;
    std::optional<std::string> backend;
    std::optional<int> stride;
    std::optional<std::string> sam_mode;
    std::optional<std::string> out;
};

void add_common_flags(CLI::App* cmd, CliOverrides& o) {
    cmd->add_option("--config", o.config_path, "experiment config JSON");
    cmd->add_option("--seed", o.seed, "master seed");
    cmd->add_option("--workers", o.workers, "worker thread count");
    cmd->add_option("--encoding", o.encoding, "forward encoding: ddpm | ddim");
    cmd->add_option("--backend", o.backend, "predictor backend: oracle | checkpoint:PATH");
    cmd->add_option("--stride", o.stride, "step stride for sweeps");
    cmd->add_option("--sam-mode", o.sam_mode, "sub-map mode: full | endstep | grad | wgrad");
    cmd->add_option("--out", o.out, "output directory");
}

fpdm::ExperimentConfig effective_config(const CliOverrides& o) {
    fpdm::ExperimentConfig cfg;
    if (o.config_path) cfg = fpdm::load_config(*o.config_path);
    if (o.seed) cfg.seed = *o.seed;
    if (o.workers) cfg.workers = *o.workers;
    if (o.encoding) cfg.encoding = *o.encoding;
    if (o.backend) cfg.backend = *o.backend;
    if (o.stride) cfg.stride = *o.stride;
    if (o.sam_mode) cfg.sam_mode = *o.sam_mode;
    if (o.out) cfg.paths.out = *o.out;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"forward-process anomaly detection on synthetic phantoms"};
    app.require_subcommand(1);

    CliOverrides o;
    std::string ablate_axis = "w";

    auto* generate = app.add_subcommand("generate", "generate phantom dataset splits");
    auto* train = app.add_subcommand("train", "train the conditional denoiser");
    auto* calibrate = app.add_subcommand("calibrate", "select guidance strength and thresholds");
    auto* infer = app.add_subcommand("infer", "segment the test split");
    auto* evaluate = app.add_subcommand("evaluate", "score inference results");
    auto* ablate = app.add_subcommand("ablate", "hyperparameter ablation curves");
    ablate->add_option("--axis", ablate_axis, "w | te | fixed-threshold | sam-mode");
    auto* baseline = app.add_subcommand("baseline", "reconstruction baseline with a noise sweep");
    for (auto* cmd : {generate, train, calibrate, infer, evaluate, ablate, baseline})
        add_common_flags(cmd, o);

    CLI11_PARSE(app, argc, argv);

    try {
        fpdm::ExperimentConfig cfg = effective_config(o);
        if (generate->parsed()) {
            fpdm::cmd_generate(cfg);
        } else if (train->parsed()) {
            fpdm::cmd_train(cfg);
        } else if (calibrate->parsed()) {
            fpdm::cmd_calibrate(cfg);
        } else if (infer->parsed()) {
            fpdm::cmd_infer(cfg);
        } else if (evaluate->parsed()) {
            auto report = fpdm::cmd_evaluate(cfg);
            std::printf("mixed:     dice %.4f  iou %.4f  auprc %.4f\n", report.mixed.dice,
                        report.mixed.iou, report.mixed.auprc);
            std::printf("unhealthy: dice %.4f  iou %.4f  auprc %.4f\n",
                        report.unhealthy_only.dice, report.unhealthy_only.iou,
                        report.unhealthy_only.auprc);
            std::printf("accuracy %.4f  pearson(size, divergence) %s\n",
                        report.classification_accuracy,
                        report.pearson_defined
                            ? std::to_string(report.pearson_size_divergence).c_str()
                            : "n/a");
        } else if (ablate->parsed()) {
            auto path = fpdm::cmd_ablate(cfg, ablate_axis);
            std::printf("wrote %s\n", path.string().c_str());
        } else if (baseline->parsed()) {
            auto best = fpdm::cmd_baseline(cfg);
            std::printf("baseline: lambda %d threshold %.6g unhealthy dice %.4f\n",
                        best.best_lambda, best.best_threshold, best.unhealthy_dice);
        }
    } catch (const fpdm::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const fpdm::CalibrationError& e) {
        std::fprintf(stderr, "calibration error: %s\n", e.what());
        return 2;
    } catch (const fpdm::PrerequisiteError& e) {
        std::fprintf(stderr, "missing prerequisite: %s\n", e.what());
        return 3;
    } catch (const fpdm::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
