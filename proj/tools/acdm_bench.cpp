// acdm-bench: dataset generation, training, rollout, evaluation and report
// emission for the flow-prediction benchmark. One JSON config = one run;
// diagnostics go to stderr, stdout carries only the summary table.

#include <CLI11.hpp>

#include <iostream>

#include "acdm/pipeline.hpp"

using namespace acdm;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitMissingCheckpoint = 3;
constexpr int kExitNan = 4;

struct CommonArgs {
    std::string config_path;
    std::string preset;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "JSON run configuration");
    cmd->add_option("-p,--preset", args.preset,
                    "method preset (acdm-R20, acdm-ncn, unet, unet-ut-m8, unet-tn-1e-2, "
                    "resnet-dil, fno-16, refiner-R4-s1e-6)");
    cmd->add_option("-s,--set", args.overrides, "dotted-path override, e.g. objective.R=50");
}

RunConfig load_or_exit(const CommonArgs& args) {
    try {
        return load_config(args.config_path, args.preset, args.overrides);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        std::exit(kExitConfig);
    }
}

template <class F>
int run_dtype(const RunConfig& cfg, F&& f) {
    if (cfg.run.dtype == "f32") return f(float{});
    return f(double{});
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acdm-bench: autoregressive flow-prediction benchmark"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, roll_args, eval_args;
    std::string checkpoint, pred_dir, ref_dir;
    std::vector<std::string> report_dirs;

    auto* gen = app.add_subcommand("generate", "run the solver and write the dataset");
    add_common(gen, gen_args);

    auto* train = app.add_subcommand("train", "optimize a model on the training split");
    add_common(train, train_args);

    auto* roll = app.add_subcommand("rollout", "unroll a trained model over a test split");
    add_common(roll, roll_args);
    roll->add_option("--checkpoint", checkpoint, "model checkpoint (.acwt)");

    auto* eval = app.add_subcommand("evaluate", "metric suite for rollouts vs references");
    add_common(eval, eval_args);
    eval->add_option("--pred", pred_dir, "directory with rollout .flowseq files")->required();
    eval->add_option("--ref", ref_dir, "dataset directory with references (defaults to data.dir)");

    auto* rep = app.add_subcommand("report", "comparison table over evaluation directories");
    rep->add_option("dirs", report_dirs, "evaluation output directories")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto cfg = load_or_exit(gen_args);
            pipeline::cmd_generate(cfg);
        } else if (train->parsed()) {
            auto cfg = load_or_exit(train_args);
            return run_dtype(cfg, [&](auto tag) {
                using Real = decltype(tag);
                try {
                    pipeline::cmd_train<Real>(cfg);
                } catch (const pipeline::TrainAbort& e) {
                    std::cerr << e.what() << "\n";
                    return kExitNan;
                }
                return 0;
            });
        } else if (roll->parsed()) {
            auto cfg = load_or_exit(roll_args);
            if (checkpoint.empty())
                checkpoint = (std::filesystem::path(cfg.run.out_dir) / "model.acwt").string();
            return run_dtype(cfg, [&](auto tag) {
                using Real = decltype(tag);
                try {
                    pipeline::cmd_rollout<Real>(cfg, checkpoint);
                } catch (const pipeline::MissingArtifact& e) {
                    std::cerr << e.what() << "\n";
                    return kExitMissingCheckpoint;
                }
                return 0;
            });
        } else if (eval->parsed()) {
            auto cfg = load_or_exit(eval_args);
            if (ref_dir.empty()) ref_dir = cfg.data.dir;
            try {
                pipeline::cmd_evaluate(cfg, pred_dir, ref_dir);
            } catch (const pipeline::MissingArtifact& e) {
                std::cerr << e.what() << "\n";
                return kExitMissingCheckpoint;
            }
        } else if (rep->parsed()) {
            std::cout << pipeline::cmd_report(report_dirs);
        }
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
