// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mgrec/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::int64_t seed = -1;
    std::string out_dir;
    bool force = false;
    bool unconstrained = false;
    bool verbose = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "experiment config file (JSON)");
    cmd->add_option("--set", args.overrides, "override a config key, e.g. --set model.width=64");
    cmd->add_option("--seed", args.seed, "run a single seed, overriding the config's seed list");
    cmd->add_option("--out", args.out_dir, "output directory override");
    cmd->add_flag("--force", args.force, "recompute even when outputs are up to date");
    cmd->add_flag("--unconstrained", args.unconstrained,
                  "decode without the catalog prefix trie");
    cmd->add_flag("-v,--verbose", args.verbose, "progress lines to stderr");
}

mgrec::ExperimentConfig resolve_config(const CommonArgs& args) {
    mgrec::ExperimentConfig config =
        args.config_path.empty()
            ? mgrec::config_from_text(mgrec::config_to_json_text(mgrec::default_config()),
                                      args.overrides)
            : mgrec::load_config(args.config_path, args.overrides);
    if (args.seed >= 0) config.seeds = {static_cast<std::uint64_t>(args.seed)};
    if (!args.out_dir.empty()) config.out_dir = args.out_dir;
    config.validate();
    return config;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mgrec: multimodal generative recommendation workbench"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string strategy;
    std::string axis;

    CLI::App* synth = app.add_subcommand("synth", "generate synthetic embeddings/interactions");
    add_common(synth, args);
    CLI::App* quantize =
        app.add_subcommand("quantize", "train quantizers and write semantic-id maps");
    add_common(quantize, args);
    CLI::App* train = app.add_subcommand("train", "build examples and train the recommender");
    add_common(train, args);
    train->add_option("--strategy", strategy, "single strategy (default: all configured)");
    CLI::App* eval = app.add_subcommand("eval", "beam-search the test users and score");
    add_common(eval, args);
    eval->add_option("--strategy", strategy, "single strategy (default: all configured)");
    CLI::App* report = app.add_subcommand("report", "merge per-strategy reports");
    add_common(report, args);
    CLI::App* ablate = app.add_subcommand("ablate", "sweep id_length or codebook_size");
    add_common(ablate, args);
    ablate->add_option("--axis", axis, "id_length | codebook_size")->required();
    CLI::App* run = app.add_subcommand("run", "full pipeline: synth through report");
    add_common(run, args);

    CLI11_PARSE(app, argc, argv);

    try {
        const mgrec::ExperimentConfig config = resolve_config(args);
        const std::vector<std::string> strategies =
            strategy.empty() ? config.strategies : std::vector<std::string>{strategy};

        if (synth->parsed()) {
            mgrec::cmd_synth(config, args.force);
        } else if (quantize->parsed()) {
            mgrec::cmd_quantize(config, args.force);
        } else if (train->parsed()) {
            for (const std::string& s : strategies) {
                mgrec::cmd_train(config, s, args.force, args.verbose);
            }
        } else if (eval->parsed()) {
            for (const std::string& s : strategies) {
                mgrec::cmd_eval(config, s, args.force, args.unconstrained);
            }
        } else if (report->parsed()) {
            mgrec::cmd_report(config);
        } else if (ablate->parsed()) {
            mgrec::cmd_ablate(config, axis, args.force, args.verbose);
        } else if (run->parsed()) {
            mgrec::run_pipeline(config, args.force, args.verbose);
        }
    } catch (const mgrec::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const mgrec::FormatError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
