/*
 * SPDX-License-Identifier: Apache-2.0
 */

// aadi: verify | train | eval | anchor-stats | render

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "aadi/aadi.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

aadi::ExperimentConfig load(const CommonArgs& a) {
    aadi::ExperimentConfig cfg = a.config.empty() ? aadi::ExperimentConfig{} : aadi::load_config(a.config);
    if (a.seed) cfg.seed = *a.seed;
    if (!a.out.empty()) cfg.output_dir = a.out;
    return cfg;
}

void write_metrics(const fs::path& dir, const std::string& name, const aadi::MetricsDocument& doc) {
    fs::create_directories(dir);
    aadi::write_file_atomic(dir / name, doc.to_text());
}

void print_metrics(const aadi::MetricsDocument& doc) {
    for (const auto& [k, v] : doc.metrics) {
        std::cout << k << " = ";
        if (v) {
            std::cout << aadi::detail::format_double(*v);
        } else {
            std::cout << "n/a";
        }
        std::cout << "\n";
    }
}

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config, "experiment config file (key = value)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", a.seed, "override the config seed");
    cmd->add_option("--out", a.out, "output directory (overrides output_dir)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Anchor augmentation for region proposal networks"};
    app.require_subcommand(1);

    CommonArgs common;
    std::string checkpoint;
    std::string annotations;
    int instances = 100;
    bool corrupt = false;

    auto* verify = app.add_subcommand("verify", "conv/FC equivalence and gradient checks");
    verify->add_option("--seed", common.seed, "random seed");
    verify->add_option("--instances", instances, "random equivalence instances")->check(CLI::PositiveNumber);
    verify->add_flag("--corrupt-layout", corrupt, "negative control: permute the FC weight layout");

    auto* train = app.add_subcommand("train", "train the heads on synthetic scenes");
    add_common(train, common);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out synthetic split");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);

    auto* stats = app.add_subcommand("anchor-stats", "anchor quality against COCO-style annotations");
    add_common(stats, common);
    stats->add_option("--annotations", annotations, "COCO JSON file")->required()->check(CLI::ExistingFile);

    auto* render = app.add_subcommand("render", "SVG of anchors and proposals for one scene");
    add_common(render, common);
    render->add_option("--checkpoint", checkpoint, "checkpoint file (default: untrained heads)")
        ->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify->parsed()) {
            aadi::VerifyOptions opt;
            if (common.seed) opt.seed = *common.seed;
            opt.instances = instances;
            opt.corrupt_layout = corrupt;
            const auto report = aadi::cmd_verify(opt);
            std::cout << report.text;
            return report.passed ? 0 : 1;
        }
        const aadi::ExperimentConfig cfg = load(common);
        const fs::path out = cfg.output_dir;
        if (train->parsed()) {
            auto result = aadi::cmd_train(cfg, &std::cerr);
            fs::create_directories(out);
            aadi::save_checkpoint(out / "checkpoint.bin", result.heads);
            write_metrics(out, "metrics.json", result.doc);
            print_metrics(result.doc);
            std::cout << "wrote " << (out / "metrics.json").string() << " and " << (out / "checkpoint.bin").string()
                      << "\n";
        } else if (eval->parsed()) {
            const auto heads = aadi::load_checkpoint(checkpoint);
            const auto doc = aadi::cmd_eval(cfg, heads);
            write_metrics(out, "eval_metrics.json", doc);
            print_metrics(doc);
        } else if (stats->parsed()) {
            const auto set = aadi::load_coco_annotations(annotations);
            const auto doc = aadi::cmd_anchor_stats(cfg, set);
            write_metrics(out, "anchor_stats.json", doc);
            print_metrics(doc);
        } else if (render->parsed()) {
            const auto heads = checkpoint.empty() ? aadi::initial_heads(cfg) : aadi::load_checkpoint(checkpoint);
            fs::create_directories(out);
            aadi::write_file_atomic(out / "scene.svg", aadi::cmd_render(cfg, heads));
            std::cout << "wrote " << (out / "scene.svg").string() << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "aadi: error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
