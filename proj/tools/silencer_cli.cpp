#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "silencer/pipeline/commands.hpp"

namespace fs = std::filesystem;
using namespace silencer::pipeline;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    Inputs inputs;
    std::optional<std::size_t> pair;
};

// --config wins; otherwise a config.json already in the run directory; otherwise defaults.
RunConfig resolve_config(const Options& o) {
    RunConfig cfg;
    if (!o.config.empty()) {
        cfg = load_run_config(o.config);
    } else if (!o.out.empty() && fs::exists(fs::path(o.out) / kConfigFile)) {
        cfg = load_run_config((fs::path(o.out) / kConfigFile).string());
    }
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.out_dir = o.out;
    if (o.pair) cfg.trajectory_pair = *o.pair;
    try {
        cfg.validate();
    } catch (const silencer::PreconditionError& e) {
        throw silencer::ConfigError(e.what());
    }
    return cfg;
}

CLI::App* stage(CLI::App& app, const std::string& name, const std::string& help, Options& o) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "Run config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override the run seed");
    sub->add_option("--out", o.out, "Run directory");
    return sub;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Routing-trace safety expert analysis on a planted toy MoE"};
    app.require_subcommand(1);
    Options o;

    auto* build = stage(app, "build-model", "Build the planted model checkpoint", o);
    auto* corpus = stage(app, "gen-corpus", "Generate the twin corpus and record routing traces", o);
    corpus->add_option("--model", o.inputs.model, "Model checkpoint");
    auto* train = stage(app, "train-classifier", "Train the trace classifier", o);
    train->add_option("--corpus", o.inputs.corpus, "Trace file");
    auto* attr = stage(app, "attribute", "Score local experts and write rankings", o);
    attr->add_option("--classifier", o.inputs.classifier, "Classifier checkpoint");
    attr->add_option("--corpus", o.inputs.corpus, "Trace file");
    auto* attack = stage(app, "attack", "Run the silencing strategies", o);
    attack->add_option("--model", o.inputs.model, "Model checkpoint");
    attack->add_option("--attribution", o.inputs.attribution, "attribution.json from the attribute stage");
    auto* traj = stage(app, "trajectory", "Per-token refusal probability of one eval twin pair", o);
    traj->add_option("--model", o.inputs.model, "Model checkpoint");
    traj->add_option("--classifier", o.inputs.classifier, "Classifier checkpoint");
    traj->add_option("--pair", o.pair, "Eval pair index");
    auto* report = app.add_subcommand("report", "Summarize a run directory");
    std::string report_dir;
    report->add_option("dir", report_dir, "Run directory")->required();
    auto* all = stage(app, "run-all", "Run every stage and the report", o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        fs::path written;
        if (*report) {
            written = cmd_report(report_dir);
        } else {
            const RunConfig cfg = resolve_config(o);
            if (*build) written = cmd_build_model(cfg);
            else if (*corpus) written = cmd_gen_corpus(cfg, o.inputs);
            else if (*train) written = cmd_train_classifier(cfg, o.inputs);
            else if (*attr) written = cmd_attribute(cfg, o.inputs);
            else if (*attack) written = cmd_attack(cfg, o.inputs);
            else if (*traj) written = cmd_trajectory(cfg, o.inputs);
            else if (*all) written = cmd_run_all(cfg);
        }
        std::cout << written.string() << "\n";
        return kExitOk;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e);
    }
}
