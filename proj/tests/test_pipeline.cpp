#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <gtest/gtest.h>

#include "silencer/pipeline/commands.hpp"

namespace fs = std::filesystem;
using namespace silencer;
using namespace silencer::pipeline;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("silencer_pipeline_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

struct CliResult {
    int code = -1;
    std::string err;
};

CliResult cli(const std::string& args, const fs::path& work) {
    const fs::path err = work / "stderr.txt";
    const std::string cmd = std::string(SILENCER_CLI) + " " + args + " > /dev/null 2> " + err.string();
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.err = read_file(err);
    return r;
}

RunConfig small_config() {
    RunConfig c;
    c.corpus.pairs = 60;
    c.corpus.eval_pairs = 30;
    c.corpus.utility_sequences = 30;
    c.training.classifier.max_epochs = 4;
    c.training.hierarchical = false;
    return c;
}

void write_config(const fs::path& path, const RunConfig& c) {
    std::ofstream(path) << to_json(c).dump(2);
}

} // namespace

TEST(RunConfig, JsonRoundTrip) {
    RunConfig c = small_config();
    c.seed = 42;
    c.plant.layout = moe::PlantLayout::SharedIndex;
    c.attack.strategies = {silencing::Strategy::Global, silencing::Strategy::Adaptive};
    c.trajectory_pair = 3;
    const RunConfig back = run_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(RunConfig, EmptyObjectGivesDefaults) {
    EXPECT_EQ(to_json(run_config_from_json(json::object())), to_json(RunConfig{}));
}

TEST(RunConfig, RejectsUnknownKeysAndBadValues) {
    EXPECT_THROW(run_config_from_json({{"sed", 3}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"model", {{"layers", 3}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"version", 2}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"model", {{"top_k", 8}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"corpus", {{"train_fraction", 1.0}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"attack", {{"strategies", {"adaptive", "adaptive"}}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"attack", {{"strategies", {"greedy"}}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"plant", {{"layout", "mixed"}}}}), ConfigError);
    EXPECT_THROW(run_config_from_json({{"model", {{"num_layers", "six"}}}}), ConfigError);
}

TEST(RunConfig, HashCoversSeedButNotOutputDirectory) {
    RunConfig a;
    RunConfig b = a;
    b.out_dir = "elsewhere";
    EXPECT_EQ(config_hash(a), config_hash(b));
    b.seed = a.seed + 1;
    EXPECT_NE(config_hash(a), config_hash(b));
    RunConfig c = a;
    c.attack.attack.patience_steps = 11;
    EXPECT_NE(config_hash(a), config_hash(c));
}

TEST(RunConfig, StageSeedsAreDistinct) {
    RunConfig c;
    const StageSeeds s = stage_seeds(c);
    const std::set<std::uint64_t> derived{s.corpus, s.split, s.classifier, s.hierarchical, s.control,
                                          s.eval,   s.utility, s.random};
    EXPECT_EQ(derived.size(), 8u);
    c.seed = 2;
    EXPECT_NE(stage_seeds(c).corpus, s.corpus);
}

TEST(ExitCodes, DistinctPerErrorKind) {
    EXPECT_EQ(exit_code_for(ConfigError("x")), 2);
    EXPECT_EQ(exit_code_for(DimensionError("x")), 3);
    EXPECT_EQ(exit_code_for(NumericalError("x")), 4);
    EXPECT_EQ(exit_code_for(ArtifactError("x")), 5);
    EXPECT_EQ(exit_code_for(FormatError("x", 3)), 5);
    EXPECT_EQ(exit_code_for(ContractError("x")), 6);
    EXPECT_EQ(exit_code_for(std::runtime_error("x")), 1);
}

TEST(Stages, TrajectoryPairHasOneDivergence) {
    RunConfig c = small_config();
    const moe::MoEModel model = build_model(c);
    const EvalSet eval = make_eval_set(c, model);
    const std::size_t i = pick_trajectory_pair(c, eval.pairs);
    EXPECT_EQ(eval.pairs[i].divergence_positions.size(), 1u);
    for (std::size_t j = 0; j < i; ++j) EXPECT_NE(eval.pairs[j].divergence_positions.size(), 1u);
    c.trajectory_pair = 0;
    EXPECT_EQ(pick_trajectory_pair(c, eval.pairs), 0u);
}

TEST(Stages, RandomBaselineMatchesAdaptivePeakSize) {
    RunConfig c = small_config();
    c.training.classifier.max_epochs = 8;
    const moe::MoEModel model = build_model(c);
    const auto corpus = generate_corpus(c, model);
    const TrainingOutcome t = train_classifiers(c, corpus);
    const AttributionOutcome a = attribute(c, t.flat, corpus);
    const EvalSet eval = make_eval_set(c, model);
    const AttackOutcome out = run_attacks(c, model, a, eval);
    ASSERT_EQ(out.reports.size(), 4u);
    const auto* adaptive = out.find(silencing::Strategy::Adaptive);
    const auto* random = out.find(silencing::Strategy::Random);
    ASSERT_TRUE(adaptive && random);
    EXPECT_EQ(out.random_count_rule, "matched to adaptive peak mask");
    EXPECT_EQ(random->steps.back().mask.size(), adaptive->peak().mask.size());
}

// Default config through the real binary: every stage artifact and a summary.
TEST(Cli, RunAllOnDefaultConfig) {
    const fs::path work = scratch("smoke");
    const fs::path run = work / "run";
    const CliResult r = cli("run-all --out " + run.string(), work);
    ASSERT_EQ(r.code, 0) << r.err;
    for (const char* name : {kModelFile, kCorpusFile, kClassifierFile, kScoresFile, "ranking_local.csv",
                             kAttributionFile, kAttackFile, kAttackCurveFile, kTrajectoryFile, kSummaryMarkdown,
                             kSummaryCsv, kConfigFile}) {
        EXPECT_TRUE(fs::exists(run / name)) << name;
    }
    const std::string summary = read_file(run / kSummaryMarkdown);
    for (const char* name : {kModelFile, kCorpusFile, kClassifierFile, kScoresFile, kAttackFile, kTrajectoryFile}) {
        EXPECT_NE(summary.find(name), std::string::npos) << name;
    }
    const std::string csv = read_file(run / kSummaryCsv);
    EXPECT_NE(csv.find("flat_valid_accuracy,"), std::string::npos);
    EXPECT_NE(csv.find("precision_at_3,"), std::string::npos);
    EXPECT_NE(csv.find("adaptive_peak_asr,"), std::string::npos);

    // the config in the run directory reproduces the hash stamped on the outputs
    const RunConfig cfg = load_run_config((run / kConfigFile).string());
    EXPECT_EQ(provenance_from_csv(read_file(run / kScoresFile), run / kScoresFile), Provenance::of(cfg));

    // manifest hashes match the bytes on disk
    const json manifest = read_json(run / kManifestFile);
    for (const auto& [name, entry] : manifest.at("files").items()) {
        EXPECT_EQ(entry.at("fnv1a64").get<std::string>(), hex64(fnv1a(read_file(run / name)))) << name;
        EXPECT_EQ(entry.at("config_hash").get<std::string>(), Provenance::of(cfg).config_hash) << name;
    }
}

TEST(Cli, RerunIsByteIdentical) {
    const fs::path work = scratch("rerun");
    write_config(work / "small.json", small_config());
    for (const char* d : {"a", "b"}) {
        const CliResult r = cli("run-all --config " + (work / "small.json").string() + " --seed 7 --out " +
                                    (work / d).string(),
                                work);
        ASSERT_EQ(r.code, 0) << r.err;
    }
    std::size_t compared = 0;
    for (const auto& entry : fs::directory_iterator(work / "a")) {
        const std::string name = entry.path().filename().string();
        if (name == kConfigFile || name == kManifestFile) continue;  // both record the output directory
        EXPECT_EQ(read_file(entry.path()), read_file(work / "b" / name)) << name;
        ++compared;
    }
    EXPECT_GE(compared, 12u);
    EXPECT_EQ(read_file(work / "a" / kScoresFile), read_file(work / "b" / kScoresFile));
}

TEST(Cli, StagesChainThroughTheRunDirectory) {
    const fs::path work = scratch("stages");
    const fs::path run = work / "run";
    write_config(work / "small.json", small_config());
    ASSERT_EQ(cli("build-model --config " + (work / "small.json").string() + " --out " + run.string(), work).code, 0);
    // later stages pick up the config recorded in the run directory
    for (const char* stage : {"gen-corpus", "train-classifier", "attribute", "attack"}) {
        const CliResult r = cli(std::string(stage) + " --out " + run.string(), work);
        ASSERT_EQ(r.code, 0) << stage << ": " << r.err;
    }
    ASSERT_EQ(cli("trajectory --pair 2 --out " + run.string(), work).code, 0);
    EXPECT_NE(read_file(run / kTrajectoryFile).find("# pair=2 "), std::string::npos);
    // --pair changed the config, so the report sees mixed hashes
    const CliResult mixed = cli("report " + run.string(), work);
    EXPECT_EQ(mixed.code, kExitArtifact);
    ASSERT_EQ(cli("trajectory --out " + run.string() + " --config " + (work / "small.json").string(), work).code, 0);
    const CliResult r = cli("report " + run.string(), work);
    EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, AttackRejectsRankingFromDeeperModel) {
    const fs::path work = scratch("dims");
    RunConfig six = small_config();
    six.out_dir = (work / "six").string();
    cmd_build_model(six);
    cmd_gen_corpus(six);
    cmd_train_classifier(six);
    cmd_attribute(six);

    RunConfig four = small_config();
    four.model.num_layers = 4;
    write_config(work / "four.json", four);
    ASSERT_EQ(cli("build-model --config " + (work / "four.json").string() + " --out " + (work / "four").string(), work)
                  .code,
              0);

    const fs::path out = work / "attack";
    const CliResult r = cli("attack --config " + (work / "four.json").string() + " --out " + out.string() +
                                " --model " + (work / "four" / kModelFile).string() + " --attribution " +
                                (work / "six" / kAttributionFile).string(),
                            work);
    EXPECT_EQ(r.code, kExitDimension);
    EXPECT_NE(r.err.find("L=6"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find("L=4"), std::string::npos) << r.err;
    EXPECT_NE(r.err.find(kAttributionFile), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(out / kAttackFile));

    // same mismatch for the trajectory stage, which needs classifier and model to agree
    const CliResult t = cli("trajectory --config " + (work / "four.json").string() + " --out " + out.string() +
                                " --model " + (work / "four" / kModelFile).string() + " --classifier " +
                                (work / "six" / kClassifierFile).string(),
                            work);
    EXPECT_EQ(t.code, kExitDimension);
    EXPECT_FALSE(fs::exists(out / kTrajectoryFile));
}

TEST(Cli, ErrorExitCodes) {
    const fs::path work = scratch("errors");
    std::ofstream(work / "bad.json") << R"({"model": {"layers": 6}})";
    EXPECT_EQ(cli("build-model --config " + (work / "bad.json").string() + " --out " + (work / "r").string(), work)
                  .code,
              kExitConfig);
    std::ofstream(work / "broken.json") << "{ not json";
    EXPECT_EQ(cli("build-model --config " + (work / "broken.json").string(), work).code, kExitConfig);
    EXPECT_EQ(cli("no-such-command", work).code, kExitConfig);

    const CliResult missing = cli("gen-corpus --out " + (work / "empty").string(), work);
    EXPECT_EQ(missing.code, kExitArtifact);
    EXPECT_NE(missing.err.find(kModelFile), std::string::npos) << missing.err;

    fs::create_directories(work / "trunc");
    std::ofstream(work / "trunc" / kCorpusFile, std::ios::binary) << "MOETRACE";
    const CliResult trunc = cli("train-classifier --out " + (work / "trunc").string(), work);
    EXPECT_EQ(trunc.code, kExitArtifact);
    EXPECT_NE(trunc.err.find("byte offset"), std::string::npos) << trunc.err;
}
