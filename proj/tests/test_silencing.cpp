#include <gtest/gtest.h>

#include <set>

#include "silencer/attribution/attribution.hpp"
#include "silencer/moe/model.hpp"
#include "silencer/silencing/silencing.hpp"
#include "silencer/traces/collect.hpp"
#include "silencer/traces/twin.hpp"

using namespace silencer;
using namespace silencer::silencing;
using attribution::ExpertRanking;
using attribution::Scope;

namespace {

struct Fixture {
    moe::MoEModel model;
    Prompts malicious;
    moe::UtilityProbe probe;
};

Fixture make_fixture(moe::PlantLayout layout, std::uint64_t seed) {
    moe::MoEConfig cfg;
    cfg.seed = seed;
    auto model = moe::build_planted_model(cfg, moe::make_plant(cfg, 3, 6, seed, layout));
    Prompts mal;
    for (const auto& p : traces::generate_twin_corpus(cfg, model.plant(), 60, {6, 16}, seed + 1)) {
        mal.push_back(p.malicious);
    }
    moe::UtilityProbe probe(model, traces::generate_utility_set(cfg, model.plant(), 60, 24, seed + 2));
    return {std::move(model), std::move(mal), std::move(probe)};
}

const Fixture& distinct() {
    static const Fixture f = make_fixture(moe::PlantLayout::DistinctIndices, 4);
    return f;
}

const Fixture& shared() {
    static const Fixture f = make_fixture(moe::PlantLayout::SharedIndex, 6);
    return f;
}

AttackContext context(const Fixture& f) { return {f.model, f.malicious, f.probe, f.model.plant().safety_experts}; }

ExpertRanking oracle(const Fixture& f) {
    const auto& c = f.model.config();
    return attribution::oracle_ranking(f.model.plant().safety_experts, c.num_layers, c.num_experts);
}

} // namespace

TEST(EvaluateAsr, UnmaskedModelRefuses) {
    const auto& f = distinct();
    const AsrResult r = evaluate_asr(f.model, f.malicious, f.probe);
    EXPECT_LE(r.asr, 0.05);
    EXPECT_DOUBLE_EQ(r.perplexity_ratio, 1.0);
    EXPECT_EQ(r.counts.refuse + r.counts.comply + r.counts.incoherent, f.malicious.size());
}

TEST(EvaluateAsr, SilencingThePlantComplies) {
    const auto& f = distinct();
    const auto masked = f.model.apply_mask(SilencingMask::local(f.model.plant().safety_experts));
    EXPECT_GE(evaluate_asr(masked, f.malicious, f.probe).asr, 0.95);
}

TEST(EvaluateAsr, EmptyPromptSetThrows) {
    const auto& f = distinct();
    EXPECT_THROW(evaluate_asr(f.model, {}, f.probe), PreconditionError);
}

TEST(EvaluateAsr, IncoherentVerdictsNeverCount) {
    const auto& f = distinct();
    const auto& c = f.model.config();
    std::vector<LocalExpert> heavy;
    for (std::size_t l = 0; l < c.num_layers; ++l)
        for (std::size_t e = 1; e < c.num_experts; ++e) heavy.push_back({l, e});
    const auto masked = f.model.apply_mask(SilencingMask::local(heavy));
    const AsrResult r = evaluate_asr(masked, f.malicious, f.probe);
    ASSERT_GT(r.perplexity_ratio, f.probe.incoherence_factor());
    EXPECT_EQ(r.counts.incoherent, f.malicious.size());
    EXPECT_EQ(r.counts.comply, 0u);
    EXPECT_EQ(r.asr, 0.0);
}

TEST(EvaluateAsr, MaskingNeverMutatesTheBaseModel) {
    const auto& f = distinct();
    const auto before = f.model.forward(f.malicious[0], false).logits;
    const AsrResult r0 = evaluate_asr(f.model, f.malicious, f.probe);
    const auto masked = f.model.apply_mask(SilencingMask::local(f.model.plant().safety_experts));
    evaluate_asr(masked, f.malicious, f.probe);
    EXPECT_EQ(f.model.forward(f.malicious[0], false).logits, before);
    EXPECT_EQ(evaluate_asr(f.model, f.malicious, f.probe).verdicts, r0.verdicts);
}

TEST(Adaptive, OracleRankingFlipsRefusalWithinThePlant) {
    const auto& f = distinct();
    const AttackReport r = adaptive_silence(context(f), oracle(f), AttackConfig{});
    EXPECT_LE(r.baseline_asr(), 0.05);
    EXPECT_GE(r.peak().asr, 0.95);
    EXPECT_LE(r.peak().mask.size(), f.model.plant().safety_experts.size());
    for (const auto& e : r.peak().mask) {
        EXPECT_TRUE(SilencingMask::local(f.model.plant().safety_experts).contains(e));
    }
    EXPECT_EQ(r.termination, "full compliance");
}

TEST(Adaptive, MasksAreNestedAndGrow) {
    const auto& f = distinct();
    AttackConfig cfg;
    cfg.patience_steps = 4;
    const AttackReport r = adaptive_silence(context(f), attribution::reversed(oracle(f)), cfg);
    ASSERT_GE(r.steps.size(), 2u);
    for (std::size_t i = 1; i < r.steps.size(); ++i) {
        EXPECT_GT(r.steps[i].mask.size(), r.steps[i - 1].mask.size());
        const auto prev = SilencingMask::local(r.steps[i - 1].mask);
        EXPECT_TRUE(prev.is_subset_of(SilencingMask::local(r.steps[i].mask)));
        EXPECT_GE(r.steps[i].asr, 0.0);
        EXPECT_LE(r.steps[i].asr, 1.0);
    }
}

TEST(Adaptive, WorstFirstIsBelowBestFirstAtEqualSize) {
    const auto& f = distinct();
    const AttackReport best = adaptive_silence(context(f), oracle(f), AttackConfig{});
    const AttackReport worst = adaptive_silence(context(f), attribution::reversed(oracle(f)), AttackConfig{});
    const std::size_t size = best.peak().mask.size();
    bool compared = false;
    for (const auto& s : worst.steps) {
        if (s.mask.size() == size) {
            EXPECT_LT(s.asr, best.peak().asr);
            compared = true;
        }
    }
    EXPECT_TRUE(compared);
}

TEST(Adaptive, SkipsExpertsThatWouldEmptyALayer) {
    const auto& f = distinct();
    const auto& c = f.model.config();
    std::vector<LocalExpert> layer0;
    for (std::size_t e = 0; e < c.num_experts; ++e) layer0.push_back({0, e});
    AttackConfig cfg;
    cfg.incoherence_factor = 1e12;
    cfg.patience_steps = 100;
    const moe::UtilityProbe lenient(f.model, f.probe.utility_set(), cfg.incoherence_factor);
    const AttackContext ctx{f.model, f.malicious, lenient, {}};
    const AttackReport r = adaptive_silence(ctx, attribution::oracle_ranking(layer0, c.num_layers, c.num_experts), cfg);
    ASSERT_FALSE(r.skipped.empty());
    EXPECT_EQ(r.skipped.front(), (LocalExpert{0, c.num_experts - 1}));
    for (const auto& e : r.skipped) EXPECT_EQ(e.expert, c.num_experts - 1);
    for (const auto& s : r.steps) {
        EXPECT_LT(SilencingMask::local(s.mask).masked_in_layer(0), c.num_experts);
    }
}

TEST(Adaptive, RespectsBudget) {
    const auto& f = distinct();
    AttackConfig cfg;
    cfg.max_silenced_fraction = 0.1;
    cfg.patience_steps = 100;
    const AttackReport r = adaptive_silence(context(f), attribution::reversed(oracle(f)), cfg);
    EXPECT_EQ(r.termination, "budget exhausted");
    EXPECT_LE(r.steps.back().local_fraction, 0.1);
}

TEST(Adaptive, Preconditions) {
    const auto& f = distinct();
    EXPECT_THROW(adaptive_silence(context(f), ExpertRanking{}, AttackConfig{}), PreconditionError);
    ExpertRanking global = oracle(f);
    global.scope = Scope::Global;
    EXPECT_THROW(adaptive_silence(context(f), global, AttackConfig{}), PreconditionError);
    AttackConfig tiny;
    tiny.max_silenced_fraction = 0.01;
    EXPECT_THROW(adaptive_silence(context(f), oracle(f), tiny), PreconditionError);
    AttackConfig mismatched;
    mismatched.incoherence_factor = 3.0;
    EXPECT_THROW(adaptive_silence(context(f), oracle(f), mismatched), PreconditionError);
    AttackConfig bad;
    bad.one_shot_fraction = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Adaptive, SafetyFractionUsesPositiveExperts) {
    const auto& f = distinct();
    const AttackReport r = adaptive_silence(context(f), oracle(f), AttackConfig{});
    EXPECT_EQ(r.safety_expert_count, 3u);
    const double expected = static_cast<double>(r.peak().mask.size()) / 3.0;
    EXPECT_DOUBLE_EQ(r.peak().safety_fraction, expected);
}

TEST(OneShot, CoveringThePlantComplies) {
    const auto& f = distinct();
    const AttackReport r = one_shot_silence(context(f), oracle(f), 3.0 / 48.0);
    ASSERT_EQ(r.steps.size(), 2u);
    EXPECT_EQ(r.steps[1].mask.size(), 3u);
    EXPECT_GE(r.steps[1].asr, 0.9);
    EXPECT_THROW(one_shot_silence(context(f), oracle(f), 0.0), PreconditionError);
    EXPECT_THROW(one_shot_silence(context(f), oracle(f), 1.5), PreconditionError);
}

TEST(Random, SameSeedSameMask) {
    const auto& f = distinct();
    const auto a = random_silence_count(context(f), 5, 99);
    const auto b = random_silence_count(context(f), 5, 99);
    const auto c = random_silence_count(context(f), 5, 100);
    EXPECT_EQ(a.steps[1].mask, b.steps[1].mask);
    EXPECT_EQ(a.steps[1].mask.size(), 5u);
    EXPECT_NE(a.steps[1].mask, c.steps[1].mask);
    EXPECT_THROW(random_silence_count(context(f), 49, 1), PreconditionError);
    EXPECT_THROW(random_silence(context(f), 0.0, 1), PreconditionError);
}

TEST(Random, FullFractionIsClampedPerLayer) {
    const auto& f = distinct();
    const auto& c = f.model.config();
    const AttackReport r = random_silence(context(f), 1.0, 3);
    EXPECT_EQ(r.skipped.size(), c.num_layers);
    const auto mask = SilencingMask::local(r.steps[1].mask);
    for (std::size_t l = 0; l < c.num_layers; ++l) EXPECT_EQ(mask.masked_in_layer(l), c.num_experts - 1);
    EXPECT_NE(r.termination.find("clamped"), std::string::npos);
}

TEST(Global, SharedIndexPlantFlipsWithOneGlobalExpert) {
    const auto& f = shared();
    const auto& plant = f.model.plant().safety_experts;
    ExpertRanking global;
    global.scope = Scope::Global;
    global.entries.push_back({attribution::kAll, plant.front().expert, 1.0});
    for (std::size_t e = 0; e < f.model.config().num_experts; ++e) {
        if (e != plant.front().expert) global.entries.push_back({attribution::kAll, e, 0.0});
    }
    const AttackReport r = global_silence(context(f), global, AttackConfig{});
    EXPECT_EQ(r.peak_step, 1u);
    EXPECT_GE(r.peak().asr, 0.95);
    EXPECT_EQ(r.peak().mask.size(), f.model.config().num_layers);
}

TEST(Global, DistinctIndicesNeedMoreMaskedPairs) {
    const auto& f = distinct();
    const auto& c = f.model.config();
    const AttackReport local = adaptive_silence(context(f), oracle(f), AttackConfig{});
    ExpertRanking global;
    global.scope = Scope::Global;
    std::set<std::size_t> seen;
    for (const auto& e : f.model.plant().safety_experts) {
        if (seen.insert(e.expert).second) global.entries.push_back({attribution::kAll, e.expert, 1.0});
    }
    for (std::size_t e = 0; e < c.num_experts; ++e) {
        if (!seen.count(e)) global.entries.push_back({attribution::kAll, e, 0.0});
    }
    AttackConfig cfg;
    cfg.max_silenced_fraction = 0.75;
    const AttackReport g = global_silence(context(f), global, cfg);
    EXPECT_GE(g.peak().asr, local.peak().asr);
    EXPECT_GT(g.peak().mask.size(), local.peak().mask.size());
}

TEST(Global, ExpertAbsentFromEveryTraceLeavesAsrUnchanged) {
    const auto& f = distinct();
    const auto& c = f.model.config();
    // make expert 7 unreachable at every layer; it then never appears in a trace
    auto w = std::make_shared<moe::ModelWeights>(f.model.weights());
    for (auto& bias : w->router_bias) bias[7] = -60.0;
    const moe::MoEModel model(w);
    for (const auto& p : f.malicious) {
        const auto tr = model.route(p);
        for (std::uint16_t e : tr.selections) ASSERT_NE(e, 7u);
    }
    const moe::UtilityProbe probe(model, f.probe.utility_set());
    const AttackContext ctx{model, f.malicious, probe, {}};
    ExpertRanking global;
    global.scope = Scope::Global;
    global.entries.push_back({attribution::kAll, 7, 1.0});
    AttackConfig cfg;
    cfg.patience_steps = 1;
    const AttackReport r = global_silence(ctx, global, cfg);
    ASSERT_EQ(r.steps.size(), 2u);
    EXPECT_EQ(r.steps[1].mask.size(), c.num_layers);
    EXPECT_EQ(r.steps[1].asr, r.steps[0].asr);
}

TEST(Strategy, NamesRoundTrip) {
    for (Strategy s : {Strategy::Adaptive, Strategy::OneShot, Strategy::Random, Strategy::Global}) {
        EXPECT_EQ(strategy_from_string(to_string(s)), s);
    }
    EXPECT_THROW(strategy_from_string("brute"), ConfigError);
}
