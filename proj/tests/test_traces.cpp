#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "silencer/moe/model.hpp"
#include "silencer/traces/collect.hpp"
#include "silencer/traces/trace_io.hpp"
#include "silencer/traces/twin.hpp"

using namespace silencer;
using namespace silencer::traces;

namespace {

moe::MoEConfig default_config(std::uint64_t seed = 5) {
    moe::MoEConfig cfg;
    cfg.seed = seed;
    return cfg;
}

const moe::MoEModel& planted() {
    static const moe::MoEModel model = [] {
        const auto cfg = default_config();
        return moe::build_planted_model(cfg, moe::make_plant(cfg, 3, 6, 5));
    }();
    return model;
}

const TraceCorpus& planted_corpus() {
    static const TraceCorpus corpus = [] {
        const auto& m = planted();
        return collect_traces(m, generate_twin_corpus(m.config(), m.plant(), 200, {6, 16}, 42));
    }();
    return corpus;
}

// Random, structurally valid corpus for format property tests.
TraceCorpus random_corpus(numerics::Rng& rng) {
    TraceCorpus c;
    c.header.model_id = "random-" + std::to_string(rng.index(1000));
    c.header.num_layers = 1 + rng.index(6);
    c.header.num_experts = 2 + rng.index(300);
    c.header.top_k = 1 + rng.index(std::min<std::size_t>(c.header.num_experts - 1, 4));
    c.header.vocab_size = 8 + rng.index(5000);
    if (rng.index(2) == 0) {
        c.header.metadata["seed"] = std::to_string(rng.next());
        c.header.metadata["note"] = "round trip";
    }
    const std::size_t n = rng.index(12);
    const bool gates = rng.index(2) == 0;
    for (std::size_t i = 0; i < n; ++i) {
        RoutingTrace tr;
        tr.prompt_id = static_cast<std::uint32_t>(rng.next());
        tr.pair_id = static_cast<std::uint32_t>(rng.next());
        tr.label = rng.index(2) ? Label::Malicious : Label::Benign;
        tr.num_layers = c.header.num_layers;
        tr.top_k = c.header.top_k;
        const std::size_t T = rng.index(20);
        for (std::size_t t = 0; t < T; ++t) tr.tokens.push_back(static_cast<TokenId>(rng.index(c.header.vocab_size)));
        for (std::size_t j = 0; j < T * tr.num_layers * tr.top_k; ++j) {
            tr.selections.push_back(static_cast<std::uint16_t>(rng.index(c.header.num_experts)));
            if (gates) {
                // float32-representable so the round trip is exact
                tr.gates.push_back(static_cast<double>(static_cast<float>(rng.uniform(1e-3, 1.0))));
            }
        }
        c.traces.push_back(std::move(tr));
    }
    return c;
}

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

} // namespace

TEST(TwinCorpus, SizesAndInvariants) {
    const auto& m = planted();
    const auto pairs = generate_twin_corpus(m.config(), m.plant(), 200, {6, 16}, 1);
    ASSERT_EQ(pairs.size(), 200u);
    for (const auto& p : pairs) {
        ASSERT_EQ(p.malicious.size(), p.benign.size());
        ASSERT_FALSE(p.divergence_positions.empty());
        ASSERT_LE(p.divergence_positions.size(), 2u);
        EXPECT_GE(p.malicious.size(), 6u);
        EXPECT_LE(p.malicious.size(), 16u);
        const std::set<std::size_t> div(p.divergence_positions.begin(), p.divergence_positions.end());
        EXPECT_EQ(div.count(0), 0u);
        for (std::size_t i = 0; i < p.benign.size(); ++i) {
            EXPECT_FALSE(m.plant().is_trigger(p.benign[i]));
            EXPECT_EQ(p.malicious[i] != p.benign[i], div.count(i) == 1);
            if (div.count(i)) {
                EXPECT_TRUE(m.plant().is_trigger(p.malicious[i]));
            }
        }
    }
}

TEST(TwinCorpus, DeterministicGivenSeed) {
    const auto& m = planted();
    EXPECT_EQ(generate_twin_corpus(m.config(), m.plant(), 50, {4, 64}, 9),
              generate_twin_corpus(m.config(), m.plant(), 50, {4, 64}, 9));
    EXPECT_NE(generate_twin_corpus(m.config(), m.plant(), 50, {4, 64}, 9),
              generate_twin_corpus(m.config(), m.plant(), 50, {4, 64}, 10));
}

TEST(TwinCorpus, PrefixIdenticalBeforeDivergence) {
    const auto& m = planted();
    TwinPair pair;
    // a length-10 pair diverging only at index 5
    for (const auto& p : generate_twin_corpus(m.config(), m.plant(), 2000, {10, 10}, 17)) {
        if (p.divergence_positions == std::vector<std::size_t>{5}) {
            pair = p;
            break;
        }
    }
    ASSERT_EQ(pair.divergence_positions, std::vector<std::size_t>{5});
    EXPECT_TRUE(std::equal(pair.malicious.begin(), pair.malicious.begin() + 5, pair.benign.begin()));
    EXPECT_NE(pair.malicious[5], pair.benign[5]);
    const auto a = m.route(pair.malicious);
    const auto b = m.route(pair.benign);
    const std::size_t cut = 5 * a.num_layers * a.top_k;
    EXPECT_TRUE(std::equal(a.selections.begin(), a.selections.begin() + static_cast<std::ptrdiff_t>(cut),
                           b.selections.begin()));
}

TEST(TwinCorpus, Preconditions) {
    const auto& m = planted();
    EXPECT_THROW(generate_twin_corpus(m.config(), m.plant(), 0, {6, 16}, 1), PreconditionError);
    EXPECT_THROW(generate_twin_corpus(m.config(), m.plant(), 5, {3, 16}, 1), PreconditionError);
    EXPECT_THROW(generate_twin_corpus(m.config(), m.plant(), 5, {6, 65}, 1), PreconditionError);
    moe::MoEConfig tiny = m.config();
    tiny.vocab_size = 8;
    moe::PlantSpec greedy;
    greedy.trigger_tokens = {0, 1, 2, 3, 4, 5, 6};
    greedy.safety_experts = {{0, 0}};
    EXPECT_THROW(generate_twin_corpus(tiny, greedy, 5, {6, 16}, 1), PreconditionError);
}

TEST(Collect, BalancedLabeledCorpus) {
    const auto& corpus = planted_corpus();
    EXPECT_EQ(corpus.traces.size(), 400u);
    EXPECT_TRUE(corpus.balanced());
    EXPECT_EQ(corpus.count(Label::Malicious), 200u);
    for (const auto& tr : corpus.traces) {
        EXPECT_EQ(tr.selections.size(), tr.length() * 6u * 2u);
        EXPECT_EQ(tr.label == Label::Malicious, tr.prompt_id % 2 == 0);
        EXPECT_EQ(tr.pair_id, tr.prompt_id / 2);
    }
    EXPECT_NO_THROW(corpus.validate());
}

TEST(Collect, MaskedExpertAbsentFromEveryTrace) {
    const auto& m = planted();
    const auto masked = m.apply_mask(moe::SilencingMask::local({{0, 0}}));
    const auto corpus = collect_traces(masked, generate_twin_corpus(m.config(), m.plant(), 50, {6, 16}, 3));
    for (const auto& tr : corpus.traces) {
        for (std::size_t t = 0; t < tr.length(); ++t) {
            for (std::size_t k = 0; k < tr.top_k; ++k) {
                EXPECT_NE(tr.expert(t, 0, k), 0u);
            }
        }
    }
}

TEST(Split, EightyTwentyKeepsPairsAndBalance) {
    const auto& corpus = planted_corpus();
    const auto [train, valid] = split(corpus, 0.8, 3);
    EXPECT_EQ(train.traces.size(), 320u);
    EXPECT_EQ(valid.traces.size(), 80u);
    EXPECT_TRUE(train.balanced());
    EXPECT_TRUE(valid.balanced());
    std::set<std::uint32_t> train_pairs;
    for (const auto& t : train.traces) train_pairs.insert(t.pair_id);
    for (const auto& t : valid.traces) EXPECT_EQ(train_pairs.count(t.pair_id), 0u);
}

TEST(Split, TwoPairsHalfAndHalf) {
    TraceCorpus small = planted_corpus();
    small.traces.resize(4);
    const auto [train, valid] = split(small, 0.5, 1);
    ASSERT_EQ(train.traces.size(), 2u);
    ASSERT_EQ(valid.traces.size(), 2u);
    EXPECT_EQ(train.traces[0].pair_id, train.traces[1].pair_id);
    EXPECT_EQ(valid.traces[0].pair_id, valid.traces[1].pair_id);
}

TEST(Split, Preconditions) {
    const auto& corpus = planted_corpus();
    EXPECT_THROW(split(corpus, 1.0, 1), PreconditionError);
    EXPECT_THROW(split(corpus, 0.0, 1), PreconditionError);
    TraceCorpus one = corpus;
    one.traces.resize(2);
    EXPECT_THROW(split(one, 0.8, 1), PreconditionError);
}

TEST(Split, UnpairedTracesSplitPerClass) {
    TraceCorpus c = planted_corpus();
    for (std::size_t i = 0; i < c.traces.size(); ++i) c.traces[i].pair_id = static_cast<std::uint32_t>(1000 + i);
    const auto [train, valid] = split(c, 0.8, 2);
    EXPECT_TRUE(train.balanced());
    EXPECT_TRUE(valid.balanced());
    EXPECT_EQ(train.traces.size() + valid.traces.size(), c.traces.size());
}

TEST(TraceIo, RoundTripOfPlantedCorpus) {
    TraceCorpus corpus = planted_corpus();
    corpus.header.metadata["config_hash"] = "abc";
    const auto path = temp_file("silencer_corpus.trace");
    write_corpus(path.string(), corpus);
    const TraceCorpus back = read_corpus(path.string());
    EXPECT_EQ(back.header, corpus.header);
    ASSERT_EQ(back.traces.size(), corpus.traces.size());
    for (std::size_t i = 0; i < back.traces.size(); ++i) {
        EXPECT_EQ(back.traces[i].selections, corpus.traces[i].selections);
        EXPECT_EQ(back.traces[i].tokens, corpus.traces[i].tokens);
        for (std::size_t j = 0; j < back.traces[i].gates.size(); ++j) {
            EXPECT_EQ(back.traces[i].gates[j], static_cast<double>(static_cast<float>(corpus.traces[i].gates[j])));
        }
    }
    std::filesystem::remove(path);
}

TEST(TraceIo, RoundTripPropertyOverRandomCorpora) {
    numerics::Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        const TraceCorpus c = random_corpus(rng);
        ASSERT_EQ(decode_corpus(encode_corpus(c)), c) << "trial " << trial;
    }
}

TEST(TraceIo, TruncationReportsOffset) {
    const auto bytes = encode_corpus(planted_corpus());
    numerics::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t cut = rng.index(bytes.size());
        std::vector<char> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        try {
            decode_corpus(truncated);
            FAIL() << "truncated file parsed at cut " << cut;
        } catch (const FormatError& e) {
            EXPECT_LE(e.offset(), cut);
            EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
        }
    }
}

TEST(TraceIo, RejectsBadMagicVersionAndTrailingBytes) {
    auto bytes = encode_corpus(planted_corpus());
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(decode_corpus(bad_magic), FormatError);
    auto bad_version = bytes;
    bad_version[8] = 9;
    try {
        decode_corpus(bad_version);
        FAIL();
    } catch (const FormatError& e) {
        EXPECT_EQ(e.offset(), 8u);
    }
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(decode_corpus(trailing), FormatError);
}

TEST(TraceIo, DimensionMismatchAtLoad) {
    const auto path = temp_file("silencer_dims.trace");
    write_corpus(path.string(), planted_corpus());
    EXPECT_THROW(read_corpus(path.string(), ExpectedDims{4, 8, 2}), DimensionError);
    EXPECT_NO_THROW(read_corpus(path.string(), ExpectedDims{6, 8, 2}));
    std::filesystem::remove(path);
}

TEST(TraceIo, HeaderInconsistentRecordIsRejected) {
    TraceCorpus c = planted_corpus();
    c.traces.resize(2);
    auto bytes = encode_corpus(c);
    // patch the header to claim only 2 experts; stored selections exceed it
    bytes[16] = 2;
    bytes[17] = bytes[18] = bytes[19] = 0;
    EXPECT_THROW(decode_corpus(bytes), DimensionError);
}

TEST(RoutingDivergence, LastTokenExceedsFirstToken) {
    const auto& corpus = planted_corpus();
    const double first = routing_divergence(corpus, TokenPosition::First);
    const double last = routing_divergence(corpus, TokenPosition::Last);
    EXPECT_EQ(first, 0.0);
    EXPECT_GT(last, first);
}
