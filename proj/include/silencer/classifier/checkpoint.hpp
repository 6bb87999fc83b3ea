#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "silencer/classifier/classifier.hpp"
#include "silencer/error.hpp"
#include "silencer/moe/checkpoint.hpp"

namespace silencer::classifier {

inline constexpr int kClassifierCheckpointVersion = 1;

inline nlohmann::json to_json(const ClassifierConfig& c) {
    return {{"embed_dim", c.embed_dim},   {"hidden_dim", c.hidden_dim}, {"variant", to_string(c.variant)},
            {"learning_rate", c.learning_rate}, {"beta1", c.beta1},     {"beta2", c.beta2},
            {"epsilon", c.epsilon},       {"max_epochs", c.max_epochs}, {"patience", c.patience},
            {"batch_size", c.batch_size}, {"seed", c.seed}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
    ClassifierConfig c;
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
    c.variant = variant_from_string(j.value("variant", to_string(c.variant)));
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

namespace detail {

inline nlohmann::json lstm_to_json(const LstmWeights& w) {
    return {{"w_x", moe::detail::tensor_to_json(w.w_x)},
            {"w_h", moe::detail::tensor_to_json(w.w_h)},
            {"b", moe::detail::tensor_to_json(w.b)}};
}

inline LstmWeights lstm_from_json(const nlohmann::json& j) {
    return {moe::detail::tensor_from_json(j.at("w_x")), moe::detail::tensor_from_json(j.at("w_h")),
            moe::detail::tensor_from_json(j.at("b"))};
}

} // namespace detail

inline nlohmann::json to_json(const TraceClassifier& clf) {
    const ClassifierParams& p = clf.params();
    nlohmann::json params = {{"embedding", moe::detail::tensor_to_json(p.embedding)},
                             {"outer", detail::lstm_to_json(p.outer)},
                             {"w_c", moe::detail::tensor_to_json(p.w_c)},
                             {"b_c", moe::detail::tensor_to_json(p.b_c)}};
    if (p.inner) {
        params["inner"] = detail::lstm_to_json(*p.inner);
    }
    return {{"format", "trace-classifier-checkpoint"},
            {"version", kClassifierCheckpointVersion},
            {"config", to_json(clf.config())},
            {"dims",
             {{"num_layers", clf.dims().num_layers},
              {"num_experts", clf.dims().num_experts},
              {"top_k", clf.dims().top_k}}},
            {"params", params}};
}

inline TraceClassifier classifier_from_json(const nlohmann::json& j) {
    if (j.value("format", std::string{}) != "trace-classifier-checkpoint") {
        throw ConfigError("not a trace-classifier checkpoint");
    }
    if (j.value("version", 0) != kClassifierCheckpointVersion) {
        throw ConfigError("unsupported classifier checkpoint version " + std::to_string(j.value("version", 0)));
    }
    const ClassifierConfig cfg = classifier_config_from_json(j.at("config"));
    const auto& d = j.at("dims");
    const TraceDims dims{d.at("num_layers").get<std::size_t>(), d.at("num_experts").get<std::size_t>(),
                         d.at("top_k").get<std::size_t>()};
    const auto& pj = j.at("params");
    ClassifierParams p;
    p.embedding = moe::detail::tensor_from_json(pj.at("embedding"));
    p.outer = detail::lstm_from_json(pj.at("outer"));
    if (pj.contains("inner")) {
        p.inner = detail::lstm_from_json(pj.at("inner"));
    }
    p.w_c = moe::detail::tensor_from_json(pj.at("w_c"));
    p.b_c = moe::detail::tensor_from_json(pj.at("b_c"));
    return TraceClassifier(cfg, dims, std::move(p));
}

inline void save_classifier(const std::string& path, const TraceClassifier& clf) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw Error("cannot open " + path + " for writing");
    }
    out << to_json(clf).dump() << '\n';
}

inline TraceClassifier load_classifier(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open classifier checkpoint " + path);
    }
    try {
        return classifier_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": malformed classifier checkpoint: " + e.what());
    }
}

} // namespace silencer::classifier
