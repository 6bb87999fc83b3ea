#pragma once

#include <fstream>
#include <memory>
#include <string>

#include <json.hpp>

#include "silencer/error.hpp"
#include "silencer/moe/model.hpp"

namespace silencer::moe {

inline constexpr int kModelCheckpointVersion = 1;

namespace detail {

inline nlohmann::json tensor_to_json(const Tensor& t) {
    return {{"shape", t.shape()}, {"data", t.values()}};
}

inline Tensor tensor_from_json(const nlohmann::json& j) {
    return Tensor(j.at("shape").get<numerics::Shape>(), j.at("data").get<std::vector<double>>());
}

inline nlohmann::json tensors_to_json(const std::vector<Tensor>& ts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const Tensor& t : ts) {
        arr.push_back(tensor_to_json(t));
    }
    return arr;
}

inline std::vector<Tensor> tensors_from_json(const nlohmann::json& j) {
    std::vector<Tensor> out;
    for (const auto& e : j) {
        out.push_back(tensor_from_json(e));
    }
    return out;
}

} // namespace detail

inline nlohmann::json to_json(const MoEConfig& c) {
    return {{"vocab_size", c.vocab_size},   {"embed_dim", c.embed_dim},
            {"num_layers", c.num_layers},   {"num_experts", c.num_experts},
            {"top_k", c.top_k},             {"expert_hidden_dim", c.expert_hidden_dim},
            {"seed", c.seed}};
}

inline MoEConfig moe_config_from_json(const nlohmann::json& j) {
    MoEConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.num_layers = j.value("num_layers", c.num_layers);
    c.num_experts = j.value("num_experts", c.num_experts);
    c.top_k = j.value("top_k", c.top_k);
    c.expert_hidden_dim = j.value("expert_hidden_dim", c.expert_hidden_dim);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline nlohmann::json to_json(const PlantSpec& p) {
    nlohmann::json experts = nlohmann::json::array();
    for (const LocalExpert& e : p.safety_experts) {
        experts.push_back({e.layer, e.expert});
    }
    return {{"trigger_tokens", p.trigger_tokens}, {"safety_experts", experts}, {"steer_strength", p.steer_strength}};
}

inline PlantSpec plant_from_json(const nlohmann::json& j) {
    PlantSpec p;
    p.trigger_tokens = j.at("trigger_tokens").get<std::vector<TokenId>>();
    for (const auto& e : j.at("safety_experts")) {
        p.safety_experts.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>()});
    }
    p.steer_strength = j.at("steer_strength").get<double>();
    return p;
}

inline nlohmann::json to_json(const BuildParams& b) {
    return {{"mix_weight", b.mix_weight},
            {"router_scale", b.router_scale},
            {"plant_router_gain", b.plant_router_gain},
            {"plant_router_penalty", b.plant_router_penalty},
            {"expert_scale", b.expert_scale},
            {"refuse_gain", b.refuse_gain},
            {"refuse_threshold", b.refuse_threshold},
            {"lm_ridge", b.lm_ridge},
            {"lm_fit_sequences", b.lm_fit_sequences},
            {"lm_fit_length", b.lm_fit_length},
            {"contract_pairs", b.contract_pairs},
            {"contract_accuracy", b.contract_accuracy},
            {"max_attempts", b.max_attempts},
            {"steer_growth", b.steer_growth}};
}

inline BuildParams build_params_from_json(const nlohmann::json& j) {
    BuildParams b;
    b.mix_weight = j.value("mix_weight", b.mix_weight);
    b.router_scale = j.value("router_scale", b.router_scale);
    b.plant_router_gain = j.value("plant_router_gain", b.plant_router_gain);
    b.plant_router_penalty = j.value("plant_router_penalty", b.plant_router_penalty);
    b.expert_scale = j.value("expert_scale", b.expert_scale);
    b.refuse_gain = j.value("refuse_gain", b.refuse_gain);
    b.refuse_threshold = j.value("refuse_threshold", b.refuse_threshold);
    b.lm_ridge = j.value("lm_ridge", b.lm_ridge);
    b.lm_fit_sequences = j.value("lm_fit_sequences", b.lm_fit_sequences);
    b.lm_fit_length = j.value("lm_fit_length", b.lm_fit_length);
    b.contract_pairs = j.value("contract_pairs", b.contract_pairs);
    b.contract_accuracy = j.value("contract_accuracy", b.contract_accuracy);
    b.max_attempts = j.value("max_attempts", b.max_attempts);
    b.steer_growth = j.value("steer_growth", b.steer_growth);
    return b;
}

/// Self-describing checkpoint: config, seed, construction parameters, the plant
/// (ground truth travels with the weights) and every weight tensor.
inline nlohmann::json to_json(const ModelWeights& w) {
    return {{"format", "toy-moe-checkpoint"},
            {"version", kModelCheckpointVersion},
            {"config", to_json(w.config)},
            {"plant", to_json(w.plant)},
            {"build_params", to_json(w.params)},
            {"token_embedding", detail::tensor_to_json(w.token_embedding)},
            {"router_weight", detail::tensors_to_json(w.router_weight)},
            {"router_bias", detail::tensors_to_json(w.router_bias)},
            {"expert_w_in", detail::tensors_to_json(w.expert_w_in)},
            {"expert_b_in", detail::tensors_to_json(w.expert_b_in)},
            {"expert_w_out", detail::tensors_to_json(w.expert_w_out)},
            {"expert_b_out", detail::tensors_to_json(w.expert_b_out)},
            {"lm_head", detail::tensor_to_json(w.lm_head)},
            {"lm_bias", detail::tensor_to_json(w.lm_bias)}};
}

inline MoEModel model_from_json(const nlohmann::json& j) {
    if (j.value("format", std::string{}) != "toy-moe-checkpoint") {
        throw ConfigError("not a toy-moe checkpoint");
    }
    if (j.value("version", 0) != kModelCheckpointVersion) {
        throw ConfigError("unsupported model checkpoint version " + std::to_string(j.value("version", 0)));
    }
    auto w = std::make_shared<ModelWeights>();
    w->config = moe_config_from_json(j.at("config"));
    w->config.validate();
    w->plant = plant_from_json(j.at("plant"));
    w->plant.validate(w->config);
    w->params = build_params_from_json(j.at("build_params"));
    w->token_embedding = detail::tensor_from_json(j.at("token_embedding"));
    w->router_weight = detail::tensors_from_json(j.at("router_weight"));
    w->router_bias = detail::tensors_from_json(j.at("router_bias"));
    w->expert_w_in = detail::tensors_from_json(j.at("expert_w_in"));
    w->expert_b_in = detail::tensors_from_json(j.at("expert_b_in"));
    w->expert_w_out = detail::tensors_from_json(j.at("expert_w_out"));
    w->expert_b_out = detail::tensors_from_json(j.at("expert_b_out"));
    w->lm_head = detail::tensor_from_json(j.at("lm_head"));
    w->lm_bias = detail::tensor_from_json(j.at("lm_bias"));

    const MoEConfig& c = w->config;
    const std::size_t LN = c.num_layers * c.num_experts;
    const auto expect = [](bool ok, const std::string& what) {
        if (!ok) {
            throw DimensionError("model checkpoint: " + what + " has the wrong shape");
        }
    };
    using numerics::Shape;
    expect(w->token_embedding.shape() == Shape{c.vocab_size, c.embed_dim}, "token_embedding");
    expect(w->router_weight.size() == c.num_layers && w->router_bias.size() == c.num_layers, "router");
    for (std::size_t l = 0; l < c.num_layers; ++l) {
        expect(w->router_weight[l].shape() == Shape{c.embed_dim, c.num_experts}, "router_weight");
        expect(w->router_bias[l].shape() == Shape{1, c.num_experts}, "router_bias");
    }
    expect(w->expert_w_in.size() == LN && w->expert_b_in.size() == LN && w->expert_w_out.size() == LN &&
               w->expert_b_out.size() == LN,
           "expert list");
    for (std::size_t i = 0; i < LN; ++i) {
        expect(w->expert_w_in[i].shape() == Shape{c.embed_dim, c.expert_hidden_dim}, "expert_w_in");
        expect(w->expert_b_in[i].shape() == Shape{1, c.expert_hidden_dim}, "expert_b_in");
        expect(w->expert_w_out[i].shape() == Shape{c.expert_hidden_dim, c.embed_dim}, "expert_w_out");
        expect(w->expert_b_out[i].shape() == Shape{1, c.embed_dim}, "expert_b_out");
    }
    expect(w->lm_head.shape() == Shape{c.embed_dim, c.vocab_size}, "lm_head");
    expect(w->lm_bias.shape() == Shape{1, c.vocab_size}, "lm_bias");
    return MoEModel(std::shared_ptr<const ModelWeights>(std::move(w)));
}

inline void save_model(const std::string& path, const MoEModel& model) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw Error("cannot open " + path + " for writing");
    }
    out << to_json(model.weights()).dump() << '\n';
}

inline MoEModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open model checkpoint " + path);
    }
    try {
        return model_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": malformed model checkpoint: " + e.what());
    }
}

} // namespace silencer::moe
