#include "sapo/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sapo {

using nlohmann::json;

std::string algo_name(Algo algo) {
    switch (algo) {
        case Algo::Sapo: return "sapo";
        case Algo::Ppo: return "ppo";
        case Algo::Grpo: return "grpo";
        case Algo::NaiveIs: return "naive-is";
    }
    return "?";
}

Algo parse_algo(const std::string& name) {
    if (name == "sapo") return Algo::Sapo;
    if (name == "ppo") return Algo::Ppo;
    if (name == "grpo") return Algo::Grpo;
    if (name == "naive-is") return Algo::NaiveIs;
    throw ConfigError("unknown algo '" + name + "' (expected sapo|ppo|grpo|naive-is)");
}

namespace {

std::string strategy_name(SegStrategy::Kind kind) {
    switch (kind) {
        case SegStrategy::Kind::EntropyTopK: return "entropy-topk";
        case SegStrategy::Kind::Marker: return "marker";
        case SegStrategy::Kind::FixedStep: return "fixed-step";
        case SegStrategy::Kind::ProbAccum: return "prob-accum";
    }
    return "?";
}

SegStrategy::Kind parse_strategy(const std::string& name) {
    if (name == "entropy-topk") return SegStrategy::Kind::EntropyTopK;
    if (name == "marker") return SegStrategy::Kind::Marker;
    if (name == "fixed-step") return SegStrategy::Kind::FixedStep;
    if (name == "prob-accum") return SegStrategy::Kind::ProbAccum;
    throw ConfigError("unknown seg_strategy kind '" + name + "'");
}

json env_to_json(const EnvSpec& spec) {
    json j;
    j["kind"] = spec.kind;
    j["vocab_size"] = spec.vocab_size;
    j["max_len"] = spec.max_len;
    j["task_params"] = spec.task_params;
    if (spec.eos_token) {
        j["eos_token"] = *spec.eos_token;
    } else {
        j["eos_token"] = nullptr;
    }
    return j;
}

EnvSpec env_from_json(const json& j) {
    EnvSpec spec;
    spec.kind = j.at("kind").get<std::string>();
    spec.vocab_size = j.at("vocab_size").get<int>();
    spec.max_len = j.at("max_len").get<int>();
    if (j.contains("task_params")) {
        spec.task_params = j.at("task_params").get<std::map<std::string, int>>();
    }
    if (j.contains("eos_token") && !j.at("eos_token").is_null()) {
        spec.eos_token = j.at("eos_token").get<TokenId>();
    }
    return spec;
}

json strategy_to_json(const SegStrategy& st) {
    json j;
    j["kind"] = strategy_name(st.kind);
    switch (st.kind) {
        case SegStrategy::Kind::EntropyTopK:
            j["k_percent"] = st.k_percent;
            j["boundary_as_start"] = st.boundary_as_start;
            break;
        case SegStrategy::Kind::Marker:
            j["marker_token"] = st.marker_token;
            break;
        case SegStrategy::Kind::FixedStep:
            j["step_len"] = st.step_len;
            break;
        case SegStrategy::Kind::ProbAccum:
            j["low_prob_threshold"] = st.low_prob_threshold;
            j["count_c"] = st.count_c;
            break;
    }
    return j;
}

SegStrategy strategy_from_json(const json& j) {
    SegStrategy st;
    st.kind = parse_strategy(j.at("kind").get<std::string>());
    switch (st.kind) {
        case SegStrategy::Kind::EntropyTopK:
            st.k_percent = j.at("k_percent").get<double>();
            if (j.contains("boundary_as_start")) {
                st.boundary_as_start = j.at("boundary_as_start").get<bool>();
            }
            break;
        case SegStrategy::Kind::Marker:
            st.marker_token = j.at("marker_token").get<TokenId>();
            break;
        case SegStrategy::Kind::FixedStep:
            st.step_len = j.at("step_len").get<int>();
            break;
        case SegStrategy::Kind::ProbAccum:
            st.low_prob_threshold = j.at("low_prob_threshold").get<double>();
            st.count_c = j.at("count_c").get<int>();
            break;
    }
    return st;
}

std::string kl_kind_name(ClipConfig::KlKind kind) {
    return kind == ClipConfig::KlKind::None ? "none" : "k1-in-reward";
}

ClipConfig::KlKind parse_kl_kind(const std::string& name) {
    if (name == "none") return ClipConfig::KlKind::None;
    if (name == "k1-in-reward") return ClipConfig::KlKind::K1InReward;
    throw ConfigError("unknown kl_kind '" + name + "'");
}

}  // namespace

void RunConfig::validate() const {
    if (clip.epsilon <= 0.0 || clip.epsilon >= 1.0) throw ConfigError("epsilon must be in (0, 1)");
    if (clip.kl_coef < 0.0) throw ConfigError("kl_coef must be >= 0");
    if (gae.gamma < 0.0 || gae.gamma > 1.0) throw ConfigError("gamma must be in [0, 1]");
    if (gae.lambda < 0.0 || gae.lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (minibatch_count < 1 || minibatch_count > batch_size) {
        throw ConfigError("minibatch_count must be in [1, batch_size]");
    }
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (algo == Algo::Grpo) {
        if (group_size < 2) throw ConfigError("group_size must be >= 2");
        if (batch_size % group_size != 0) {
            throw ConfigError("batch_size must be a multiple of group_size for grpo");
        }
    }
    if (policy_features.window < 1 || policy_features.dim < 1) {
        throw ConfigError("policy_features must be positive");
    }
}

RunConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config JSON parse failure: ") + e.what());
    }
    RunConfig cfg;
    try {
        cfg.env = env_from_json(j.at("env"));
        cfg.algo = parse_algo(j.at("algo").get<std::string>());
        if (j.contains("seg_strategy")) cfg.seg_strategy = strategy_from_json(j.at("seg_strategy"));
        if (j.contains("gae")) {
            cfg.gae.gamma = j.at("gae").at("gamma").get<double>();
            cfg.gae.lambda = j.at("gae").at("lambda").get<double>();
        }
        if (j.contains("clip")) {
            const json& c = j.at("clip");
            if (c.contains("epsilon")) cfg.clip.epsilon = c.at("epsilon").get<double>();
            if (c.contains("kl_coef")) cfg.clip.kl_coef = c.at("kl_coef").get<double>();
            if (c.contains("kl_kind")) cfg.clip.kl_kind = parse_kl_kind(c.at("kl_kind").get<std::string>());
        }
        if (j.contains("policy_features")) {
            cfg.policy_features.window = j.at("policy_features").at("window").get<int>();
            cfg.policy_features.dim = j.at("policy_features").at("dim").get<int>();
        }
        if (j.contains("group_size")) cfg.group_size = j.at("group_size").get<int>();
        if (j.contains("grpo_normalize_std")) cfg.grpo_normalize_std = j.at("grpo_normalize_std").get<bool>();
        if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
        if (j.contains("minibatch_count")) cfg.minibatch_count = j.at("minibatch_count").get<int>();
        if (j.contains("total_steps")) cfg.total_steps = j.at("total_steps").get<long>();
        if (j.contains("lr_policy")) cfg.lr_policy = j.at("lr_policy").get<double>();
        if (j.contains("lr_value")) cfg.lr_value = j.at("lr_value").get<double>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<uint64_t>();
        if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
        if (j.contains("token_weighted_batch") && j.at("token_weighted_batch").get<bool>()) {
            cfg.aggregation = BatchAggregation::TokenWeighted;
        }
        if (j.contains("dump_interval")) cfg.dump_interval = j.at("dump_interval").get<long>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config field error: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    return config_from_json_text(buf.str());
}

std::string config_to_json_text(const RunConfig& cfg) {
    json j;
    j["env"] = env_to_json(cfg.env);
    j["algo"] = algo_name(cfg.algo);
    j["seg_strategy"] = strategy_to_json(cfg.seg_strategy);
    j["gae"] = {{"gamma", cfg.gae.gamma}, {"lambda", cfg.gae.lambda}};
    j["clip"] = {{"epsilon", cfg.clip.epsilon},
                 {"kl_coef", cfg.clip.kl_coef},
                 {"kl_kind", kl_kind_name(cfg.clip.kl_kind)}};
    j["policy_features"] = {{"window", cfg.policy_features.window}, {"dim", cfg.policy_features.dim}};
    j["group_size"] = cfg.group_size;
    j["grpo_normalize_std"] = cfg.grpo_normalize_std;
    j["batch_size"] = cfg.batch_size;
    j["minibatch_count"] = cfg.minibatch_count;
    j["total_steps"] = cfg.total_steps;
    j["lr_policy"] = cfg.lr_policy;
    j["lr_value"] = cfg.lr_value;
    j["seed"] = cfg.seed;
    j["output_dir"] = cfg.output_dir;
    j["token_weighted_batch"] = cfg.aggregation == BatchAggregation::TokenWeighted;
    j["dump_interval"] = cfg.dump_interval;
    return j.dump(2) + "\n";
}

std::string config_hash(const RunConfig& cfg) {
    const std::string text = config_to_json_text(cfg);
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace sapo
