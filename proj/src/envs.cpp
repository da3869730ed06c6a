#include "sapo/envs.hpp"

#include <algorithm>
#include <cmath>

namespace sapo {

namespace {

int require_param(const EnvSpec& spec, const std::string& key) {
    auto it = spec.task_params.find(key);
    if (it == spec.task_params.end()) {
        throw ConfigError("env '" + spec.kind + "' requires task_params." + key);
    }
    return it->second;
}

int param_or(const EnvSpec& spec, const std::string& key, int fallback) {
    auto it = spec.task_params.find(key);
    return it == spec.task_params.end() ? fallback : it->second;
}

}  // namespace

Env::Env(EnvSpec spec, uint64_t seed) : spec_(std::move(spec)) {
    if (spec_.vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (spec_.max_len < 1) throw ConfigError("max_len must be >= 1");
    if (spec_.eos_token && (*spec_.eos_token < 0 || *spec_.eos_token >= spec_.vocab_size)) {
        throw ConfigError("eos_token must be < vocab_size");
    }

    if (spec_.kind == "tiny-tree") {
        kind_ = Kind::TinyTree;
    } else if (spec_.kind == "chain-arith") {
        kind_ = Kind::ChainArith;
    } else if (spec_.kind == "format-trap") {
        kind_ = Kind::FormatTrap;
    } else {
        throw ConfigError("unknown env kind '" + spec_.kind + "'");
    }

    Rng rng(seed);

    switch (kind_) {
        case Kind::TinyTree: {
            // One rewarded leaf: a full-length token string drawn from the seed.
            // eos (if any) is excluded so the target stays reachable.
            target_.resize(spec_.max_len);
            for (int i = 0; i < spec_.max_len; ++i) {
                TokenId t;
                do {
                    t = static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(spec_.vocab_size)));
                } while (spec_.eos_token && t == *spec_.eos_token);
                target_[i] = t;
            }
            break;
        }
        case Kind::ChainArith:
        case Kind::FormatTrap: {
            modulus_ = require_param(spec_, "modulus");
            int n = require_param(spec_, "n");
            if (modulus_ < 2) throw ConfigError("modulus must be >= 2");
            if (n < 1) throw ConfigError("n must be >= 1");

            int reserved = modulus_ + (spec_.eos_token ? 1 : 0);
            TokenId op_base = modulus_;
            if (kind_ == Kind::FormatTrap) {
                marker_ = static_cast<TokenId>(param_or(spec_, "marker", modulus_));
                if (marker_ < 0 || marker_ >= spec_.vocab_size) {
                    throw ConfigError("marker token out of vocabulary");
                }
                if (marker_ < modulus_) throw ConfigError("marker must not collide with digit tokens");
                reserved += 1;
                op_base = marker_ + 1;
                if (spec_.max_len < 2) throw ConfigError("format-trap needs max_len >= 2");
            } else {
                if (spec_.max_len < n) throw ConfigError("chain-arith needs max_len >= n");
            }
            int num_ops = spec_.vocab_size - reserved;
            // eos, when present, is required to sit above the op range.
            if (spec_.eos_token && *spec_.eos_token != spec_.vocab_size - 1) {
                throw ConfigError("eos_token must be the last vocabulary id for arithmetic tasks");
            }
            if (num_ops < 1) {
                throw ConfigError("vocab_size leaves no room for op tokens");
            }

            TokenId start = static_cast<TokenId>(rng.next_below(static_cast<uint64_t>(modulus_)));
            prompt_.push_back(start);
            int value = start;
            for (int i = 0; i < n; ++i) {
                int op = static_cast<int>(rng.next_below(static_cast<uint64_t>(num_ops)));
                prompt_.push_back(op_base + op);
                value = (value + op + 1) % modulus_;
            }
            chain_result_ = static_cast<TokenId>(value);
            break;
        }
    }
}

Env make_env(const EnvSpec& spec, uint64_t seed) { return Env(spec, seed); }

EpisodeState Env::reset() const {
    EpisodeState s;
    s.prompt = prompt_;
    return s;
}

EpisodeState Env::step(const EpisodeState& state, TokenId token) const {
    if (state.done) throw ContractError("step on a finished episode");
    if (token < 0 || token >= spec_.vocab_size) throw ContractError("token out of vocabulary");
    EpisodeState next = state;
    next.generated.push_back(token);
    if ((spec_.eos_token && token == *spec_.eos_token) ||
        static_cast<int>(next.generated.size()) >= spec_.max_len) {
        next.done = true;
    }
    return next;
}

bool Env::is_complete(const std::vector<TokenId>& tokens) const {
    if (tokens.empty()) return false;
    if (static_cast<int>(tokens.size()) > spec_.max_len) return false;
    // eos may appear only as the final token.
    if (spec_.eos_token) {
        for (size_t i = 0; i + 1 < tokens.size(); ++i) {
            if (tokens[i] == *spec_.eos_token) return false;
        }
        if (tokens.back() == *spec_.eos_token) return true;
    }
    return static_cast<int>(tokens.size()) == spec_.max_len;
}

double Env::verify(const std::vector<TokenId>& tokens) const {
    std::vector<TokenId> body = tokens;
    if (spec_.eos_token && !body.empty() && body.back() == *spec_.eos_token) {
        body.pop_back();
    }
    switch (kind_) {
        case Kind::TinyTree:
            return body == target_ ? 1.0 : 0.0;
        case Kind::ChainArith:
            return (!body.empty() && body.back() == chain_result_) ? 1.0 : 0.0;
        case Kind::FormatTrap:
            return (body.size() >= 2 && body[body.size() - 2] == marker_ &&
                    body.back() == chain_result_)
                       ? 1.0
                       : 0.0;
    }
    return 0.0;
}

double Env::terminal_reward(const Trajectory& traj) const {
    if (!is_complete(traj.tokens)) {
        throw ContractError("terminal_reward on incomplete trajectory");
    }
    return verify(traj.tokens);
}

namespace {

struct Enumerator {
    const Env& env;
    const PolicyEval& policy_eval;
    std::vector<std::pair<Trajectory, double>> out;
    Trajectory scratch;

    void walk(const EpisodeState& state, double prob) {
        if (state.done) {
            Trajectory traj = scratch;
            traj.prompt = env.prompt();
            traj.tokens = state.generated;
            traj.reward = env.terminal_reward(traj);
            out.emplace_back(std::move(traj), prob);
            return;
        }
        std::vector<double> dist = policy_eval(state);
        if (static_cast<int>(dist.size()) != env.vocab_size()) {
            throw ContractError("policy distribution size != vocab_size");
        }
        double entropy = 0.0;
        for (double p : dist) {
            if (p > 0.0) entropy -= p * std::log(p);
        }
        for (TokenId v = 0; v < env.vocab_size(); ++v) {
            if (dist[v] <= 0.0) continue;
            scratch.old_logprobs.push_back(std::log(dist[v]));
            scratch.entropies.push_back(entropy);
            walk(env.step(state, v), prob * dist[v]);
            scratch.old_logprobs.pop_back();
            scratch.entropies.pop_back();
        }
    }
};

void check_enumeration_cap(const Env& env, int max_len) {
    double space = std::pow(static_cast<double>(env.vocab_size()), static_cast<double>(max_len));
    if (space > 1e6) {
        throw ResourceError("enumeration space vocab^max_len exceeds 10^6");
    }
}

}  // namespace

std::vector<std::pair<Trajectory, double>> enumerate_trajectories(const Env& env,
                                                                  const PolicyEval& policy_eval,
                                                                  int max_len) {
    if (max_len < env.max_len()) {
        throw ContractError("enumeration max_len below the env horizon");
    }
    check_enumeration_cap(env, env.max_len());
    Enumerator e{env, policy_eval, {}, {}};
    e.walk(env.reset(), 1.0);
    return e.out;
}

double exact_state_value(const Env& env, const PolicyEval& policy_eval,
                         const EpisodeState& state, double gamma) {
    check_enumeration_cap(env, env.max_len() - static_cast<int>(state.generated.size()));
    if (state.done) return 0.0;

    // Recursive expectation: E[gamma^(j-1) * r] over completions of length j.
    std::function<double(const EpisodeState&, int)> go =
        [&](const EpisodeState& s, int depth) -> double {
        if (s.done) {
            Trajectory traj;
            traj.prompt = env.prompt();
            traj.tokens = s.generated;
            double r = env.terminal_reward(traj);
            return std::pow(gamma, depth - 1) * r;
        }
        std::vector<double> dist = policy_eval(s);
        double total = 0.0;
        for (TokenId v = 0; v < env.vocab_size(); ++v) {
            if (dist[v] <= 0.0) continue;
            total += dist[v] * go(env.step(s, v), depth + 1);
        }
        return total;
    };
    return go(state, 0);
}

}  // namespace sapo
