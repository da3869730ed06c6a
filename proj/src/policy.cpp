#include "sapo/policy.hpp"

#include <algorithm>
#include <cmath>

namespace sapo {

namespace {

constexpr uint64_t kSlotSalt = 0xc2b2ae3d27d4eb4fULL;
constexpr uint64_t kPositionSalt = 0x165667b19e3779f9ULL;
constexpr uint64_t kBosSentinel = 0xffffffffULL;

int hash_slot(uint64_t slot, uint64_t value, int dim) {
    uint64_t h = splitmix64(slot * kSlotSalt ^ (value + 1));
    return static_cast<int>(h % static_cast<uint64_t>(dim));
}

}  // namespace

double TokenDistribution::entropy() const {
    double h = 0.0;
    for (double lp : logprobs) {
        double p = std::exp(lp);
        if (p > 0.0) h -= p * lp;
    }
    return std::max(h, 0.0);
}

PolicyParams make_policy(const FeatureSpec& spec, int vocab_size) {
    if (spec.window < 1 || spec.dim < 1) throw ConfigError("feature spec must be positive");
    if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    PolicyParams p;
    p.feature_spec = spec;
    p.vocab_size = vocab_size;
    p.weights.assign(static_cast<size_t>(spec.dim) * vocab_size, 0.0);
    return p;
}

void active_features(const FeatureSpec& spec, const EpisodeState& state,
                     std::vector<int>& out) {
    out.clear();
    const size_t prompt_len = state.prompt.size();
    const size_t total = prompt_len + state.generated.size();
    for (int j = 1; j <= spec.window; ++j) {
        uint64_t value = kBosSentinel;
        if (total >= static_cast<size_t>(j)) {
            size_t idx = total - static_cast<size_t>(j);
            TokenId tok = idx < prompt_len ? state.prompt[idx] : state.generated[idx - prompt_len];
            value = static_cast<uint64_t>(tok);
        }
        out.push_back(hash_slot(static_cast<uint64_t>(j), value, spec.dim));
    }
    out.push_back(hash_slot(kPositionSalt, state.generated.size(), spec.dim));
}

TokenDistribution policy_logits(const PolicyParams& params, const EpisodeState& state) {
    if (state.done) throw ContractError("policy_logits on a finished episode");
    const int V = params.vocab_size;
    TokenDistribution dist;
    dist.logits.assign(V, 0.0);

    std::vector<int> feats;
    active_features(params.feature_spec, state, feats);
    for (int f : feats) {
        const double* row = params.weights.data() + static_cast<size_t>(f) * V;
        for (int v = 0; v < V; ++v) dist.logits[v] += row[v];
    }

    // log-softmax with max shift
    double mx = dist.logits[0];
    for (int v = 1; v < V; ++v) mx = std::max(mx, dist.logits[v]);
    double sum = 0.0;
    for (int v = 0; v < V; ++v) sum += std::exp(dist.logits[v] - mx);
    double lse = mx + std::log(sum);
    dist.logprobs.resize(V);
    for (int v = 0; v < V; ++v) dist.logprobs[v] = dist.logits[v] - lse;
    return dist;
}

double token_logprob(const PolicyParams& params, const EpisodeState& state, TokenId token) {
    if (token < 0 || token >= params.vocab_size) throw ContractError("token out of vocabulary");
    return policy_logits(params, state).logprobs[token];
}

void accumulate_logprob_grad(const PolicyParams& params, const EpisodeState& state,
                             TokenId token, double coeff, std::vector<double>& grad) {
    const int V = params.vocab_size;
    TokenDistribution dist = policy_logits(params, state);
    std::vector<int> feats;
    active_features(params.feature_spec, state, feats);
    for (int f : feats) {
        double* row = grad.data() + static_cast<size_t>(f) * V;
        for (int v = 0; v < V; ++v) {
            double indicator = (v == token) ? 1.0 : 0.0;
            row[v] += coeff * (indicator - std::exp(dist.logprobs[v]));
        }
    }
}

std::pair<double, std::vector<double>> token_logprob_and_grad(const PolicyParams& params,
                                                              const EpisodeState& state,
                                                              TokenId token) {
    if (token < 0 || token >= params.vocab_size) throw ContractError("token out of vocabulary");
    double lp = token_logprob(params, state, token);
    std::vector<double> grad(params.weights.size(), 0.0);
    accumulate_logprob_grad(params, state, token, 1.0, grad);
    return {lp, std::move(grad)};
}

double token_entropy(const PolicyParams& params, const EpisodeState& state) {
    return policy_logits(params, state).entropy();
}

Trajectory sample_trajectory(const Env& env, const PolicyParams& params, Rng& rng) {
    Trajectory traj;
    traj.prompt = env.prompt();
    EpisodeState state = env.reset();
    while (!state.done) {
        TokenDistribution dist = policy_logits(params, state);
        double u = rng.next_unit();
        double cum = 0.0;
        TokenId pick = params.vocab_size - 1;
        for (TokenId v = 0; v < params.vocab_size; ++v) {
            cum += std::exp(dist.logprobs[v]);
            if (u < cum) {
                pick = v;
                break;
            }
        }
        traj.tokens.push_back(pick);
        traj.old_logprobs.push_back(dist.logprobs[pick]);
        traj.entropies.push_back(dist.entropy());
        state = env.step(state, pick);
    }
    traj.reward = env.terminal_reward(traj);
    return traj;
}

PolicyEval policy_distribution(const PolicyParams& params) {
    return [params](const EpisodeState& state) {
        TokenDistribution dist = policy_logits(params, state);
        std::vector<double> probs(dist.logprobs.size());
        for (size_t v = 0; v < probs.size(); ++v) probs[v] = std::exp(dist.logprobs[v]);
        return probs;
    };
}

}  // namespace sapo
