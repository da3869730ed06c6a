#pragma once

#include <utility>
#include <vector>

#include "sapo/common.hpp"
#include "sapo/envs.hpp"

namespace sapo {

// Hashed context features: `window` lag slots over the combined
// prompt+response sequence plus one position slot, each mapped into
// [0, dim) by a fixed 64-bit mix. Out-of-range lags hash a BOS sentinel.
struct FeatureSpec {
    int window = 2;
    int dim = 512;
};

// Linear-softmax policy. weights is feature-major: weights[f * vocab + v].
struct PolicyParams {
    std::vector<double> weights;
    FeatureSpec feature_spec;
    int vocab_size = 0;
};

struct TokenDistribution {
    std::vector<double> logits;
    std::vector<double> logprobs;

    double entropy() const;  // Shannon entropy in nats
};

PolicyParams make_policy(const FeatureSpec& spec, int vocab_size);

// Active feature indices for a state (window lags + position slot).
// Repeated indices carry multiplicity.
void active_features(const FeatureSpec& spec, const EpisodeState& state,
                     std::vector<int>& out);

TokenDistribution policy_logits(const PolicyParams& params, const EpisodeState& state);

double token_logprob(const PolicyParams& params, const EpisodeState& state, TokenId token);

// log pi(token|state) and its exact gradient w.r.t. the flat weights:
// (onehot(token) - softmax(logits)) spread over the active features.
std::pair<double, std::vector<double>> token_logprob_and_grad(const PolicyParams& params,
                                                              const EpisodeState& state,
                                                              TokenId token);

// grad += coeff * d log pi(token|state) / d weights, without allocating.
void accumulate_logprob_grad(const PolicyParams& params, const EpisodeState& state,
                             TokenId token, double coeff, std::vector<double>& grad);

double token_entropy(const PolicyParams& params, const EpisodeState& state);

// Autoregressive rollout recording per-token logprob and entropy, with the
// terminal reward attached. Bitwise deterministic in (env, params, rng seed).
Trajectory sample_trajectory(const Env& env, const PolicyParams& params, Rng& rng);

// Probability-vector view of the policy, for the enumeration oracles.
PolicyEval policy_distribution(const PolicyParams& params);

}  // namespace sapo
