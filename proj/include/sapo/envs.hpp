#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sapo/common.hpp"

namespace sapo {

// Deterministic token MDPs with a verifier-style terminal reward.
//
// Task kinds:
//   tiny-tree   : vocab^max_len leaves, exactly one rewarded leaf drawn from
//                 the seed. Exists so enumeration oracles are exact.
//   chain-arith : prompt = [start digit, op_1 .. op_n]; op token (digit_base+j)
//                 means "add j+1 mod modulus". The intended response lists the
//                 n intermediate results; the verifier only checks that the
//                 final (non-eos) token equals the chained result.
//   format-trap : like chain-arith but the verifier requires the response to
//                 end with [marker, result]. A correct digit without the
//                 marker scores 0.
struct EnvSpec {
    std::string kind;  // "chain-arith" | "format-trap" | "tiny-tree"
    int vocab_size = 2;
    int max_len = 1;
    std::map<std::string, int> task_params;
    std::optional<TokenId> eos_token;
};

struct EpisodeState {
    std::vector<TokenId> prompt;
    std::vector<TokenId> generated;
    bool done = false;
};

struct Trajectory {
    std::vector<TokenId> prompt;
    std::vector<TokenId> tokens;
    std::vector<double> old_logprobs;  // log pi_old per token
    std::vector<double> entropies;     // H_t per token, nats
    double reward = 0.0;
};

class Env {
public:
    Env(EnvSpec spec, uint64_t seed);

    const EnvSpec& spec() const { return spec_; }
    const std::vector<TokenId>& prompt() const { return prompt_; }
    int vocab_size() const { return spec_.vocab_size; }
    int max_len() const { return spec_.max_len; }
    std::optional<TokenId> eos_token() const { return spec_.eos_token; }

    EpisodeState reset() const;
    // Appends one token; marks done at eos or max_len. The transition is the
    // only state mutation in the MDP.
    EpisodeState step(const EpisodeState& state, TokenId token) const;

    // 1.0 iff the verifier accepts, else 0.0. Requires a complete trajectory.
    double terminal_reward(const Trajectory& traj) const;

    // Task introspection for tests and oracles.
    const std::vector<TokenId>& target_sequence() const { return target_; }  // tiny-tree
    TokenId expected_final_digit() const { return chain_result_; }           // chain-arith / format-trap
    TokenId marker_token() const { return marker_; }                         // format-trap

private:
    enum class Kind { TinyTree, ChainArith, FormatTrap };

    bool is_complete(const std::vector<TokenId>& tokens) const;
    double verify(const std::vector<TokenId>& tokens) const;

    EnvSpec spec_;
    Kind kind_;
    std::vector<TokenId> prompt_;
    std::vector<TokenId> target_;  // tiny-tree rewarded leaf
    TokenId chain_result_ = -1;
    TokenId marker_ = -1;
    int modulus_ = 0;
};

Env make_env(const EnvSpec& spec, uint64_t seed);

// state -> probability vector over the vocabulary.
using PolicyEval = std::function<std::vector<double>(const EpisodeState&)>;

// Every reachable complete trajectory with its exact probability under the
// supplied policy. Zero-probability branches are pruned. Throws ResourceError
// when vocab^max_len exceeds 10^6.
std::vector<std::pair<Trajectory, double>> enumerate_trajectories(const Env& env,
                                                                  const PolicyEval& policy_eval,
                                                                  int max_len);

// Exact expected discounted terminal reward from `state`: a completion that
// needs j more tokens contributes probability * gamma^(j-1) * reward.
double exact_state_value(const Env& env, const PolicyEval& policy_eval,
                         const EpisodeState& state, double gamma);

}  // namespace sapo
