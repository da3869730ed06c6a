#pragma once

#include <vector>

#include "sapo/common.hpp"
#include "sapo/segmentation.hpp"

namespace sapo {

struct GaeParams {
    double gamma = 1.0;
    double lambda = 0.99;
};

// Per-trajectory credit at segment granularity plus the token broadcast.
// R_m = A_m + V(s_m) by construction.
struct SegmentCredit {
    std::vector<double> rewards;
    std::vector<double> deltas;
    std::vector<double> advantages;
    std::vector<double> returns;
    std::vector<double> token_advantages;
};

// delta_m = r_m + gamma * V(s_{m+1}) - V(s_m). boundary_values carries
// V(s_1..s_M) plus the terminal V(s_{M+1}) = 0.
std::vector<double> segment_deltas(const std::vector<double>& rewards,
                                   const std::vector<double>& boundary_values, double gamma);

// Backward recursion A_m = delta_m + gamma * lambda * A_{m+1}.
std::vector<double> segment_gae(const std::vector<double>& deltas, const GaeParams& gae);

// A_t := A_{m(t)} for every token of segment m.
std::vector<double> broadcast_to_tokens(const std::vector<double>& advantages,
                                        const Segmentation& seg);

// Full SegmentCredit for one trajectory.
SegmentCredit compute_segment_credit(const std::vector<double>& rewards,
                                     const std::vector<double>& boundary_values,
                                     const GaeParams& gae, const Segmentation& seg);

// Standard token-level GAE; the PPO baseline path. values carries
// V(s_1..s_T) plus terminal 0.
std::vector<double> token_gae(const std::vector<double>& rewards,
                              const std::vector<double>& values, const GaeParams& gae);

// GRPO-style scalar advantages: r_i - mean, optionally / (population std + 1e-8).
std::vector<double> group_relative_advantages(const std::vector<double>& group_rewards,
                                              bool normalize_std);

}  // namespace sapo
