#pragma once

#include <vector>

#include "sapo/config.hpp"
#include "sapo/credit.hpp"
#include "sapo/envs.hpp"
#include "sapo/policy.hpp"
#include "sapo/segmentation.hpp"
#include "sapo/value.hpp"

namespace sapo {

// Per-segment geometric-mean importance ratios:
// x_t = new_logprob_t - old_logprob_t, mu_m = mean of x_t over segment m,
// s_m = exp(mu_m). Everything stays in log space until the final exp.
struct RatioStats {
    std::vector<double> segment_ratios;   // s_m
    std::vector<double> mean_logratios;   // mu_m
    std::vector<double> token_logratios;  // x_t
    std::vector<int> segment_lengths;
};

RatioStats segment_ratio(const std::vector<double>& new_logprobs,
                         const std::vector<double>& old_logprobs, const Segmentation& seg);

struct PreparedTrajectory {
    Trajectory traj;
    Segmentation seg;
    SegmentCredit credit;
};

struct ObjectiveResult {
    double value = 0.0;
    std::vector<double> grad;
    // raw counts so callers can aggregate across mini-batches
    long clipped_tokens = 0;
    long total_tokens = 0;
    double sum_abs_mu = 0.0;
    long mu_count = 0;

    double clip_fraction() const {
        return total_tokens > 0 ? static_cast<double>(clipped_tokens) / total_tokens : 0.0;
    }
    double mean_abs_mu() const { return mu_count > 0 ? sum_abs_mu / mu_count : 0.0; }
};

// Clipped surrogate over segments: per token, min(s_m A_m, clip(s_m) A_m)
// with the segment's geometric-mean ratio; the gradient uses the
// within-segment averaged score. Tokens on the active clip branch contribute
// zero gradient.
ObjectiveResult sapo_objective_and_grad(const std::vector<PreparedTrajectory>& batch,
                                        const PolicyParams& params, const ClipConfig& clip,
                                        BatchAggregation agg = BatchAggregation::TrajectoryMean);

// Token-level PPO surrogate with per-token ratios and token advantages.
ObjectiveResult ppo_objective_and_grad(const std::vector<PreparedTrajectory>& batch,
                                       const PolicyParams& params, const ClipConfig& clip,
                                       BatchAggregation agg = BatchAggregation::TrajectoryMean);

// Ablation: segment advantages broadcast to tokens but token-level ratios.
ObjectiveResult naive_is_objective_and_grad(const std::vector<PreparedTrajectory>& batch,
                                            const PolicyParams& params, const ClipConfig& clip,
                                            BatchAggregation agg = BatchAggregation::TrajectoryMean);

// Sparse segment rewards (terminal only) shaped by the K1 estimator:
// r_m = (m == M ? terminal : 0) - kl_coef * sum_{t in z_m} (old_lp_t - ref_lp_t).
// With kl_kind == None this is the sparse reward passthrough.
std::vector<double> apply_kl_reward_penalty(const std::vector<double>& old_logprobs,
                                            const std::vector<double>& ref_logprobs,
                                            double terminal_reward, const Segmentation& seg,
                                            const ClipConfig& clip);

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    long t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

AdamState make_adam(size_t dim);

// One Adam update; ascends when maximize is set, otherwise descends.
void adam_step(std::vector<double>& params, AdamState& state, const std::vector<double>& grad,
               double lr, bool maximize);

struct StepMetrics {
    long step = 0;
    double mean_reward = 0.0;
    double policy_obj = 0.0;
    double value_loss = 0.0;
    double mean_entropy = 0.0;
    double mean_resp_len = 0.0;
    double clip_frac = 0.0;
    double mean_abs_mu = 0.0;
    double mean_M = 0.0;
};

struct LearnerState {
    Env env;
    PolicyParams policy;
    ValueParams value;
    PolicyParams ref_policy;  // frozen initial policy, KL reference
    AdamState policy_opt;
    AdamState value_opt;
    long step = 0;
};

LearnerState make_learner(const RunConfig& config);

// One outer iteration: rollout under the current policy snapshot, segment,
// compute credits, then mini-batch updates of policy (ascent) and value
// (descent). Aborts with DivergenceError on any non-finite parameter or loss.
StepMetrics train_step(LearnerState& state, const RunConfig& config);

// Rollout + credit preparation without the updates; used by train_step and by
// offline tooling that needs identical batches.
std::vector<PreparedTrajectory> prepare_batch(const LearnerState& state, const RunConfig& config,
                                              long step);

}  // namespace sapo
