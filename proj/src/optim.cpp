#include "sapo/optim.hpp"

#include <algorithm>
#include <cmath>

namespace sapo {

RatioStats segment_ratio(const std::vector<double>& new_logprobs,
                         const std::vector<double>& old_logprobs, const Segmentation& seg) {
    if (new_logprobs.size() != old_logprobs.size()) {
        throw ContractError("new/old logprob length mismatch");
    }
    const int T = static_cast<int>(new_logprobs.size());
    if (seg.end_boundaries.empty() || seg.end_boundaries.back() != T) {
        throw ContractError("segmentation does not cover the token sequence");
    }
    RatioStats rs;
    rs.token_logratios.resize(T);
    for (int t = 0; t < T; ++t) rs.token_logratios[t] = new_logprobs[t] - old_logprobs[t];

    const int M = seg.segment_count();
    rs.mean_logratios.resize(M);
    rs.segment_ratios.resize(M);
    rs.segment_lengths.resize(M);
    for (int m = 0; m < M; ++m) {
        const int b = seg.begin_of(m), e = seg.end_of(m);
        double sum = 0.0;
        for (int t = b; t <= e; ++t) sum += rs.token_logratios[t - 1];
        const int len = e - b + 1;
        rs.segment_lengths[m] = len;
        rs.mean_logratios[m] = sum / len;
        rs.segment_ratios[m] = std::exp(rs.mean_logratios[m]);
    }
    return rs;
}

namespace {

// Replay the response prefix by prefix; dists[t] is the policy distribution
// at the state preceding token t.
void replay_distributions(const PolicyParams& params, const Trajectory& traj,
                          std::vector<TokenDistribution>& dists) {
    const size_t T = traj.tokens.size();
    dists.clear();
    dists.reserve(T);
    EpisodeState state;
    state.prompt = traj.prompt;
    for (size_t t = 0; t < T; ++t) {
        dists.push_back(policy_logits(params, state));
        state.generated.push_back(traj.tokens[t]);
    }
}

void add_score_grad(const PolicyParams& params, const std::vector<int>& feats,
                    const std::vector<double>& logprobs, TokenId token, double coeff,
                    std::vector<double>& grad) {
    const int V = params.vocab_size;
    for (int f : feats) {
        double* row = grad.data() + static_cast<size_t>(f) * V;
        for (int v = 0; v < V; ++v) {
            double indicator = (v == token) ? 1.0 : 0.0;
            row[v] += coeff * (indicator - std::exp(logprobs[v]));
        }
    }
}

bool clip_branch_active(double ratio, double advantage, double epsilon) {
    return (advantage > 0.0 && ratio > 1.0 + epsilon) ||
           (advantage < 0.0 && ratio < 1.0 - epsilon);
}

long batch_token_count(const std::vector<PreparedTrajectory>& batch) {
    long n = 0;
    for (const auto& p : batch) n += static_cast<long>(p.traj.tokens.size());
    return n;
}

// Walks per-token feature sets alongside the stored distributions so gradient
// accumulation does not recompute logits.
struct FeatureReplay {
    const FeatureSpec& spec;
    EpisodeState state;
    std::vector<std::vector<int>> per_token;

    FeatureReplay(const FeatureSpec& fs, const Trajectory& traj) : spec(fs) {
        state.prompt = traj.prompt;
        per_token.resize(traj.tokens.size());
        for (size_t t = 0; t < traj.tokens.size(); ++t) {
            active_features(spec, state, per_token[t]);
            state.generated.push_back(traj.tokens[t]);
        }
    }
};

}  // namespace

ObjectiveResult sapo_objective_and_grad(const std::vector<PreparedTrajectory>& batch,
                                        const PolicyParams& params, const ClipConfig& clip,
                                        BatchAggregation agg) {
    if (batch.empty()) throw ContractError("empty batch");
    ObjectiveResult res;
    res.grad.assign(params.weights.size(), 0.0);
    const long N = static_cast<long>(batch.size());
    const long total_tokens = batch_token_count(batch);
    double batch_value = 0.0;

    std::vector<TokenDistribution> dists;
    for (const auto& item : batch) {
        const Trajectory& traj = item.traj;
        const Segmentation& seg = item.seg;
        const int T = static_cast<int>(traj.tokens.size());
        if (static_cast<int>(item.credit.advantages.size()) != seg.segment_count()) {
            throw ContractError("credit does not match segmentation");
        }
        replay_distributions(params, traj, dists);
        std::vector<double> new_lp(T);
        for (int t = 0; t < T; ++t) new_lp[t] = dists[t].logprobs[traj.tokens[t]];
        RatioStats rs = segment_ratio(new_lp, traj.old_logprobs, seg);

        const double token_weight = agg == BatchAggregation::TrajectoryMean
                                        ? 1.0 / (static_cast<double>(N) * T)
                                        : 1.0 / static_cast<double>(total_tokens);
        FeatureReplay feats(params.feature_spec, traj);
        double traj_sum = 0.0;
        for (int m = 0; m < seg.segment_count(); ++m) {
            const double s = rs.segment_ratios[m];
            const double A = item.credit.advantages[m];
            const double term = std::min(s * A, std::clamp(s, 1.0 - clip.epsilon, 1.0 + clip.epsilon) * A);
            const bool clipped = clip_branch_active(s, A, clip.epsilon);
            for (int t = seg.begin_of(m); t <= seg.end_of(m); ++t) {
                traj_sum += term;
                if (clipped) ++res.clipped_tokens;
            }
            if (!clipped) {
                // d/dtheta [L_m * s_m * A_m] = A_m * s_m * sum_i grad log pi_i
                const double coeff = token_weight * s * A;
                for (int t = seg.begin_of(m); t <= seg.end_of(m); ++t) {
                    add_score_grad(params, feats.per_token[t - 1], dists[t - 1].logprobs,
                                   traj.tokens[t - 1], coeff, res.grad);
                }
            }
            res.sum_abs_mu += std::abs(rs.mean_logratios[m]);
            ++res.mu_count;
        }
        res.total_tokens += T;
        if (agg == BatchAggregation::TrajectoryMean) {
            batch_value += traj_sum / T;
        } else {
            batch_value += traj_sum;
        }
    }
    res.value = agg == BatchAggregation::TrajectoryMean ? batch_value / static_cast<double>(N)
                                                        : batch_value / static_cast<double>(total_tokens);
    return res;
}

ObjectiveResult ppo_objective_and_grad(const std::vector<PreparedTrajectory>& batch,
                                       const PolicyParams& params, const ClipConfig& clip,
                                       BatchAggregation agg) {
    if (batch.empty()) throw ContractError("empty batch");
    ObjectiveResult res;
    res.grad.assign(params.weights.size(), 0.0);
    const long N = static_cast<long>(batch.size());
    const long total_tokens = batch_token_count(batch);
    double batch_value = 0.0;

    std::vector<TokenDistribution> dists;
    for (const auto& item : batch) {
        const Trajectory& traj = item.traj;
        const int T = static_cast<int>(traj.tokens.size());
        if (static_cast<int>(item.credit.token_advantages.size()) != T) {
            throw ContractError("token advantages missing");
        }
        replay_distributions(params, traj, dists);
        const double token_weight = agg == BatchAggregation::TrajectoryMean
                                        ? 1.0 / (static_cast<double>(N) * T)
                                        : 1.0 / static_cast<double>(total_tokens);
        FeatureReplay feats(params.feature_spec, traj);
        double traj_sum = 0.0;
        for (int t = 0; t < T; ++t) {
            const double x = dists[t].logprobs[traj.tokens[t]] - traj.old_logprobs[t];
            const double r = std::exp(x);
            const double A = item.credit.token_advantages[t];
            const double term = std::min(r * A, std::clamp(r, 1.0 - clip.epsilon, 1.0 + clip.epsilon) * A);
            traj_sum += term;
            const bool clipped = clip_branch_active(r, A, clip.epsilon);
            if (clipped) {
                ++res.clipped_tokens;
            } else {
                add_score_grad(params, feats.per_token[t], dists[t].logprobs, traj.tokens[t],
                               token_weight * r * A, res.grad);
            }
            res.sum_abs_mu += std::abs(x);
            ++res.mu_count;
        }
        res.total_tokens += T;
        if (agg == BatchAggregation::TrajectoryMean) {
            batch_value += traj_sum / T;
        } else {
            batch_value += traj_sum;
        }
    }
    res.value = agg == BatchAggregation::TrajectoryMean ? batch_value / static_cast<double>(N)
                                                        : batch_value / static_cast<double>(total_tokens);
    return res;
}

ObjectiveResult naive_is_objective_and_grad(const std::vector<PreparedTrajectory>& batch,
                                            const PolicyParams& params, const ClipConfig& clip,
                                            BatchAggregation agg) {
    if (batch.empty()) throw ContractError("empty batch");
    ObjectiveResult res;
    res.grad.assign(params.weights.size(), 0.0);
    const long N = static_cast<long>(batch.size());
    const long total_tokens = batch_token_count(batch);
    double batch_value = 0.0;

    std::vector<TokenDistribution> dists;
    for (const auto& item : batch) {
        const Trajectory& traj = item.traj;
        const int T = static_cast<int>(traj.tokens.size());
        if (static_cast<int>(item.credit.token_advantages.size()) != T) {
            throw ContractError("token advantages missing");
        }
        replay_distributions(params, traj, dists);
        const double token_weight = agg == BatchAggregation::TrajectoryMean
                                        ? 1.0 / (static_cast<double>(N) * T)
                                        : 1.0 / static_cast<double>(total_tokens);
        FeatureReplay feats(params.feature_spec, traj);
        double traj_sum = 0.0;
        for (int t = 0; t < T; ++t) {
            const double x = dists[t].logprobs[traj.tokens[t]] - traj.old_logprobs[t];
            const double r = std::exp(x);
            const double A = item.credit.token_advantages[t];  // segment advantage, broadcast
            const double term = std::min(r * A, std::clamp(r, 1.0 - clip.epsilon, 1.0 + clip.epsilon) * A);
            traj_sum += term;
            const bool clipped = clip_branch_active(r, A, clip.epsilon);
            if (clipped) {
                ++res.clipped_tokens;
            } else {
                add_score_grad(params, feats.per_token[t], dists[t].logprobs, traj.tokens[t],
                               token_weight * r * A, res.grad);
            }
            res.sum_abs_mu += std::abs(x);
            ++res.mu_count;
        }
        res.total_tokens += T;
        if (agg == BatchAggregation::TrajectoryMean) {
            batch_value += traj_sum / T;
        } else {
            batch_value += traj_sum;
        }
    }
    res.value = agg == BatchAggregation::TrajectoryMean ? batch_value / static_cast<double>(N)
                                                        : batch_value / static_cast<double>(total_tokens);
    return res;
}

std::vector<double> apply_kl_reward_penalty(const std::vector<double>& old_logprobs,
                                            const std::vector<double>& ref_logprobs,
                                            double terminal_reward, const Segmentation& seg,
                                            const ClipConfig& clip) {
    const int M = seg.segment_count();
    std::vector<double> rewards(M, 0.0);
    rewards[M - 1] = terminal_reward;
    if (clip.kl_kind == ClipConfig::KlKind::None) return rewards;

    if (old_logprobs.size() != ref_logprobs.size()) {
        throw ContractError("old/ref logprob length mismatch");
    }
    if (static_cast<int>(old_logprobs.size()) != seg.end_boundaries.back()) {
        throw ContractError("segmentation does not cover the token sequence");
    }
    for (int m = 0; m < M; ++m) {
        double k1_sum = 0.0;
        for (int t = seg.begin_of(m); t <= seg.end_of(m); ++t) {
            k1_sum += old_logprobs[t - 1] - ref_logprobs[t - 1];
        }
        rewards[m] -= clip.kl_coef * k1_sum;
    }
    return rewards;
}

AdamState make_adam(size_t dim) {
    AdamState s;
    s.m.assign(dim, 0.0);
    s.v.assign(dim, 0.0);
    return s;
}

void adam_step(std::vector<double>& params, AdamState& state, const std::vector<double>& grad,
               double lr, bool maximize) {
    if (params.size() != grad.size() || params.size() != state.m.size()) {
        throw ContractError("adam dimension mismatch");
    }
    if (lr == 0.0) return;
    ++state.t;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
    const double sign = maximize ? 1.0 : -1.0;
    for (size_t i = 0; i < params.size(); ++i) {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / bc1;
        const double vhat = state.v[i] / bc2;
        params[i] += sign * lr * mhat / (std::sqrt(vhat) + state.eps);
    }
}

LearnerState make_learner(const RunConfig& config) {
    config.validate();
    LearnerState L{make_env(config.env, config.seed),
                   make_policy(config.policy_features, config.env.vocab_size),
                   make_value(ValueFeatureSpec{config.policy_features, config.env.max_len}),
                   PolicyParams{},
                   AdamState{},
                   AdamState{},
                   0};
    L.ref_policy = L.policy;
    L.policy_opt = make_adam(L.policy.weights.size());
    L.value_opt = make_adam(L.value.weights.size());
    return L;
}

namespace {

std::vector<EpisodeState> boundary_states_of(const Trajectory& traj, const Segmentation& seg) {
    std::vector<EpisodeState> states(seg.segment_count());
    for (int m = 0; m < seg.segment_count(); ++m) {
        states[m].prompt = traj.prompt;
        const int prefix = seg.begin_of(m) - 1;
        states[m].generated.assign(traj.tokens.begin(), traj.tokens.begin() + prefix);
    }
    return states;
}

std::vector<double> ref_logprobs_of(const LearnerState& L, const Trajectory& traj,
                                    const ClipConfig& clip) {
    const size_t T = traj.tokens.size();
    std::vector<double> ref(T, 0.0);
    if (clip.kl_kind == ClipConfig::KlKind::None) return ref;
    EpisodeState state;
    state.prompt = traj.prompt;
    for (size_t t = 0; t < T; ++t) {
        ref[t] = policy_logits(L.ref_policy, state).logprobs[traj.tokens[t]];
        state.generated.push_back(traj.tokens[t]);
    }
    return ref;
}

}  // namespace

std::vector<PreparedTrajectory> prepare_batch(const LearnerState& state, const RunConfig& config,
                                              long step) {
    std::vector<PreparedTrajectory> batch(config.batch_size);
    for (int i = 0; i < config.batch_size; ++i) {
        Rng rng = Rng::substream(config.seed, static_cast<uint64_t>(step), static_cast<uint64_t>(i));
        batch[i].traj = sample_trajectory(state.env, state.policy, rng);
    }

    switch (config.algo) {
        case Algo::Sapo:
        case Algo::NaiveIs: {
            for (auto& item : batch) {
                item.seg = segment(item.traj, config.seg_strategy);
                const int M = item.seg.segment_count();
                std::vector<EpisodeState> states = boundary_states_of(item.traj, item.seg);
                std::vector<double> values(M + 1, 0.0);
                for (int m = 0; m < M; ++m) values[m] = value_predict(state.value, states[m]);
                std::vector<double> ref = ref_logprobs_of(state, item.traj, config.clip);
                std::vector<double> rewards = apply_kl_reward_penalty(
                    item.traj.old_logprobs, ref, item.traj.reward, item.seg, config.clip);
                item.credit = compute_segment_credit(rewards, values, config.gae, item.seg);
            }
            break;
        }
        case Algo::Ppo: {
            for (auto& item : batch) {
                const int T = static_cast<int>(item.traj.tokens.size());
                item.seg = all_single_token_segments(T);
                std::vector<EpisodeState> states = boundary_states_of(item.traj, item.seg);
                std::vector<double> values(T + 1, 0.0);
                for (int t = 0; t < T; ++t) values[t] = value_predict(state.value, states[t]);
                std::vector<double> ref = ref_logprobs_of(state, item.traj, config.clip);
                std::vector<double> rewards = apply_kl_reward_penalty(
                    item.traj.old_logprobs, ref, item.traj.reward, item.seg, config.clip);
                item.credit.rewards = rewards;
                item.credit.deltas = segment_deltas(rewards, values, config.gae.gamma);
                item.credit.advantages = token_gae(rewards, values, config.gae);
                item.credit.returns.resize(T);
                for (int t = 0; t < T; ++t) {
                    item.credit.returns[t] = item.credit.advantages[t] + values[t];
                }
                item.credit.token_advantages = item.credit.advantages;
            }
            break;
        }
        case Algo::Grpo: {
            std::vector<double> shaped(batch.size());
            for (size_t i = 0; i < batch.size(); ++i) {
                const auto& traj = batch[i].traj;
                const int T = static_cast<int>(traj.tokens.size());
                batch[i].seg = whole_response_segment(T);
                std::vector<double> ref = ref_logprobs_of(state, traj, config.clip);
                std::vector<double> rewards = apply_kl_reward_penalty(
                    traj.old_logprobs, ref, traj.reward, batch[i].seg, config.clip);
                shaped[i] = rewards[0];
            }
            for (size_t g = 0; g + config.group_size <= batch.size(); g += config.group_size) {
                std::vector<double> group(shaped.begin() + g, shaped.begin() + g + config.group_size);
                std::vector<double> adv = group_relative_advantages(group, config.grpo_normalize_std);
                for (int i = 0; i < config.group_size; ++i) {
                    auto& item = batch[g + i];
                    const int T = static_cast<int>(item.traj.tokens.size());
                    item.credit.rewards = {shaped[g + i]};
                    item.credit.advantages = {adv[i]};
                    item.credit.token_advantages.assign(T, adv[i]);
                }
            }
            break;
        }
    }
    return batch;
}

StepMetrics train_step(LearnerState& L, const RunConfig& config) {
    const long step = L.step;
    std::vector<PreparedTrajectory> batch = prepare_batch(L, config, step);

    StepMetrics metrics;
    metrics.step = step;
    long token_total = 0;
    for (const auto& item : batch) {
        metrics.mean_reward += item.traj.reward;
        metrics.mean_resp_len += static_cast<double>(item.traj.tokens.size());
        metrics.mean_M += item.seg.segment_count();
        for (double h : item.traj.entropies) metrics.mean_entropy += h;
        token_total += static_cast<long>(item.traj.tokens.size());
    }
    const double N = static_cast<double>(batch.size());
    metrics.mean_reward /= N;
    metrics.mean_resp_len /= N;
    metrics.mean_M /= N;
    metrics.mean_entropy /= static_cast<double>(token_total);

    // Contiguous deterministic mini-batch split.
    const int B = config.minibatch_count;
    long clipped = 0, tokens_seen = 0, mu_count = 0;
    double sum_abs_mu = 0.0, obj_sum = 0.0, vloss_sum = 0.0;
    int chunk_begin = 0;
    for (int b = 0; b < B; ++b) {
        const int chunk_size = (config.batch_size + B - 1 - b) / B;
        std::vector<PreparedTrajectory> chunk(batch.begin() + chunk_begin,
                                              batch.begin() + chunk_begin + chunk_size);
        chunk_begin += chunk_size;

        ObjectiveResult res;
        switch (config.algo) {
            case Algo::Sapo:
                res = sapo_objective_and_grad(chunk, L.policy, config.clip, config.aggregation);
                break;
            case Algo::NaiveIs:
                res = naive_is_objective_and_grad(chunk, L.policy, config.clip, config.aggregation);
                break;
            case Algo::Ppo:
            case Algo::Grpo:
                res = ppo_objective_and_grad(chunk, L.policy, config.clip, config.aggregation);
                break;
        }
        if (!std::isfinite(res.value) || !all_finite(res.grad)) {
            throw DivergenceError("non-finite policy objective at step " + std::to_string(step));
        }
        adam_step(L.policy.weights, L.policy_opt, res.grad, config.lr_policy, /*maximize=*/true);

        obj_sum += res.value;
        clipped += res.clipped_tokens;
        tokens_seen += res.total_tokens;
        sum_abs_mu += res.sum_abs_mu;
        mu_count += res.mu_count;

        if (config.algo != Algo::Grpo) {
            double chunk_loss = 0.0;
            std::vector<double> vgrad(L.value.weights.size(), 0.0);
            for (const auto& item : chunk) {
                std::vector<EpisodeState> states = boundary_states_of(item.traj, item.seg);
                ValueLossResult vres = value_loss_and_grad(L.value, states, item.credit.returns);
                chunk_loss += vres.loss;
                for (size_t i = 0; i < vgrad.size(); ++i) vgrad[i] += vres.grad[i];
            }
            chunk_loss /= static_cast<double>(chunk.size());
            for (double& g : vgrad) g /= static_cast<double>(chunk.size());
            if (!std::isfinite(chunk_loss) || !all_finite(vgrad)) {
                throw DivergenceError("non-finite value loss at step " + std::to_string(step));
            }
            adam_step(L.value.weights, L.value_opt, vgrad, config.lr_value, /*maximize=*/false);
            vloss_sum += chunk_loss;
        }
    }

    metrics.policy_obj = obj_sum / B;
    metrics.value_loss = config.algo == Algo::Grpo ? 0.0 : vloss_sum / B;
    metrics.clip_frac = tokens_seen > 0 ? static_cast<double>(clipped) / tokens_seen : 0.0;
    metrics.mean_abs_mu = mu_count > 0 ? sum_abs_mu / mu_count : 0.0;

    if (!all_finite(L.policy.weights) || !all_finite(L.value.weights)) {
        throw DivergenceError("non-finite parameters after step " + std::to_string(step));
    }
    L.step = step + 1;
    return metrics;
}

}  // namespace sapo
