#include "sapo/credit.hpp"

#include <cmath>

namespace sapo {

std::vector<double> segment_deltas(const std::vector<double>& rewards,
                                   const std::vector<double>& boundary_values, double gamma) {
    const size_t M = rewards.size();
    if (M == 0) throw ContractError("segment_deltas needs M >= 1");
    if (boundary_values.size() != M + 1) {
        throw ContractError("boundary_values must have M+1 entries (terminal included)");
    }
    std::vector<double> deltas(M);
    for (size_t m = 0; m < M; ++m) {
        deltas[m] = rewards[m] + gamma * boundary_values[m + 1] - boundary_values[m];
    }
    return deltas;
}

std::vector<double> segment_gae(const std::vector<double>& deltas, const GaeParams& gae) {
    const size_t M = deltas.size();
    if (M == 0) throw ContractError("segment_gae needs M >= 1");
    std::vector<double> adv(M);
    double acc = 0.0;
    for (size_t m = M; m-- > 0;) {
        acc = deltas[m] + gae.gamma * gae.lambda * acc;
        adv[m] = acc;
    }
    return adv;
}

std::vector<double> broadcast_to_tokens(const std::vector<double>& advantages,
                                        const Segmentation& seg) {
    if (static_cast<int>(advantages.size()) != seg.segment_count()) {
        throw ContractError("advantages length != segment count");
    }
    const int T = seg.end_boundaries.back();
    std::vector<double> token_adv(T);
    for (int m = 0; m < seg.segment_count(); ++m) {
        for (int t = seg.begin_of(m); t <= seg.end_of(m); ++t) {
            token_adv[t - 1] = advantages[m];
        }
    }
    return token_adv;
}

SegmentCredit compute_segment_credit(const std::vector<double>& rewards,
                                     const std::vector<double>& boundary_values,
                                     const GaeParams& gae, const Segmentation& seg) {
    SegmentCredit credit;
    credit.rewards = rewards;
    credit.deltas = segment_deltas(rewards, boundary_values, gae.gamma);
    credit.advantages = segment_gae(credit.deltas, gae);
    credit.returns.resize(credit.advantages.size());
    for (size_t m = 0; m < credit.advantages.size(); ++m) {
        credit.returns[m] = credit.advantages[m] + boundary_values[m];
    }
    credit.token_advantages = broadcast_to_tokens(credit.advantages, seg);
    return credit;
}

std::vector<double> token_gae(const std::vector<double>& rewards,
                              const std::vector<double>& values, const GaeParams& gae) {
    const size_t T = rewards.size();
    if (T == 0) throw ContractError("token_gae needs T >= 1");
    if (values.size() != T + 1) {
        throw ContractError("values must have T+1 entries (terminal included)");
    }
    std::vector<double> adv(T);
    double acc = 0.0;
    for (size_t t = T; t-- > 0;) {
        double delta = rewards[t] + gae.gamma * values[t + 1] - values[t];
        acc = delta + gae.gamma * gae.lambda * acc;
        adv[t] = acc;
    }
    return adv;
}

std::vector<double> group_relative_advantages(const std::vector<double>& group_rewards,
                                              bool normalize_std) {
    const size_t G = group_rewards.size();
    if (G < 2) throw ContractError("group_relative_advantages needs G >= 2");
    double mean = 0.0;
    for (double r : group_rewards) mean += r;
    mean /= static_cast<double>(G);

    std::vector<double> adv(G);
    double var = 0.0;
    for (size_t i = 0; i < G; ++i) {
        adv[i] = group_rewards[i] - mean;
        var += adv[i] * adv[i];
    }
    if (normalize_std) {
        double sd = std::sqrt(var / static_cast<double>(G));  // population std
        for (double& a : adv) a /= (sd + 1e-8);
    }
    return adv;
}

}  // namespace sapo
