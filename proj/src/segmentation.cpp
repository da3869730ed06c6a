#include "sapo/segmentation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

namespace sapo {

namespace {

Segmentation from_boundary_set(std::set<int> ends, int T) {
    ends.insert(T);
    Segmentation seg;
    seg.end_boundaries.assign(ends.begin(), ends.end());
    return seg;
}

Segmentation entropy_topk(const Trajectory& traj, const SegStrategy& st) {
    const int T = static_cast<int>(traj.tokens.size());
    if (st.k_percent <= 0.0 || st.k_percent > 100.0) {
        throw ConfigError("k_percent must be in (0, 100]");
    }
    int take = static_cast<int>(std::ceil(st.k_percent / 100.0 * T));
    take = std::max(1, std::min(take, T));

    // Rank indices by entropy descending, ties toward the smaller index.
    std::vector<int> order(T);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (traj.entropies[a] != traj.entropies[b]) return traj.entropies[a] > traj.entropies[b];
        return a < b;
    });

    std::set<int> ends;
    for (int i = 0; i < take; ++i) {
        int idx = order[i] + 1;  // 1-based selected index
        if (st.boundary_as_start) {
            // Selected index opens a new segment, so the previous one ends
            // just before it. Index 1 contributes no boundary.
            if (idx > 1) ends.insert(idx - 1);
        } else {
            ends.insert(idx);
        }
    }
    return from_boundary_set(std::move(ends), T);
}

Segmentation marker_split(const Trajectory& traj, const SegStrategy& st) {
    const int T = static_cast<int>(traj.tokens.size());
    std::set<int> ends;
    for (int t = 0; t < T; ++t) {
        if (traj.tokens[t] == st.marker_token) ends.insert(t + 1);
    }
    return from_boundary_set(std::move(ends), T);
}

Segmentation fixed_step(const Trajectory& traj, const SegStrategy& st) {
    const int T = static_cast<int>(traj.tokens.size());
    if (st.step_len < 1) throw ConfigError("step_len must be >= 1");
    std::set<int> ends;
    for (int e = st.step_len; e <= T; e += st.step_len) ends.insert(e);
    return from_boundary_set(std::move(ends), T);
}

Segmentation prob_accum(const Trajectory& traj, const SegStrategy& st) {
    const int T = static_cast<int>(traj.tokens.size());
    if (st.count_c < 1) throw ConfigError("count_c must be >= 1");
    if (st.low_prob_threshold <= 0.0 || st.low_prob_threshold > 1.0) {
        throw ConfigError("low_prob_threshold must be in (0, 1]");
    }
    const double log_threshold = std::log(st.low_prob_threshold);
    std::set<int> ends;
    int low_count = 0;
    for (int t = 0; t < T; ++t) {
        if (traj.old_logprobs[t] < log_threshold) ++low_count;
        if (low_count >= st.count_c) {
            ends.insert(t + 1);
            low_count = 0;
        }
    }
    return from_boundary_set(std::move(ends), T);
}

}  // namespace

Segmentation segment(const Trajectory& traj, const SegStrategy& strategy) {
    if (traj.tokens.empty()) throw ContractError("cannot segment an empty response");
    switch (strategy.kind) {
        case SegStrategy::Kind::EntropyTopK:
            return entropy_topk(traj, strategy);
        case SegStrategy::Kind::Marker:
            return marker_split(traj, strategy);
        case SegStrategy::Kind::FixedStep:
            return fixed_step(traj, strategy);
        case SegStrategy::Kind::ProbAccum:
            return prob_accum(traj, strategy);
    }
    throw ConfigError("unknown segmentation strategy");
}

std::vector<std::string> validate(const Segmentation& seg, int T) {
    std::vector<std::string> violations;
    if (seg.end_boundaries.empty()) {
        violations.push_back("no boundaries: a segmentation needs at least e_M = T");
        return violations;
    }
    if (seg.end_boundaries.front() < 1) {
        violations.push_back("first boundary below 1");
    }
    for (size_t i = 1; i < seg.end_boundaries.size(); ++i) {
        if (seg.end_boundaries[i] <= seg.end_boundaries[i - 1]) {
            violations.push_back("boundaries not strictly increasing at position " +
                                 std::to_string(i));
        }
    }
    if (seg.end_boundaries.back() != T) {
        violations.push_back("missing final boundary: e_M = " +
                             std::to_string(seg.end_boundaries.back()) + " but T = " +
                             std::to_string(T));
    }
    return violations;
}

Segmentation all_single_token_segments(int T) {
    Segmentation seg;
    seg.end_boundaries.resize(T);
    std::iota(seg.end_boundaries.begin(), seg.end_boundaries.end(), 1);
    return seg;
}

Segmentation whole_response_segment(int T) {
    Segmentation seg;
    seg.end_boundaries = {T};
    return seg;
}

std::vector<int> token_to_segment(const Segmentation& seg, int T) {
    std::vector<int> map(T, -1);
    int m = 0;
    for (int t = 1; t <= T; ++t) {
        map[t - 1] = m;
        if (t == seg.end_boundaries[m]) ++m;
    }
    return map;
}

}  // namespace sapo
