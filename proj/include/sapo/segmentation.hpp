#pragma once

#include <string>
#include <vector>

#include "sapo/common.hpp"
#include "sapo/envs.hpp"

namespace sapo {

// Partition of a T-token response into M contiguous segments, stored as the
// 1-based end boundaries e_1 < ... < e_M with e_M = T. Segment m covers
// tokens [e_{m-1}+1, e_m] (e_0 = 0).
struct Segmentation {
    std::vector<int> end_boundaries;

    int segment_count() const { return static_cast<int>(end_boundaries.size()); }
    int begin_of(int m) const { return m == 0 ? 1 : end_boundaries[m - 1] + 1; }  // 0-based m
    int end_of(int m) const { return end_boundaries[m]; }
    int length_of(int m) const { return end_of(m) - begin_of(m) + 1; }
};

struct SegStrategy {
    enum class Kind { EntropyTopK, Marker, FixedStep, ProbAccum };

    Kind kind = Kind::EntropyTopK;
    // entropy-topk
    double k_percent = 30.0;
    // A selected high-entropy index normally ends its segment; with
    // boundary_as_start it begins the next one instead (boundary at index-1).
    bool boundary_as_start = false;
    // marker
    TokenId marker_token = 0;
    // fixed-step
    int step_len = 1;
    // prob-accum: close a segment once count_c tokens with
    // old_logprob < ln(low_prob_threshold) accumulated since the last boundary.
    double low_prob_threshold = 0.5;
    int count_c = 1;
};

// Computes segment end boundaries for a trajectory under the given strategy.
// Pure function of (traj, strategy); T is always the final boundary.
Segmentation segment(const Trajectory& traj, const SegStrategy& strategy);

// Checks the Segmentation invariants against T; returns every violation found.
std::vector<std::string> validate(const Segmentation& seg, int T);

// Degenerate all-length-1 partition (the k = 100 case).
Segmentation all_single_token_segments(int T);

// Single segment covering the whole response.
Segmentation whole_response_segment(int T);

// Map each token index (0-based) to its segment index (0-based).
std::vector<int> token_to_segment(const Segmentation& seg, int T);

}  // namespace sapo
