#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "sapo/common.hpp"
#include "sapo/segmentation.hpp"

namespace sapo {

// Inputs for the entropy-vs-value-discontinuity enrichment statistic.
// A = tokens with entropy >= q-quantile, D = tokens with value gap >=
// d_quantile-quantile, Lift = P(D|A) / P(D).
struct LiftInputs {
    std::vector<double> entropies;
    std::vector<double> value_gaps;  // |V_t - V_{t+1}|
    double q = 0.8;
    double d_quantile = 0.8;
};

double lift(const LiftInputs& inputs);

// Nearest-rank quantile: smallest element with at least ceil(q*N) values <= it.
double quantile(std::vector<double> values, double q);

using Statistic = std::function<double(const std::vector<double>&)>;

// Seeded percentile bootstrap over resamples-with-replacement.
std::pair<double, double> bootstrap_ci(const std::vector<double>& values, const Statistic& stat,
                                       int n_boot, double level, uint64_t seed);

// Rank correlation with average ranks at ties.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

// One audit record for the geometric-mean ratio bias bound
// |e^{L mu} - e^{mu}| <= e^{L |mu|} (L-1) |mu|.
struct BiasCase {
    std::vector<double> token_logratios;
    int length = 0;
    double mu = 0.0;
    double raw_ratio = 0.0;
    double geo_ratio = 0.0;
    double diff = 0.0;
    double bound = 0.0;
    bool holds = false;
};

BiasCase bias_bound_check(const std::vector<double>& token_logratios);

// Within-segment mean aggregation of targets: returns
// (Var(segment targets) / Var(token targets), 1 / segment_length).
// Requires fixed-length segments for the prediction to be well-defined.
std::pair<double, double> target_variance_reduction(const std::vector<double>& token_targets,
                                                    const Segmentation& seg);

// Central finite differences over a random coordinate subset (>= 64 when the
// dimension allows). Relative error denominator max(|a|, |n|, 1e-8).
double grad_check(const std::function<double(const std::vector<double>&)>& objective,
                  const std::vector<double>& analytic_grad, const std::vector<double>& at,
                  double h, uint64_t seed = 0, int max_coords = 64);

struct LiftCurveRow {
    int stage = 0;
    double q = 0.0;
    double lift = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
};

struct LiftCurveResult {
    std::vector<LiftCurveRow> rows;
    double spearman_trend = 0.0;            // smoothed mean lift vs step
    std::vector<double> mean_lift_per_step;
};

// Stage-averaged Lift-q table over a training run. Each entry of `per_step`
// holds one step's pooled (entropy, value gap) pairs; steps are split into
// n_stages contiguous stages, the CI bootstraps the per-step lifts inside a
// stage, and the trend statistic applies a moving average of `smooth_window`
// steps before the rank correlation.
LiftCurveResult lift_q_curve(const std::vector<LiftInputs>& per_step,
                             const std::vector<double>& q_grid, int n_stages, int n_boot,
                             double level, int smooth_window, uint64_t seed);

}  // namespace sapo
