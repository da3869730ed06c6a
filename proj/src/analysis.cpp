#include "sapo/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sapo {

double quantile(std::vector<double> values, double q) {
    if (values.empty()) throw StatError("quantile of empty sample");
    if (q <= 0.0 || q >= 1.0) throw StatError("quantile level must be in (0, 1)");
    std::sort(values.begin(), values.end());
    size_t rank = static_cast<size_t>(std::ceil(q * static_cast<double>(values.size())));
    rank = std::min(std::max<size_t>(rank, 1), values.size());
    return values[rank - 1];
}

double lift(const LiftInputs& in) {
    const size_t N = in.entropies.size();
    if (N < 2 || in.value_gaps.size() != N) {
        throw ContractError("lift needs matched sequences of length >= 2");
    }
    const double h_thresh = quantile(in.entropies, in.q);
    const double d_thresh = quantile(in.value_gaps, in.d_quantile);

    size_t n_a = 0, n_d = 0, n_ad = 0;
    for (size_t i = 0; i < N; ++i) {
        const bool a = in.entropies[i] >= h_thresh;
        const bool d = in.value_gaps[i] >= d_thresh;
        n_a += a;
        n_d += d;
        n_ad += a && d;
    }
    if (n_a == 0 || n_d == 0) throw StatError("lift undefined: empty A or D set");
    const double p_d_given_a = static_cast<double>(n_ad) / static_cast<double>(n_a);
    const double p_d = static_cast<double>(n_d) / static_cast<double>(N);
    return p_d_given_a / p_d;
}

std::pair<double, double> bootstrap_ci(const std::vector<double>& values, const Statistic& stat,
                                       int n_boot, double level, uint64_t seed) {
    if (values.size() < 2) throw ContractError("bootstrap needs at least 2 samples");
    if (n_boot < 100) throw ContractError("bootstrap needs n_boot >= 100");
    if (level <= 0.0 || level >= 1.0) throw ContractError("level must be in (0, 1)");

    Rng rng(seed);
    std::vector<double> resample(values.size());
    std::vector<double> stats(n_boot);
    for (int b = 0; b < n_boot; ++b) {
        for (size_t i = 0; i < values.size(); ++i) {
            resample[i] = values[rng.next_below(values.size())];
        }
        stats[b] = stat(resample);
    }
    std::sort(stats.begin(), stats.end());
    const double alpha = (1.0 - level) / 2.0;
    auto pick = [&](double p) {
        size_t rank = static_cast<size_t>(std::ceil(p * n_boot));
        rank = std::min(std::max<size_t>(rank, 1), static_cast<size_t>(n_boot));
        return stats[rank - 1];
    };
    return {pick(alpha), pick(1.0 - alpha)};
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based average rank
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 3) {
        throw ContractError("spearman needs matched sequences of length >= 3");
    }
    std::vector<double> rx = average_ranks(xs);
    std::vector<double> ry = average_ranks(ys);
    const size_t n = xs.size();
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) throw StatError("spearman undefined for constant input");
    return sxy / std::sqrt(sxx * syy);
}

BiasCase bias_bound_check(const std::vector<double>& token_logratios) {
    if (token_logratios.empty()) throw ContractError("bias_bound_check needs L >= 1");
    BiasCase c;
    c.token_logratios = token_logratios;
    c.length = static_cast<int>(token_logratios.size());
    double sum = 0.0;
    for (double x : token_logratios) sum += x;
    c.mu = sum / c.length;
    c.raw_ratio = std::exp(static_cast<double>(c.length) * c.mu);
    c.geo_ratio = std::exp(c.mu);
    c.diff = std::abs(c.raw_ratio - c.geo_ratio);
    c.bound = std::exp(static_cast<double>(c.length) * std::abs(c.mu)) *
              static_cast<double>(c.length - 1) * std::abs(c.mu);
    c.holds = c.diff <= c.bound;
    return c;
}

std::pair<double, double> target_variance_reduction(const std::vector<double>& token_targets,
                                                    const Segmentation& seg) {
    const int T = static_cast<int>(token_targets.size());
    if (T < 2) throw ContractError("target_variance_reduction needs T >= 2");
    if (seg.end_boundaries.empty() || seg.end_boundaries.back() != T) {
        throw ContractError("segmentation does not cover the targets");
    }
    const int M = seg.segment_count();
    const int seg_len = seg.length_of(0);
    for (int m = 1; m < M; ++m) {
        if (seg.length_of(m) != seg_len) {
            throw ContractError("predicted ratio needs fixed-length segments");
        }
    }

    auto population_variance = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (double x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (double x : v) var += (x - mean) * (x - mean);
        return var / static_cast<double>(v.size());
    };

    std::vector<double> seg_targets(M);
    for (int m = 0; m < M; ++m) {
        double sum = 0.0;
        for (int t = seg.begin_of(m); t <= seg.end_of(m); ++t) sum += token_targets[t - 1];
        seg_targets[m] = sum / seg_len;
    }
    const double var_tok = population_variance(token_targets);
    if (var_tok == 0.0) throw StatError("token target variance is zero");
    const double var_seg = M >= 2 ? population_variance(seg_targets) : 0.0;
    if (M < 2) throw StatError("need at least two segments for a variance ratio");
    return {var_seg / var_tok, 1.0 / static_cast<double>(seg_len)};
}

double grad_check(const std::function<double(const std::vector<double>&)>& objective,
                  const std::vector<double>& analytic_grad, const std::vector<double>& at,
                  double h, uint64_t seed, int max_coords) {
    if (h <= 0.0) throw ContractError("finite-difference step must be positive");
    if (analytic_grad.size() != at.size()) throw ContractError("gradient dimension mismatch");
    const size_t dim = at.size();

    std::vector<size_t> coords;
    if (dim <= static_cast<size_t>(max_coords)) {
        coords.resize(dim);
        std::iota(coords.begin(), coords.end(), size_t{0});
    } else {
        Rng rng(seed);
        std::vector<char> taken(dim, 0);
        while (coords.size() < static_cast<size_t>(max_coords)) {
            size_t i = rng.next_below(dim);
            if (!taken[i]) {
                taken[i] = 1;
                coords.push_back(i);
            }
        }
    }

    std::vector<double> x = at;
    double worst = 0.0;
    for (size_t i : coords) {
        const double keep = x[i];
        x[i] = keep + h;
        const double fp = objective(x);
        x[i] = keep - h;
        const double fm = objective(x);
        x[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw ContractError("non-finite objective during grad check");
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic_grad[i]), std::abs(numeric), 1e-8});
        worst = std::max(worst, std::abs(analytic_grad[i] - numeric) / denom);
    }
    return worst;
}

LiftCurveResult lift_q_curve(const std::vector<LiftInputs>& per_step,
                             const std::vector<double>& q_grid, int n_stages, int n_boot,
                             double level, int smooth_window, uint64_t seed) {
    const int S = static_cast<int>(per_step.size());
    if (S < 2) throw ContractError("lift_q_curve needs at least 2 steps");
    if (n_stages < 1 || n_stages > S) throw ContractError("invalid stage count");
    if (q_grid.empty()) throw ContractError("empty q grid");

    LiftCurveResult out;

    // Per-step mean lift over the grid (for the training trend).
    out.mean_lift_per_step.resize(S, 0.0);
    for (int s = 0; s < S; ++s) {
        for (double q : q_grid) {
            LiftInputs in = per_step[s];
            in.q = q;
            out.mean_lift_per_step[s] += lift(in);
        }
        out.mean_lift_per_step[s] /= static_cast<double>(q_grid.size());
    }

    // Stage-averaged curves with bootstrap CIs over the stage's steps.
    int begin = 0;
    for (int stage = 0; stage < n_stages; ++stage) {
        const int size = (S + n_stages - 1 - stage) / n_stages;
        const int end = begin + size;
        for (double q : q_grid) {
            std::vector<double> lifts;
            lifts.reserve(size);
            for (int s = begin; s < end; ++s) {
                LiftInputs in = per_step[s];
                in.q = q;
                lifts.push_back(lift(in));
            }
            double mean = 0.0;
            for (double v : lifts) mean += v;
            mean /= static_cast<double>(lifts.size());
            double lo = mean, hi = mean;
            if (lifts.size() >= 2) {
                auto stat = [](const std::vector<double>& v) {
                    double m = 0.0;
                    for (double x : v) m += x;
                    return m / static_cast<double>(v.size());
                };
                std::tie(lo, hi) = bootstrap_ci(lifts, stat, n_boot, level,
                                                seed ^ (static_cast<uint64_t>(stage) << 32) ^
                                                    static_cast<uint64_t>(q * 1e6));
            }
            out.rows.push_back({stage, q, mean, lo, hi});
        }
        begin = end;
    }

    // Smoothed mean lift vs step.
    const int w = std::max(1, smooth_window);
    std::vector<double> smoothed(S);
    std::vector<double> steps(S);
    for (int s = 0; s < S; ++s) {
        const int lo = std::max(0, s - w + 1);
        double m = 0.0;
        for (int i = lo; i <= s; ++i) m += out.mean_lift_per_step[i];
        smoothed[s] = m / static_cast<double>(s - lo + 1);
        steps[s] = static_cast<double>(s);
    }
    out.spearman_trend = spearman(smoothed, steps);
    return out;
}

}  // namespace sapo
