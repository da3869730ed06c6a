#pragma once

#include <string>
#include <vector>

#include "sapo/config.hpp"
#include "sapo/optim.hpp"

namespace sapo {

struct RunReport {
    std::string metrics_path;
    std::string config_snapshot;
    StepMetrics final_metrics;
    double wall_time_seconds = 0.0;
    std::vector<StepMetrics> history;
};

// Executes config.total_steps training steps, streaming one metrics CSV row
// per step into <output_dir>/metrics.csv. The output directory also receives
// the config snapshot, a manifest carrying the config hash, final parameter
// checkpoints, and optional trajectory dumps. Byte-deterministic in
// (config, seed) except report wall time.
RunReport run_experiment(const RunConfig& config);

struct ComparisonRow {
    std::string algo;
    uint64_t seed = 0;
    double final_success = 0.0;
};

struct ComparisonResult {
    std::vector<ComparisonRow> rows;
    std::vector<std::pair<std::string, double>> median_final;  // per algo
};

// Runs every (algo, seed) pair under the shared base config, writes per-run
// directories plus comparison.csv / summary.csv and per-metric curve SVGs.
ComparisonResult compare_algorithms(const RunConfig& base, const std::vector<Algo>& algos,
                                    const std::vector<uint64_t>& seeds,
                                    const std::string& out_dir);

// Final success of one run: mean reward over the last tenth of its steps.
double final_success(const std::vector<StepMetrics>& history);

struct TrajectoryRecord {
    long id = 0;
    Trajectory traj;
    std::vector<int> boundaries;  // empty when not segmented
};

// JSONL, one record per trajectory: id, prompt, tokens, old_logprobs,
// entropies, reward, boundaries. Doubles round-trip exactly.
void dump_trajectories(const std::vector<TrajectoryRecord>& batch, const std::string& path);
std::vector<TrajectoryRecord> load_trajectories(const std::string& path);

// One JSON line with keys rewards/deltas/advantages/returns, for debug dumps.
std::string credit_to_jsonl(const SegmentCredit& credit);

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

// One SVG line chart per metric column.
void write_metric_svgs(const std::vector<StepMetrics>& history, const std::string& dir);

struct ChartSeries {
    std::string name;
    std::vector<double> ys;
};

void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<double>& xs, const std::vector<ChartSeries>& series);

// Flat little-endian double array with a one-line JSON header.
void save_policy_params(const PolicyParams& params, const std::string& path);
PolicyParams load_policy_params(const std::string& path);
void save_value_params(const ValueParams& params, const std::string& path);
ValueParams load_value_params(const std::string& path);

// policy.params + value.params + manifest.json (step, seed, config hash).
void save_learner_checkpoint(const LearnerState& state, const RunConfig& config,
                             const std::string& dir);

}  // namespace sapo
