#pragma once

#include <string>

#include "sapo/common.hpp"
#include "sapo/credit.hpp"
#include "sapo/envs.hpp"
#include "sapo/policy.hpp"
#include "sapo/segmentation.hpp"

namespace sapo {

enum class Algo { Sapo, Ppo, Grpo, NaiveIs };

std::string algo_name(Algo algo);
Algo parse_algo(const std::string& name);

struct ClipConfig {
    enum class KlKind { None, K1InReward };

    double epsilon = 0.2;
    double kl_coef = 0.0;
    KlKind kl_kind = KlKind::None;
};

// How per-token surrogate terms aggregate across a batch: per-trajectory
// token mean then mean over trajectories (default), or one global token mean.
enum class BatchAggregation { TrajectoryMean, TokenWeighted };

struct RunConfig {
    EnvSpec env;
    Algo algo = Algo::Sapo;
    SegStrategy seg_strategy;          // ignored by ppo/grpo
    GaeParams gae;
    ClipConfig clip;
    FeatureSpec policy_features;
    int group_size = 8;                // grpo only
    bool grpo_normalize_std = true;    // divide group advantages by population std
    int batch_size = 64;
    int minibatch_count = 4;
    long total_steps = 2000;
    double lr_policy = 1e-2;
    double lr_value = 1e-2;
    uint64_t seed = 0;
    std::string output_dir = "out";
    BatchAggregation aggregation = BatchAggregation::TrajectoryMean;
    long dump_interval = 0;            // trajectory JSONL dumps every N steps; 0 = never

    void validate() const;
};

RunConfig config_from_json_text(const std::string& text);
RunConfig load_config(const std::string& path);
std::string config_to_json_text(const RunConfig& config);

// FNV-1a hash of the canonical JSON snapshot, hex-encoded.
std::string config_hash(const RunConfig& config);

}  // namespace sapo
