#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sapo/analysis.hpp"
#include "sapo/harness.hpp"

namespace fs = std::filesystem;
using namespace sapo;

namespace {

struct Overrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> algo;
    std::optional<std::string> out;
    std::optional<double> k_percent;
};

RunConfig load_with_overrides(const std::string& config_path, const Overrides& ov) {
    RunConfig cfg = load_config(config_path);
    if (ov.seed) cfg.seed = *ov.seed;
    if (ov.algo) cfg.algo = parse_algo(*ov.algo);
    if (ov.out) cfg.output_dir = *ov.out;
    if (ov.k_percent) cfg.seg_strategy.k_percent = *ov.k_percent;
    cfg.validate();
    return cfg;
}

std::vector<uint64_t> parse_seed_list(const std::string& text) {
    std::vector<uint64_t> seeds;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) seeds.push_back(std::stoull(item));
    }
    if (seeds.empty()) throw ConfigError("empty seed list");
    return seeds;
}

std::vector<Algo> parse_algo_list(const std::string& text) {
    std::vector<Algo> algos;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) algos.push_back(parse_algo(item));
    }
    return algos;
}

SegStrategy strategy_from_flags(const std::string& kind, double k, int marker, int step_len,
                                double low_prob, int count_c, bool boundary_as_start) {
    SegStrategy st;
    if (kind == "entropy-topk") {
        st.kind = SegStrategy::Kind::EntropyTopK;
        st.k_percent = k;
        st.boundary_as_start = boundary_as_start;
    } else if (kind == "marker") {
        st.kind = SegStrategy::Kind::Marker;
        st.marker_token = marker;
    } else if (kind == "fixed-step") {
        st.kind = SegStrategy::Kind::FixedStep;
        st.step_len = step_len;
    } else if (kind == "prob-accum") {
        st.kind = SegStrategy::Kind::ProbAccum;
        st.low_prob_threshold = low_prob;
        st.count_c = count_c;
    } else {
        throw ConfigError("unknown strategy '" + kind + "'");
    }
    return st;
}

int cmd_train(const std::string& config_path, const Overrides& ov) {
    RunConfig cfg = load_with_overrides(config_path, ov);
    RunReport report = run_experiment(cfg);
    std::cout << "metrics: " << report.metrics_path << "\n";
    if (!report.history.empty()) {
        std::cout << "final step " << report.final_metrics.step
                  << " mean_reward " << report.final_metrics.mean_reward
                  << " value_loss " << report.final_metrics.value_loss << "\n";
    }
    std::printf("wall_time %.3fs\n", report.wall_time_seconds);
    return 0;
}

int cmd_compare(const std::string& config_path, const Overrides& ov, const std::string& algos_text,
                const std::string& seeds_text, const std::string& out_dir) {
    RunConfig base = load_with_overrides(config_path, ov);
    std::vector<Algo> algos = parse_algo_list(algos_text);
    std::vector<uint64_t> seeds = parse_seed_list(seeds_text);
    ComparisonResult result = compare_algorithms(base, algos, seeds, out_dir);
    std::cout << "algo,median_final_success\n";
    for (const auto& [name, value] : result.median_final) {
        std::cout << name << ',' << value << "\n";
    }
    return 0;
}

int cmd_segment(const std::string& in_path, const std::string& out_path, const SegStrategy& st) {
    std::vector<TrajectoryRecord> records = load_trajectories(in_path);
    for (auto& rec : records) {
        rec.boundaries = segment(rec.traj, st).end_boundaries;
    }
    dump_trajectories(records, out_path);
    std::cout << "segmented " << records.size() << " trajectories -> " << out_path << "\n";
    return 0;
}

// Exact state values are affordable only on small trees; otherwise the
// fitted value head stands in, mirroring how the curves would be produced
// on a real model.
bool exact_values_feasible(const Env& env) {
    return std::pow(static_cast<double>(env.vocab_size()), env.max_len()) <= 4096.0;
}

int cmd_lift(const std::string& config_path, const Overrides& ov, int steps, int stages,
             int n_boot, int smooth_window, double d_quantile, const std::string& out_dir,
             const std::string& value_mode) {
    RunConfig cfg = load_with_overrides(config_path, ov);
    cfg.total_steps = steps;
    fs::create_directories(out_dir);

    LearnerState learner = make_learner(cfg);
    const bool use_exact = value_mode == "exact" ||
                           (value_mode == "auto" && exact_values_feasible(learner.env));

    std::vector<LiftInputs> per_step;
    for (int step = 0; step < steps; ++step) {
        std::vector<PreparedTrajectory> batch = prepare_batch(learner, cfg, step);
        PolicyEval eval = policy_distribution(learner.policy);
        LiftInputs inputs;
        inputs.d_quantile = d_quantile;
        for (const auto& item : batch) {
            const Trajectory& traj = item.traj;
            const int T = static_cast<int>(traj.tokens.size());
            EpisodeState state = learner.env.reset();
            std::vector<double> values(T + 1, 0.0);
            for (int t = 0; t < T; ++t) {
                values[t] = use_exact ? exact_state_value(learner.env, eval, state, cfg.gae.gamma)
                                      : value_predict(learner.value, state);
                state = learner.env.step(state, traj.tokens[t]);
            }
            values[T] = state.done ? 0.0
                                   : (use_exact ? exact_state_value(learner.env, eval, state,
                                                                    cfg.gae.gamma)
                                                : value_predict(learner.value, state));
            for (int t = 0; t < T; ++t) {
                inputs.entropies.push_back(traj.entropies[t]);
                inputs.value_gaps.push_back(std::abs(values[t] - values[t + 1]));
            }
        }
        per_step.push_back(std::move(inputs));
        train_step(learner, cfg);
    }

    std::vector<double> q_grid;
    for (double q = 0.1; q < 0.95; q += 0.1) q_grid.push_back(q);
    LiftCurveResult curve =
        lift_q_curve(per_step, q_grid, stages, n_boot, 0.95, smooth_window, cfg.seed);

    std::ofstream csv(fs::path(out_dir) / "lift_q.csv");
    csv << "stage,q,lift,ci_lo,ci_hi\n";
    for (const auto& row : curve.rows) {
        csv << row.stage << ',' << row.q << ',' << row.lift << ',' << row.ci_lo << ','
            << row.ci_hi << '\n';
    }

    std::vector<ChartSeries> series(stages);
    for (int s = 0; s < stages; ++s) series[s].name = "stage " + std::to_string(s);
    for (const auto& row : curve.rows) series[row.stage].ys.push_back(row.lift);
    write_line_chart((fs::path(out_dir) / "lift_q.svg").string(), "Lift vs q", q_grid, series);

    std::cout << "values: " << (use_exact ? "exact oracle" : "fitted") << "\n";
    std::cout << "spearman(smoothed mean lift, step) = " << curve.spearman_trend << "\n";
    std::cout << "wrote " << (fs::path(out_dir) / "lift_q.csv").string() << "\n";
    return 0;
}

int cmd_bias_check(long cases, int max_len, double max_x, uint64_t seed,
                   const std::string& out_path) {
    Rng rng(seed);
    std::ofstream audit(out_path);
    long violations = 0;
    double worst_margin = 1e300;
    for (long i = 0; i < cases; ++i) {
        const int L = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(max_len)));
        std::vector<double> x(L);
        for (double& v : x) v = rng.next_uniform(-max_x, max_x);
        BiasCase c = bias_bound_check(x);
        worst_margin = std::min(worst_margin, c.bound - c.diff);
        if (!c.holds) {
            ++violations;
            nlohmann::json j;
            j["case"] = i;
            j["length"] = c.length;
            j["mu"] = c.mu;
            j["diff"] = c.diff;
            j["bound"] = c.bound;
            audit << j.dump() << '\n';
        }
    }
    BiasCase worked = bias_bound_check({0.1, 0.1, 0.1});
    std::printf("worked case L=3, x=0.1: raw %.6f geo %.6f diff %.6f bound %.6f %s\n",
                worked.raw_ratio, worked.geo_ratio, worked.diff, worked.bound,
                worked.holds ? "holds" : "VIOLATED");
    std::printf("%ld cases, %ld violations (audit: %s), min bound-diff margin %.3e\n", cases,
                violations, out_path.c_str(), worst_margin);
    return violations == 0 ? 0 : 1;
}

int cmd_grad_check(const std::string& config_path, const Overrides& ov, int trials,
                   uint64_t seed) {
    RunConfig cfg = load_with_overrides(config_path, ov);
    cfg.batch_size = std::min(cfg.batch_size, 8);

    double worst_policy = 0.0, worst_value = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
        RunConfig trial_cfg = cfg;
        trial_cfg.seed = seed + static_cast<uint64_t>(trial);
        LearnerState learner = make_learner(trial_cfg);
        Rng noise(seed * 977 + static_cast<uint64_t>(trial));
        for (double& w : learner.policy.weights) w = 0.3 * noise.next_gaussian();
        for (double& w : learner.value.weights) w = 0.3 * noise.next_gaussian();

        std::vector<PreparedTrajectory> batch = prepare_batch(learner, trial_cfg, 0);
        PolicyParams perturbed = learner.policy;
        for (double& w : perturbed.weights) w += 0.01 * noise.next_gaussian();

        auto objective = [&](const std::vector<double>& weights) {
            PolicyParams p = perturbed;
            p.weights = weights;
            switch (trial_cfg.algo) {
                case Algo::Sapo:
                    return sapo_objective_and_grad(batch, p, trial_cfg.clip).value;
                case Algo::NaiveIs:
                    return naive_is_objective_and_grad(batch, p, trial_cfg.clip).value;
                default:
                    return ppo_objective_and_grad(batch, p, trial_cfg.clip).value;
            }
        };
        ObjectiveResult res;
        switch (trial_cfg.algo) {
            case Algo::Sapo:
                res = sapo_objective_and_grad(batch, perturbed, trial_cfg.clip);
                break;
            case Algo::NaiveIs:
                res = naive_is_objective_and_grad(batch, perturbed, trial_cfg.clip);
                break;
            default:
                res = ppo_objective_and_grad(batch, perturbed, trial_cfg.clip);
                break;
        }
        worst_policy = std::max(worst_policy, grad_check(objective, res.grad, perturbed.weights,
                                                         1e-5, seed + 13 * trial));

        std::vector<EpisodeState> states;
        std::vector<double> returns;
        for (const auto& item : batch) {
            for (int m = 0; m < item.seg.segment_count(); ++m) {
                EpisodeState s;
                s.prompt = item.traj.prompt;
                s.generated.assign(item.traj.tokens.begin(),
                                   item.traj.tokens.begin() + (item.seg.begin_of(m) - 1));
                states.push_back(std::move(s));
                returns.push_back(item.credit.returns.empty() ? item.traj.reward
                                                              : item.credit.returns[m]);
            }
        }
        if (!states.empty()) {
            ValueLossResult vres = value_loss_and_grad(learner.value, states, returns);
            auto vloss = [&](const std::vector<double>& weights) {
                ValueParams vp = learner.value;
                vp.weights = weights;
                return value_loss_and_grad(vp, states, returns).loss;
            };
            worst_value = std::max(worst_value, grad_check(vloss, vres.grad,
                                                           learner.value.weights, 1e-5,
                                                           seed + 29 * trial));
        }
    }
    std::printf("policy objective (%s): max relative error %.3e over %d trials\n",
                algo_name(cfg.algo).c_str(), worst_policy, trials);
    std::printf("value loss: max relative error %.3e\n", worst_value);
    return (worst_policy <= 1e-5 && worst_value <= 1e-5) ? 0 : 1;
}

int cmd_enumerate(const std::string& config_path, const Overrides& ov,
                  const std::string& out_path) {
    RunConfig cfg = load_with_overrides(config_path, ov);
    Env env = make_env(cfg.env, cfg.seed);
    PolicyParams uniform = make_policy(cfg.policy_features, cfg.env.vocab_size);
    auto rows = enumerate_trajectories(env, policy_distribution(uniform), env.max_len());

    std::ofstream out(out_path);
    if (!out) throw ConfigError("cannot write '" + out_path + "'");
    double total_p = 0.0, root_value = 0.0;
    long id = 0;
    for (const auto& [traj, p] : rows) {
        nlohmann::json j;
        j["id"] = id++;
        j["prompt"] = traj.prompt;
        j["tokens"] = traj.tokens;
        j["old_logprobs"] = traj.old_logprobs;
        j["entropies"] = traj.entropies;
        j["reward"] = traj.reward;
        j["probability"] = p;
        out << j.dump() << '\n';
        total_p += p;
        root_value += p * traj.reward;
    }
    std::printf("%zu trajectories, total probability %.15f, uniform-policy root value %.9f\n",
                rows.size(), total_p, root_value);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale segment-aligned policy optimization lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out";
    Overrides ov;
    uint64_t seed_flag = 0;
    std::string algo_flag;
    double k_flag = 0.0;

    auto add_common = [&](CLI::App* cmd, bool needs_config = true) {
        if (needs_config) cmd->add_option("--config", config_path, "config JSON path")->required();
        cmd->add_option("--seed", seed_flag, "seed override");
        cmd->add_option("--algo", algo_flag, "algo override (sapo|ppo|grpo|naive-is)");
        cmd->add_option("--out", out_dir, "output directory override");
        cmd->add_option("--k", k_flag, "entropy top-k percent override");
    };
    auto collect_overrides = [&](const CLI::App* cmd) {
        if (cmd->count("--seed")) ov.seed = seed_flag;
        if (cmd->count("--algo")) ov.algo = algo_flag;
        if (cmd->count("--out")) ov.out = out_dir;
        if (cmd->count("--k")) ov.k_percent = k_flag;
    };

    auto* train = app.add_subcommand("train", "run one training experiment");
    add_common(train);

    auto* compare = app.add_subcommand("compare", "run several algorithms across seeds");
    add_common(compare);
    std::string algos_text = "sapo,grpo", seeds_text = "0";
    std::string compare_out = "compare_out";
    compare->add_option("--algos", algos_text, "comma-separated algo list");
    compare->add_option("--seeds", seeds_text, "comma-separated seed list");
    compare->add_option("--compare-out", compare_out, "comparison output directory");

    auto* seg_cmd = app.add_subcommand("segment", "segment a trajectory JSONL dump offline");
    std::string seg_in, seg_out = "segmented.jsonl", seg_kind = "entropy-topk";
    double seg_k = 30.0, seg_low_prob = 0.5;
    int seg_marker = 0, seg_step_len = 1, seg_count_c = 1;
    bool seg_start = false;
    seg_cmd->add_option("--in", seg_in, "input JSONL")->required();
    seg_cmd->add_option("--out-file", seg_out, "output JSONL");
    seg_cmd->add_option("--strategy", seg_kind, "entropy-topk|marker|fixed-step|prob-accum");
    seg_cmd->add_option("--k", seg_k, "k percent (entropy-topk)");
    seg_cmd->add_flag("--boundary-as-start", seg_start, "high-entropy token starts a segment");
    seg_cmd->add_option("--marker", seg_marker, "marker token id");
    seg_cmd->add_option("--step-len", seg_step_len, "fixed step length");
    seg_cmd->add_option("--low-prob", seg_low_prob, "low probability threshold");
    seg_cmd->add_option("--count-c", seg_count_c, "low-prob token count per segment");

    auto* lift_cmd = app.add_subcommand("lift", "Lift-q curves over a training run");
    add_common(lift_cmd);
    int lift_steps = 60, lift_stages = 3, lift_boot = 1000, lift_window = 5;
    double lift_d = 0.8;
    std::string lift_out = "lift_out", lift_values = "auto";
    lift_cmd->add_option("--steps", lift_steps, "training steps to analyze");
    lift_cmd->add_option("--stages", lift_stages, "stage count");
    lift_cmd->add_option("--boot", lift_boot, "bootstrap resamples");
    lift_cmd->add_option("--window", lift_window, "trend smoothing window");
    lift_cmd->add_option("--d-quantile", lift_d, "value-gap quantile defining D");
    lift_cmd->add_option("--lift-out", lift_out, "output directory");
    lift_cmd->add_option("--values", lift_values, "auto|exact|fitted");

    auto* bias_cmd = app.add_subcommand("bias-check", "ratio bias bound sweep");
    long bias_cases = 100000;
    int bias_len = 64;
    double bias_x = 0.5;
    uint64_t bias_seed = 0;
    std::string bias_out = "bias_audit.jsonl";
    bias_cmd->add_option("--cases", bias_cases, "number of random cases");
    bias_cmd->add_option("--max-len", bias_len, "max segment length");
    bias_cmd->add_option("--max-x", bias_x, "max |token log-ratio|");
    bias_cmd->add_option("--seed", bias_seed, "sweep seed");
    bias_cmd->add_option("--out-file", bias_out, "violation audit JSONL");

    auto* grad_cmd = app.add_subcommand("grad-check", "finite-difference gradient audit");
    add_common(grad_cmd);
    int grad_trials = 10;
    uint64_t grad_seed = 0;
    grad_cmd->add_option("--trials", grad_trials, "random configurations");
    grad_cmd->add_option("--check-seed", grad_seed, "audit seed");

    auto* enum_cmd = app.add_subcommand("enumerate", "uniform-policy oracle dump");
    add_common(enum_cmd);
    std::string enum_out = "enumeration.jsonl";
    enum_cmd->add_option("--out-file", enum_out, "output JSONL");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            collect_overrides(train);
            return cmd_train(config_path, ov);
        }
        if (compare->parsed()) {
            collect_overrides(compare);
            return cmd_compare(config_path, ov, algos_text, seeds_text, compare_out);
        }
        if (seg_cmd->parsed()) {
            return cmd_segment(seg_in, seg_out,
                               strategy_from_flags(seg_kind, seg_k, seg_marker, seg_step_len,
                                                   seg_low_prob, seg_count_c, seg_start));
        }
        if (lift_cmd->parsed()) {
            collect_overrides(lift_cmd);
            return cmd_lift(config_path, ov, lift_steps, lift_stages, lift_boot, lift_window,
                            lift_d, lift_out, lift_values);
        }
        if (bias_cmd->parsed()) return cmd_bias_check(bias_cases, bias_len, bias_x, bias_seed, bias_out);
        if (grad_cmd->parsed()) {
            collect_overrides(grad_cmd);
            return cmd_grad_check(config_path, ov, grad_trials, grad_seed);
        }
        if (enum_cmd->parsed()) {
            collect_overrides(enum_cmd);
            return cmd_enumerate(config_path, ov, enum_out);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 2;
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
