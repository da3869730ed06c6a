#include "sapo/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sapo {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace {

std::string fmt_double(double x) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << text;
}

}  // namespace

std::string metrics_csv_header() {
    return "step,mean_reward,policy_obj,value_loss,mean_entropy,mean_resp_len,clip_frac,"
           "mean_abs_mu,mean_M";
}

std::string metrics_csv_row(const StepMetrics& m) {
    std::ostringstream row;
    row << m.step << ',' << fmt_double(m.mean_reward) << ',' << fmt_double(m.policy_obj) << ','
        << fmt_double(m.value_loss) << ',' << fmt_double(m.mean_entropy) << ','
        << fmt_double(m.mean_resp_len) << ',' << fmt_double(m.clip_frac) << ','
        << fmt_double(m.mean_abs_mu) << ',' << fmt_double(m.mean_M);
    return row.str();
}

void write_line_chart(const std::string& path, const std::string& title,
                      const std::vector<double>& xs, const std::vector<ChartSeries>& series) {
    const int W = 640, H = 400, margin = 48;
    double xmin = 0.0, xmax = 1.0, ymin = 0.0, ymax = 1.0;
    if (!xs.empty()) {
        xmin = *std::min_element(xs.begin(), xs.end());
        xmax = *std::max_element(xs.begin(), xs.end());
    }
    bool have_y = false;
    for (const auto& s : series) {
        for (double y : s.ys) {
            if (!have_y) {
                ymin = ymax = y;
                have_y = true;
            } else {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        }
    }
    if (xmax == xmin) xmax = xmin + 1.0;
    if (ymax == ymin) ymax = ymin + 1.0;

    auto px = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * (W - 2 * margin); };
    auto py = [&](double y) { return H - margin - (y - ymin) / (ymax - ymin) * (H - 2 * margin); };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

    std::ostringstream svg;
    svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" viewBox=\"0 0 " << W << " " << H << "\">\n";
    svg << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    svg << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
        << "</text>\n";
    svg << "<line x1=\"" << margin << "\" y1=\"" << H - margin << "\" x2=\"" << W - margin
        << "\" y2=\"" << H - margin << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << margin << "\" y1=\"" << margin << "\" x2=\"" << margin << "\" y2=\""
        << H - margin << "\" stroke=\"black\"/>\n";
    svg << "<text x=\"" << margin << "\" y=\"" << H - margin + 16 << "\" font-size=\"10\">"
        << fmt_double(xmin) << "</text>\n";
    svg << "<text x=\"" << W - margin << "\" y=\"" << H - margin + 16
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(xmax) << "</text>\n";
    svg << "<text x=\"" << margin - 4 << "\" y=\"" << H - margin
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(ymin) << "</text>\n";
    svg << "<text x=\"" << margin - 4 << "\" y=\"" << margin + 4
        << "\" text-anchor=\"end\" font-size=\"10\">" << fmt_double(ymax) << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const char* color = palette[si % 6];
        svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (size_t i = 0; i < s.ys.size() && i < xs.size(); ++i) {
            svg << px(xs[i]) << ',' << py(s.ys[i]) << ' ';
        }
        svg << "\"/>\n";
        svg << "<text x=\"" << W - margin + 4 << "\" y=\"" << margin + 14 * (si + 1)
            << "\" font-size=\"10\" fill=\"" << color << "\">" << s.name << "</text>\n";
    }
    svg << "</svg>\n";
    write_text(path, svg.str());
}

void write_metric_svgs(const std::vector<StepMetrics>& history, const std::string& dir) {
    if (history.empty()) return;
    std::vector<double> xs(history.size());
    for (size_t i = 0; i < history.size(); ++i) xs[i] = static_cast<double>(history[i].step);

    struct Column {
        const char* name;
        double (*get)(const StepMetrics&);
    };
    static const Column columns[] = {
        {"mean_reward", [](const StepMetrics& m) { return m.mean_reward; }},
        {"policy_obj", [](const StepMetrics& m) { return m.policy_obj; }},
        {"value_loss", [](const StepMetrics& m) { return m.value_loss; }},
        {"mean_entropy", [](const StepMetrics& m) { return m.mean_entropy; }},
        {"mean_resp_len", [](const StepMetrics& m) { return m.mean_resp_len; }},
        {"clip_frac", [](const StepMetrics& m) { return m.clip_frac; }},
        {"mean_abs_mu", [](const StepMetrics& m) { return m.mean_abs_mu; }},
        {"mean_M", [](const StepMetrics& m) { return m.mean_M; }},
    };
    for (const auto& col : columns) {
        ChartSeries s;
        s.name = col.name;
        s.ys.resize(history.size());
        for (size_t i = 0; i < history.size(); ++i) s.ys[i] = col.get(history[i]);
        write_line_chart((fs::path(dir) / (std::string(col.name) + ".svg")).string(), col.name, xs,
                         {s});
    }
}

namespace {

json header_json(const PolicyParams& p) {
    json j;
    j["kind"] = "policy";
    j["feature_spec"] = {{"window", p.feature_spec.window}, {"dim", p.feature_spec.dim}};
    j["vocab_size"] = p.vocab_size;
    j["count"] = p.weights.size();
    return j;
}

void write_params_file(const std::string& path, const json& header,
                       const std::vector<double>& weights) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(weights.data()),
              static_cast<std::streamsize>(weights.size() * sizeof(double)));
}

json read_params_file(const std::string& path, std::vector<double>& weights) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open checkpoint '" + path + "'");
    std::string header_line;
    if (!std::getline(in, header_line)) throw ParseError("checkpoint missing header: " + path);
    json header;
    try {
        header = json::parse(header_line);
    } catch (const json::exception& e) {
        throw ParseError("checkpoint header is not JSON: " + std::string(e.what()));
    }
    const size_t count = header.at("count").get<size_t>();
    weights.resize(count);
    in.read(reinterpret_cast<char*>(weights.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (static_cast<size_t>(in.gcount()) != count * sizeof(double)) {
        throw ParseError("checkpoint payload truncated: " + path);
    }
    return header;
}

}  // namespace

void save_policy_params(const PolicyParams& params, const std::string& path) {
    write_params_file(path, header_json(params), params.weights);
}

PolicyParams load_policy_params(const std::string& path) {
    PolicyParams p;
    json header = read_params_file(path, p.weights);
    if (header.at("kind").get<std::string>() != "policy") {
        throw ParseError("checkpoint kind mismatch, expected policy");
    }
    p.feature_spec.window = header.at("feature_spec").at("window").get<int>();
    p.feature_spec.dim = header.at("feature_spec").at("dim").get<int>();
    p.vocab_size = header.at("vocab_size").get<int>();
    if (p.weights.size() != static_cast<size_t>(p.feature_spec.dim) * p.vocab_size) {
        throw ParseError("policy checkpoint dimension mismatch");
    }
    return p;
}

void save_value_params(const ValueParams& params, const std::string& path) {
    json j;
    j["kind"] = "value";
    j["feature_spec"] = {{"window", params.feature_spec.base.window},
                         {"dim", params.feature_spec.base.dim},
                         {"max_len", params.feature_spec.max_len}};
    j["count"] = params.weights.size();
    write_params_file(path, j, params.weights);
}

ValueParams load_value_params(const std::string& path) {
    ValueParams p;
    json header = read_params_file(path, p.weights);
    if (header.at("kind").get<std::string>() != "value") {
        throw ParseError("checkpoint kind mismatch, expected value");
    }
    p.feature_spec.base.window = header.at("feature_spec").at("window").get<int>();
    p.feature_spec.base.dim = header.at("feature_spec").at("dim").get<int>();
    p.feature_spec.max_len = header.at("feature_spec").at("max_len").get<int>();
    if (p.weights.size() != static_cast<size_t>(p.feature_spec.base.dim) + 1) {
        throw ParseError("value checkpoint dimension mismatch");
    }
    return p;
}

void save_learner_checkpoint(const LearnerState& state, const RunConfig& config,
                             const std::string& dir) {
    fs::create_directories(dir);
    save_policy_params(state.policy, (fs::path(dir) / "policy.params").string());
    save_value_params(state.value, (fs::path(dir) / "value.params").string());
    json manifest;
    manifest["step"] = state.step;
    manifest["seed"] = config.seed;
    manifest["config_hash"] = config_hash(config);
    write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

void dump_trajectories(const std::vector<TrajectoryRecord>& batch, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write '" + path + "'");
    for (const auto& rec : batch) {
        json j;
        j["id"] = rec.id;
        j["prompt"] = rec.traj.prompt;
        j["tokens"] = rec.traj.tokens;
        j["old_logprobs"] = rec.traj.old_logprobs;
        j["entropies"] = rec.traj.entropies;
        j["reward"] = rec.traj.reward;
        j["boundaries"] = rec.boundaries;
        out << j.dump() << '\n';
    }
}

std::string credit_to_jsonl(const SegmentCredit& credit) {
    json j;
    j["rewards"] = credit.rewards;
    j["deltas"] = credit.deltas;
    j["advantages"] = credit.advantages;
    j["returns"] = credit.returns;
    return j.dump();
}

std::vector<TrajectoryRecord> load_trajectories(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open '" + path + "'");
    std::vector<TrajectoryRecord> out;
    std::string line;
    long line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
        }
        TrajectoryRecord rec;
        try {
            rec.id = j.at("id").get<long>();
            rec.traj.prompt = j.at("prompt").get<std::vector<TokenId>>();
            rec.traj.tokens = j.at("tokens").get<std::vector<TokenId>>();
            rec.traj.old_logprobs = j.at("old_logprobs").get<std::vector<double>>();
            rec.traj.entropies = j.at("entropies").get<std::vector<double>>();
            rec.traj.reward = j.at("reward").get<double>();
            if (j.contains("boundaries")) rec.boundaries = j.at("boundaries").get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": missing or bad key: " + e.what());
        }
        const size_t T = rec.traj.tokens.size();
        if (rec.traj.old_logprobs.size() != T || rec.traj.entropies.size() != T) {
            throw ParseError("line " + std::to_string(line_no) +
                             ": tokens/old_logprobs/entropies lengths differ");
        }
        if (!rec.boundaries.empty()) {
            Segmentation seg{rec.boundaries};
            auto violations = validate(seg, static_cast<int>(T));
            if (!violations.empty()) {
                throw ParseError("line " + std::to_string(line_no) + ": key boundaries: " +
                                 violations.front());
            }
        }
        out.push_back(std::move(rec));
    }
    return out;
}

RunReport run_experiment(const RunConfig& config) {
    config.validate();
    const auto t0 = std::chrono::steady_clock::now();

    fs::create_directories(config.output_dir);
    const std::string snapshot = config_to_json_text(config);
    write_text((fs::path(config.output_dir) / "config.json").string(), snapshot);

    LearnerState learner = make_learner(config);

    const std::string metrics_path = (fs::path(config.output_dir) / "metrics.csv").string();
    std::ofstream metrics(metrics_path, std::ios::binary);
    if (!metrics) throw ConfigError("cannot write '" + metrics_path + "'");
    metrics << metrics_csv_header() << '\n';

    RunReport report;
    report.metrics_path = metrics_path;
    report.config_snapshot = snapshot;

    try {
        for (long step = 0; step < config.total_steps; ++step) {
            StepMetrics m = train_step(learner, config);
            metrics << metrics_csv_row(m) << '\n';
            metrics.flush();
            report.history.push_back(m);
            report.final_metrics = m;

            if (config.dump_interval > 0 && (step + 1) % config.dump_interval == 0) {
                std::vector<PreparedTrajectory> batch = prepare_batch(learner, config, step);
                std::vector<TrajectoryRecord> records(batch.size());
                for (size_t i = 0; i < batch.size(); ++i) {
                    records[i].id = static_cast<long>(i);
                    records[i].traj = batch[i].traj;
                    records[i].boundaries = batch[i].seg.end_boundaries;
                }
                dump_trajectories(records,
                                  (fs::path(config.output_dir) /
                                   ("traj_step" + std::to_string(step + 1) + ".jsonl"))
                                      .string());
            }
        }
    } catch (const DivergenceError& e) {
        json dump;
        dump["error"] = e.what();
        dump["step"] = learner.step;
        dump["config_hash"] = config_hash(config);
        write_text((fs::path(config.output_dir) / "divergence.json").string(), dump.dump(2) + "\n");
        throw;
    }

    save_learner_checkpoint(learner, config, config.output_dir);
    write_metric_svgs(report.history, config.output_dir);

    report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

double final_success(const std::vector<StepMetrics>& history) {
    if (history.empty()) return 0.0;
    const size_t window = std::max<size_t>(1, history.size() / 10);
    double sum = 0.0;
    for (size_t i = history.size() - window; i < history.size(); ++i) {
        sum += history[i].mean_reward;
    }
    return sum / static_cast<double>(window);
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

ComparisonResult compare_algorithms(const RunConfig& base, const std::vector<Algo>& algos,
                                    const std::vector<uint64_t>& seeds,
                                    const std::string& out_dir) {
    if (algos.size() < 2) throw ConfigError("compare needs at least 2 algorithms");
    if (seeds.empty()) throw ConfigError("compare needs at least 1 seed");
    fs::create_directories(out_dir);

    ComparisonResult result;
    std::vector<std::vector<std::vector<StepMetrics>>> histories(algos.size());

    for (size_t a = 0; a < algos.size(); ++a) {
        for (uint64_t seed : seeds) {
            RunConfig cfg = base;
            cfg.algo = algos[a];
            cfg.seed = seed;
            cfg.output_dir = (fs::path(out_dir) /
                              (algo_name(algos[a]) + "_seed" + std::to_string(seed)))
                                 .string();
            RunReport report = run_experiment(cfg);
            histories[a].push_back(report.history);
            result.rows.push_back({algo_name(algos[a]), seed, final_success(report.history)});
        }
    }

    for (size_t a = 0; a < algos.size(); ++a) {
        std::vector<double> finals;
        for (const auto& row : result.rows) {
            if (row.algo == algo_name(algos[a])) finals.push_back(row.final_success);
        }
        result.median_final.emplace_back(algo_name(algos[a]), median(finals));
    }

    std::ostringstream comparison;
    comparison << "algo,seed,final_success\n";
    for (const auto& row : result.rows) {
        comparison << row.algo << ',' << row.seed << ',' << fmt_double(row.final_success) << '\n';
    }
    write_text((fs::path(out_dir) / "comparison.csv").string(), comparison.str());

    std::ostringstream summary;
    summary << "algo,median_final_success\n";
    for (const auto& [name, value] : result.median_final) {
        summary << name << ',' << fmt_double(value) << '\n';
    }
    write_text((fs::path(out_dir) / "summary.csv").string(), summary.str());

    // Per-metric curves: one series per algo, median across seeds at each step.
    struct Column {
        const char* name;
        double (*get)(const StepMetrics&);
    };
    static const Column columns[] = {
        {"mean_reward", [](const StepMetrics& m) { return m.mean_reward; }},
        {"value_loss", [](const StepMetrics& m) { return m.value_loss; }},
        {"mean_entropy", [](const StepMetrics& m) { return m.mean_entropy; }},
        {"mean_resp_len", [](const StepMetrics& m) { return m.mean_resp_len; }},
    };
    const long steps = base.total_steps;
    std::vector<double> xs(static_cast<size_t>(std::max<long>(steps, 0)));
    for (size_t i = 0; i < xs.size(); ++i) xs[i] = static_cast<double>(i);
    for (const auto& col : columns) {
        std::vector<ChartSeries> series;
        for (size_t a = 0; a < algos.size(); ++a) {
            ChartSeries s;
            s.name = algo_name(algos[a]);
            for (long step = 0; step < steps; ++step) {
                std::vector<double> vals;
                for (const auto& hist : histories[a]) {
                    if (static_cast<size_t>(step) < hist.size()) {
                        vals.push_back(col.get(hist[static_cast<size_t>(step)]));
                    }
                }
                if (!vals.empty()) s.ys.push_back(median(vals));
            }
            series.push_back(std::move(s));
        }
        write_line_chart((fs::path(out_dir) / (std::string(col.name) + ".svg")).string(), col.name,
                         xs, series);
    }
    return result;
}

}  // namespace sapo
