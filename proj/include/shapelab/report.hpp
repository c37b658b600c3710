#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shapelab/orchestrator.hpp"

namespace shapelab {

// One (env, method) cell aggregated over seeds: the per-seed maximum and
// per-seed average of the selected-mainline curve, each reported as
// mean +- population standard deviation across seeds.
struct MetricsRow {
    std::string env;
    std::string method;
    int n_seeds = 0;
    double max_mean = 0.0;
    double max_std = 0.0;
    double avg_mean = 0.0;
    double avg_std = 0.0;

    bool operator==(const MetricsRow&) const = default;
};

struct MetricsTable {
    std::vector<MetricsRow> rows;  // sorted by (env, method)
};

// Aggregates selected-mainline curves only; branch curves never contribute.
// Each curve is de-duplicated by env_steps (last value wins) before Max/Avg.
// Throws ConfigError on an empty ledger set, an empty selected curve, or a
// duplicated (env, method, seed); IntegrityError on a return outside [0,1].
MetricsTable compute_metrics(const std::vector<RunLedger>& ledgers);

nlohmann::json metrics_table_to_json(const MetricsTable& table);
// Columns: env,method,seeds,max_mean,max_std,avg_mean,avg_std
std::string metrics_table_to_csv(const MetricsTable& table);

// A full sweep: every listed method, on one environment, over every seed.
struct ExperimentConfig {
    std::string env_name = "8x8-2p-3f";
    std::vector<std::string> methods = {"sparse", "fixed-rs", "also"};
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    WorkflowBudget budget;
    LearnerConfig learner;
    EngineConfig engine;
    KeyThresholds thresholds;
    std::string fixed_direction = "balanced-progress";
    int eval_episodes = 20;
    std::string output_root = "runs";
};

ExperimentConfig validate(ExperimentConfig cfg);
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);
// Defaults overridden by the fields present; unknown keys rejected. "budget"
// accepts either a budget object or a profile name string.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

// The RunConfig for one grid cell of the sweep.
RunConfig run_config_for(const ExperimentConfig& cfg, const std::string& method,
                         std::uint64_t seed);

// Runs the whole grid under cfg.output_root. Runs are independent jobs
// scheduled up to opts.parallel at a time; each run's own branch training is
// kept single-threaded, so ledgers do not depend on the schedule. Returns
// ledgers in grid order (method-major, then seed).
std::vector<RunLedger> run_suite(const ExperimentConfig& cfg,
                                 const RunOptions& opts = {});

// Collects every ledger.json under a run root, in sorted-path order.
// Read-only; throws ConfigError when none are found.
std::vector<RunLedger> load_ledgers(const std::filesystem::path& out_root);

// Emits metrics.csv, metrics.json, and one plot-data CSV per run
// (plots/<method>_<env>_seed<k>.csv with columns env_steps,
// mean_sparse_return) into report_dir. Read-only over the run directories.
MetricsTable write_report(const std::filesystem::path& out_root,
                          const std::filesystem::path& report_dir);

}  // namespace shapelab
