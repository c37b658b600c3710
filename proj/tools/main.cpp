#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "shapelab/errors.hpp"
#include "shapelab/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace shapelab;

namespace {

json read_json_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open for read: " + path.string());
    json doc;
    in >> doc;
    return doc;
}

// Budget from mutually refining flags: an explicit profile name, or the
// desk-scale ratios at --horizon, defaulting to the 200k desk scale.
WorkflowBudget budget_from_flags(const std::string& profile,
                                 std::int64_t horizon) {
    if (!profile.empty()) return budget_profile(profile);
    return desk_scale_budget(horizon);
}

void apply_provider(EngineConfig& engine, const std::string& provider,
                    const std::string& endpoint, const std::string& model,
                    const std::string& transcript_dir) {
    if (provider.empty()) return;
    for (ProviderSpec* spec : {&engine.critic, &engine.generator}) {
        spec->kind = provider;
        if (!endpoint.empty()) spec->endpoint = endpoint;
        if (!model.empty()) spec->model = model;
        if (!transcript_dir.empty()) spec->transcript_dir = transcript_dir;
    }
}

void print_decisions(const RunLedger& ledger) {
    for (const auto& [label, decision] : ledger.decisions)
        std::cout << "  " << label << ": winner " << decision.winner_id << " ("
                  << gate_reason_name(decision.reason) << ")\n";
    for (const auto& warning : ledger.warnings)
        std::cout << "  warning: " << warning << "\n";
}

int run_cli(int argc, char** argv) {
    CLI::App app{"shapelab: stage-aware shaping workflow for sparse-reward "
                 "cooperative foraging"};
    app.require_subcommand(1);

    // --- run ---
    auto* run = app.add_subcommand("run", "train one method/env/seed");
    std::string run_method_name = "also", run_env = "8x8-2p-3f";
    std::uint64_t run_seed = 1;
    std::string run_profile, run_provider, run_endpoint, run_model;
    std::string run_transcripts, run_config_path, run_out = "runs";
    std::int64_t run_horizon = 200000;
    int run_parallel = 1;
    bool run_overwrite = false;
    run->add_option("--method", run_method_name,
                    "sparse | fixed-rs | single-llm-rg | also | "
                    "single-llm-adapt");
    run->add_option("--env", run_env, "task name, e.g. 8x8-2p-3f or 2s-10x10-3p-3f");
    run->add_option("--seed", run_seed, "run seed");
    run->add_option("--budget-profile", run_profile,
                    "named budget profile (short-2.05M | medium-10M)");
    run->add_option("--horizon", run_horizon,
                    "desk-scale ratio budget at this final horizon");
    run->add_option("--provider", run_provider,
                    "LLM provider kind (heuristic | scripted | remote)");
    run->add_option("--endpoint", run_endpoint, "remote provider endpoint");
    run->add_option("--model", run_model, "remote provider model id");
    run->add_option("--transcripts", run_transcripts,
                    "scripted provider transcript directory");
    run->add_option("--config", run_config_path,
                    "full run-config JSON (other flags still override "
                    "seed/provider)");
    run->add_option("--out", run_out, "output root directory");
    run->add_option("--parallel", run_parallel, "concurrent branch trainings");
    run->add_flag("--overwrite", run_overwrite,
                  "replace an existing run directory");

    // --- suite ---
    auto* suite = app.add_subcommand("suite", "run a full experiment sweep");
    std::string suite_config_path, suite_profile, suite_provider;
    int suite_parallel = 1;
    bool suite_overwrite = false;
    suite->add_option("--config", suite_config_path,
                      "experiment-config JSON file")
        ->required();
    suite->add_option("--budget-profile", suite_profile,
                      "override the config's budget with a named profile");
    suite->add_option("--provider", suite_provider,
                      "override the provider kind for both roles");
    suite->add_option("--parallel", suite_parallel,
                      "concurrent runs (each run stays single-threaded)");
    suite->add_flag("--overwrite", suite_overwrite,
                    "replace existing run directories");

    // --- gate ---
    auto* gate = app.add_subcommand("gate", "score curves and pick winners");
    gate->require_subcommand(1);
    auto* gate_score = gate->add_subcommand(
        "score", "score one branch curve CSV (env_steps,mean_sparse_return)");
    std::string score_curve_path, score_id = "branch";
    int score_k = kGateLastK;
    gate_score->add_option("curve", score_curve_path, "curve CSV path")
        ->required();
    gate_score->add_option("--id", score_id, "branch id for the report");
    gate_score->add_option("--k", score_k, "last-k window");
    auto* gate_decide = gate->add_subcommand(
        "decide", "decide control vs updates from branch-score JSON files");
    std::vector<std::string> decide_paths;
    double decide_tau = kGateTauTie;
    gate_decide
        ->add_option("scores", decide_paths,
                     "control score JSON first, then update score JSONs")
        ->required();
    gate_decide->add_option("--tau", decide_tau, "near-tie threshold");

    // --- report ---
    auto* report = app.add_subcommand(
        "report", "aggregate run directories into metrics and plot data");
    std::string report_runs = "runs", report_out = "report";
    report->add_option("--runs", report_runs, "run root directory");
    report->add_option("--out", report_out, "report output directory");

    // --- replay ---
    auto* replay = app.add_subcommand(
        "replay", "re-drive a run from its stored transcripts");
    std::string replay_run_dir, replay_out;
    replay->add_option("--run", replay_run_dir, "completed run directory")
        ->required();
    replay->add_option("--out", replay_out,
                       "replay root (default: <run>/../replay)");

    CLI11_PARSE(app, argc, argv);

    if (run->parsed()) {
        RunConfig cfg;
        if (!run_config_path.empty())
            cfg = run_config_from_json(read_json_file(run_config_path));
        else
            cfg.budget = budget_from_flags(run_profile, run_horizon);
        if (run->count("--method") || run_config_path.empty())
            cfg.method = run_method_name;
        if (run->count("--env") || run_config_path.empty())
            cfg.env_name = run_env;
        if (run->count("--seed") || run_config_path.empty())
            cfg.seed = run_seed;
        if (run->count("--budget-profile") || run->count("--horizon"))
            cfg.budget = budget_from_flags(run_profile, run_horizon);
        apply_provider(cfg.engine, run_provider, run_endpoint, run_model,
                       run_transcripts);
        RunOptions opts;
        opts.parallel = run_parallel;
        opts.overwrite = run_overwrite;
        const RunLedger ledger = run_method(cfg, run_out, opts);
        std::cout << "run complete: "
                  << run_dir_for(run_out, cfg.method, cfg.env_name, cfg.seed)
                         .string()
                  << "\n  total env steps: " << ledger.total_env_steps << "\n";
        print_decisions(ledger);
        return 0;
    }

    if (suite->parsed()) {
        auto cfg = experiment_config_from_json(read_json_file(suite_config_path));
        if (!suite_profile.empty()) cfg.budget = budget_profile(suite_profile);
        apply_provider(cfg.engine, suite_provider, "", "", "");
        RunOptions opts;
        opts.parallel = suite_parallel;
        opts.overwrite = suite_overwrite;
        const auto ledgers = run_suite(cfg, opts);
        std::cout << "suite complete: " << ledgers.size() << " runs under "
                  << cfg.output_root << "\n";
        std::cout << metrics_table_to_csv(compute_metrics(ledgers));
        return 0;
    }

    if (gate_score->parsed()) {
        BranchCurve curve;
        curve.id = score_id;
        curve.points = read_curve_csv(score_curve_path);
        std::cout << branch_score_to_json(score_branch(curve, score_k)).dump(2)
                  << "\n";
        return 0;
    }

    if (gate_decide->parsed()) {
        if (decide_paths.size() < 2)
            throw ConfigError("gate decide: need a control and at least one "
                              "update score");
        const auto control =
            branch_score_from_json(read_json_file(decide_paths[0]));
        std::vector<BranchScore> updates;
        for (std::size_t i = 1; i < decide_paths.size(); ++i)
            updates.push_back(
                branch_score_from_json(read_json_file(decide_paths[i])));
        const auto decision = decide(control, updates, decide_tau);
        std::cout << gate_decision_to_json(decision).dump(2) << "\n";
        return 0;
    }

    if (report->parsed()) {
        const auto table = write_report(report_runs, report_out);
        std::cout << metrics_table_to_csv(table);
        for (const auto& ledger : load_ledgers(report_runs)) {
            if (ledger.decisions.empty()) continue;
            std::cout << ledger.method << "/" << ledger.env << "/"
                      << ledger.seed << ":\n";
            print_decisions(ledger);
        }
        std::cout << "report written to " << report_out << "\n";
        return 0;
    }

    if (replay->parsed()) {
        const fs::path run_dir = replay_run_dir;
        const fs::path out = replay_out.empty()
                                 ? run_dir.parent_path() / "replay"
                                 : fs::path(replay_out);
        RunOptions opts;
        opts.overwrite = true;
        const auto result = replay_run(run_dir, out, opts);
        std::cout << result.detail << "\n";
        if (!result.ledger_identical)
            throw IntegrityError("replay mismatch for " + run_dir.string());
        return 0;
    }

    return 0;
}

}  // namespace

const char* error_kind(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "config";
    if (dynamic_cast<const ContractViolation*>(&e)) return "contract";
    if (dynamic_cast<const IntegrityError*>(&e)) return "integrity";
    if (dynamic_cast<const TransportError*>(&e)) return "transport";
    if (dynamic_cast<const DiagnosisError*>(&e)) return "diagnosis";
    return "internal";
}

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const std::exception& e) {
        json err{{"error", error_kind(e)}, {"message", e.what()}};
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
