#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "shapelab/errors.hpp"
#include "shapelab/report.hpp"

using namespace shapelab;
namespace fs = std::filesystem;

namespace {

RunLedger ledger_with(const std::string& env, const std::string& method,
                      std::uint64_t seed, const std::vector<double>& returns) {
    RunLedger L;
    L.env = env;
    L.method = method;
    L.seed = seed;
    for (std::size_t i = 0; i < returns.size(); ++i)
        L.selected_curve.push_back(
            {static_cast<std::int64_t>(1000 * (i + 1)), returns[i]});
    return L;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / "shapelab-report" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("metrics: single-seed definitions") {
    const auto table =
        compute_metrics({ledger_with("8x8-2p-3f", "also", 1, {0.0, 0.5, 1.0})});
    REQUIRE(table.rows.size() == 1);
    const auto& r = table.rows[0];
    CHECK(r.env == "8x8-2p-3f");
    CHECK(r.method == "also");
    CHECK(r.n_seeds == 1);
    CHECK(r.max_mean == doctest::Approx(1.0));
    CHECK(r.max_std == doctest::Approx(0.0));
    CHECK(r.avg_mean == doctest::Approx(0.5));
    CHECK(r.avg_std == doctest::Approx(0.0));
}

TEST_CASE("metrics: population std over two seeds") {
    const auto table = compute_metrics({
        ledger_with("8x8-2p-3f", "also", 1, {0.4, 0.4, 0.4}),
        ledger_with("8x8-2p-3f", "also", 2, {0.6, 0.6, 0.6}),
    });
    REQUIRE(table.rows.size() == 1);
    CHECK(table.rows[0].avg_mean == doctest::Approx(0.5));
    CHECK(table.rows[0].avg_std == doctest::Approx(0.1));  // population, not n-1
    CHECK(table.rows[0].max_mean == doctest::Approx(0.5));
    CHECK(table.rows[0].max_std == doctest::Approx(0.1));
}

TEST_CASE("metrics: three hand-built ledgers match the spreadsheet") {
    // Per-seed (max, avg): (0.5, 0.3), (0.6, 0.4), (1.0, 0.4).
    const auto table = compute_metrics({
        ledger_with("8x8-2p-3f", "also", 1, {0.1, 0.3, 0.5}),
        ledger_with("8x8-2p-3f", "also", 2, {0.2, 0.6, 0.4}),
        ledger_with("8x8-2p-3f", "also", 3, {0.0, 0.2, 1.0}),
    });
    REQUIRE(table.rows.size() == 1);
    const auto& r = table.rows[0];
    CHECK(r.n_seeds == 3);
    CHECK(r.max_mean == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(r.max_std == doctest::Approx(std::sqrt(0.14 / 3.0)).epsilon(1e-12));
    CHECK(r.avg_mean == doctest::Approx(1.1 / 3.0).epsilon(1e-12));
    // Deviations (-1/15, 1/30, 1/30) -> variance 1/450.
    CHECK(r.avg_std == doctest::Approx(std::sqrt(1.0 / 450.0)).epsilon(1e-9));
}

TEST_CASE("metrics: duplicated eval points collapse before aggregation") {
    auto clean = ledger_with("8x8-2p-3f", "sparse", 1, {0.2, 0.8});
    auto dup = clean;
    // A stale value at an already-present step must not count; the latest
    // value at that step wins.
    dup.selected_curve.insert(dup.selected_curve.begin() + 1,
                              {2000, 0.05});
    const auto a = compute_metrics({clean});
    const auto b = compute_metrics({dup});
    CHECK(a.rows[0].max_mean == b.rows[0].max_mean);
    CHECK(a.rows[0].avg_mean == b.rows[0].avg_mean);
}

TEST_CASE("metrics: rows sorted by env then method") {
    const auto table = compute_metrics({
        ledger_with("9x9-2p-2f", "sparse", 1, {0.1}),
        ledger_with("8x8-2p-3f", "sparse", 1, {0.1}),
        ledger_with("8x8-2p-3f", "also", 1, {0.1}),
    });
    REQUIRE(table.rows.size() == 3);
    CHECK(table.rows[0].env == "8x8-2p-3f");
    CHECK(table.rows[0].method == "also");
    CHECK(table.rows[1].env == "8x8-2p-3f");
    CHECK(table.rows[1].method == "sparse");
    CHECK(table.rows[2].env == "9x9-2p-2f");
}

TEST_CASE("metrics: malformed inputs are rejected") {
    CHECK_THROWS_AS(compute_metrics({}), ConfigError);
    CHECK_THROWS_AS(compute_metrics({ledger_with("8x8-2p-3f", "also", 1, {})}),
                    ConfigError);
    CHECK_THROWS_AS(
        compute_metrics({ledger_with("8x8-2p-3f", "also", 1, {0.1}),
                         ledger_with("8x8-2p-3f", "also", 1, {0.2})}),
        ConfigError);
    CHECK_THROWS_AS(
        compute_metrics({ledger_with("8x8-2p-3f", "also", 1, {1.5})}),
        IntegrityError);
    CHECK_THROWS_AS(
        compute_metrics({ledger_with("8x8-2p-3f", "also", 1, {-0.1})}),
        IntegrityError);
}

TEST_CASE("metrics: CSV and JSON emission") {
    const auto table = compute_metrics({
        ledger_with("8x8-2p-3f", "sparse", 1, {0.25, 0.75}),
    });
    const auto csv = metrics_table_to_csv(table);
    std::istringstream lines(csv);
    std::string header, row, extra;
    REQUIRE(std::getline(lines, header));
    CHECK(header == "env,method,seeds,max_mean,max_std,avg_mean,avg_std");
    REQUIRE(std::getline(lines, row));
    CHECK(row.rfind("8x8-2p-3f,sparse,1,0.75,0,0.5,0", 0) == 0);
    CHECK(!std::getline(lines, extra));

    const auto j = metrics_table_to_json(table);
    REQUIRE(j.at("rows").size() == 1);
    CHECK(j["rows"][0]["max_mean"].get<double>() == doctest::Approx(0.75));
    CHECK(j["rows"][0]["seeds"].get<int>() == 1);
}

TEST_CASE("experiment config: round trip, defaults, strictness") {
    ExperimentConfig cfg;
    cfg.env_name = "10x10-2p-1f";
    cfg.methods = {"sparse", "also"};
    cfg.seeds = {4, 5};
    cfg.budget = desk_scale_budget(20000);
    cfg.output_root = "sweeps";
    const auto j = experiment_config_to_json(cfg);
    const auto back = experiment_config_from_json(j);
    CHECK(experiment_config_to_json(back).dump() == j.dump());

    // A profile name is accepted in place of the budget object.
    auto with_profile = j;
    with_profile["budget"] = "short-2.05M";
    const auto prof = experiment_config_from_json(with_profile);
    CHECK(prof.budget.final_horizon == 2050000);

    auto bad = j;
    bad["plot_style"] = "dark";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["methods"] = nlohmann::json::array();
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["methods"] = {"sparse", "sparse"};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["methods"] = {"qmix"};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["seeds"] = {1, 1};
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
    bad = j;
    bad["budget"] = "long-1B";
    CHECK_THROWS_AS(experiment_config_from_json(bad), ConfigError);
}

TEST_CASE("experiment config: per-cell run configs") {
    ExperimentConfig cfg;
    cfg.env_name = "8x8-2p-1f";
    cfg.methods = {"sparse"};
    cfg.seeds = {9};
    cfg.budget = desk_scale_budget(20000);
    cfg.eval_episodes = 8;
    const auto rc = run_config_for(cfg, "sparse", 9);
    CHECK(rc.method == "sparse");
    CHECK(rc.env_name == "8x8-2p-1f");
    CHECK(rc.seed == 9);
    CHECK(rc.eval_episodes == 8);
    CHECK(rc.budget == cfg.budget);
}

TEST_CASE("suite + report: sweep, aggregate, emit") {
    const auto root = fresh_dir("suite");
    ExperimentConfig cfg;
    cfg.env_name = "8x8-2p-1f";
    cfg.methods = {"sparse", "fixed-rs"};
    cfg.seeds = {1, 2};
    cfg.budget = desk_scale_budget(4000);
    cfg.eval_episodes = 5;
    cfg.output_root = (root / "runs").string();

    const auto ledgers = run_suite(cfg);
    REQUIRE(ledgers.size() == 4);
    // Grid order: method-major, then seed.
    CHECK(ledgers[0].method == "sparse");
    CHECK(ledgers[0].seed == 1);
    CHECK(ledgers[1].seed == 2);
    CHECK(ledgers[2].method == "fixed-rs");
    for (const auto& L : ledgers) CHECK(L.total_env_steps == 4000);

    // Parallel scheduling cannot change the results; ledgers compare equal
    // field-for-field via their JSON forms.
    ExperimentConfig cfg2 = cfg;
    cfg2.output_root = (root / "runs2").string();
    RunOptions par;
    par.parallel = 2;
    const auto ledgers2 = run_suite(cfg2, par);
    REQUIRE(ledgers2.size() == 4);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(run_ledger_to_json(ledgers2[i]).dump() ==
              run_ledger_to_json(ledgers[i]).dump());

    // Loading from disk sees the same four runs.
    const auto loaded = load_ledgers(cfg.output_root);
    CHECK(loaded.size() == 4);

    // Report emission.
    const auto report_dir = root / "report";
    const auto table = write_report(cfg.output_root, report_dir);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0].method == "fixed-rs");
    CHECK(table.rows[0].n_seeds == 2);
    CHECK(table.rows[1].method == "sparse");
    CHECK(fs::exists(report_dir / "metrics.csv"));
    CHECK(fs::exists(report_dir / "metrics.json"));
    for (const char* name :
         {"sparse_8x8-2p-1f_seed1.csv", "sparse_8x8-2p-1f_seed2.csv",
          "fixed-rs_8x8-2p-1f_seed1.csv", "fixed-rs_8x8-2p-1f_seed2.csv"}) {
        const auto path = report_dir / "plots" / name;
        REQUIRE(fs::exists(path));
        std::ifstream in(path);
        std::string header;
        std::getline(in, header);
        CHECK(header == "env_steps,mean_sparse_return");
    }

    // The plot CSV reproduces the selected curve exactly.
    const auto curve =
        read_curve_csv(report_dir / "plots" / "sparse_8x8-2p-1f_seed1.csv");
    CHECK(curve == ledgers[0].selected_curve);

    CHECK_THROWS_AS(load_ledgers(root / "nowhere"), ConfigError);
}
