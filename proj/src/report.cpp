#include "shapelab/report.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include "shapelab/errors.hpp"

namespace shapelab {

namespace {

using nlohmann::json;

struct SeedMetrics {
    double max_return = 0.0;
    double avg_return = 0.0;
};

SeedMetrics seed_metrics(const RunLedger& ledger) {
    if (ledger.selected_curve.empty())
        throw ConfigError("metrics: run " + ledger.method + "/" + ledger.env +
                          "/" + std::to_string(ledger.seed) +
                          " has no eval points");
    // De-duplicate by env_steps; the latest value at a step wins.
    std::map<std::int64_t, double> by_step;
    for (const auto& p : ledger.selected_curve)
        by_step[p.env_steps] = p.mean_sparse_return;

    SeedMetrics m;
    m.max_return = -1.0;
    double sum = 0.0;
    for (const auto& [steps, ret] : by_step) {
        if (!(ret >= 0.0 && ret <= 1.0))
            throw IntegrityError("metrics: return " + format_double(ret) +
                                 " outside [0,1] in run " + ledger.method +
                                 "/" + ledger.env + "/" +
                                 std::to_string(ledger.seed));
        m.max_return = std::max(m.max_return, ret);
        sum += ret;
    }
    m.avg_return = sum / static_cast<double>(by_step.size());
    return m;
}

struct Moments {
    double mean = 0.0;
    double pop_std = 0.0;
};

Moments moments(const std::vector<double>& xs) {
    double sum = 0.0;
    for (double x : xs) sum += x;
    const double mean = sum / static_cast<double>(xs.size());
    double sq = 0.0;
    for (double x : xs) sq += (x - mean) * (x - mean);
    return {mean, std::sqrt(sq / static_cast<double>(xs.size()))};
}

// Runs bodies 0..n-1 on up to `parallel` threads. Bodies must not throw;
// job exceptions are captured per index and the first is rethrown.
void parallel_jobs(std::size_t n, int parallel,
                   const std::function<void(std::size_t)>& body) {
    const int workers =
        std::max(1, std::min<int>(parallel, static_cast<int>(n)));
    std::vector<std::exception_ptr> errors(n);
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                body(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < n;
                     i = next.fetch_add(1)) {
                    try {
                        body(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open for write: " + path.string());
    out << text;
    if (!out) throw ConfigError("write failed: " + path.string());
}

}  // namespace

MetricsTable compute_metrics(const std::vector<RunLedger>& ledgers) {
    if (ledgers.empty()) throw ConfigError("metrics: no ledgers given");

    std::map<std::pair<std::string, std::string>,
             std::vector<std::pair<std::uint64_t, SeedMetrics>>>
        groups;
    for (const auto& ledger : ledgers) {
        auto& group = groups[{ledger.env, ledger.method}];
        for (const auto& [seed, _] : group)
            if (seed == ledger.seed)
                throw ConfigError("metrics: duplicate run " + ledger.method +
                                  "/" + ledger.env + "/" +
                                  std::to_string(ledger.seed));
        group.emplace_back(ledger.seed, seed_metrics(ledger));
    }

    MetricsTable table;
    for (const auto& [key, group] : groups) {
        std::vector<double> maxes, avgs;
        maxes.reserve(group.size());
        avgs.reserve(group.size());
        for (const auto& [_, m] : group) {
            maxes.push_back(m.max_return);
            avgs.push_back(m.avg_return);
        }
        const auto mm = moments(maxes);
        const auto am = moments(avgs);
        table.rows.push_back({key.first, key.second,
                              static_cast<int>(group.size()), mm.mean,
                              mm.pop_std, am.mean, am.pop_std});
    }
    return table;
}

nlohmann::json metrics_table_to_json(const MetricsTable& table) {
    json rows = json::array();
    for (const auto& r : table.rows)
        rows.push_back({{"env", r.env},
                        {"method", r.method},
                        {"seeds", r.n_seeds},
                        {"max_mean", r.max_mean},
                        {"max_std", r.max_std},
                        {"avg_mean", r.avg_mean},
                        {"avg_std", r.avg_std}});
    return {{"rows", rows}};
}

std::string metrics_table_to_csv(const MetricsTable& table) {
    std::ostringstream out;
    out << "env,method,seeds,max_mean,max_std,avg_mean,avg_std\n";
    for (const auto& r : table.rows)
        out << r.env << ',' << r.method << ',' << r.n_seeds << ','
            << format_double(r.max_mean) << ',' << format_double(r.max_std)
            << ',' << format_double(r.avg_mean) << ','
            << format_double(r.avg_std) << '\n';
    return out.str();
}

ExperimentConfig validate(ExperimentConfig cfg) {
    parse_task_name(cfg.env_name);  // throws on a malformed name
    if (cfg.methods.empty())
        throw ConfigError("experiment: methods must be non-empty");
    std::set<std::string> seen_methods;
    for (const auto& m : cfg.methods) {
        if (!method_from_name(m))
            throw ConfigError("experiment: unknown method '" + m + "'");
        if (!seen_methods.insert(m).second)
            throw ConfigError("experiment: duplicate method '" + m + "'");
    }
    if (cfg.seeds.empty())
        throw ConfigError("experiment: seeds must be non-empty");
    if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() !=
        cfg.seeds.size())
        throw ConfigError("experiment: duplicate seed");
    cfg.budget = validate(cfg.budget);
    cfg.learner = validate(cfg.learner);
    fixed_shaping_config(cfg.fixed_direction);  // throws on a bad direction
    if (cfg.eval_episodes < 1)
        throw ConfigError("experiment: eval_episodes must be >= 1");
    if (cfg.output_root.empty())
        throw ConfigError("experiment: output_root must be non-empty");
    return cfg;
}

nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg) {
    return {{"env", cfg.env_name},
            {"methods", cfg.methods},
            {"seeds", cfg.seeds},
            {"budget", workflow_budget_to_json(cfg.budget)},
            {"learner", learner_config_to_json(cfg.learner)},
            {"engine", engine_config_to_json(cfg.engine)},
            {"thresholds", key_thresholds_to_json(cfg.thresholds)},
            {"fixed_direction", cfg.fixed_direction},
            {"eval_episodes", cfg.eval_episodes},
            {"output_root", cfg.output_root}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("experiment: expected an object");
    ExperimentConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "env") c.env_name = value.get<std::string>();
        else if (key == "methods")
            c.methods = value.get<std::vector<std::string>>();
        else if (key == "seeds")
            c.seeds = value.get<std::vector<std::uint64_t>>();
        else if (key == "budget")
            c.budget = value.is_string()
                           ? budget_profile(value.get<std::string>())
                           : workflow_budget_from_json(value);
        else if (key == "learner") c.learner = learner_config_from_json(value);
        else if (key == "engine") c.engine = engine_config_from_json(value);
        else if (key == "thresholds")
            c.thresholds = key_thresholds_from_json(value);
        else if (key == "fixed_direction")
            c.fixed_direction = value.get<std::string>();
        else if (key == "eval_episodes") c.eval_episodes = value.get<int>();
        else if (key == "output_root")
            c.output_root = value.get<std::string>();
        else throw ConfigError("experiment: unknown field '" + key + "'");
    }
    return validate(c);
}

RunConfig run_config_for(const ExperimentConfig& cfg, const std::string& method,
                         std::uint64_t seed) {
    RunConfig rc;
    rc.method = method;
    rc.env_name = cfg.env_name;
    rc.seed = seed;
    rc.budget = cfg.budget;
    rc.learner = cfg.learner;
    rc.engine = cfg.engine;
    rc.thresholds = cfg.thresholds;
    rc.fixed_direction = cfg.fixed_direction;
    rc.eval_episodes = cfg.eval_episodes;
    return validate(rc);
}

std::vector<RunLedger> run_suite(const ExperimentConfig& raw_cfg,
                                 const RunOptions& opts) {
    const ExperimentConfig cfg = validate(raw_cfg);

    std::vector<RunConfig> grid;
    for (const auto& method : cfg.methods)
        for (const auto seed : cfg.seeds)
            grid.push_back(run_config_for(cfg, method, seed));

    // Each job trains single-threaded so the schedule cannot leak into the
    // ledgers; parallelism only interleaves independent run directories.
    RunOptions per_run;
    per_run.parallel = 1;
    per_run.overwrite = opts.overwrite;

    std::vector<RunLedger> ledgers(grid.size());
    parallel_jobs(grid.size(), opts.parallel, [&](std::size_t i) {
        ledgers[i] = run_method(grid[i], cfg.output_root, per_run);
    });
    return ledgers;
}

std::vector<RunLedger> load_ledgers(const std::filesystem::path& out_root) {
    if (!std::filesystem::is_directory(out_root))
        throw ConfigError("not a run root: " + out_root.string());
    std::vector<std::filesystem::path> paths;
    for (const auto& entry :
         std::filesystem::recursive_directory_iterator(out_root))
        if (entry.is_regular_file() &&
            entry.path().filename() == "ledger.json")
            paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    if (paths.empty())
        throw ConfigError("no ledger.json found under " + out_root.string());

    std::vector<RunLedger> ledgers;
    ledgers.reserve(paths.size());
    for (const auto& path : paths) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw ConfigError("cannot open for read: " + path.string());
        json doc;
        in >> doc;
        ledgers.push_back(run_ledger_from_json(doc));
    }
    return ledgers;
}

MetricsTable write_report(const std::filesystem::path& out_root,
                          const std::filesystem::path& report_dir) {
    const auto ledgers = load_ledgers(out_root);
    const auto table = compute_metrics(ledgers);

    write_text(report_dir / "metrics.csv", metrics_table_to_csv(table));
    write_text(report_dir / "metrics.json",
               metrics_table_to_json(table).dump(2) + "\n");
    for (const auto& ledger : ledgers) {
        const auto name = ledger.method + "_" + ledger.env + "_seed" +
                          std::to_string(ledger.seed) + ".csv";
        write_text(report_dir / "plots" / name,
                   curve_to_csv(ledger.selected_curve));
    }
    return table;
}

}  // namespace shapelab
