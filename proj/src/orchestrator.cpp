#include "shapelab/orchestrator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <thread>

#include "shapelab/errors.hpp"
#include "shapelab/rng.hpp"

namespace shapelab {

namespace {

using nlohmann::json;

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(v));
    return buf;
}

std::string fingerprint_hex(const Checkpoint& ckpt) {
    return hex64(checkpoint_fingerprint(ckpt));
}

// Round-half-up rational scaling used by the budget profiles.
std::int64_t scale_ratio(std::int64_t horizon, std::int64_t num,
                         std::int64_t den) {
    return (horizon * num + den / 2) / den;
}

Curve window(const Curve& curve, std::int64_t lo, std::int64_t hi) {
    Curve out;
    for (const auto& p : curve)
        if (p.env_steps >= lo && p.env_steps <= hi) out.push_back(p);
    return out;
}

void append_curve(Curve& into, const Curve& tail) {
    into.insert(into.end(), tail.begin(), tail.end());
}

// Runs body(0..n-1) over at most `parallel` worker threads. Bodies must not
// throw; training jobs catch internally and report failure in their result.
void parallel_for(int n, int parallel, const std::function<void(int)>& body) {
    const int workers = std::max(1, std::min(parallel, n));
    if (workers <= 1) {
        for (int i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1))
                body(i);
        });
    for (auto& t : pool) t.join();
}

LearnerConfig lineage(const RunInputs& in, const char* tag) {
    LearnerConfig lc = in.learner;
    lc.seed = derive_seed(in.seed, tag);
    return lc;
}

GuidanceCard diagnose_or_fallback(LlmEngine& engine, const CheckpointContext& ctx,
                                  const CallSite& site,
                                  std::vector<std::string>& warnings) {
    try {
        return engine.diagnose(ctx, site);
    } catch (const DiagnosisError& e) {
        warnings.push_back(site.phase + " round " + std::to_string(site.round) +
                           ": critic fell back to heuristic rules (" +
                           std::string(e.what()) + ")");
    } catch (const TransportError& e) {
        warnings.push_back(site.phase + " round " + std::to_string(site.round) +
                           ": provider unreachable; heuristic diagnosis (" +
                           std::string(e.what()) + ")");
    }
    return heuristic_provider_rules(ctx).card;
}

std::vector<ShapingConfig> propose_or_fallback(LlmEngine& engine,
                                               const GuidanceCard& card,
                                               const CheckpointContext& ctx, int n,
                                               const CallSite& site,
                                               std::vector<std::string>& warnings) {
    try {
        return engine.propose(card, ctx, n, site);
    } catch (const TransportError& e) {
        warnings.push_back(site.phase + " round " + std::to_string(site.round) +
                           ": provider unreachable; heuristic proposals (" +
                           std::string(e.what()) + ")");
    }
    return heuristic_provider_rules(ctx).proposals;
}

// The gate's tie-break chain applied to raw scores (pilot selection has no
// control, so margins and scores order identically).
bool better_score(const BranchScore& a, const BranchScore& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.last_k_mean != b.last_k_mean) return a.last_k_mean > b.last_k_mean;
    if (a.spike_gap != b.spike_gap) return a.spike_gap < b.spike_gap;
    return a.id < b.id;
}

BranchNote note_of(const BranchRecord& rec) {
    BranchNote note;
    note.checkpoint = rec.checkpoint;
    note.id = rec.id;
    note.config = rec.config;
    note.score = rec.score.score;
    note.margin = rec.margin;
    note.decision = rec.decision;
    return note;
}

bool mode_allowed(Mode m, const GenerationConstraints& constraints) {
    return std::find(constraints.allowed_modes.begin(),
                     constraints.allowed_modes.end(),
                     m) != constraints.allowed_modes.end();
}

double json_num(const json& j, const char* key) {
    const auto& v = j.at(key);
    return v.is_null() ? kNan : v.get<double>();
}

json num_json(double v) {
    return std::isfinite(v) ? json(v) : json(nullptr);
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw ConfigError("cannot write " + path.string());
}

void write_json_file(const std::filesystem::path& path, const json& j) {
    write_text_file(path, j.dump(2) + "\n");
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Budgets.
// ---------------------------------------------------------------------------

std::int64_t anchor_step(const WorkflowBudget& budget) {
    const std::int64_t e = budget.eval_every;
    return (budget.initial_endpoint_step + e / 2) / e * e;
}

WorkflowBudget validate(WorkflowBudget budget) {
    const auto fail = [](const std::string& why) -> WorkflowBudget {
        throw ConfigError("budget: " + why);
    };
    if (budget.final_horizon <= 0) return fail("final_horizon must be positive");
    if (budget.diagnostic_budget <= 0)
        return fail("diagnostic_budget must be positive");
    if (budget.eval_every <= 0 || budget.eval_every > budget.final_horizon)
        return fail("eval_every must be in [1, final_horizon]");
    if (budget.initial_rounds < 1) return fail("initial_rounds must be >= 1");
    if (budget.validation_rounds_per_checkpoint < 1)
        return fail("validation_rounds_per_checkpoint must be >= 1");
    if (budget.candidates_per_round != 3 || budget.updates_per_round != 3)
        return fail("candidates_per_round and updates_per_round must be 3: "
                    "candidates are typed targeted/exploratory/conservative");
    if (budget.pilot_budget <= 0) return fail("pilot_budget must be positive");
    if (budget.branch_budget <= 0) return fail("branch_budget must be positive");
    if (budget.initial_endpoint_step <= 0 ||
        budget.initial_endpoint_step > budget.pilot_budget)
        return fail("initial_endpoint_step must be in [1, pilot_budget]");
    const std::int64_t anchor = anchor_step(budget);
    if (anchor < budget.eval_every)
        return fail("initial endpoint anchors below the first eval point");
    if (anchor > budget.pilot_budget)
        return fail("pilot_budget must reach the endpoint anchor");
    if (budget.checkpoint_positions.empty())
        return fail("need at least one validation checkpoint");
    std::int64_t prev = anchor;
    for (std::size_t i = 0; i < budget.checkpoint_positions.size(); ++i) {
        const std::int64_t c = budget.checkpoint_positions[i];
        if (c <= prev)
            return fail("checkpoints must be strictly increasing, after the "
                        "endpoint anchor, and separated by branch_budget");
        if (c + budget.branch_budget > budget.final_horizon)
            return fail("checkpoint " + std::to_string(c) +
                        " leaves no room for its branch window");
        prev = c + budget.branch_budget;
    }
    return budget;
}

WorkflowBudget desk_scale_budget(std::int64_t final_horizon) {
    WorkflowBudget b;
    b.final_horizon = final_horizon;
    b.diagnostic_budget = final_horizon;
    b.pilot_budget = scale_ratio(final_horizon, 850, 2050);
    b.initial_endpoint_step = scale_ratio(final_horizon, 800, 2050);
    b.checkpoint_positions = {scale_ratio(final_horizon, 1000, 2050),
                              scale_ratio(final_horizon, 1500, 2050)};
    b.branch_budget = scale_ratio(final_horizon, 300, 2050);
    b.eval_every = final_horizon / 50;
    return validate(b);
}

WorkflowBudget budget_profile(const std::string& name) {
    if (name == "short-2.05M") return desk_scale_budget(2050000);
    if (name == "medium-10M") {
        WorkflowBudget b;
        b.final_horizon = 10000000;
        b.diagnostic_budget = 10000000;
        b.pilot_budget = 850000;
        b.initial_endpoint_step = 800000;
        b.checkpoint_positions = {1500000, 2500000};
        b.branch_budget = 500000;
        b.eval_every = 200000;
        return validate(b);
    }
    throw ConfigError("unknown budget profile '" + name +
                      "' (expected short-2.05M or medium-10M)");
}

nlohmann::json workflow_budget_to_json(const WorkflowBudget& b) {
    return {{"final_horizon", b.final_horizon},
            {"diagnostic_budget", b.diagnostic_budget},
            {"initial_rounds", b.initial_rounds},
            {"candidates_per_round", b.candidates_per_round},
            {"pilot_budget", b.pilot_budget},
            {"initial_endpoint_step", b.initial_endpoint_step},
            {"checkpoint_positions", b.checkpoint_positions},
            {"branch_budget", b.branch_budget},
            {"validation_rounds_per_checkpoint",
             b.validation_rounds_per_checkpoint},
            {"updates_per_round", b.updates_per_round},
            {"eval_every", b.eval_every}};
}

WorkflowBudget workflow_budget_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("budget: expected an object");
    WorkflowBudget b = desk_scale_budget(200000);
    for (const auto& [key, value] : j.items()) {
        if (key == "final_horizon") b.final_horizon = value.get<std::int64_t>();
        else if (key == "diagnostic_budget")
            b.diagnostic_budget = value.get<std::int64_t>();
        else if (key == "initial_rounds") b.initial_rounds = value.get<int>();
        else if (key == "candidates_per_round")
            b.candidates_per_round = value.get<int>();
        else if (key == "pilot_budget") b.pilot_budget = value.get<std::int64_t>();
        else if (key == "initial_endpoint_step")
            b.initial_endpoint_step = value.get<std::int64_t>();
        else if (key == "checkpoint_positions")
            b.checkpoint_positions = value.get<std::vector<std::int64_t>>();
        else if (key == "branch_budget")
            b.branch_budget = value.get<std::int64_t>();
        else if (key == "validation_rounds_per_checkpoint")
            b.validation_rounds_per_checkpoint = value.get<int>();
        else if (key == "updates_per_round")
            b.updates_per_round = value.get<int>();
        else if (key == "eval_every") b.eval_every = value.get<std::int64_t>();
        else throw ConfigError("budget: unknown field '" + key + "'");
    }
    return validate(b);
}

// ---------------------------------------------------------------------------
// Methods and run configuration.
// ---------------------------------------------------------------------------

const char* method_name(Method m) {
    switch (m) {
        case Method::sparse: return "sparse";
        case Method::fixed_rs: return "fixed-rs";
        case Method::single_llm_rg: return "single-llm-rg";
        case Method::also: return "also";
        case Method::single_llm_adapt: return "single-llm-adapt";
    }
    return "?";
}

std::optional<Method> method_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(Method::single_llm_adapt); ++i) {
        const Method m = static_cast<Method>(i);
        if (name == method_name(m)) return m;
    }
    return std::nullopt;
}

ShapingConfig fixed_shaping_config(const std::string& direction) {
    const auto mode = mode_from_name(direction);
    const bool registered =
        mode && (*mode == Mode::balanced_progress ||
                 *mode == Mode::early_discovery ||
                 *mode == Mode::collection_readiness);
    if (!registered)
        throw ConfigError(
            "fixed-rs direction must be one of balanced-progress, "
            "early-discovery, collection-readiness; got '" + direction + "'");
    ShapingConfig c;
    c.impl_id = "fixed-" + direction;
    c.beta = kBetaExploratory;
    c.mode = *mode;
    c.weights = mode_template(*mode);
    c.metadata.candidate_type = "pre-registered";
    c.metadata.expected_effect =
        "static " + direction + " shaping over the full horizon";
    return normalize_and_validate(c);
}

RunConfig validate(RunConfig cfg) {
    if (!method_from_name(cfg.method))
        throw ConfigError("run config: unknown method '" + cfg.method + "'");
    validate(parse_task_name(cfg.env_name));
    cfg.budget = validate(cfg.budget);
    cfg.learner = validate(cfg.learner);
    if (cfg.eval_episodes <= 0)
        throw ConfigError("run config: eval_episodes must be positive");
    fixed_shaping_config(cfg.fixed_direction);  // must name a registered direction
    return cfg;
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
    return {{"method", cfg.method},
            {"env", cfg.env_name},
            {"seed", cfg.seed},
            {"budget", workflow_budget_to_json(cfg.budget)},
            {"learner", learner_config_to_json(cfg.learner)},
            {"engine", engine_config_to_json(cfg.engine)},
            {"thresholds", key_thresholds_to_json(cfg.thresholds)},
            {"fixed_direction", cfg.fixed_direction},
            {"eval_episodes", cfg.eval_episodes}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("run config: expected an object");
    RunConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "method") c.method = value.get<std::string>();
        else if (key == "env") c.env_name = value.get<std::string>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "budget") c.budget = workflow_budget_from_json(value);
        else if (key == "learner") c.learner = learner_config_from_json(value);
        else if (key == "engine") c.engine = engine_config_from_json(value);
        else if (key == "thresholds")
            c.thresholds = key_thresholds_from_json(value);
        else if (key == "fixed_direction")
            c.fixed_direction = value.get<std::string>();
        else if (key == "eval_episodes") c.eval_episodes = value.get<int>();
        else throw ConfigError("run config: unknown field '" + key + "'");
    }
    return validate(c);
}

// ---------------------------------------------------------------------------
// Ledger records.
// ---------------------------------------------------------------------------

nlohmann::json segment_record_to_json(const SegmentRecord& s) {
    return {{"name", s.name},
            {"shaping", s.shaping ? shaping_config_to_json(*s.shaping)
                                  : json(nullptr)},
            {"start_steps", s.start_steps},
            {"end_steps", s.end_steps},
            {"curve", curve_to_json(s.curve)},
            {"start_fingerprint", s.start_fingerprint},
            {"end_fingerprint", s.end_fingerprint}};
}

SegmentRecord segment_record_from_json(const nlohmann::json& j) {
    SegmentRecord s;
    s.name = j.at("name").get<std::string>();
    if (!j.at("shaping").is_null())
        s.shaping = shaping_config_from_json(j.at("shaping"));
    s.start_steps = j.at("start_steps").get<std::int64_t>();
    s.end_steps = j.at("end_steps").get<std::int64_t>();
    s.curve = curve_from_json(j.at("curve"));
    s.start_fingerprint = j.at("start_fingerprint").get<std::string>();
    s.end_fingerprint = j.at("end_fingerprint").get<std::string>();
    return s;
}

nlohmann::json branch_record_to_json(const BranchRecord& b) {
    // curve id/config always mirror the record's; only points and origin are
    // stored.
    return {{"checkpoint", b.checkpoint},
            {"round", b.round},
            {"id", b.id},
            {"config", b.config ? shaping_config_to_json(*b.config)
                                : json(nullptr)},
            {"points", curve_to_json(b.curve.points)},
            {"origin_checkpoint", b.curve.origin_checkpoint},
            {"score", branch_score_to_json(b.score)},
            {"margin", num_json(b.margin)},
            {"decision", b.decision},
            {"promoted", b.promoted}};
}

BranchRecord branch_record_from_json(const nlohmann::json& j) {
    BranchRecord b;
    b.checkpoint = j.at("checkpoint").get<std::string>();
    b.round = j.at("round").get<int>();
    b.id = j.at("id").get<std::string>();
    if (!j.at("config").is_null())
        b.config = shaping_config_from_json(j.at("config"));
    b.curve.id = b.id;
    b.curve.points = curve_from_json(j.at("points"));
    b.curve.origin_checkpoint = j.at("origin_checkpoint").get<std::string>();
    b.curve.config = b.config;
    b.score = branch_score_from_json(j.at("score"));
    b.margin = json_num(j, "margin");
    b.decision = j.at("decision").get<std::string>();
    b.promoted = j.at("promoted").get<bool>();
    return b;
}

nlohmann::json run_ledger_to_json(const RunLedger& ledger) {
    json segments = json::array();
    for (const auto& s : ledger.mainline)
        segments.push_back(segment_record_to_json(s));
    json branches = json::array();
    for (const auto& b : ledger.branches)
        branches.push_back(branch_record_to_json(b));
    json decisions = json::array();
    for (const auto& [label, decision] : ledger.decisions)
        decisions.push_back(
            {{"checkpoint", label}, {"decision", gate_decision_to_json(decision)}});
    return {{"method", ledger.method},
            {"env", ledger.env},
            {"seed", ledger.seed},
            {"budget", workflow_budget_to_json(ledger.budget)},
            {"mainline", segments},
            {"reference", ledger.reference
                              ? segment_record_to_json(*ledger.reference)
                              : json(nullptr)},
            {"branches", branches},
            {"decisions", decisions},
            {"selected_curve", curve_to_json(ledger.selected_curve)},
            {"total_env_steps", ledger.total_env_steps},
            {"warnings", ledger.warnings}};
}

RunLedger run_ledger_from_json(const nlohmann::json& j) {
    RunLedger L;
    L.method = j.at("method").get<std::string>();
    L.env = j.at("env").get<std::string>();
    L.seed = j.at("seed").get<std::uint64_t>();
    L.budget = workflow_budget_from_json(j.at("budget"));
    for (const auto& e : j.at("mainline"))
        L.mainline.push_back(segment_record_from_json(e));
    if (!j.at("reference").is_null())
        L.reference = segment_record_from_json(j.at("reference"));
    for (const auto& e : j.at("branches"))
        L.branches.push_back(branch_record_from_json(e));
    for (const auto& e : j.at("decisions"))
        L.decisions.emplace_back(e.at("checkpoint").get<std::string>(),
                                 gate_decision_from_json(e.at("decision")));
    L.selected_curve = curve_from_json(j.at("selected_curve"));
    L.total_env_steps = j.at("total_env_steps").get<std::int64_t>();
    L.warnings = j.at("warnings").get<std::vector<std::string>>();
    return L;
}

std::int64_t expected_total_env_steps(Method m, const WorkflowBudget& b,
                                      bool sparse_fallback) {
    const std::int64_t pilots = static_cast<std::int64_t>(b.initial_rounds) *
                                b.candidates_per_round * b.pilot_budget;
    switch (m) {
        case Method::sparse:
        case Method::fixed_rs:
            return b.final_horizon;
        case Method::single_llm_rg:
            return b.diagnostic_budget + pilots + b.final_horizon;
        case Method::also:
        case Method::single_llm_adapt: {
            if (sparse_fallback)
                return b.diagnostic_budget + pilots + b.final_horizon;
            // Reference and adaptive mainline each run horizon - c0; every
            // update branch adds branch_budget, the winner's being absorbed
            // into the mainline.
            const std::int64_t from_c0 = b.final_horizon - anchor_step(b);
            const std::int64_t extra_branches =
                static_cast<std::int64_t>(b.checkpoint_positions.size()) *
                b.validation_rounds_per_checkpoint * b.updates_per_round *
                b.branch_budget;
            return b.diagnostic_budget + pilots + 2 * from_c0 + extra_branches;
        }
    }
    throw ContractViolation("expected_total_env_steps: bad method");
}

// ---------------------------------------------------------------------------
// Phase 0: sparse diagnostic.
// ---------------------------------------------------------------------------

DiagnosticResult run_sparse_diagnostic(const RunInputs& in) {
    const LearnerConfig lc = lineage(in, "diagnostic");
    const Checkpoint start = fresh_checkpoint(in.env, lc);
    DiagnosticResult out;
    out.report = train_segment(start, in.env, lc, std::nullopt,
                               in.budget.diagnostic_budget, in.budget.eval_every,
                               in.eval_episodes);
    const auto traces = evaluate_traced(out.report.final_checkpoint, in.env, lc,
                                        in.eval_episodes);
    out.evidence = summarize_episodes(traces, in.env);
    out.keys = derive_keys(out.evidence, in.thresholds);
    return out;
}

// ---------------------------------------------------------------------------
// Phase 1: initial search.
// ---------------------------------------------------------------------------

InitialSearchResult initial_search(const RunInputs& in,
                                   const DiagnosticResult& diag,
                                   LlmEngine& engine) {
    const WorkflowBudget& b = in.budget;
    const std::int64_t anchor = anchor_step(b);
    const LearnerConfig lc = lineage(in, "pilot");
    const Checkpoint start = fresh_checkpoint(in.env, lc);
    const std::string start_fp = fingerprint_hex(start);

    InitialSearchResult out;
    out.c0 = start;

    CheckpointContext ctx;
    ctx.stage = {task_name(in.env), b.diagnostic_budget, "initial-search"};
    ctx.recent_returns = diag.report.curve;
    ctx.evidence = diag.evidence;
    ctx.keys = diag.keys;

    struct Pilot {
        std::string id;
        int round = 0;
        ShapingConfig config;
        Curve curve;
        Checkpoint at_anchor;
        BranchScore score;
        std::int64_t steps = 0;
        bool failed = false;
        std::string error;
    };
    std::vector<Pilot> pilots;
    GuidanceCard last_card;

    for (int round = 1; round <= b.initial_rounds; ++round) {
        const CallSite site{"initial-search", round};
        const CheckpointContext round_ctx = trim_context(ctx);
        last_card = diagnose_or_fallback(engine, round_ctx, site, out.warnings);
        const auto proposals = propose_or_fallback(
            engine, last_card, round_ctx, b.candidates_per_round, site,
            out.warnings);

        const std::size_t base = pilots.size();
        for (std::size_t i = 0; i < proposals.size(); ++i) {
            Pilot p;
            char id[32];
            std::snprintf(id, sizeof(id), "R%d-p%d", round,
                          static_cast<int>(i) + 1);
            p.id = id;
            p.round = round;
            p.config = proposals[i];
            pilots.push_back(std::move(p));
        }
        parallel_for(static_cast<int>(proposals.size()), in.parallel, [&](int i) {
            Pilot& p = pilots[base + i];
            try {
                const auto seg1 =
                    train_segment(start, in.env, lc, p.config, anchor,
                                  b.eval_every, in.eval_episodes);
                const auto seg2 = train_segment(
                    seg1.final_checkpoint, in.env, lc, p.config,
                    b.pilot_budget - anchor, b.eval_every, in.eval_episodes);
                p.at_anchor = seg1.final_checkpoint;
                p.curve = seg1.curve;
                append_curve(p.curve, seg2.curve);
                p.steps = seg1.steps_consumed + seg2.steps_consumed;
            } catch (const std::exception& e) {
                p.failed = true;
                p.error = e.what();
            }
        });
        for (std::size_t k = base; k < pilots.size(); ++k) {
            Pilot& p = pilots[k];
            BranchCurve bc{p.id, p.curve, start_fp, p.config};
            p.score = score_branch(bc);
            if (p.failed) {
                p.score.severe_invalid = true;
                p.score.risk_flags.push_back("training_error");
                out.warnings.push_back("initial-search: pilot " + p.id +
                                       " training failed: " + p.error);
            }
        }
        // Round outcomes become context for the next round, margins taken
        // against the best pilot seen so far.
        const Pilot* best = nullptr;
        for (const auto& p : pilots)
            if (!p.score.severe_invalid && std::isfinite(p.score.score) &&
                (!best || better_score(p.score, best->score)))
                best = &p;
        for (std::size_t k = base; k < pilots.size(); ++k) {
            const Pilot& p = pilots[k];
            BranchNote note;
            note.checkpoint = "initial-search";
            note.id = p.id;
            note.config = p.config;
            note.score = p.score.score;
            note.margin = best ? p.score.score - best->score.score : kNan;
            note.decision = "evaluated";
            ctx.history.push_back(std::move(note));
        }
    }

    for (const auto& p : pilots) out.steps_consumed += p.steps;

    int win = -1;
    for (std::size_t i = 0; i < pilots.size(); ++i) {
        const auto& s = pilots[i].score;
        if (s.severe_invalid || !std::isfinite(s.score)) continue;
        if (win < 0 || better_score(s, pilots[win].score))
            win = static_cast<int>(i);
    }

    for (std::size_t i = 0; i < pilots.size(); ++i) {
        const Pilot& p = pilots[i];
        BranchRecord rec;
        rec.checkpoint = "initial-search";
        rec.round = p.round;
        rec.id = p.id;
        rec.config = p.config;
        rec.curve = BranchCurve{p.id, p.curve, start_fp, p.config};
        rec.score = p.score;
        rec.margin = win >= 0 ? p.score.score - pilots[win].score.score : kNan;
        rec.promoted = static_cast<int>(i) == win;
        rec.decision = rec.promoted ? "selected" : "evaluated";
        out.pilots.push_back(std::move(rec));
    }

    if (win < 0) {
        out.warnings.push_back(
            "initial-search: all pilots severe-invalid; mainline continues "
            "sparse");
        return out;
    }

    const Pilot& winner = pilots[win];
    out.theta0 = winner.config;
    out.c0 = winner.at_anchor;
    out.prefix_curve = window(winner.curve, 0, anchor);
    if (!mode_allowed(winner.config.mode, last_card.constraints))
        out.warnings.push_back(
            std::string("initial-search: winner direction '") +
            mode_name(winner.config.mode) +
            "' outside the diagnosed directions (non-binding)");
    return out;
}

// ---------------------------------------------------------------------------
// Phase 2: checkpoint validation.
// ---------------------------------------------------------------------------

CheckpointValidationResult checkpoint_validation(
    const RunInputs& in, const std::string& label, const Checkpoint& cj,
    const std::optional<ShapingConfig>& theta, const Curve& mainline_so_far,
    const std::optional<Curve>& reference_curve,
    std::vector<BranchNote>& history, LlmEngine& engine) {
    const WorkflowBudget& b = in.budget;
    const LearnerConfig lc = lineage(in, "pilot");
    const std::string fp = fingerprint_hex(cj);

    CheckpointValidationResult out;
    const auto traces = evaluate_traced(cj, in.env, lc, in.eval_episodes);
    out.evidence = summarize_episodes(traces, in.env);
    out.keys = derive_keys(out.evidence, in.thresholds);

    CheckpointContext ctx;
    ctx.stage = {task_name(in.env), cj.env_steps, label};
    ctx.recent_returns = mainline_so_far;
    ctx.evidence = out.evidence;
    ctx.keys = out.keys;
    ctx.current_config = theta;
    ctx.history = history;
    if (reference_curve)
        ctx.reference_returns =
            window(*reference_curve, cj.env_steps - 5 * b.eval_every,
                   cj.env_steps + b.branch_budget);

    struct Branch {
        std::string id;
        int round = 0;
        std::optional<ShapingConfig> config;
        TrainReport report;
        BranchScore score;
        std::int64_t steps = 0;
        bool failed = false;
        std::string error;
    };
    std::vector<Branch> branches;
    branches.push_back({"NC", 0, theta});
    std::size_t noted = 0;  // branches already forwarded as context notes

    const auto run_wave = [&](std::size_t from) {
        parallel_for(static_cast<int>(branches.size() - from), in.parallel,
                     [&](int i) {
                         Branch& br = branches[from + i];
                         try {
                             br.report = train_segment(
                                 cj, in.env, lc, br.config, b.branch_budget,
                                 b.eval_every, in.eval_episodes);
                             br.steps = br.report.steps_consumed;
                         } catch (const std::exception& e) {
                             br.failed = true;
                             br.error = e.what();
                         }
                     });
        for (std::size_t k = from; k < branches.size(); ++k) {
            Branch& br = branches[k];
            br.score = score_branch(
                BranchCurve{br.id, br.report.curve, fp, br.config});
            if (br.failed) {
                br.score.severe_invalid = true;
                br.score.risk_flags.push_back("training_error");
                out.warnings.push_back(label + ": branch " + br.id +
                                       " training failed: " + br.error);
            }
        }
    };

    for (int round = 1; round <= b.validation_rounds_per_checkpoint; ++round) {
        const CallSite site{label, round};
        const CheckpointContext round_ctx = trim_context(ctx);
        const GuidanceCard card =
            diagnose_or_fallback(engine, round_ctx, site, out.warnings);
        const auto proposals = propose_or_fallback(
            engine, card, round_ctx, b.updates_per_round, site, out.warnings);

        const std::size_t from = branches.size();
        for (std::size_t i = 0; i < proposals.size(); ++i) {
            Branch br;
            char id[32];
            std::snprintf(id, sizeof(id), "R%d-u%d", round,
                          static_cast<int>(i) + 1);
            br.id = id;
            br.round = round;
            br.config = proposals[i];
            branches.push_back(std::move(br));
        }
        // The control trains alongside the first round's updates.
        run_wave(round == 1 ? 0 : from);

        // Branch outcomes feed the next round's context.
        if (round < b.validation_rounds_per_checkpoint) {
            const double control = branches[0].score.score;
            for (; noted < branches.size(); ++noted) {
                const Branch& br = branches[noted];
                BranchNote note;
                note.checkpoint = label;
                note.id = br.id;
                note.config = br.config;
                note.score = br.score.score;
                note.margin = br.id == "NC" ? 0.0 : br.score.score - control;
                note.decision = br.id == "NC" ? "local control" : "evaluated";
                ctx.history.push_back(std::move(note));
            }
        }
    }

    std::vector<BranchScore> update_scores;
    for (std::size_t i = 1; i < branches.size(); ++i)
        update_scores.push_back(branches[i].score);
    out.decision = decide(branches[0].score, update_scores);
    const bool nc_wins = out.decision.winner_id == "NC";

    // Best update under the gate's chain regardless of the tie threshold,
    // for labeling near-tie and risk rejections.
    std::string best_update;
    {
        const GateDecision probe =
            decide(branches[0].score, update_scores, -1e300);
        if (probe.winner_id != "NC") best_update = probe.winner_id;
    }

    for (std::size_t i = 0; i < branches.size(); ++i) {
        const Branch& br = branches[i];
        BranchRecord rec;
        rec.checkpoint = label;
        rec.round = br.round;
        rec.id = br.id;
        rec.config = br.config;
        rec.curve = BranchCurve{br.id, br.report.curve, fp, br.config};
        rec.score = br.score;
        rec.margin = i == 0 ? 0.0 : out.decision.updates[i - 1].margin;
        if (br.id == "NC") {
            rec.decision = nc_wins ? "retained" : "local control";
            rec.promoted = nc_wins;
        } else if (!nc_wins && br.id == out.decision.winner_id) {
            rec.decision = "selected";
            rec.promoted = true;
        } else if (out.decision.reason == GateReason::near_tie_rejected &&
                   br.id == best_update) {
            rec.decision = "near tie; rejected";
        } else if (out.decision.reason == GateReason::risk_rejected &&
                   br.score.severe_invalid && rec.margin > kGateTauTie) {
            rec.decision = "risk; rejected";
        } else {
            rec.decision = "evaluated";
        }
        out.records.push_back(std::move(rec));
    }

    for (const auto& rec : out.records) history.push_back(note_of(rec));

    const Branch* winner = &branches[0];
    if (!nc_wins)
        for (const auto& br : branches)
            if (br.id == out.decision.winner_id) winner = &br;
    out.next_checkpoint = winner->report.final_checkpoint;
    out.next_config = winner->config;
    out.winner_segment.name = label + "-winner-" + out.decision.winner_id;
    out.winner_segment.shaping = winner->config;
    out.winner_segment.start_steps = cj.env_steps;
    out.winner_segment.end_steps = out.next_checkpoint.env_steps;
    out.winner_segment.curve = winner->report.curve;
    out.winner_segment.start_fingerprint = fp;
    out.winner_segment.end_fingerprint = fingerprint_hex(out.next_checkpoint);
    for (const auto& br : branches) out.steps_consumed += br.steps;
    return out;
}

// ---------------------------------------------------------------------------
// Full runs.
// ---------------------------------------------------------------------------

std::filesystem::path run_dir_for(const std::filesystem::path& out_root,
                                  const std::string& method,
                                  const std::string& env_name,
                                  std::uint64_t seed) {
    return out_root / method / env_name / std::to_string(seed);
}

namespace {

struct RunArtifacts {
    std::map<std::string, Checkpoint> checkpoints;
    std::map<std::string, json> evidence;  // phase -> {summary, keys}
};

SegmentRecord make_segment(std::string name,
                           const std::optional<ShapingConfig>& shaping,
                           std::int64_t start_steps, const Checkpoint& end,
                           Curve curve, std::string start_fp) {
    SegmentRecord s;
    s.name = std::move(name);
    s.shaping = shaping;
    s.start_steps = start_steps;
    s.end_steps = end.env_steps;
    s.curve = std::move(curve);
    s.start_fingerprint = std::move(start_fp);
    s.end_fingerprint = fingerprint_hex(end);
    return s;
}

json evidence_doc(const EvidenceSummary& summary, const EvidenceKeys& keys) {
    return {{"summary", evidence_summary_to_json(summary)},
            {"keys", evidence_keys_to_json(keys)}};
}

void write_run_directory(const std::filesystem::path& dir, const RunLedger& L,
                         const RunArtifacts& art) {
    std::filesystem::create_directories(dir / "segments");
    std::filesystem::create_directories(dir / "checkpoints");
    write_json_file(dir / "ledger.json", run_ledger_to_json(L));

    json decisions = json::array();
    for (const auto& [label, decision] : L.decisions)
        decisions.push_back(
            {{"checkpoint", label}, {"decision", gate_decision_to_json(decision)}});
    write_json_file(dir / "decisions.json", decisions);

    for (std::size_t i = 0; i < L.mainline.size(); ++i) {
        char prefix[16];
        std::snprintf(prefix, sizeof(prefix), "%02d_", static_cast<int>(i));
        write_curve_csv(dir / "segments" / (prefix + L.mainline[i].name + ".csv"),
                        L.mainline[i].curve);
    }
    if (L.reference)
        write_curve_csv(dir / "segments" / "reference.csv", L.reference->curve);

    for (const auto& rec : L.branches) {
        const auto bdir = dir / "branches" / rec.checkpoint / rec.id;
        std::filesystem::create_directories(bdir);
        write_curve_csv(bdir / "curve.csv", rec.curve.points);
        write_json_file(bdir / "config.json",
                        rec.config ? shaping_config_to_json(*rec.config)
                                   : json(nullptr));
        write_json_file(bdir / "score.json",
                        {{"score", branch_score_to_json(rec.score)},
                         {"margin", num_json(rec.margin)},
                         {"decision", rec.decision},
                         {"promoted", rec.promoted}});
    }

    for (const auto& [name, ckpt] : art.checkpoints)
        save_checkpoint(ckpt, dir / "checkpoints" / (name + ".ckpt"));
    for (const auto& [phase, doc] : art.evidence)
        write_json_file(dir / "evidence" / (phase + ".json"), doc);
}

}  // namespace

RunLedger run_method(const RunConfig& raw_cfg,
                     const std::filesystem::path& out_root,
                     const RunOptions& opts) {
    const RunConfig cfg = validate(raw_cfg);
    const Method method = *method_from_name(cfg.method);

    const auto dir = run_dir_for(out_root, cfg.method, cfg.env_name, cfg.seed);
    if (std::filesystem::exists(dir) && !std::filesystem::is_empty(dir)) {
        if (!opts.overwrite)
            throw ConfigError("run directory already populated: " +
                              dir.string());
        std::filesystem::remove_all(dir);
    }
    std::filesystem::create_directories(dir);
    write_json_file(dir / "config.json", run_config_to_json(cfg));

    RunInputs in;
    in.env = parse_task_name(cfg.env_name);
    in.env.seed = cfg.seed;
    in.env = validate(in.env);
    in.learner = cfg.learner;
    if (in.learner.epsilon_anneal_steps == 0)
        in.learner.epsilon_anneal_steps = 3 * cfg.budget.final_horizon / 10;
    in.budget = cfg.budget;
    in.thresholds = cfg.thresholds;
    in.eval_episodes = cfg.eval_episodes;
    in.parallel = opts.parallel;
    in.seed = cfg.seed;

    EngineConfig engine_cfg = cfg.engine;
    engine_cfg.merged_roles = (method == Method::single_llm_rg ||
                               method == Method::single_llm_adapt);
    TranscriptStore store(dir / "llm_transcripts");

    RunLedger L;
    L.method = cfg.method;
    L.env = cfg.env_name;
    L.seed = cfg.seed;
    L.budget = in.budget;
    RunArtifacts art;
    std::int64_t consumed = 0;
    bool fell_back = false;

    if (method == Method::sparse || method == Method::fixed_rs) {
        const LearnerConfig lc = lineage(in, "mainline");
        const Checkpoint start = fresh_checkpoint(in.env, lc);
        const std::optional<ShapingConfig> shaping =
            method == Method::fixed_rs
                ? std::optional<ShapingConfig>(
                      fixed_shaping_config(cfg.fixed_direction))
                : std::nullopt;
        const auto rep =
            train_segment(start, in.env, lc, shaping, in.budget.final_horizon,
                          in.budget.eval_every, in.eval_episodes);
        consumed += rep.steps_consumed;
        L.mainline.push_back(make_segment("full", shaping, 0,
                                          rep.final_checkpoint, rep.curve,
                                          fingerprint_hex(start)));
        art.checkpoints["final"] = rep.final_checkpoint;
    } else {
        const DiagnosticResult diag = run_sparse_diagnostic(in);
        consumed += diag.report.steps_consumed;
        art.checkpoints["diagnostic"] = diag.report.final_checkpoint;
        art.evidence["diagnostic"] = evidence_doc(diag.evidence, diag.keys);

        LlmEngine engine(engine_cfg, &store);
        InitialSearchResult isr = initial_search(in, diag, engine);
        consumed += isr.steps_consumed;
        L.branches = isr.pilots;
        for (auto& w : isr.warnings) L.warnings.push_back(std::move(w));
        fell_back = !isr.theta0.has_value();

        if (method == Method::single_llm_rg) {
            const LearnerConfig lc = lineage(in, "final");
            const Checkpoint start = fresh_checkpoint(in.env, lc);
            const auto rep = train_segment(start, in.env, lc, isr.theta0,
                                           in.budget.final_horizon,
                                           in.budget.eval_every,
                                           in.eval_episodes);
            consumed += rep.steps_consumed;
            L.mainline.push_back(make_segment("full", isr.theta0, 0,
                                              rep.final_checkpoint, rep.curve,
                                              fingerprint_hex(start)));
            if (!fell_back) art.checkpoints["c0"] = isr.c0;
            art.checkpoints["final"] = rep.final_checkpoint;
        } else if (fell_back) {
            // also / single-llm-adapt without a usable pilot: one sparse
            // segment over the horizon.
            const LearnerConfig lc = lineage(in, "mainline");
            const Checkpoint start = fresh_checkpoint(in.env, lc);
            const auto rep = train_segment(start, in.env, lc, std::nullopt,
                                           in.budget.final_horizon,
                                           in.budget.eval_every,
                                           in.eval_episodes);
            consumed += rep.steps_consumed;
            L.mainline.push_back(make_segment("full", std::nullopt, 0,
                                              rep.final_checkpoint, rep.curve,
                                              fingerprint_hex(start)));
            art.checkpoints["final"] = rep.final_checkpoint;
        } else {
            const LearnerConfig lc = lineage(in, "pilot");
            std::optional<ShapingConfig> theta = isr.theta0;
            Checkpoint cur = isr.c0;
            art.checkpoints["c0"] = isr.c0;

            // Fixed-reference continuation: theta0 held fixed to the horizon,
            // used only as critic context.
            const auto ref = train_segment(
                cur, in.env, lc, theta,
                in.budget.final_horizon - cur.env_steps, in.budget.eval_every,
                in.eval_episodes);
            consumed += ref.steps_consumed;
            L.reference = make_segment("reference", theta, cur.env_steps,
                                       ref.final_checkpoint, ref.curve,
                                       fingerprint_hex(cur));

            L.mainline.push_back(SegmentRecord{
                "initial-prefix", theta, 0, cur.env_steps, isr.prefix_curve,
                isr.pilots.front().curve.origin_checkpoint,
                fingerprint_hex(cur)});

            Curve mainline_curve = isr.prefix_curve;
            std::vector<BranchNote> history;
            for (const auto& rec : isr.pilots) history.push_back(note_of(rec));

            for (std::size_t j = 0; j < in.budget.checkpoint_positions.size();
                 ++j) {
                const std::string label = "C" + std::to_string(j + 1);
                const std::int64_t cpos = in.budget.checkpoint_positions[j];
                const auto seg =
                    train_segment(cur, in.env, lc, theta,
                                  cpos - cur.env_steps, in.budget.eval_every,
                                  in.eval_episodes);
                consumed += seg.steps_consumed;
                L.mainline.push_back(make_segment(
                    "to-" + label, theta, cur.env_steps, seg.final_checkpoint,
                    seg.curve, fingerprint_hex(cur)));
                append_curve(mainline_curve, seg.curve);
                cur = seg.final_checkpoint;
                art.checkpoints[label] = cur;

                auto cvr = checkpoint_validation(in, label, cur, theta,
                                                 mainline_curve,
                                                 L.reference->curve, history,
                                                 engine);
                consumed += cvr.steps_consumed;
                art.evidence[label] = evidence_doc(cvr.evidence, cvr.keys);
                L.decisions.emplace_back(label, cvr.decision);
                for (auto& rec : cvr.records)
                    L.branches.push_back(std::move(rec));
                for (auto& w : cvr.warnings) L.warnings.push_back(std::move(w));
                L.mainline.push_back(cvr.winner_segment);
                append_curve(mainline_curve, cvr.winner_segment.curve);
                cur = cvr.next_checkpoint;
                theta = cvr.next_config;
            }

            const auto fin = train_segment(
                cur, in.env, lc, theta,
                in.budget.final_horizon - cur.env_steps, in.budget.eval_every,
                in.eval_episodes);
            consumed += fin.steps_consumed;
            L.mainline.push_back(make_segment("final", theta, cur.env_steps,
                                              fin.final_checkpoint, fin.curve,
                                              fingerprint_hex(cur)));
            art.checkpoints["final"] = fin.final_checkpoint;
        }
    }

    for (const auto& seg : L.mainline) append_curve(L.selected_curve, seg.curve);
    L.total_env_steps = consumed;

    bool training_failure = false;
    for (const auto& rec : L.branches)
        for (const auto& flag : rec.score.risk_flags)
            if (flag == "training_error") training_failure = true;
    if (training_failure) {
        L.warnings.push_back(
            "budget conservation unverifiable: a branch training failed");
    } else {
        const std::int64_t expected =
            expected_total_env_steps(method, in.budget, fell_back);
        if (consumed != expected)
            throw ContractViolation(
                "budget conservation violated: consumed " +
                std::to_string(consumed) + " env steps, expected " +
                std::to_string(expected));
    }

    write_run_directory(dir, L, art);
    return L;
}

ReplayResult replay_run(const std::filesystem::path& source_run_dir,
                        const std::filesystem::path& replay_root,
                        const RunOptions& opts) {
    const auto cfg_text = read_text_file(source_run_dir / "config.json");
    RunConfig cfg = run_config_from_json(json::parse(cfg_text));

    ProviderSpec scripted;
    scripted.kind = "scripted";
    scripted.transcript_dir = (source_run_dir / "llm_transcripts").string();
    cfg.engine.critic = scripted;
    cfg.engine.generator = scripted;

    run_method(cfg, replay_root, opts);

    ReplayResult out;
    out.replay_dir =
        run_dir_for(replay_root, cfg.method, cfg.env_name, cfg.seed);
    const std::string a = read_text_file(source_run_dir / "ledger.json");
    const std::string b = read_text_file(out.replay_dir / "ledger.json");
    out.ledger_identical = a == b;
    if (out.ledger_identical) {
        out.detail = "ledger identical";
    } else {
        std::size_t i = 0;
        while (i < a.size() && i < b.size() && a[i] == b[i]) ++i;
        out.detail = "ledgers differ at byte " + std::to_string(i);
    }
    return out;
}

}  // namespace shapelab
