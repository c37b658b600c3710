#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shapelab/csv.hpp"
#include "shapelab/env.hpp"
#include "shapelab/evidence.hpp"
#include "shapelab/gate.hpp"
#include "shapelab/learner.hpp"
#include "shapelab/llm.hpp"
#include "shapelab/shaping.hpp"

namespace shapelab {

// ---------------------------------------------------------------------------
// Orchestrator: the two-phase workflow. A sparse diagnostic run feeds a
// two-round initial search over fresh pilots; the winner fixes (theta0, c0);
// the adaptive mainline then continues from c0, pausing at each checkpoint
// to train a no-change control plus two rounds of proposed update branches,
// promoting the gate's winner. Everything a run produces lands in one run
// directory and one ledger, and with scripted providers the whole ledger is
// byte-reproducible.
// ---------------------------------------------------------------------------

// Budget geometry of one run, in env steps. The desk-scale default keeps the
// 2.05M-step profile's ratios at roughly 1/10 scale.
struct WorkflowBudget {
    std::int64_t final_horizon = 200000;
    std::int64_t diagnostic_budget = 200000;
    int initial_rounds = 2;
    int candidates_per_round = 3;
    std::int64_t pilot_budget = 82927;
    std::int64_t initial_endpoint_step = 78049;
    std::vector<std::int64_t> checkpoint_positions = {97561, 146341};
    std::int64_t branch_budget = 29268;
    int validation_rounds_per_checkpoint = 2;
    int updates_per_round = 3;
    std::int64_t eval_every = 4000;  // greedy sparse eval grid

    bool operator==(const WorkflowBudget&) const = default;
};

// Checks positivity, initial_endpoint_step <= pilot_budget, strictly
// increasing checkpoints that fit their branch windows inside the horizon,
// and that the endpoint anchor lands before the first checkpoint. Throws
// ConfigError.
WorkflowBudget validate(WorkflowBudget budget);

// Scales the canonical ratios (850/2050 pilot, 800/2050 endpoint, 1000/2050
// and 1500/2050 checkpoints, 300/2050 branch) to the given horizon with
// round-half-up division; diagnostic = horizon, eval_every = horizon/50.
WorkflowBudget desk_scale_budget(std::int64_t final_horizon = 200000);

// Named profiles accepted by configs: "short-2.05M" (ratios at 2.05M steps)
// and "medium-10M". Throws ConfigError on unknown names.
WorkflowBudget budget_profile(const std::string& name);

// Where the initial-search winner is snapshotted: the eval-grid step nearest
// initial_endpoint_step (half-way rounds up). This is c0's position.
std::int64_t anchor_step(const WorkflowBudget& budget);

nlohmann::json workflow_budget_to_json(const WorkflowBudget& budget);
// Desk-scale defaults overridden by the fields present; unknown keys rejected.
WorkflowBudget workflow_budget_from_json(const nlohmann::json& j);

enum class Method : int {
    sparse = 0,
    fixed_rs,
    single_llm_rg,
    also,
    single_llm_adapt,
};

const char* method_name(Method m);
std::optional<Method> method_from_name(const std::string& name);

// Full recipe for one run. fixed_direction picks the pre-registered static
// config used by fixed-rs (one of balanced-progress, early-discovery,
// collection-readiness).
struct RunConfig {
    std::string method = "also";
    std::string env_name = "8x8-2p-3f";
    std::uint64_t seed = 1;
    WorkflowBudget budget;
    LearnerConfig learner;
    EngineConfig engine;
    KeyThresholds thresholds;
    std::string fixed_direction = "balanced-progress";
    int eval_episodes = 20;
};

RunConfig validate(RunConfig cfg);
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// The static config trained by the fixed-rs baseline: the direction's
// canonical weight template at a conservative beta.
ShapingConfig fixed_shaping_config(const std::string& direction);

// One contiguous piece of training. Fingerprints are hex checkpoint hashes;
// curves carry global env-step coordinates.
struct SegmentRecord {
    std::string name;
    std::optional<ShapingConfig> shaping;
    std::int64_t start_steps = 0;
    std::int64_t end_steps = 0;
    Curve curve;
    std::string start_fingerprint;
    std::string end_fingerprint;
};

nlohmann::json segment_record_to_json(const SegmentRecord& s);
SegmentRecord segment_record_from_json(const nlohmann::json& j);

// One trained branch: a pilot (checkpoint "initial-search") or a validation
// branch at C1/C2. round 0 marks the no-change control.
struct BranchRecord {
    std::string checkpoint;
    int round = 0;
    std::string id;
    std::optional<ShapingConfig> config;
    BranchCurve curve;
    BranchScore score;
    double margin = 0.0;
    std::string decision;
    bool promoted = false;
};

nlohmann::json branch_record_to_json(const BranchRecord& b);
BranchRecord branch_record_from_json(const nlohmann::json& j);

// Everything one run decided and measured. selected_curve is the
// concatenation of mainline segment curves only — unselected branches never
// contribute points. The reference segment (fixed-theta0 continuation) is
// context for the critic, not mainline.
struct RunLedger {
    std::string method;
    std::string env;
    std::uint64_t seed = 0;
    WorkflowBudget budget;
    std::vector<SegmentRecord> mainline;
    std::optional<SegmentRecord> reference;
    std::vector<BranchRecord> branches;
    std::vector<std::pair<std::string, GateDecision>> decisions;  // label, gate
    Curve selected_curve;
    std::int64_t total_env_steps = 0;
    std::vector<std::string> warnings;
};

nlohmann::json run_ledger_to_json(const RunLedger& ledger);
RunLedger run_ledger_from_json(const nlohmann::json& j);

// Closed-form env-step total implied by the budget. sparse_fallback covers
// runs whose initial search produced no valid pilot (the mainline degrades
// to one sparse segment). Budget conservation against this value is asserted
// at the end of every run.
std::int64_t expected_total_env_steps(Method m, const WorkflowBudget& budget,
                                      bool sparse_fallback = false);

struct RunOptions {
    int parallel = 1;       // concurrent branch/pilot trainings
    bool overwrite = false; // replace an existing run directory
};

// ---------------------------------------------------------------------------
// Workflow phases. The phase functions are exposed for tests; run_method is
// the real entry point.
// ---------------------------------------------------------------------------

// Immutable ingredients shared by the phases of one run.
struct RunInputs {
    EnvConfig env;            // validated, seed set from the run seed
    LearnerConfig learner;    // validated, anneal horizon pinned
    WorkflowBudget budget;    // validated
    KeyThresholds thresholds;
    int eval_episodes = 20;
    int parallel = 1;
    std::uint64_t seed = 0;   // run seed; child streams derive from it
};

struct DiagnosticResult {
    TrainReport report;       // sparse training over diagnostic_budget
    EvidenceSummary evidence; // aggregated from traced greedy episodes
    EvidenceKeys keys;
};

// Trains shaping-free from a fresh checkpoint seeded from the "diagnostic"
// stream and extracts evidence from traced evaluation episodes at the end.
DiagnosticResult run_sparse_diagnostic(const RunInputs& in);

struct InitialSearchResult {
    std::optional<ShapingConfig> theta0;  // nullopt = sparse fallback
    Checkpoint c0;                        // winner snapshot at the anchor
    Curve prefix_curve;                   // winner curve over [0, anchor]
    std::vector<BranchRecord> pilots;     // initial_rounds x candidates
    std::vector<std::string> warnings;
    std::int64_t steps_consumed = 0;
};

// Two rounds of diagnose/propose; every candidate trains fresh from one
// shared "pilot"-stream checkpoint (so pilots differ only in shaping), in
// two segments: start -> anchor (snapshotted) -> pilot_budget. The winner is
// the highest branch score over all pilots with the gate's tie-breaking.
// All pilots severe-invalid -> theta0 = nullopt plus a logged warning.
InitialSearchResult initial_search(const RunInputs& in,
                                   const DiagnosticResult& diag,
                                   LlmEngine& engine);

struct CheckpointValidationResult {
    GateDecision decision;
    std::vector<BranchRecord> records;      // NC first, then updates in order
    SegmentRecord winner_segment;           // mainline piece [c_j, c_j + B]
    Checkpoint next_checkpoint;             // winner branch endpoint
    std::optional<ShapingConfig> next_config;
    EvidenceSummary evidence;               // extracted at c_j
    EvidenceKeys keys;
    std::vector<std::string> warnings;
    std::int64_t steps_consumed = 0;
};

// Validates one checkpoint: builds the engine context (evidence from traced
// episodes at c_j, the mainline curve so far, the reference window, prior
// branch notes), trains NC + round-1 updates, feeds round-1 outcomes back,
// trains round-2 updates, and decides over all updates vs NC. `history` is
// appended with this checkpoint's branch notes for later phases. A branch
// whose training throws is recorded severe-invalid; the others proceed.
CheckpointValidationResult checkpoint_validation(
    const RunInputs& in, const std::string& label, const Checkpoint& cj,
    const std::optional<ShapingConfig>& theta, const Curve& mainline_so_far,
    const std::optional<Curve>& reference_curve,
    std::vector<BranchNote>& history, LlmEngine& engine);

// Runs one method end to end and writes the run directory:
//   <out_root>/<method>/<env>/<seed>/{config.json, ledger.json,
//     segments/*.csv, branches/<phase>/<id>/{curve.csv, config.json,
//     score.json}, checkpoints/*.ckpt, evidence/*.json, llm_transcripts/**,
//     decisions.json}
// Budget conservation is asserted before the ledger is written. Throws
// ConfigError if the directory already holds a run and !opts.overwrite.
RunLedger run_method(const RunConfig& cfg, const std::filesystem::path& out_root,
                     const RunOptions& opts = {});

std::filesystem::path run_dir_for(const std::filesystem::path& out_root,
                                  const std::string& method,
                                  const std::string& env_name,
                                  std::uint64_t seed);

struct ReplayResult {
    bool ledger_identical = false;
    std::filesystem::path replay_dir;
    std::string detail;  // first difference, or "ledger identical"
};

// Re-drives a completed run from its stored transcripts: same config and
// seed, providers replaced by scripted replay over the source's
// llm_transcripts tree, output under replay_root. Compares the two
// ledger.json files byte for byte.
ReplayResult replay_run(const std::filesystem::path& source_run_dir,
                        const std::filesystem::path& replay_root,
                        const RunOptions& opts = {});

}  // namespace shapelab
