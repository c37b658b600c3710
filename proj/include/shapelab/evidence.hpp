#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shapelab/env.hpp"

namespace shapelab {

// ---------------------------------------------------------------------------
// Behavior evidence: compact diagnostics aggregated from recorded evaluation
// episodes. This is the only behavioral context ever shown to the critic —
// raw trajectories and learner internals stay local.
// ---------------------------------------------------------------------------

struct EvidenceSummary {
    double coverage_frac = 0.0;        // team cells visited / grid cells
    double discovery_frac = 0.0;       // foods ever seen / n_foods
    double near_target_frac = 0.0;     // steps with an agent within dist 2 of food
    double failed_load_rate = 0.0;     // failed-load events per agent-step
    double target_concentration = 0.0; // max share of agents on one target
    double allocation_balance = 0.0;   // phi_alloc averaged over steps
    double stability_index = 0.0;      // phi_stab averaged over steps
    double success_rate = 0.0;         // episodes fully collected
    double mean_return = 0.0;
    int episode_count = 0;
    int n_agents = 0;
};

enum class EvidenceKey : int {
    low_coverage = 0,
    no_discovery,
    approach_stall,
    lone_load_failures,
    target_collision,
    allocation_imbalance,
    late_instability,
    near_success,
};

const char* evidence_key_name(EvidenceKey k);

struct Finding {
    EvidenceKey key;
    double severity = 0.0;  // normalized distance past the threshold, in [0,1]

    bool operator==(const Finding&) const = default;
};

using EvidenceKeys = std::vector<Finding>;

// Trigger thresholds for derive_keys; the defaults are the workbench's
// standing rule table, overridable from run configuration.
struct KeyThresholds {
    double low_coverage = 0.3;          // coverage_frac below
    double approach_stall = 0.2;        // near_target_frac below (if discovery > 0)
    double lone_load_rate = 0.05;       // failed_load_rate above ...
    double lone_load_success = 0.5;     // ... while success_rate below
    double target_concentration = 0.8;  // above (needs >= 2 agents)
    double allocation_balance = 0.5;    // below
    double stability = 0.6;             // stability_index below ...
    double stability_return = 0.3;      // ... while mean_return above
    double near_success = 0.5;          // success_rate in (0, this)
};

KeyThresholds key_thresholds_from_json(const nlohmann::json& j);
nlohmann::json key_thresholds_to_json(const KeyThresholds& t);

// Deterministic aggregation over recorded episodes. Per-step quantities are
// evaluated on the state each action was chosen in (initial state plus all
// non-terminal successors); caches are folded from the recorded events.
EvidenceSummary summarize_episodes(const std::vector<EpisodeTrace>& traces,
                                   const EnvConfig& env_config);

// Applies the rule table; emits findings sorted by severity descending
// (ties in enum order).
EvidenceKeys derive_keys(const EvidenceSummary& summary,
                         const KeyThresholds& thresholds = {});

nlohmann::json evidence_summary_to_json(const EvidenceSummary& s);
EvidenceSummary evidence_summary_from_json(const nlohmann::json& j);
nlohmann::json evidence_keys_to_json(const EvidenceKeys& keys);
EvidenceKeys evidence_keys_from_json(const nlohmann::json& j);

}  // namespace shapelab
