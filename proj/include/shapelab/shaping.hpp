#pragma once

#include <array>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shapelab/env.hpp"

namespace shapelab {

// ---------------------------------------------------------------------------
// Structured potential-based reward shaping over the foraging task.
//
// A shaping configuration is (beta, mode, weights) where weights mix six
// interpretable potential components. The shaping signal added to the
// training reward is beta * (gamma * Phi(s') - Phi(s)); evaluation always
// uses the sparse reward alone.
// ---------------------------------------------------------------------------

inline constexpr int kNumComponents = 6;
inline constexpr double kBetaMax = 1.0;
inline constexpr int kStabilityWindow = 8;
inline constexpr double kActiveComponentThreshold = 0.05;

// Component order is fixed; weights arrays index by this.
enum class Component : int { col = 0, app, cov, ready, alloc, stab };

const char* component_name(Component c);
std::optional<Component> component_from_name(const std::string& name);

enum class Mode : int {
    balanced_progress = 0,
    early_discovery,
    coverage_recovery,
    collection_readiness,
    allocation_balance,
    late_stability,
};

const char* mode_name(Mode m);
std::optional<Mode> mode_from_name(const std::string& name);
inline constexpr int kNumModes = 6;

using Weights = std::array<double, kNumComponents>;

inline double& weight(Weights& w, Component c) { return w[static_cast<int>(c)]; }
inline double weight(const Weights& w, Component c) { return w[static_cast<int>(c)]; }

// Free-text provenance carried with a candidate; never interpreted.
struct CandidateMetadata {
    std::string candidate_type;
    std::vector<std::string> evidence_keys;
    std::string expected_effect;
    std::string risk_notes;

    bool operator==(const CandidateMetadata&) const = default;
};

struct ShapingConfig {
    std::string impl_id;
    double beta = 0.25;
    Mode mode = Mode::balanced_progress;
    Weights weights{};
    CandidateMetadata metadata;

    bool operator==(const ShapingConfig&) const = default;
};

// Components with normalized weight above the reporting threshold.
std::vector<Component> active_components(const Weights& w);

// Normalizes weights to sum 1 and enforces the mode's mass constraint:
//   early-discovery, coverage-recovery : w_cov + w_app >= 0.6
//   collection-readiness               : w_ready + w_col >= 0.5
//   allocation-balance                 : w_alloc >= 0.3
//   late-stability                     : w_stab + w_col >= 0.5
//   balanced-progress                  : max weight <= 0.5
// Throws ConfigError with a distinct reason (negative weight, all-zero
// weights, beta out of range, mode mass constraint) usable as generator
// feedback. Idempotent on valid output.
ShapingConfig normalize_and_validate(ShapingConfig raw);

// Serialization uses the candidate JSON schema: impl_id, mode, beta,
// active_components, weights{col,...,stab}, metadata{...}. Parsing rejects
// unknown modes and unknown weight components with distinct reasons.
nlohmann::json shaping_config_to_json(const ShapingConfig& config);
ShapingConfig shaping_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Augmented state: environment state plus an episode-local cache that only
// shaping may read. The cache is a pure fold over the episode's event
// stream, so it can always be rebuilt from a recorded trajectory.
// ---------------------------------------------------------------------------

struct AgentCache {
    std::vector<bool> failed_loads;   // last kStabilityWindow steps
    std::vector<Action> last_moves;   // last kStabilityWindow actions issued
    std::optional<int> target;        // nearest uncollected food, if any

    bool operator==(const AgentCache&) const = default;
};

struct Cache {
    std::set<std::pair<int, int>> visited_cells;  // team-level
    std::set<int> discovered_foods;               // seen by any agent, ever
    std::vector<AgentCache> agents;

    bool operator==(const Cache&) const = default;
};

struct AugmentedState {
    EnvState env;
    Cache cache;
};

// Cache at episode start: spawn cells visited, in-sight foods discovered,
// empty windows, targets set from the initial state.
Cache init_cache(const EnvConfig& config, const EnvState& initial);

// Folds one transition into the cache. `next` is the post-step state and
// `events` the step's event record.
Cache update_cache(const EnvConfig& config, Cache cache, const EnvState& next,
                   const JointAction& action, const StepEvents& events);

nlohmann::json cache_to_json(const Cache& cache);
Cache cache_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Potential evaluation.
// ---------------------------------------------------------------------------

struct PotentialBreakdown {
    std::array<double, kNumComponents> phi{};
    double total = 0.0;
};

// Component definitions (food-dependent components plateau at 1 once all
// food is collected; coverage and stability always report their actual
// values):
//   phi_col   collected level / total level
//   phi_app   1 - mean_i dist(agent_i, nearest uncollected food)/(W+H)
//   phi_cov   0.5*visited/(W*H) + 0.5*discovered/n_foods
//   phi_ready mean_f min(1, adjacent agent level sum / level(f))
//   phi_alloc distinct nearest-targets / min(n_agents, uncollected)
//   phi_stab  1 - (recent failed loads + move reversals)/(n_agents*window)
std::array<double, kNumComponents> compute_phi(const AugmentedState& s,
                                               const EnvConfig& env_config);

PotentialBreakdown compute_potential(const AugmentedState& s,
                                     const ShapingConfig& config,
                                     const EnvConfig& env_config);

// beta * (gamma * Phi(s_next) - Phi(s)).
double shaping_reward(const AugmentedState& s, const AugmentedState& s_next,
                      const ShapingConfig& config, const EnvConfig& env_config,
                      double gamma);

// Training signal: sparse + shaped. Only the learner consumes this;
// evaluation code paths must never call it.
inline double training_reward(double sparse, double shaped) {
    return sparse + shaped;
}

}  // namespace shapelab
