#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace shapelab {

// ---------------------------------------------------------------------------
// Level-based foraging gridworld.
//
// Agents move on a W×H grid and cooperatively "load" foods: a food is
// collected when the summed level of agents loading while orthogonally
// adjacent reaches the food's level. The shared sparse reward for a
// collection is level(f) / Σ level(f'), so episode return lies in [0, 1]
// and equals 1 exactly when everything is collected.
// ---------------------------------------------------------------------------

struct EnvConfig {
    int width = 8;
    int height = 8;
    int n_agents = 2;
    int n_foods = 1;
    // nullopt = full observability; otherwise Chebyshev sight radius >= 1.
    std::optional<int> sight_radius;
    int max_episode_steps = 0;  // 0 → default 4*(width+height) on validate
    std::uint64_t seed = 0;
};

// Validates invariants, fills the episode-cap default; throws ConfigError.
EnvConfig validate(EnvConfig config);

enum class Action : int { noop = 0, up, down, left, right, load };

using JointAction = std::vector<Action>;

const char* action_name(Action a);

struct EnvState {
    std::vector<int> agent_x, agent_y;
    std::vector<int> agent_levels;
    std::vector<int> food_x, food_y;
    std::vector<int> food_levels;
    std::vector<bool> food_collected;
    int step_count = 0;

    bool operator==(const EnvState&) const = default;
    bool all_collected() const;
};

// Egocentric view of one entity; dx/dy are relative to the observer.
struct VisibleEntity {
    int index;
    int dx, dy;
    int level;

    bool operator==(const VisibleEntity&) const = default;
};

struct Observation {
    int self_index = 0;
    int self_x = 0, self_y = 0;
    int self_level = 1;
    std::vector<VisibleEntity> agents;  // other agents in sight, by index
    std::vector<VisibleEntity> foods;   // uncollected foods in sight, by index
    int step_count = 0;
    int max_episode_steps = 1;

    double step_fraction() const {
        return static_cast<double>(step_count) / max_episode_steps;
    }

    bool operator==(const Observation&) const = default;
};

struct FailedLoad {
    int agent;
    int food;

    bool operator==(const FailedLoad&) const = default;
};

struct CellEntered {
    int agent;
    int x, y;

    bool operator==(const CellEntered&) const = default;
};

struct StepEvents {
    // True iff the agent issued a movement action and it succeeded.
    std::vector<bool> move_success;
    // True iff the agent issued a movement action that failed (blocked,
    // off-grid, or conflicting with another mover).
    std::vector<bool> move_failed;
    std::vector<FailedLoad> failed_loads;
    std::vector<int> collected_foods;
    std::vector<CellEntered> cells_entered;

    bool operator==(const StepEvents&) const = default;
};

struct StepResult {
    EnvState state;
    double sparse_reward = 0.0;
    bool done = false;
    StepEvents events;
};

// Seeded placement: agents then foods rejection-sampled onto distinct cells
// from a stream derived from (config.seed, episode_seed). Agent levels are 1;
// food levels are uniform on [1, Σ agent levels] so full collection is
// always achievable.
EnvState reset(const EnvConfig& config, std::uint64_t episode_seed);

// Pure transition: no hidden state. Movement resolves simultaneously against
// start-of-step occupancy — conflicting movers, swaps, and moves into any
// occupied cell all fail. Loads are evaluated after movement.
StepResult step(const EnvConfig& config, const EnvState& state,
                const JointAction& action);

bool episode_done(const EnvConfig& config, const EnvState& state);

Observation observe_agent(const EnvConfig& config, const EnvState& state,
                          int agent);
std::vector<Observation> observe(const EnvConfig& config, const EnvState& state);

// ---------------------------------------------------------------------------
// Policy interface & evaluation (always sparse-only).
// ---------------------------------------------------------------------------

class Policy {
public:
    virtual ~Policy() = default;
    // Greedy action selection; evaluation never injects exploration.
    virtual JointAction act(const EnvConfig& config,
                            const std::vector<Observation>& obs) = 0;
};

struct StepRecord {
    JointAction action;
    double sparse_reward = 0.0;
    StepEvents events;
    EnvState state_after;
};

struct EpisodeTrace {
    EnvState initial_state;
    std::vector<StepRecord> steps;
    double sparse_return = 0.0;
};

EpisodeTrace run_episode(Policy& policy, const EnvConfig& config,
                         std::uint64_t episode_seed);

// Mean undiscounted sparse return over n_episodes greedy episodes on seeds
// derived from eval_seed. Shaping is never applied here.
double evaluate_policy(Policy& policy, const EnvConfig& config, int n_episodes,
                       std::uint64_t eval_seed);

// ---------------------------------------------------------------------------
// Task names and JSON descriptors.
// ---------------------------------------------------------------------------

// Scheme: "[<sight>s-]<W>x<H>-<N>p-<F>f", e.g. "2s-8x8-2p-2f" or "8x8-2p-1f".
EnvConfig parse_task_name(const std::string& name);
std::string task_name(const EnvConfig& config);

nlohmann::json env_config_to_json(const EnvConfig& config);
EnvConfig env_config_from_json(const nlohmann::json& j);

nlohmann::json env_state_to_json(const EnvState& state);
EnvState env_state_from_json(const nlohmann::json& j);

}  // namespace shapelab
