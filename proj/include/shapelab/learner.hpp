#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "shapelab/csv.hpp"
#include "shapelab/env.hpp"
#include "shapelab/rng.hpp"
#include "shapelab/shaping.hpp"

namespace shapelab {

// ---------------------------------------------------------------------------
// Reference learner: independent tabular Q-learning per agent over hashed
// egocentric observations. Trains on sparse + shaping reward; evaluation is
// always greedy and sparse-only (the evaluator has no shaping parameter).
// Everything is deterministic given (seed, configs, start checkpoint), and
// checkpoints resume bit-exactly — including mid-episode suspensions — so
// branch trainers can fork freely.
// ---------------------------------------------------------------------------

struct LearnerConfig {
    double learning_rate = 0.1;
    double gamma = 0.95;
    double epsilon_start = 1.0;
    double epsilon_final = 0.05;
    // Global env-step count over which epsilon anneals linearly; 0 lets
    // train_segment default it to 30% of the segment's end step.
    std::int64_t epsilon_anneal_steps = 0;
    std::uint64_t seed = 0;
    // "featurized": compact relational features of the nearest food/agent
    // (many observations share a table entry, tolerated as coarse function
    // approximation). "exact": hash of the full time-independent view.
    std::string abstraction = "featurized";
};

LearnerConfig validate(LearnerConfig config);

// Starts from defaults, overrides the fields present, rejects unknown keys.
nlohmann::json learner_config_to_json(const LearnerConfig& config);
LearnerConfig learner_config_from_json(const nlohmann::json& j);

// One agent's table: observation hash -> action values.
using QTable = std::map<std::uint64_t, std::array<double, 6>>;

struct SuspendedEpisode {
    EnvState env;
    Cache cache;

    bool operator==(const SuspendedEpisode&) const = default;
};

struct Checkpoint {
    std::string task;         // env the tables were trained on
    std::string abstraction;  // hashing scheme the keys came from
    std::int64_t env_steps = 0;
    std::int64_t episode_index = 0;  // training episodes started so far
    Xoshiro256::State rng{};
    std::vector<QTable> q_tables;
    std::optional<SuspendedEpisode> suspended;

    bool operator==(const Checkpoint&) const = default;
};

// Content hash over the canonical serialization (everything above); changes
// iff any table entry, counter, PRNG word, or suspension byte changes.
std::uint64_t checkpoint_fingerprint(const Checkpoint& ckpt);

Checkpoint fresh_checkpoint(const EnvConfig& env_config,
                            const LearnerConfig& learner_config);

// Versioned JSON container with embedded fingerprint; load verifies it and
// throws IntegrityError on any mismatch or unreadable content.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainReport {
    Curve curve;  // eval points at global env-step multiples of eval_every
    Checkpoint final_checkpoint;
    std::int64_t steps_consumed = 0;
};

// Runs `budget` env steps of training from `start`, evaluating the greedy
// policy (exploration off, shaping never applied) whenever the global step
// counter crosses a multiple of eval_every. budget = 0 is a no-op that
// returns the start checkpoint unchanged. Shaping, when present, must be a
// validated config; it only ever touches the training reward.
TrainReport train_segment(const Checkpoint& start, const EnvConfig& env_config,
                          const LearnerConfig& learner_config,
                          const std::optional<ShapingConfig>& shaping,
                          std::int64_t budget, std::int64_t eval_every,
                          int eval_episodes);

// Greedy policy over a checkpoint's tables (ties break to the lowest
// action index). Used for evaluation and for traced evidence episodes.
class GreedyQPolicy : public Policy {
public:
    GreedyQPolicy(const Checkpoint& ckpt, const LearnerConfig& config)
        : ckpt_(ckpt), config_(config) {}
    JointAction act(const EnvConfig& env_config,
                    const std::vector<Observation>& obs) override;

private:
    const Checkpoint& ckpt_;
    const LearnerConfig& config_;
};

// Mean sparse return of the checkpoint's greedy policy on the fixed
// evaluation seed set derived from the learner seed.
double evaluate_checkpoint(const Checkpoint& ckpt, const EnvConfig& env_config,
                           const LearnerConfig& learner_config,
                           int eval_episodes);

// Recorded greedy episodes on a disjoint seed set, for evidence extraction.
std::vector<EpisodeTrace> evaluate_traced(const Checkpoint& ckpt,
                                          const EnvConfig& env_config,
                                          const LearnerConfig& learner_config,
                                          int n_episodes);

// Observation hashing (exposed for tests).
std::uint64_t hash_observation(const Observation& obs,
                               const std::string& abstraction);

}  // namespace shapelab
