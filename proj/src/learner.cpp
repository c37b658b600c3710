#include "shapelab/learner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "shapelab/errors.hpp"
#include "shapelab/hash.hpp"

namespace shapelab {

namespace {

constexpr const char* kCheckpointVersion = "1";

int sgn(int v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); }

int dist_bucket(int d) {
    if (d <= 1) return 0;
    if (d == 2) return 1;
    if (d <= 4) return 2;
    if (d <= 8) return 3;
    return 4;
}

int agent_dist_bucket(int d) {
    if (d <= 2) return 0;
    if (d <= 5) return 1;
    return 2;
}

std::uint64_t hash_featurized(const Observation& obs) {
    Fnv1a h;
    if (obs.foods.empty()) {
        h.add_i64(-1);  // nothing visible to forage
    } else {
        const auto& food = *std::min_element(
            obs.foods.begin(), obs.foods.end(),
            [](const VisibleEntity& a, const VisibleEntity& b) {
                const int da = std::abs(a.dx) + std::abs(a.dy);
                const int db = std::abs(b.dx) + std::abs(b.dy);
                return da != db ? da < db : a.index < b.index;
            });
        const int d = std::abs(food.dx) + std::abs(food.dy);
        h.add_i64(sgn(food.dx));
        h.add_i64(sgn(food.dy));
        h.add_i64(dist_bucket(d));
        h.add_i64(food.level <= obs.self_level ? 1 : 0);  // solo-collectible
        bool partner_at_food = false;
        for (const auto& other : obs.agents) {
            const int pd = std::abs(other.dx - food.dx) + std::abs(other.dy - food.dy);
            if (pd <= 1) partner_at_food = true;
        }
        h.add_i64(partner_at_food ? 1 : 0);
    }
    if (obs.agents.empty()) {
        h.add_i64(-2);
    } else {
        const auto& other = *std::min_element(
            obs.agents.begin(), obs.agents.end(),
            [](const VisibleEntity& a, const VisibleEntity& b) {
                const int da = std::abs(a.dx) + std::abs(a.dy);
                const int db = std::abs(b.dx) + std::abs(b.dy);
                return da != db ? da < db : a.index < b.index;
            });
        h.add_i64(sgn(other.dx));
        h.add_i64(sgn(other.dy));
        h.add_i64(agent_dist_bucket(std::abs(other.dx) + std::abs(other.dy)));
    }
    return h.value();
}

// Full view minus step counters (a time-indexed table would never revisit
// a state).
std::uint64_t hash_exact(const Observation& obs) {
    Fnv1a h;
    h.add_i64(obs.self_x).add_i64(obs.self_y).add_i64(obs.self_level);
    h.add_u64(obs.foods.size());
    for (const auto& f : obs.foods)
        h.add_i64(f.index).add_i64(f.dx).add_i64(f.dy).add_i64(f.level);
    h.add_u64(obs.agents.size());
    for (const auto& a : obs.agents)
        h.add_i64(a.index).add_i64(a.dx).add_i64(a.dy).add_i64(a.level);
    return h.value();
}

int argmax_action(const std::array<double, 6>& q) {
    int best = 0;
    for (int a = 1; a < 6; ++a)
        if (q[a] > q[best]) best = a;
    return best;
}

const std::array<double, 6> kZeroQ{};

const std::array<double, 6>& q_row(const QTable& table, std::uint64_t key) {
    const auto it = table.find(key);
    return it == table.end() ? kZeroQ : it->second;
}

double epsilon_at(const LearnerConfig& cfg, std::int64_t global_step,
                  std::int64_t anneal_steps) {
    if (global_step >= anneal_steps)
        return cfg.epsilon_final;
    const double frac = static_cast<double>(global_step) / anneal_steps;
    return cfg.epsilon_start + frac * (cfg.epsilon_final - cfg.epsilon_start);
}

nlohmann::json checkpoint_content_json(const Checkpoint& c) {
    nlohmann::json j;
    j["version"] = kCheckpointVersion;
    j["task"] = c.task;
    j["abstraction"] = c.abstraction;
    j["env_steps"] = c.env_steps;
    j["episode_index"] = c.episode_index;
    j["rng"] = c.rng;
    auto tables = nlohmann::json::array();
    for (const auto& table : c.q_tables) {
        nlohmann::json t = nlohmann::json::object();
        for (const auto& [key, values] : table) t[std::to_string(key)] = values;
        tables.push_back(std::move(t));
    }
    j["q_tables"] = std::move(tables);
    if (c.suspended) {
        j["suspended"] = {{"env", env_state_to_json(c.suspended->env)},
                          {"cache", cache_to_json(c.suspended->cache)}};
    } else {
        j["suspended"] = nullptr;
    }
    return j;
}

Checkpoint checkpoint_from_content_json(const nlohmann::json& j) {
    if (j.at("version").get<std::string>() != kCheckpointVersion)
        throw IntegrityError("checkpoint: unsupported version " +
                             j.at("version").get<std::string>());
    Checkpoint c;
    c.task = j.at("task").get<std::string>();
    c.abstraction = j.at("abstraction").get<std::string>();
    c.env_steps = j.at("env_steps").get<std::int64_t>();
    c.episode_index = j.at("episode_index").get<std::int64_t>();
    c.rng = j.at("rng").get<Xoshiro256::State>();
    for (const auto& t : j.at("q_tables")) {
        QTable table;
        for (const auto& [key, values] : t.items())
            table[std::stoull(key)] = values.get<std::array<double, 6>>();
        c.q_tables.push_back(std::move(table));
    }
    if (!j.at("suspended").is_null()) {
        SuspendedEpisode s;
        s.env = env_state_from_json(j.at("suspended").at("env"));
        s.cache = cache_from_json(j.at("suspended").at("cache"));
        c.suspended = std::move(s);
    }
    return c;
}

}  // namespace

LearnerConfig validate(LearnerConfig config) {
    if (!(config.learning_rate > 0.0 && config.learning_rate <= 1.0))
        throw ConfigError("learner: learning_rate must be in (0, 1]");
    if (!(config.gamma > 0.0 && config.gamma <= 1.0))
        throw ConfigError("learner: gamma must be in (0, 1]");
    if (!(0.0 <= config.epsilon_final &&
          config.epsilon_final <= config.epsilon_start &&
          config.epsilon_start <= 1.0))
        throw ConfigError("learner: need 0 <= epsilon_final <= epsilon_start <= 1");
    if (config.epsilon_anneal_steps < 0)
        throw ConfigError("learner: epsilon_anneal_steps must be >= 0");
    if (config.abstraction != "featurized" && config.abstraction != "exact")
        throw ConfigError("learner: abstraction must be 'featurized' or 'exact'");
    return config;
}

nlohmann::json learner_config_to_json(const LearnerConfig& config) {
    return {{"learning_rate", config.learning_rate},
            {"gamma", config.gamma},
            {"epsilon_start", config.epsilon_start},
            {"epsilon_final", config.epsilon_final},
            {"epsilon_anneal_steps", config.epsilon_anneal_steps},
            {"seed", config.seed},
            {"abstraction", config.abstraction}};
}

LearnerConfig learner_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("learner config: expected an object");
    LearnerConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "learning_rate") c.learning_rate = value.get<double>();
        else if (key == "gamma") c.gamma = value.get<double>();
        else if (key == "epsilon_start") c.epsilon_start = value.get<double>();
        else if (key == "epsilon_final") c.epsilon_final = value.get<double>();
        else if (key == "epsilon_anneal_steps")
            c.epsilon_anneal_steps = value.get<std::int64_t>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "abstraction") c.abstraction = value.get<std::string>();
        else throw ConfigError("learner config: unknown field '" + key + "'");
    }
    return validate(c);
}

std::uint64_t hash_observation(const Observation& obs,
                               const std::string& abstraction) {
    return abstraction == "exact" ? hash_exact(obs) : hash_featurized(obs);
}

std::uint64_t checkpoint_fingerprint(const Checkpoint& ckpt) {
    return fnv1a64(checkpoint_content_json(ckpt).dump());
}

Checkpoint fresh_checkpoint(const EnvConfig& env_config,
                            const LearnerConfig& learner_config) {
    const EnvConfig env = validate(env_config);
    const LearnerConfig cfg = validate(learner_config);
    Checkpoint c;
    c.task = task_name(env);
    c.abstraction = cfg.abstraction;
    c.rng = Xoshiro256::seeded(derive_seed(cfg.seed, "explore")).state();
    c.q_tables.resize(env.n_agents);
    return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    nlohmann::json j = checkpoint_content_json(ckpt);
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(checkpoint_fingerprint(ckpt)));
    j["fingerprint"] = fp;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open for write: " + path.string());
    out << j.dump();
    if (!out) throw ConfigError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IntegrityError("checkpoint: cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(buf.str());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("checkpoint: unparseable " + path.string() + ": " +
                             e.what());
    }
    Checkpoint c;
    std::string embedded;
    try {
        embedded = j.at("fingerprint").get<std::string>();
        c = checkpoint_from_content_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("checkpoint: malformed " + path.string() + ": " +
                             e.what());
    }
    char fp[32];
    std::snprintf(fp, sizeof(fp), "%016llx",
                  static_cast<unsigned long long>(checkpoint_fingerprint(c)));
    if (embedded != fp)
        throw IntegrityError("checkpoint: fingerprint mismatch in " +
                             path.string());
    return c;
}

JointAction GreedyQPolicy::act(const EnvConfig& env_config,
                               const std::vector<Observation>& obs) {
    JointAction action(env_config.n_agents);
    for (int i = 0; i < env_config.n_agents; ++i) {
        const auto key = hash_observation(obs[i], config_.abstraction);
        action[i] = static_cast<Action>(argmax_action(q_row(ckpt_.q_tables[i], key)));
    }
    return action;
}

double evaluate_checkpoint(const Checkpoint& ckpt, const EnvConfig& env_config,
                           const LearnerConfig& learner_config,
                           int eval_episodes) {
    GreedyQPolicy policy(ckpt, learner_config);
    return evaluate_policy(policy, env_config, eval_episodes,
                           derive_seed(learner_config.seed, "eval"));
}

std::vector<EpisodeTrace> evaluate_traced(const Checkpoint& ckpt,
                                          const EnvConfig& env_config,
                                          const LearnerConfig& learner_config,
                                          int n_episodes) {
    GreedyQPolicy policy(ckpt, learner_config);
    const std::uint64_t base = derive_seed(learner_config.seed, "trace");
    std::vector<EpisodeTrace> traces;
    traces.reserve(n_episodes);
    for (int e = 0; e < n_episodes; ++e)
        traces.push_back(run_episode(policy, env_config,
                                     derive_seed(base, "episode",
                                                 static_cast<std::uint64_t>(e))));
    return traces;
}

TrainReport train_segment(const Checkpoint& start, const EnvConfig& env_config,
                          const LearnerConfig& learner_config,
                          const std::optional<ShapingConfig>& shaping,
                          std::int64_t budget, std::int64_t eval_every,
                          int eval_episodes) {
    const EnvConfig env_cfg = validate(env_config);
    const LearnerConfig cfg = validate(learner_config);
    if (budget == 0)  // degenerate no-op: nothing consumed, nothing changed
        return {Curve{}, start, 0};
    if (budget < 0 || eval_every < 1)
        throw ContractViolation("train_segment: need budget >= 0, eval_every >= 1");
    if (eval_episodes < 1)
        throw ContractViolation("train_segment: eval_episodes must be >= 1");
    if (start.task != task_name(env_cfg))
        throw ContractViolation("train_segment: checkpoint task '" + start.task +
                                "' does not match env '" + task_name(env_cfg) + "'");
    if (start.abstraction != cfg.abstraction)
        throw ContractViolation("train_segment: checkpoint abstraction '" +
                                start.abstraction + "' does not match learner '" +
                                cfg.abstraction + "'");
    if (static_cast<int>(start.q_tables.size()) != env_cfg.n_agents)
        throw ContractViolation("train_segment: checkpoint agent count mismatch");

    TrainReport report;
    Checkpoint ckpt = start;
    Xoshiro256 rng;
    rng.set_state(ckpt.rng);

    const std::int64_t anneal = cfg.epsilon_anneal_steps > 0
                                    ? cfg.epsilon_anneal_steps
                                    : std::max<std::int64_t>(
                                          1, (ckpt.env_steps + budget) * 3 / 10);

    // Resume the suspended episode or open a fresh one.
    AugmentedState aug;
    if (ckpt.suspended) {
        aug.env = ckpt.suspended->env;
        aug.cache = ckpt.suspended->cache;
        ckpt.suspended.reset();
    } else {
        aug.env = reset(env_cfg, derive_seed(cfg.seed, "train-episode",
                                             static_cast<std::uint64_t>(
                                                 ckpt.episode_index)));
        aug.cache = init_cache(env_cfg, aug.env);
        ++ckpt.episode_index;
    }

    std::vector<Observation> obs = observe(env_cfg, aug.env);
    std::vector<std::uint64_t> keys(env_cfg.n_agents);
    for (int i = 0; i < env_cfg.n_agents; ++i)
        keys[i] = hash_observation(obs[i], cfg.abstraction);

    for (std::int64_t done_steps = 0; done_steps < budget; ++done_steps) {
        const double eps = epsilon_at(cfg, ckpt.env_steps, anneal);
        JointAction action(env_cfg.n_agents);
        for (int i = 0; i < env_cfg.n_agents; ++i) {
            if (rng.uniform01() < eps)
                action[i] = static_cast<Action>(rng.uniform_below(6));
            else
                action[i] = static_cast<Action>(
                    argmax_action(q_row(ckpt.q_tables[i], keys[i])));
        }

        StepResult res = step(env_cfg, aug.env, action);
        AugmentedState next;
        next.cache = update_cache(env_cfg, aug.cache, res.state, action, res.events);
        next.env = std::move(res.state);

        double shaped = 0.0;
        if (shaping)
            shaped = shaping_reward(aug, next, *shaping, env_cfg, cfg.gamma);
        const double r = training_reward(res.sparse_reward, shaped);

        std::vector<Observation> next_obs = observe(env_cfg, next.env);
        for (int i = 0; i < env_cfg.n_agents; ++i) {
            double target = r;
            if (!res.done) {
                const auto next_key = hash_observation(next_obs[i], cfg.abstraction);
                const auto& row = q_row(ckpt.q_tables[i], next_key);
                target += cfg.gamma * row[argmax_action(row)];
            }
            auto& q = ckpt.q_tables[i][keys[i]][static_cast<int>(action[i])];
            q += cfg.learning_rate * (target - q);
        }

        ++ckpt.env_steps;
        if (ckpt.env_steps % eval_every == 0) {
            ckpt.rng = rng.state();  // policy snapshot is enough, but keep tidy
            report.curve.push_back(
                {ckpt.env_steps,
                 evaluate_checkpoint(ckpt, env_cfg, cfg, eval_episodes)});
        }

        if (res.done) {
            aug.env = reset(env_cfg, derive_seed(cfg.seed, "train-episode",
                                                 static_cast<std::uint64_t>(
                                                     ckpt.episode_index)));
            aug.cache = init_cache(env_cfg, aug.env);
            ++ckpt.episode_index;
        } else {
            aug = std::move(next);
        }
        obs = observe(env_cfg, aug.env);
        for (int i = 0; i < env_cfg.n_agents; ++i)
            keys[i] = hash_observation(obs[i], cfg.abstraction);
    }

    // Suspend the in-flight episode (it is never in a done state here) so
    // resumption is bit-exact.
    ckpt.suspended = SuspendedEpisode{aug.env, aug.cache};
    ckpt.rng = rng.state();
    report.final_checkpoint = std::move(ckpt);
    report.steps_consumed = budget;
    return report;
}

}  // namespace shapelab
