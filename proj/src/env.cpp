#include "shapelab/env.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <numeric>

#include "shapelab/errors.hpp"
#include "shapelab/rng.hpp"

namespace shapelab {

namespace {

constexpr int kDx[] = {0, 0, 0, -1, 1, 0};  // noop, up, down, left, right, load
constexpr int kDy[] = {0, -1, 1, 0, 0, 0};

bool is_move(Action a) {
    return a == Action::up || a == Action::down || a == Action::left ||
           a == Action::right;
}

}  // namespace

const char* action_name(Action a) {
    switch (a) {
        case Action::noop: return "noop";
        case Action::up: return "up";
        case Action::down: return "down";
        case Action::left: return "left";
        case Action::right: return "right";
        case Action::load: return "load";
    }
    return "?";
}

EnvConfig validate(EnvConfig config) {
    if (config.width < 3 || config.height < 3)
        throw ConfigError("env: width and height must be >= 3");
    if (config.n_agents < 1 ||
        config.n_agents > config.width * config.height / 4)
        throw ConfigError("env: n_agents must be in [1, width*height/4]");
    if (config.n_foods < 1) throw ConfigError("env: n_foods must be >= 1");
    if (config.sight_radius && *config.sight_radius < 1)
        throw ConfigError("env: sight_radius must be \"full\" or >= 1");
    if (config.max_episode_steps == 0)
        config.max_episode_steps = 4 * (config.width + config.height);
    if (config.max_episode_steps < 1)
        throw ConfigError("env: max_episode_steps must be >= 1");
    return config;
}

bool EnvState::all_collected() const {
    return std::all_of(food_collected.begin(), food_collected.end(),
                       [](bool c) { return c; });
}

EnvState reset(const EnvConfig& config, std::uint64_t episode_seed) {
    const EnvConfig cfg = validate(config);
    const int n_entities = cfg.n_agents + cfg.n_foods;
    if (n_entities > cfg.width * cfg.height)
        throw ConfigError("env: grid too small for " +
                          std::to_string(n_entities) + " entities");

    auto rng = Xoshiro256::seeded(derive_seed(cfg.seed, "placement", episode_seed));
    std::vector<bool> occupied(static_cast<std::size_t>(cfg.width) * cfg.height,
                               false);
    auto place = [&](int& x, int& y) {
        for (;;) {
            const int cx = static_cast<int>(rng.uniform_below(cfg.width));
            const int cy = static_cast<int>(rng.uniform_below(cfg.height));
            const std::size_t idx =
                static_cast<std::size_t>(cy) * cfg.width + cx;
            if (occupied[idx]) continue;
            occupied[idx] = true;
            x = cx;
            y = cy;
            return;
        }
    };

    EnvState state;
    state.agent_x.resize(cfg.n_agents);
    state.agent_y.resize(cfg.n_agents);
    state.agent_levels.assign(cfg.n_agents, 1);
    for (int i = 0; i < cfg.n_agents; ++i) place(state.agent_x[i], state.agent_y[i]);

    const int total_agent_level =
        std::accumulate(state.agent_levels.begin(), state.agent_levels.end(), 0);
    state.food_x.resize(cfg.n_foods);
    state.food_y.resize(cfg.n_foods);
    state.food_levels.resize(cfg.n_foods);
    state.food_collected.assign(cfg.n_foods, false);
    for (int f = 0; f < cfg.n_foods; ++f) {
        place(state.food_x[f], state.food_y[f]);
        state.food_levels[f] =
            1 + static_cast<int>(rng.uniform_below(total_agent_level));
    }
    state.step_count = 0;
    return state;
}

bool episode_done(const EnvConfig& config, const EnvState& state) {
    return state.all_collected() || state.step_count >= config.max_episode_steps;
}

StepResult step(const EnvConfig& config, const EnvState& state,
                const JointAction& action) {
    if (static_cast<int>(action.size()) != config.n_agents)
        throw ContractViolation("env: joint action has " +
                                std::to_string(action.size()) + " entries, want " +
                                std::to_string(config.n_agents));
    if (episode_done(config, state))
        throw ContractViolation("env: step called on finished episode");

    StepResult result;
    result.state = state;
    EnvState& next = result.state;
    StepEvents& ev = result.events;
    ev.move_success.assign(config.n_agents, false);
    ev.move_failed.assign(config.n_agents, false);

    // Start-of-step occupancy: agents and uncollected foods.
    auto occupied_at_start = [&](int x, int y) {
        for (int i = 0; i < config.n_agents; ++i)
            if (state.agent_x[i] == x && state.agent_y[i] == y) return true;
        for (int f = 0; f < config.n_foods; ++f)
            if (!state.food_collected[f] && state.food_x[f] == x &&
                state.food_y[f] == y)
                return true;
        return false;
    };

    // First pass: provisional targets (fail on off-grid / occupied cells).
    std::vector<int> target_x(config.n_agents), target_y(config.n_agents);
    std::vector<bool> wants_move(config.n_agents, false);
    for (int i = 0; i < config.n_agents; ++i) {
        target_x[i] = state.agent_x[i];
        target_y[i] = state.agent_y[i];
        if (!is_move(action[i])) continue;
        const int nx = state.agent_x[i] + kDx[static_cast<int>(action[i])];
        const int ny = state.agent_y[i] + kDy[static_cast<int>(action[i])];
        if (nx < 0 || nx >= config.width || ny < 0 || ny >= config.height ||
            occupied_at_start(nx, ny)) {
            ev.move_failed[i] = true;
            continue;
        }
        wants_move[i] = true;
        target_x[i] = nx;
        target_y[i] = ny;
    }

    // Second pass: movers targeting the same cell all fail.
    for (int i = 0; i < config.n_agents; ++i) {
        if (!wants_move[i]) continue;
        bool conflict = false;
        for (int j = 0; j < config.n_agents; ++j) {
            if (j == i || !wants_move[j]) continue;
            if (target_x[j] == target_x[i] && target_y[j] == target_y[i]) {
                conflict = true;
                break;
            }
        }
        if (conflict) {
            ev.move_failed[i] = true;
            continue;
        }
        ev.move_success[i] = true;
        next.agent_x[i] = target_x[i];
        next.agent_y[i] = target_y[i];
        ev.cells_entered.push_back({i, target_x[i], target_y[i]});
    }

    // Loading, after movement. A loader contributes to every adjacent food.
    const int total_food_level =
        std::accumulate(state.food_levels.begin(), state.food_levels.end(), 0);
    for (int f = 0; f < config.n_foods; ++f) {
        if (next.food_collected[f]) continue;
        int load_sum = 0;
        std::vector<int> loaders;
        for (int i = 0; i < config.n_agents; ++i) {
            if (action[i] != Action::load) continue;
            const int dist = std::abs(next.agent_x[i] - next.food_x[f]) +
                             std::abs(next.agent_y[i] - next.food_y[f]);
            if (dist == 1) {
                load_sum += next.agent_levels[i];
                loaders.push_back(i);
            }
        }
        if (loaders.empty()) continue;
        if (load_sum >= next.food_levels[f]) {
            next.food_collected[f] = true;
            ev.collected_foods.push_back(f);
            result.sparse_reward +=
                static_cast<double>(next.food_levels[f]) / total_food_level;
        } else {
            for (int i : loaders) ev.failed_loads.push_back({i, f});
        }
    }

    next.step_count = state.step_count + 1;
    result.done = episode_done(config, next);
    return result;
}

Observation observe_agent(const EnvConfig& config, const EnvState& state,
                          int agent) {
    Observation obs;
    obs.self_index = agent;
    obs.self_x = state.agent_x[agent];
    obs.self_y = state.agent_y[agent];
    obs.self_level = state.agent_levels[agent];
    obs.step_count = state.step_count;
    obs.max_episode_steps = config.max_episode_steps;

    auto in_sight = [&](int x, int y) {
        if (!config.sight_radius) return true;
        const int cheb = std::max(std::abs(x - obs.self_x), std::abs(y - obs.self_y));
        return cheb <= *config.sight_radius;
    };

    for (int j = 0; j < config.n_agents; ++j) {
        if (j == agent || !in_sight(state.agent_x[j], state.agent_y[j])) continue;
        obs.agents.push_back({j, state.agent_x[j] - obs.self_x,
                              state.agent_y[j] - obs.self_y,
                              state.agent_levels[j]});
    }
    for (int f = 0; f < config.n_foods; ++f) {
        if (state.food_collected[f] || !in_sight(state.food_x[f], state.food_y[f]))
            continue;
        obs.foods.push_back({f, state.food_x[f] - obs.self_x,
                             state.food_y[f] - obs.self_y, state.food_levels[f]});
    }
    return obs;
}

std::vector<Observation> observe(const EnvConfig& config, const EnvState& state) {
    std::vector<Observation> all;
    all.reserve(config.n_agents);
    for (int i = 0; i < config.n_agents; ++i)
        all.push_back(observe_agent(config, state, i));
    return all;
}

EpisodeTrace run_episode(Policy& policy, const EnvConfig& config,
                         std::uint64_t episode_seed) {
    const EnvConfig cfg = validate(config);
    EpisodeTrace trace;
    trace.initial_state = reset(cfg, episode_seed);
    EnvState state = trace.initial_state;
    while (!episode_done(cfg, state)) {
        const JointAction action = policy.act(cfg, observe(cfg, state));
        StepResult res = step(cfg, state, action);
        trace.sparse_return += res.sparse_reward;
        trace.steps.push_back({action, res.sparse_reward, std::move(res.events),
                               res.state});
        state = std::move(res.state);
    }
    return trace;
}

double evaluate_policy(Policy& policy, const EnvConfig& config, int n_episodes,
                       std::uint64_t eval_seed) {
    if (n_episodes < 1) throw ContractViolation("evaluate_policy: n_episodes < 1");
    double total = 0.0;
    for (int e = 0; e < n_episodes; ++e) {
        total += run_episode(policy, config,
                             derive_seed(eval_seed, "eval-episode",
                                         static_cast<std::uint64_t>(e)))
                     .sparse_return;
    }
    return total / n_episodes;
}

EnvConfig parse_task_name(const std::string& name) {
    // "[<sight>s-]<W>x<H>-<N>p-<F>f"
    EnvConfig config;
    config.sight_radius.reset();
    std::size_t pos = 0;

    auto read_int = [&](const char* what) {
        std::size_t start = pos;
        while (pos < name.size() && std::isdigit(static_cast<unsigned char>(name[pos])))
            ++pos;
        if (pos == start)
            throw ConfigError("task name '" + name + "': expected " + what +
                              " at offset " + std::to_string(start));
        return std::stoi(name.substr(start, pos - start));
    };
    auto expect = [&](char c) {
        if (pos >= name.size() || name[pos] != c)
            throw ConfigError("task name '" + name + "': expected '" +
                              std::string(1, c) + "' at offset " +
                              std::to_string(pos));
        ++pos;
    };

    // Optional sight prefix: digits followed by "s-".
    std::size_t probe = 0;
    while (probe < name.size() && std::isdigit(static_cast<unsigned char>(name[probe])))
        ++probe;
    if (probe > 0 && probe + 1 < name.size() && name[probe] == 's' &&
        name[probe + 1] == '-') {
        config.sight_radius = read_int("sight radius");
        expect('s');
        expect('-');
    }

    config.width = read_int("width");
    expect('x');
    config.height = read_int("height");
    expect('-');
    config.n_agents = read_int("agent count");
    expect('p');
    expect('-');
    config.n_foods = read_int("food count");
    expect('f');
    if (pos != name.size())
        throw ConfigError("task name '" + name + "': trailing characters");
    return validate(config);
}

std::string task_name(const EnvConfig& config) {
    std::string out;
    if (config.sight_radius) out += std::to_string(*config.sight_radius) + "s-";
    out += std::to_string(config.width) + "x" + std::to_string(config.height) +
           "-" + std::to_string(config.n_agents) + "p-" +
           std::to_string(config.n_foods) + "f";
    return out;
}

nlohmann::json env_config_to_json(const EnvConfig& config) {
    nlohmann::json j;
    j["width"] = config.width;
    j["height"] = config.height;
    j["n_agents"] = config.n_agents;
    j["n_foods"] = config.n_foods;
    if (config.sight_radius)
        j["sight_radius"] = *config.sight_radius;
    else
        j["sight_radius"] = "full";
    j["max_episode_steps"] = config.max_episode_steps;
    j["seed"] = config.seed;
    j["task"] = task_name(config);
    return j;
}

EnvConfig env_config_from_json(const nlohmann::json& j) {
    EnvConfig config;
    config.width = j.at("width").get<int>();
    config.height = j.at("height").get<int>();
    config.n_agents = j.at("n_agents").get<int>();
    config.n_foods = j.at("n_foods").get<int>();
    const auto& sight = j.at("sight_radius");
    if (sight.is_string()) {
        if (sight.get<std::string>() != "full")
            throw ConfigError("env json: sight_radius must be int or \"full\"");
        config.sight_radius.reset();
    } else {
        config.sight_radius = sight.get<int>();
    }
    config.max_episode_steps = j.at("max_episode_steps").get<int>();
    config.seed = j.at("seed").get<std::uint64_t>();
    return validate(config);
}

nlohmann::json env_state_to_json(const EnvState& state) {
    nlohmann::json j;
    j["agent_x"] = state.agent_x;
    j["agent_y"] = state.agent_y;
    j["agent_levels"] = state.agent_levels;
    j["food_x"] = state.food_x;
    j["food_y"] = state.food_y;
    j["food_levels"] = state.food_levels;
    j["food_collected"] = state.food_collected;
    j["step_count"] = state.step_count;
    return j;
}

EnvState env_state_from_json(const nlohmann::json& j) {
    EnvState state;
    state.agent_x = j.at("agent_x").get<std::vector<int>>();
    state.agent_y = j.at("agent_y").get<std::vector<int>>();
    state.agent_levels = j.at("agent_levels").get<std::vector<int>>();
    state.food_x = j.at("food_x").get<std::vector<int>>();
    state.food_y = j.at("food_y").get<std::vector<int>>();
    state.food_levels = j.at("food_levels").get<std::vector<int>>();
    state.food_collected = j.at("food_collected").get<std::vector<bool>>();
    state.step_count = j.at("step_count").get<int>();
    return state;
}

}  // namespace shapelab
