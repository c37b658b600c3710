#include "shapelab/shaping.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "shapelab/errors.hpp"

namespace shapelab {

namespace {

constexpr const char* kComponentNames[kNumComponents] = {"col", "app", "cov",
                                                         "ready", "alloc", "stab"};
constexpr const char* kModeNames[kNumModes] = {
    "balanced-progress",    "early-discovery",    "coverage-recovery",
    "collection-readiness", "allocation-balance", "late-stability"};

constexpr double kMassSlack = 1e-9;

bool opposite_moves(Action a, Action b) {
    return (a == Action::up && b == Action::down) ||
           (a == Action::down && b == Action::up) ||
           (a == Action::left && b == Action::right) ||
           (a == Action::right && b == Action::left);
}

void push_window(std::vector<bool>& win, bool v) {
    win.push_back(v);
    if (static_cast<int>(win.size()) > kStabilityWindow) win.erase(win.begin());
}

void push_window(std::vector<Action>& win, Action v) {
    win.push_back(v);
    if (static_cast<int>(win.size()) > kStabilityWindow) win.erase(win.begin());
}

std::optional<int> nearest_food(const EnvState& s, int agent) {
    std::optional<int> best;
    int best_dist = 0;
    for (int f = 0; f < static_cast<int>(s.food_x.size()); ++f) {
        if (s.food_collected[f]) continue;
        const int d = std::abs(s.agent_x[agent] - s.food_x[f]) +
                      std::abs(s.agent_y[agent] - s.food_y[f]);
        if (!best || d < best_dist) {
            best = f;
            best_dist = d;
        }
    }
    return best;
}

void refresh_targets(Cache& cache, const EnvState& s) {
    for (int i = 0; i < static_cast<int>(cache.agents.size()); ++i)
        cache.agents[i].target = nearest_food(s, i);
}

void discover_in_sight(Cache& cache, const EnvConfig& config, const EnvState& s) {
    for (int i = 0; i < static_cast<int>(s.agent_x.size()); ++i) {
        for (int f = 0; f < static_cast<int>(s.food_x.size()); ++f) {
            if (s.food_collected[f]) continue;
            if (config.sight_radius) {
                const int cheb = std::max(std::abs(s.food_x[f] - s.agent_x[i]),
                                          std::abs(s.food_y[f] - s.agent_y[i]));
                if (cheb > *config.sight_radius) continue;
            }
            cache.discovered_foods.insert(f);
        }
    }
}

}  // namespace

const char* component_name(Component c) {
    return kComponentNames[static_cast<int>(c)];
}

std::optional<Component> component_from_name(const std::string& name) {
    for (int i = 0; i < kNumComponents; ++i)
        if (name == kComponentNames[i]) return static_cast<Component>(i);
    return std::nullopt;
}

const char* mode_name(Mode m) { return kModeNames[static_cast<int>(m)]; }

std::optional<Mode> mode_from_name(const std::string& name) {
    for (int i = 0; i < kNumModes; ++i)
        if (name == kModeNames[i]) return static_cast<Mode>(i);
    return std::nullopt;
}

std::vector<Component> active_components(const Weights& w) {
    std::vector<Component> active;
    for (int i = 0; i < kNumComponents; ++i)
        if (w[i] > kActiveComponentThreshold) active.push_back(static_cast<Component>(i));
    return active;
}

ShapingConfig normalize_and_validate(ShapingConfig raw) {
    for (int i = 0; i < kNumComponents; ++i) {
        if (!(std::isfinite(raw.weights[i])))
            throw ConfigError("rejected: non-finite weight for " +
                              std::string(kComponentNames[i]));
        if (raw.weights[i] < 0.0)
            throw ConfigError("rejected: negative weight for " +
                              std::string(kComponentNames[i]));
    }
    const double sum =
        std::accumulate(raw.weights.begin(), raw.weights.end(), 0.0);
    if (sum == 0.0) throw ConfigError("rejected: all-zero weights");
    if (!std::isfinite(sum))
        throw ConfigError("rejected: weight sum overflows");
    // Skip renormalization when already normalized so the op is idempotent.
    if (std::abs(sum - 1.0) > 1e-12)
        for (double& w : raw.weights) w /= sum;

    if (!std::isfinite(raw.beta) || raw.beta <= 0.0 || raw.beta > kBetaMax)
        throw ConfigError("rejected: beta out of range (0, " +
                          std::to_string(kBetaMax) + "]");

    const Weights& w = raw.weights;
    auto mass_check = [&](double mass, double floor, const std::string& desc) {
        if (mass + kMassSlack < floor)
            throw ConfigError("rejected: mode mass constraint for " +
                              std::string(mode_name(raw.mode)) + " (" + desc + ")");
    };
    switch (raw.mode) {
        case Mode::early_discovery:
        case Mode::coverage_recovery:
            mass_check(weight(w, Component::cov) + weight(w, Component::app), 0.6,
                       "needs cov+app >= 0.6");
            break;
        case Mode::collection_readiness:
            mass_check(weight(w, Component::ready) + weight(w, Component::col), 0.5,
                       "needs ready+col >= 0.5");
            break;
        case Mode::allocation_balance:
            mass_check(weight(w, Component::alloc), 0.3, "needs alloc >= 0.3");
            break;
        case Mode::late_stability:
            mass_check(weight(w, Component::stab) + weight(w, Component::col), 0.5,
                       "needs stab+col >= 0.5");
            break;
        case Mode::balanced_progress: {
            const double wmax = *std::max_element(w.begin(), w.end());
            if (wmax > 0.5 + kMassSlack)
                throw ConfigError(
                    "rejected: mode mass constraint for balanced-progress "
                    "(needs max weight <= 0.5)");
            break;
        }
    }
    return raw;
}

nlohmann::json shaping_config_to_json(const ShapingConfig& config) {
    nlohmann::json j;
    j["impl_id"] = config.impl_id;
    j["mode"] = mode_name(config.mode);
    j["beta"] = config.beta;
    auto actives = nlohmann::json::array();
    for (Component c : active_components(config.weights))
        actives.push_back(component_name(c));
    j["active_components"] = actives;
    nlohmann::json w;
    for (int i = 0; i < kNumComponents; ++i)
        w[kComponentNames[i]] = config.weights[i];
    j["weights"] = w;
    j["metadata"] = {{"candidate_type", config.metadata.candidate_type},
                     {"evidence_keys", config.metadata.evidence_keys},
                     {"expected_effect", config.metadata.expected_effect},
                     {"risk_notes", config.metadata.risk_notes}};
    return j;
}

ShapingConfig shaping_config_from_json(const nlohmann::json& j) {
    ShapingConfig config;
    config.impl_id = j.value("impl_id", std::string());
    if (!j.contains("mode") || !j.at("mode").is_string())
        throw ConfigError("rejected: missing mode");
    const std::string mode_str = j.at("mode").get<std::string>();
    const auto mode = mode_from_name(mode_str);
    if (!mode) throw ConfigError("rejected: unknown mode '" + mode_str + "'");
    config.mode = *mode;
    if (!j.contains("beta") || !j.at("beta").is_number())
        throw ConfigError("rejected: missing beta");
    config.beta = j.at("beta").get<double>();
    if (!j.contains("weights") || !j.at("weights").is_object())
        throw ConfigError("rejected: missing weights");
    config.weights.fill(0.0);
    for (const auto& [key, value] : j.at("weights").items()) {
        const auto comp = component_from_name(key);
        if (!comp) throw ConfigError("rejected: unknown component '" + key + "'");
        if (!value.is_number())
            throw ConfigError("rejected: non-numeric weight for " + key);
        weight(config.weights, *comp) = value.get<double>();
    }
    if (j.contains("metadata") && j.at("metadata").is_object()) {
        const auto& m = j.at("metadata");
        config.metadata.candidate_type = m.value("candidate_type", std::string());
        if (m.contains("evidence_keys"))
            config.metadata.evidence_keys =
                m.at("evidence_keys").get<std::vector<std::string>>();
        config.metadata.expected_effect = m.value("expected_effect", std::string());
        config.metadata.risk_notes = m.value("risk_notes", std::string());
    }
    // active_components in the input is derived content; always recomputed.
    return config;
}

Cache init_cache(const EnvConfig& config, const EnvState& initial) {
    Cache cache;
    cache.agents.resize(initial.agent_x.size());
    for (int i = 0; i < static_cast<int>(initial.agent_x.size()); ++i)
        cache.visited_cells.insert({initial.agent_x[i], initial.agent_y[i]});
    discover_in_sight(cache, config, initial);
    refresh_targets(cache, initial);
    return cache;
}

Cache update_cache(const EnvConfig& config, Cache cache, const EnvState& next,
                   const JointAction& action, const StepEvents& events) {
    for (const auto& cell : events.cells_entered)
        cache.visited_cells.insert({cell.x, cell.y});

    std::vector<bool> failed_this_step(cache.agents.size(), false);
    for (const auto& fl : events.failed_loads) failed_this_step[fl.agent] = true;

    for (int i = 0; i < static_cast<int>(cache.agents.size()); ++i) {
        push_window(cache.agents[i].failed_loads, failed_this_step[i]);
        push_window(cache.agents[i].last_moves, action[i]);
    }

    discover_in_sight(cache, config, next);
    refresh_targets(cache, next);
    return cache;
}

nlohmann::json cache_to_json(const Cache& cache) {
    nlohmann::json j;
    auto cells = nlohmann::json::array();
    for (const auto& [x, y] : cache.visited_cells)
        cells.push_back(nlohmann::json::array({x, y}));
    j["visited_cells"] = cells;
    j["discovered_foods"] =
        std::vector<int>(cache.discovered_foods.begin(), cache.discovered_foods.end());
    auto agents = nlohmann::json::array();
    for (const auto& a : cache.agents) {
        nlohmann::json aj;
        aj["failed_loads"] = a.failed_loads;
        std::vector<int> moves;
        for (Action m : a.last_moves) moves.push_back(static_cast<int>(m));
        aj["last_moves"] = moves;
        if (a.target)
            aj["target"] = *a.target;
        else
            aj["target"] = nullptr;
        agents.push_back(aj);
    }
    j["agents"] = agents;
    return j;
}

Cache cache_from_json(const nlohmann::json& j) {
    Cache cache;
    for (const auto& cell : j.at("visited_cells"))
        cache.visited_cells.insert({cell.at(0).get<int>(), cell.at(1).get<int>()});
    for (int f : j.at("discovered_foods").get<std::vector<int>>())
        cache.discovered_foods.insert(f);
    for (const auto& aj : j.at("agents")) {
        AgentCache a;
        a.failed_loads = aj.at("failed_loads").get<std::vector<bool>>();
        for (int m : aj.at("last_moves").get<std::vector<int>>())
            a.last_moves.push_back(static_cast<Action>(m));
        if (!aj.at("target").is_null()) a.target = aj.at("target").get<int>();
        cache.agents.push_back(std::move(a));
    }
    return cache;
}

std::array<double, kNumComponents> compute_phi(const AugmentedState& s,
                                               const EnvConfig& env_config) {
    const EnvState& env = s.env;
    const Cache& cache = s.cache;
    const int n_agents = static_cast<int>(env.agent_x.size());
    const int n_foods = static_cast<int>(env.food_x.size());
    const bool all_collected = env.all_collected();

    int total_level = 0, collected_level = 0, uncollected = 0;
    for (int f = 0; f < n_foods; ++f) {
        total_level += env.food_levels[f];
        if (env.food_collected[f])
            collected_level += env.food_levels[f];
        else
            ++uncollected;
    }

    std::array<double, kNumComponents> phi{};

    // col: fraction of food level banked.
    phi[static_cast<int>(Component::col)] =
        static_cast<double>(collected_level) / total_level;

    // app: closeness to the nearest uncollected food, averaged over agents.
    if (all_collected) {
        phi[static_cast<int>(Component::app)] = 1.0;
    } else {
        double mean_dist = 0.0;
        for (int i = 0; i < n_agents; ++i) {
            int best = env_config.width + env_config.height;
            for (int f = 0; f < n_foods; ++f) {
                if (env.food_collected[f]) continue;
                best = std::min(best, std::abs(env.agent_x[i] - env.food_x[f]) +
                                          std::abs(env.agent_y[i] - env.food_y[f]));
            }
            mean_dist += static_cast<double>(best) /
                         (env_config.width + env_config.height);
        }
        phi[static_cast<int>(Component::app)] = 1.0 - mean_dist / n_agents;
    }

    // cov: team exploration plus food discovery (never plateaus).
    phi[static_cast<int>(Component::cov)] =
        0.5 * (static_cast<double>(cache.visited_cells.size()) /
               (static_cast<double>(env_config.width) * env_config.height)) +
        0.5 * (static_cast<double>(cache.discovered_foods.size()) / n_foods);

    // ready: how close each remaining food is to a sufficient loading party.
    if (all_collected) {
        phi[static_cast<int>(Component::ready)] = 1.0;
    } else {
        double sum = 0.0;
        for (int f = 0; f < n_foods; ++f) {
            if (env.food_collected[f]) continue;
            int adjacent_level = 0;
            for (int i = 0; i < n_agents; ++i) {
                const int d = std::abs(env.agent_x[i] - env.food_x[f]) +
                              std::abs(env.agent_y[i] - env.food_y[f]);
                if (d == 1) adjacent_level += env.agent_levels[i];
            }
            sum += std::min(1.0, static_cast<double>(adjacent_level) /
                                     env.food_levels[f]);
        }
        phi[static_cast<int>(Component::ready)] = sum / uncollected;
    }

    // alloc: how well agents spread over distinct targets.
    if (all_collected) {
        phi[static_cast<int>(Component::alloc)] = 1.0;
    } else {
        std::set<int> distinct;
        for (const auto& a : cache.agents)
            if (a.target) distinct.insert(*a.target);
        phi[static_cast<int>(Component::alloc)] =
            static_cast<double>(distinct.size()) /
            std::min(n_agents, uncollected);
    }

    // stab: recent failed loads and move reversals (never plateaus).
    {
        int incidents = 0;
        for (const auto& a : cache.agents) {
            for (bool failed : a.failed_loads)
                if (failed) ++incidents;
            for (std::size_t k = 1; k < a.last_moves.size(); ++k)
                if (opposite_moves(a.last_moves[k - 1], a.last_moves[k])) ++incidents;
        }
        phi[static_cast<int>(Component::stab)] = std::clamp(
            1.0 - static_cast<double>(incidents) / (n_agents * kStabilityWindow),
            0.0, 1.0);
    }

    return phi;
}

PotentialBreakdown compute_potential(const AugmentedState& s,
                                     const ShapingConfig& config,
                                     const EnvConfig& env_config) {
    PotentialBreakdown out;
    out.phi = compute_phi(s, env_config);
    out.total = 0.0;
    for (int i = 0; i < kNumComponents; ++i) out.total += config.weights[i] * out.phi[i];
    return out;
}

double shaping_reward(const AugmentedState& s, const AugmentedState& s_next,
                      const ShapingConfig& config, const EnvConfig& env_config,
                      double gamma) {
    if (config.beta == 0.0) return 0.0;
    const double phi_now = compute_potential(s, config, env_config).total;
    const double phi_next = compute_potential(s_next, config, env_config).total;
    return config.beta * (gamma * phi_next - phi_now);
}

}  // namespace shapelab
