#include "shapelab/evidence.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "shapelab/errors.hpp"
#include "shapelab/shaping.hpp"

namespace shapelab {

namespace {

constexpr const char* kKeyNames[] = {
    "low_coverage",       "no_discovery",       "approach_stall",
    "lone_load_failures", "target_collision",   "allocation_imbalance",
    "late_instability",   "near_success"};

double clip01(double v) { return std::clamp(v, 0.0, 1.0); }

bool near_uncollected_food(const EnvState& s, int manhattan) {
    for (std::size_t i = 0; i < s.agent_x.size(); ++i)
        for (std::size_t f = 0; f < s.food_x.size(); ++f) {
            if (s.food_collected[f]) continue;
            if (std::abs(s.agent_x[i] - s.food_x[f]) +
                    std::abs(s.agent_y[i] - s.food_y[f]) <=
                manhattan)
                return true;
        }
    return false;
}

double step_target_concentration(const Cache& cache, int n_agents) {
    std::map<int, int> counts;
    for (const auto& a : cache.agents)
        if (a.target) ++counts[*a.target];
    int max_count = 0;
    for (const auto& [food, count] : counts) max_count = std::max(max_count, count);
    return static_cast<double>(max_count) / n_agents;
}

}  // namespace

const char* evidence_key_name(EvidenceKey k) {
    return kKeyNames[static_cast<int>(k)];
}

EvidenceSummary summarize_episodes(const std::vector<EpisodeTrace>& traces,
                                   const EnvConfig& env_config) {
    if (traces.empty())
        throw ContractViolation("summarize_episodes: no traces given");

    EvidenceSummary out;
    out.episode_count = static_cast<int>(traces.size());
    out.n_agents = env_config.n_agents;

    for (const auto& trace : traces) {
        const int T = static_cast<int>(trace.steps.size());
        int near_steps = 0, failed_loads = 0;
        double concentration = 0.0, alloc = 0.0, stab = 0.0;
        std::size_t visited = 0, discovered = 0;

        AugmentedState s;
        s.env = trace.initial_state;
        s.cache = init_cache(env_config, trace.initial_state);
        for (int t = 0; t < T; ++t) {
            // Pre-step state: the one the joint action was chosen in.
            if (near_uncollected_food(s.env, 2)) ++near_steps;
            concentration += step_target_concentration(s.cache, env_config.n_agents);
            const auto phi = compute_phi(s, env_config);
            alloc += phi[static_cast<int>(Component::alloc)];
            stab += phi[static_cast<int>(Component::stab)];

            const auto& rec = trace.steps[t];
            failed_loads += static_cast<int>(rec.events.failed_loads.size());
            s.cache = update_cache(env_config, s.cache, rec.state_after,
                                   rec.action, rec.events);
            s.env = rec.state_after;
        }
        visited = s.cache.visited_cells.size();
        discovered = s.cache.discovered_foods.size();

        out.coverage_frac += static_cast<double>(visited) /
                             (static_cast<double>(env_config.width) * env_config.height);
        out.discovery_frac += static_cast<double>(discovered) / env_config.n_foods;
        if (T > 0) {
            out.near_target_frac += static_cast<double>(near_steps) / T;
            out.failed_load_rate +=
                static_cast<double>(failed_loads) / (env_config.n_agents * T);
            out.target_concentration += concentration / T;
            out.allocation_balance += alloc / T;
            out.stability_index += stab / T;
        }
        out.mean_return += trace.sparse_return;
        if (s.env.all_collected()) out.success_rate += 1.0;
    }

    const double n = out.episode_count;
    out.coverage_frac /= n;
    out.discovery_frac /= n;
    out.near_target_frac /= n;
    out.failed_load_rate /= n;
    out.target_concentration /= n;
    out.allocation_balance /= n;
    out.stability_index /= n;
    out.success_rate /= n;
    out.mean_return /= n;
    return out;
}

EvidenceKeys derive_keys(const EvidenceSummary& s, const KeyThresholds& t) {
    EvidenceKeys keys;
    auto emit = [&](EvidenceKey key, double severity) {
        keys.push_back({key, clip01(severity)});
    };

    if (s.coverage_frac < t.low_coverage)
        emit(EvidenceKey::low_coverage,
             (t.low_coverage - s.coverage_frac) / t.low_coverage);
    if (s.discovery_frac < 1.0 && s.mean_return == 0.0)
        emit(EvidenceKey::no_discovery, 1.0 - s.discovery_frac);
    if (s.near_target_frac < t.approach_stall && s.discovery_frac > 0.0)
        emit(EvidenceKey::approach_stall,
             (t.approach_stall - s.near_target_frac) / t.approach_stall);
    if (s.failed_load_rate > t.lone_load_rate &&
        s.success_rate < t.lone_load_success)
        emit(EvidenceKey::lone_load_failures,
             (s.failed_load_rate - t.lone_load_rate) / (1.0 - t.lone_load_rate));
    if (s.target_concentration > t.target_concentration && s.n_agents >= 2)
        emit(EvidenceKey::target_collision,
             (s.target_concentration - t.target_concentration) /
                 (1.0 - t.target_concentration));
    if (s.allocation_balance < t.allocation_balance)
        emit(EvidenceKey::allocation_imbalance,
             (t.allocation_balance - s.allocation_balance) / t.allocation_balance);
    if (s.stability_index < t.stability && s.mean_return > t.stability_return)
        emit(EvidenceKey::late_instability,
             (t.stability - s.stability_index) / t.stability);
    if (s.success_rate > 0.0 && s.success_rate < t.near_success)
        emit(EvidenceKey::near_success,
             (t.near_success - s.success_rate) / t.near_success);

    std::stable_sort(keys.begin(), keys.end(),
                     [](const Finding& a, const Finding& b) {
                         return a.severity > b.severity;
                     });
    return keys;
}

KeyThresholds key_thresholds_from_json(const nlohmann::json& j) {
    KeyThresholds t;
    t.low_coverage = j.value("low_coverage", t.low_coverage);
    t.approach_stall = j.value("approach_stall", t.approach_stall);
    t.lone_load_rate = j.value("lone_load_rate", t.lone_load_rate);
    t.lone_load_success = j.value("lone_load_success", t.lone_load_success);
    t.target_concentration = j.value("target_concentration", t.target_concentration);
    t.allocation_balance = j.value("allocation_balance", t.allocation_balance);
    t.stability = j.value("stability", t.stability);
    t.stability_return = j.value("stability_return", t.stability_return);
    t.near_success = j.value("near_success", t.near_success);
    return t;
}

nlohmann::json key_thresholds_to_json(const KeyThresholds& t) {
    return {{"low_coverage", t.low_coverage},
            {"approach_stall", t.approach_stall},
            {"lone_load_rate", t.lone_load_rate},
            {"lone_load_success", t.lone_load_success},
            {"target_concentration", t.target_concentration},
            {"allocation_balance", t.allocation_balance},
            {"stability", t.stability},
            {"stability_return", t.stability_return},
            {"near_success", t.near_success}};
}

nlohmann::json evidence_summary_to_json(const EvidenceSummary& s) {
    return {{"coverage_frac", s.coverage_frac},
            {"discovery_frac", s.discovery_frac},
            {"near_target_frac", s.near_target_frac},
            {"failed_load_rate", s.failed_load_rate},
            {"target_concentration", s.target_concentration},
            {"allocation_balance", s.allocation_balance},
            {"stability_index", s.stability_index},
            {"success_rate", s.success_rate},
            {"mean_return", s.mean_return},
            {"episode_count", s.episode_count},
            {"n_agents", s.n_agents}};
}

EvidenceSummary evidence_summary_from_json(const nlohmann::json& j) {
    EvidenceSummary s;
    s.coverage_frac = j.at("coverage_frac").get<double>();
    s.discovery_frac = j.at("discovery_frac").get<double>();
    s.near_target_frac = j.at("near_target_frac").get<double>();
    s.failed_load_rate = j.at("failed_load_rate").get<double>();
    s.target_concentration = j.at("target_concentration").get<double>();
    s.allocation_balance = j.at("allocation_balance").get<double>();
    s.stability_index = j.at("stability_index").get<double>();
    s.success_rate = j.at("success_rate").get<double>();
    s.mean_return = j.at("mean_return").get<double>();
    s.episode_count = j.at("episode_count").get<int>();
    s.n_agents = j.at("n_agents").get<int>();
    return s;
}

nlohmann::json evidence_keys_to_json(const EvidenceKeys& keys) {
    auto arr = nlohmann::json::array();
    for (const auto& f : keys)
        arr.push_back({{"key", evidence_key_name(f.key)},
                       {"severity", f.severity}});
    return arr;
}

EvidenceKeys evidence_keys_from_json(const nlohmann::json& j) {
    EvidenceKeys keys;
    for (const auto& e : j) {
        const std::string name = e.at("key").get<std::string>();
        bool found = false;
        for (int k = 0; k < 8; ++k) {
            if (name == kKeyNames[k]) {
                keys.push_back({static_cast<EvidenceKey>(k),
                                e.at("severity").get<double>()});
                found = true;
                break;
            }
        }
        if (!found) throw ConfigError("unknown evidence key '" + name + "'");
    }
    return keys;
}

}  // namespace shapelab
