#pragma once

// Scripted policies shared by the test binaries.

#include <algorithm>
#include <queue>
#include <vector>

#include "shapelab/env.hpp"
#include "shapelab/rng.hpp"

namespace shapelab::testing {

struct NoopPolicy : Policy {
    JointAction act(const EnvConfig& config, const std::vector<Observation>&) override {
        return JointAction(config.n_agents, Action::noop);
    }
};

struct RandomPolicy : Policy {
    Xoshiro256 rng = Xoshiro256::seeded(99);
    explicit RandomPolicy(std::uint64_t seed = 99) : rng(Xoshiro256::seeded(seed)) {}
    JointAction act(const EnvConfig& config, const std::vector<Observation>&) override {
        JointAction a(config.n_agents);
        for (auto& x : a) x = static_cast<Action>(rng.uniform_below(6));
        return a;
    }
};

// Routes each agent to a per-agent "slot" orthogonally adjacent to the
// nearest uncollected food (slots rotated by agent index so two agents
// prefer different cells), via BFS around the other agents, then loads.
// Movement is staggered by agent index so simultaneous movers can never
// conflict (the all-fail rule would otherwise let two approaches livelock).
struct ScriptedForager : Policy {
    JointAction act(const EnvConfig& config, const std::vector<Observation>& obs) override {
        JointAction action(config.n_agents, Action::noop);
        for (int i = 0; i < config.n_agents; ++i) {
            const auto& o = obs[i];
            if (o.foods.empty()) continue;  // nothing visible left to do
            const auto& food = *std::min_element(
                o.foods.begin(), o.foods.end(),
                [](const VisibleEntity& a, const VisibleEntity& b) {
                    return std::abs(a.dx) + std::abs(a.dy) <
                           std::abs(b.dx) + std::abs(b.dy);
                });
            const int fx = o.self_x + food.dx, fy = o.self_y + food.dy;
            if (std::abs(food.dx) + std::abs(food.dy) == 1) {
                action[i] = Action::load;
                continue;
            }
            if (o.step_count % config.n_agents != i) continue;  // not my turn
            action[i] = route_step(config, obs, i, fx, fy);
        }
        return action;
    }

    static Action route_step(const EnvConfig& config,
                             const std::vector<Observation>& obs, int agent,
                             int fx, int fy) {
        const auto& o = obs[agent];
        // Slot cells adjacent to the food, rotated by agent index.
        const int adj[4][2] = {{fx - 1, fy}, {fx + 1, fy}, {fx, fy - 1}, {fx, fy + 1}};
        std::vector<std::pair<int, int>> slots;
        for (int k = 0; k < 4; ++k) {
            const int sx = adj[(k + agent) % 4][0], sy = adj[(k + agent) % 4][1];
            if (sx >= 0 && sx < config.width && sy >= 0 && sy < config.height)
                slots.push_back({sx, sy});
        }

        // Occupancy: all food cells plus the other agents' current cells.
        std::vector<bool> blocked(static_cast<std::size_t>(config.width) *
                                      config.height,
                                  false);
        for (const auto& other : o.agents) {
            const int ax = o.self_x + other.dx, ay = o.self_y + other.dy;
            blocked[static_cast<std::size_t>(ay) * config.width + ax] = true;
        }
        for (const auto& f : o.foods) {
            const int cx = o.self_x + f.dx, cy = o.self_y + f.dy;
            blocked[static_cast<std::size_t>(cy) * config.width + cx] = true;
        }

        // BFS from the agent to the first reachable slot.
        std::vector<int> parent(blocked.size(), -2);
        std::queue<int> frontier;
        const int start = o.self_y * config.width + o.self_x;
        parent[start] = -1;
        frontier.push(start);
        int goal = -1;
        while (!frontier.empty() && goal < 0) {
            const int cur = frontier.front();
            frontier.pop();
            const int cx = cur % config.width, cy = cur / config.width;
            for (const auto& [sx, sy] : slots)
                if (cx == sx && cy == sy) goal = cur;
            if (goal >= 0) break;
            const int nbr[4][2] = {{cx, cy - 1}, {cx, cy + 1}, {cx - 1, cy}, {cx + 1, cy}};
            for (const auto& n : nbr) {
                if (n[0] < 0 || n[0] >= config.width || n[1] < 0 || n[1] >= config.height)
                    continue;
                const int idx = n[1] * config.width + n[0];
                if (blocked[idx] || parent[idx] != -2) continue;
                parent[idx] = cur;
                frontier.push(idx);
            }
        }
        if (goal < 0 || goal == start) return Action::noop;  // wait for space
        int cur = goal;
        while (parent[cur] != start && parent[cur] != -1) cur = parent[cur];
        const int cx = cur % config.width, cy = cur / config.width;
        if (cy < o.self_y) return Action::up;
        if (cy > o.self_y) return Action::down;
        if (cx < o.self_x) return Action::left;
        return Action::right;
    }
};

}  // namespace shapelab::testing
