#include <doctest.h>

#include <algorithm>

#include "shapelab/env.hpp"
#include "shapelab/errors.hpp"
#include "shapelab/rng.hpp"
#include "test_policies.hpp"

using namespace shapelab;
using testing::NoopPolicy;
using testing::RandomPolicy;
using testing::ScriptedForager;

namespace {

EnvConfig make_config(int w, int h, int agents, int foods,
                      std::optional<int> sight = std::nullopt,
                      std::uint64_t seed = 0) {
    EnvConfig c;
    c.width = w;
    c.height = h;
    c.n_agents = agents;
    c.n_foods = foods;
    c.sight_radius = sight;
    c.seed = seed;
    return validate(c);
}

}  // namespace

TEST_CASE("reset: identical seeds give bitwise-identical states") {
    const auto config = make_config(8, 8, 2, 1, std::nullopt, 7);
    CHECK(reset(config, 7) == reset(config, 7));
    CHECK(reset(config, 7) != reset(config, 8));
}

TEST_CASE("reset: impossible placements are configuration errors") {
    // Too many agents for the density bound.
    EnvConfig dense;
    dense.width = 3;
    dense.height = 3;
    dense.n_agents = 9;
    dense.n_foods = 1;
    CHECK_THROWS_AS(reset(dense, 0), ConfigError);
    // Within the agent bound but no free cell left for all foods.
    EnvConfig packed;
    packed.width = 3;
    packed.height = 3;
    packed.n_agents = 2;
    packed.n_foods = 8;
    CHECK_THROWS_AS(reset(packed, 0), ConfigError);
}

TEST_CASE("reset: all entity positions pairwise distinct") {
    const auto config = make_config(8, 8, 2, 2);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const EnvState s = reset(config, seed);
        std::vector<std::pair<int, int>> cells;
        for (std::size_t i = 0; i < s.agent_x.size(); ++i)
            cells.push_back({s.agent_x[i], s.agent_y[i]});
        for (std::size_t f = 0; f < s.food_x.size(); ++f)
            cells.push_back({s.food_x[f], s.food_y[f]});
        std::sort(cells.begin(), cells.end());
        CHECK(std::adjacent_find(cells.begin(), cells.end()) == cells.end());
    }
}

TEST_CASE("reset: levels follow the placement rule") {
    const auto config = make_config(8, 8, 3, 4);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const EnvState s = reset(config, seed);
        for (int lvl : s.agent_levels) CHECK(lvl == 1);
        for (int lvl : s.food_levels) {
            CHECK(lvl >= 1);
            CHECK(lvl <= 3);  // sum of agent levels
        }
    }
}

TEST_CASE("config validation rejects bad fields") {
    EnvConfig c = make_config(8, 8, 2, 1);
    c.width = 2;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = make_config(8, 8, 2, 1);
    c.n_foods = 0;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = make_config(8, 8, 2, 1);
    c.sight_radius = 0;
    CHECK_THROWS_AS(validate(c), ConfigError);
    // Episode-cap default.
    EnvConfig d;
    d.width = 10;
    d.height = 6;
    d.n_agents = 2;
    d.n_foods = 1;
    CHECK(validate(d).max_episode_steps == 4 * 16);
}

// Hand-built 3x3 scenario used by several step tests:
// agent0 at (0,1), agent1 at (2,1), food level 2 at (1,1).
namespace {
EnvState tiny_state() {
    EnvState s;
    s.agent_x = {0, 2};
    s.agent_y = {1, 1};
    s.agent_levels = {1, 1};
    s.food_x = {1};
    s.food_y = {1};
    s.food_levels = {2};
    s.food_collected = {false};
    s.step_count = 0;
    return s;
}
}  // namespace

TEST_CASE("step: cooperative load collects and pays normalized reward") {
    const auto config = make_config(3, 3, 2, 1);
    const auto res = step(config, tiny_state(), {Action::load, Action::load});
    CHECK(res.sparse_reward == 1.0);  // only food, level 2 of total 2
    CHECK(res.done);
    CHECK(res.state.food_collected[0]);
    REQUIRE(res.events.collected_foods.size() == 1);
    CHECK(res.events.collected_foods[0] == 0);
    CHECK(res.events.failed_loads.empty());
}

TEST_CASE("step: lone under-leveled load fails with an event") {
    const auto config = make_config(3, 3, 2, 1);
    const auto res = step(config, tiny_state(), {Action::load, Action::noop});
    CHECK(res.sparse_reward == 0.0);
    CHECK_FALSE(res.state.food_collected[0]);
    REQUIRE(res.events.failed_loads.size() == 1);
    CHECK(res.events.failed_loads[0] == FailedLoad{0, 0});
}

TEST_CASE("step: conflicting moves into one cell all fail") {
    const auto config = make_config(3, 3, 2, 1);
    EnvState s = tiny_state();
    s.food_x = {1};
    s.food_y = {0};  // free the center
    const auto res = step(config, s, {Action::right, Action::left});
    CHECK(res.state.agent_x == s.agent_x);
    CHECK(res.state.agent_y == s.agent_y);
    CHECK(res.events.move_failed == std::vector<bool>{true, true});
    CHECK(res.events.cells_entered.empty());
}

TEST_CASE("step: off-grid, occupied-cell, swap and follow moves fail") {
    const auto config = make_config(3, 3, 2, 1);
    // Off-grid.
    auto res = step(config, tiny_state(), {Action::left, Action::noop});
    CHECK(res.events.move_failed[0]);
    // Into uncollected food cell.
    res = step(config, tiny_state(), {Action::right, Action::noop});
    CHECK(res.events.move_failed[0]);
    // Swap / follow resolve against start-of-step occupancy.
    EnvState s = tiny_state();
    s.agent_x = {0, 1};
    s.agent_y = {0, 0};
    s.food_x = {2};
    s.food_y = {2};
    res = step(config, s, {Action::right, Action::left});  // swap
    CHECK(res.state.agent_x == s.agent_x);
    res = step(config, s, {Action::right, Action::right});  // follow
    CHECK(res.events.move_failed[0]);
    CHECK(res.events.move_success[1]);
    CHECK(res.state.agent_x == std::vector<int>{0, 2});
}

TEST_CASE("step: contract violations") {
    const auto config = make_config(3, 3, 2, 1);
    CHECK_THROWS_AS(step(config, tiny_state(), {Action::noop}), ContractViolation);
    EnvState done_state = tiny_state();
    done_state.food_collected = {true};
    CHECK_THROWS_AS(step(config, done_state, {Action::noop, Action::noop}),
                    ContractViolation);
}

TEST_CASE("step: hand-simulated 3x3 episode") {
    const auto config = make_config(3, 3, 2, 1);
    EnvState s = tiny_state();
    s.agent_x = {0, 2};
    s.agent_y = {0, 2};

    auto r1 = step(config, s, {Action::down, Action::up});
    CHECK(r1.state.agent_y == std::vector<int>{1, 1});
    CHECK(r1.sparse_reward == 0.0);
    CHECK_FALSE(r1.done);
    CHECK(r1.state.step_count == 1);

    auto r2 = step(config, r1.state, {Action::load, Action::load});
    CHECK(r2.sparse_reward == 1.0);
    CHECK(r2.done);
    CHECK(r2.state.step_count == 2);
}

TEST_CASE("step: pure function — replaying actions reproduces the trajectory") {
    const auto config = make_config(6, 6, 2, 2, std::nullopt, 5);
    RandomPolicy policy;
    const EpisodeTrace trace = run_episode(policy, config, 123);

    EnvState s = reset(config, 123);
    CHECK(s == trace.initial_state);
    for (const auto& rec : trace.steps) {
        const auto res = step(config, s, rec.action);
        CHECK(res.state == rec.state_after);
        CHECK(res.sparse_reward == rec.sparse_reward);
        CHECK(res.events == rec.events);
        s = res.state;
    }
}

TEST_CASE("episode return is in [0,1] and hits 1 iff all food collected") {
    const auto config = make_config(5, 5, 2, 2, std::nullopt, 3);
    RandomPolicy policy;
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const auto trace = run_episode(policy, config, seed);
        CHECK(trace.sparse_return >= 0.0);
        CHECK(trace.sparse_return <= 1.0 + 1e-12);
        const bool all = trace.steps.back().state_after.all_collected();
        if (all)
            CHECK(trace.sparse_return == doctest::Approx(1.0).epsilon(1e-12));
        else
            CHECK(trace.sparse_return < 1.0);
    }
}

TEST_CASE("food_collected is monotone within an episode") {
    const auto config = make_config(5, 5, 2, 3, std::nullopt, 17);
    RandomPolicy policy;
    const auto trace = run_episode(policy, config, 4);
    std::vector<bool> prev = trace.initial_state.food_collected;
    for (const auto& rec : trace.steps) {
        for (std::size_t f = 0; f < prev.size(); ++f)
            CHECK((!prev[f] || rec.state_after.food_collected[f]));
        prev = rec.state_after.food_collected;
    }
}

TEST_CASE("observe: finite sight contains exactly the in-radius entities") {
    const auto config = make_config(8, 8, 3, 3, 2, 21);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const EnvState s = reset(config, seed);
        for (int i = 0; i < config.n_agents; ++i) {
            const Observation o = observe_agent(config, s, i);
            for (const auto& e : o.agents)
                CHECK(std::max(std::abs(e.dx), std::abs(e.dy)) <= 2);
            for (const auto& e : o.foods)
                CHECK(std::max(std::abs(e.dx), std::abs(e.dy)) <= 2);
            int in_radius_agents = 0, in_radius_foods = 0;
            for (int j = 0; j < config.n_agents; ++j) {
                if (j == i) continue;
                if (std::max(std::abs(s.agent_x[j] - s.agent_x[i]),
                             std::abs(s.agent_y[j] - s.agent_y[i])) <= 2)
                    ++in_radius_agents;
            }
            for (int f = 0; f < config.n_foods; ++f) {
                if (s.food_collected[f]) continue;
                if (std::max(std::abs(s.food_x[f] - s.agent_x[i]),
                             std::abs(s.food_y[f] - s.agent_y[i])) <= 2)
                    ++in_radius_foods;
            }
            CHECK(static_cast<int>(o.agents.size()) == in_radius_agents);
            CHECK(static_cast<int>(o.foods.size()) == in_radius_foods);
        }
    }
}

TEST_CASE("observe: full sight determines food_collected exactly") {
    const auto config = make_config(6, 6, 2, 3, std::nullopt, 9);
    RandomPolicy policy;
    const auto trace = run_episode(policy, config, 2);
    for (const auto& rec : trace.steps) {
        const Observation o = observe_agent(config, rec.state_after, 0);
        std::vector<bool> inferred(config.n_foods, true);
        for (const auto& f : o.foods) inferred[f.index] = false;
        CHECK(inferred == rec.state_after.food_collected);
        // And the rest of the state is visible too.
        CHECK(static_cast<int>(o.agents.size()) == config.n_agents - 1);
    }
}

TEST_CASE("evaluate_policy: scripted forager fully collects") {
    const auto config = make_config(8, 8, 2, 1, std::nullopt, 40);
    ScriptedForager policy;
    CHECK(evaluate_policy(policy, config, 20, 17) ==
          doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("evaluate_policy: all-noop policy scores zero") {
    const auto config = make_config(8, 8, 2, 1);
    NoopPolicy policy;
    CHECK(evaluate_policy(policy, config, 5, 3) == 0.0);
}

TEST_CASE("evaluate_policy: random policy is reproducible and bounded") {
    const auto config = make_config(8, 8, 2, 1, std::nullopt, 1);
    RandomPolicy a, b;
    const double va = evaluate_policy(a, config, 100, 55);
    const double vb = evaluate_policy(b, config, 100, 55);
    CHECK(va == vb);
    CHECK(va >= 0.0);
    CHECK(va <= 1.0);
}

TEST_CASE("task names parse and format") {
    EnvConfig c = parse_task_name("2s-8x8-2p-2f");
    CHECK(c.width == 8);
    CHECK(c.height == 8);
    CHECK(c.n_agents == 2);
    CHECK(c.n_foods == 2);
    REQUIRE(c.sight_radius.has_value());
    CHECK(*c.sight_radius == 2);
    CHECK(task_name(c) == "2s-8x8-2p-2f");

    c = parse_task_name("11x5-3p-1f");
    CHECK(c.width == 11);
    CHECK(c.height == 5);
    CHECK_FALSE(c.sight_radius.has_value());
    CHECK(task_name(c) == "11x5-3p-1f");

    CHECK_THROWS_AS(parse_task_name("8x8"), ConfigError);
    CHECK_THROWS_AS(parse_task_name("8x8-2p-1f-extra"), ConfigError);
    CHECK_THROWS_AS(parse_task_name("s-8x8-2p-1f"), ConfigError);
    CHECK_THROWS_AS(parse_task_name(""), ConfigError);
}

TEST_CASE("env config and state JSON round trips") {
    EnvConfig c = make_config(9, 7, 3, 2, 2, 77);
    const EnvConfig back = env_config_from_json(env_config_to_json(c));
    CHECK(back.width == c.width);
    CHECK(back.height == c.height);
    CHECK(back.sight_radius == c.sight_radius);
    CHECK(back.max_episode_steps == c.max_episode_steps);
    CHECK(back.seed == c.seed);
    CHECK(env_config_to_json(c)["task"] == "2s-9x7-3p-2f");

    // Full-sight serializes as the string "full".
    EnvConfig full = make_config(8, 8, 2, 1);
    CHECK(env_config_to_json(full)["sight_radius"] == "full");
    CHECK_FALSE(env_config_from_json(env_config_to_json(full)).sight_radius);

    const EnvState s = reset(c, 3);
    CHECK(env_state_from_json(env_state_to_json(s)) == s);
}
