#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "shapelab/errors.hpp"
#include "shapelab/llm.hpp"

using namespace shapelab;
namespace fs = std::filesystem;

namespace {

CheckpointContext make_ctx(EvidenceKeys keys,
                           std::optional<ShapingConfig> current = {}) {
    CheckpointContext ctx;
    ctx.stage = {"lbf-8x8-2p-3f", 80000, "C1"};
    ctx.recent_returns = {{72000, 0.40}, {76000, 0.45}, {80000, 0.50}};
    ctx.evidence.coverage_frac = 0.25;
    ctx.evidence.discovery_frac = 0.6;
    ctx.evidence.mean_return = 0.45;
    ctx.evidence.episode_count = 5;
    ctx.evidence.n_agents = 2;
    ctx.keys = std::move(keys);
    ctx.current_config = std::move(current);
    return ctx;
}

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("shapelab_llm_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<fs::path> files_under(const fs::path& root) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
    std::sort(out.begin(), out.end());
    return out;
}

struct MockProvider : Provider {
    ProviderSpec mock_spec;
    std::vector<std::string> responses;
    std::size_t cursor = 0;
    std::vector<LlmRequest> seen;

    std::string complete(const CallSite&, const LlmRequest& req) override {
        seen.push_back(req);
        if (cursor >= responses.size()) return "{}";
        return responses[cursor++];
    }
    const ProviderSpec& spec() const override { return mock_spec; }
};

const CallSite kSite{"C1", 1};

}  // namespace

TEST_CASE("heuristic: low coverage maps to the coverage family") {
    const auto ctx = make_ctx({{EvidenceKey::low_coverage, 0.6}});
    const auto out = heuristic_provider_rules(ctx);
    REQUIRE_FALSE(out.card.diagnosed_failures.empty());
    CHECK(out.card.diagnosed_failures[0].failure_mode.find("unvisited") !=
          std::string::npos);
    CHECK(out.card.supporting_evidence_keys ==
          std::vector<std::string>{"low_coverage"});
    const auto& modes = out.card.constraints.allowed_modes;
    CHECK(std::find(modes.begin(), modes.end(), Mode::coverage_recovery) !=
          modes.end());
    CHECK(std::find(modes.begin(), modes.end(), Mode::early_discovery) !=
          modes.end());
    CHECK_NOTHROW(validate_card(out.card, ctx));
}

TEST_CASE("heuristic: empty evidence still diagnoses") {
    const auto ctx = make_ctx({});
    const auto out = heuristic_provider_rules(ctx);
    CHECK_FALSE(out.card.diagnosed_failures.empty());
    CHECK(out.card.supporting_evidence_keys.empty());
    CHECK(out.card.constraints.allowed_modes ==
          std::vector<Mode>{Mode::balanced_progress});
    CHECK(out.proposals[0].mode == Mode::balanced_progress);
    CHECK_NOTHROW(validate_card(out.card, ctx));
}

TEST_CASE("heuristic: targeted templates hit the diagnosed component") {
    const auto no_disc = heuristic_provider_rules(
        make_ctx({{EvidenceKey::no_discovery, 0.8}}));
    CHECK(no_disc.proposals[0].mode == Mode::early_discovery);
    CHECK(weight(no_disc.proposals[0].weights, Component::cov) >= 0.4);
    CHECK(no_disc.proposals[0].beta == kBetaTargeted);

    const auto lone = heuristic_provider_rules(
        make_ctx({{EvidenceKey::lone_load_failures, 0.5}}));
    CHECK(lone.proposals[0].mode == Mode::collection_readiness);
    CHECK(weight(lone.proposals[0].weights, Component::ready) ==
          doctest::Approx(0.45));
    CHECK(weight(lone.proposals[0].weights, Component::ready) +
              weight(lone.proposals[0].weights, Component::col) >=
          0.5);
}

TEST_CASE("heuristic: role coverage, validity, determinism") {
    const auto ctx = make_ctx({{EvidenceKey::target_collision, 1.0},
                               {EvidenceKey::low_coverage, 0.6}});
    const auto out = heuristic_provider_rules(ctx);
    REQUIRE(out.proposals.size() == 3);
    CHECK(out.proposals[0].metadata.candidate_type == "targeted");
    CHECK(out.proposals[1].metadata.candidate_type == "exploratory");
    CHECK(out.proposals[2].metadata.candidate_type == "conservative");
    for (const auto& p : out.proposals) {
        CHECK_FALSE(p.impl_id.empty());
        // Idempotent: a validated proposal re-validates unchanged.
        CHECK(normalize_and_validate(p) == p);
    }
    // Exploratory picks the strongest direction not taken by targeted.
    CHECK(out.proposals[0].mode == Mode::allocation_balance);
    CHECK(out.proposals[1].mode == Mode::coverage_recovery);
    CHECK(out.proposals[1].beta == kBetaExploratory);

    const auto again = heuristic_provider_rules(ctx);
    CHECK(guidance_card_to_json(again.card) == guidance_card_to_json(out.card));
    for (int i = 0; i < 3; ++i)
        CHECK(shaping_config_to_json(again.proposals[i]) ==
              shaping_config_to_json(out.proposals[i]));
}

TEST_CASE("heuristic: exploratory rotation when one direction dominates") {
    const auto out = heuristic_provider_rules(
        make_ctx({{EvidenceKey::late_instability, 0.7}}));
    CHECK(out.proposals[0].mode == Mode::late_stability);
    CHECK(out.proposals[1].mode == Mode::balanced_progress);  // wraps past end
}

TEST_CASE("heuristic: conservative blends 10% toward the template") {
    ShapingConfig current;
    current.impl_id = "seed";
    current.mode = Mode::balanced_progress;
    current.beta = 0.3;
    current.weights = {0.20, 0.20, 0.15, 0.20, 0.15, 0.10};
    current = normalize_and_validate(current);

    const auto out = heuristic_provider_rules(
        make_ctx({{EvidenceKey::lone_load_failures, 0.5}}, current));
    const auto& cons = out.proposals[2];
    CHECK(cons.mode == Mode::balanced_progress);
    CHECK(cons.beta == 0.3);
    const Weights tmpl = mode_template(Mode::collection_readiness);
    for (int i = 0; i < kNumComponents; ++i)
        CHECK(cons.weights[i] ==
              doctest::Approx(0.9 * current.weights[i] + 0.1 * tmpl[i])
                  .epsilon(1e-9));
}

TEST_CASE("heuristic: conservative falls back to the targeted mode when the blend breaks its own constraint") {
    ShapingConfig current;
    current.impl_id = "seed";
    current.mode = Mode::balanced_progress;
    current.beta = 0.25;
    current.weights = {0.05, 0.20, 0.50, 0.10, 0.10, 0.05};
    current = normalize_and_validate(current);  // cov at the 0.5 cap

    const auto out = heuristic_provider_rules(
        make_ctx({{EvidenceKey::low_coverage, 0.9}}, current));
    const auto& cons = out.proposals[2];
    // blend pushes cov to 0.505 > 0.5, so balanced-progress is no longer
    // admissible; coverage-recovery takes the same weights.
    CHECK(cons.mode == Mode::coverage_recovery);
    CHECK(weight(cons.weights, Component::cov) == doctest::Approx(0.505));
    CHECK(normalize_and_validate(cons) == cons);
}

TEST_CASE("context JSON round trips and enforces its size bound") {
    auto ctx = make_ctx({{EvidenceKey::near_success, 0.4}});
    ctx.current_config = heuristic_provider_rules(ctx).proposals[0];
    ctx.history.push_back({"initial-search", "R1-u2", ctx.current_config,
                           0.383, 0.167, "selected"});
    ctx.reference_returns = Curve{{76000, 0.42}, {80000, 0.48}};

    const auto j = checkpoint_context_to_json(ctx);
    const auto back = checkpoint_context_from_json(j);
    CHECK(back.stage == ctx.stage);
    CHECK(back.recent_returns == ctx.recent_returns);
    CHECK(back.keys == ctx.keys);
    CHECK(back.current_config == ctx.current_config);
    CHECK(back.history == ctx.history);
    CHECK(back.reference_returns == ctx.reference_returns);

    for (int i = 0; i < 200; ++i)
        ctx.history.push_back({"C1", "R1-u" + std::to_string(i),
                               ctx.current_config, 0.1, 0.0, "evaluated"});
    CHECK_THROWS_AS(checkpoint_context_to_json(ctx), ContractViolation);
    const auto trimmed = trim_context(ctx);
    CHECK(trimmed.history.size() == kContextHistoryNotes);
    CHECK(trimmed.history.back() == ctx.history.back());
    CHECK(checkpoint_context_to_json(trimmed).dump().size() <= kMaxContextBytes);
}

TEST_CASE("card schema rejects bad content with named reasons") {
    CHECK_THROWS_AS(guidance_card_from_json(nlohmann::json::object()),
                    ConfigError);
    nlohmann::json j = {{"diagnosed_failures",
                         {{{"failure_mode", "x"}, {"explanation", "y"}}}},
                        {"constraints", {{"allowed_modes", {"warp-drive"}}}}};
    CHECK_THROWS_WITH_AS(guidance_card_from_json(j),
                         doctest::Contains("unknown mode"), ConfigError);
    j["constraints"] = {{"beta_min", 0.9}, {"beta_max", 0.2}};
    CHECK_THROWS_WITH_AS(guidance_card_from_json(j),
                         doctest::Contains("beta bounds"), ConfigError);

    GuidanceCard card;
    card.diagnosed_failures = {{"x", "y"}};
    card.supporting_evidence_keys = {"late_instability"};
    const auto ctx = make_ctx({{EvidenceKey::low_coverage, 0.6}});
    CHECK_THROWS_WITH_AS(validate_card(card, ctx),
                         doctest::Contains("not among"), ConfigError);
}

TEST_CASE("critic re-prompts with validation feedback, then gives up") {
    const auto ctx = make_ctx({{EvidenceKey::low_coverage, 0.6}});
    const auto good = guidance_card_to_json(
        heuristic_provider_rules(ctx).card).dump();

    MockProvider mock;
    mock.responses = {"this is prose, not JSON", good};
    const auto card = critic_diagnose(ctx, kSite, mock);
    CHECK(card.supporting_evidence_keys ==
          std::vector<std::string>{"low_coverage"});
    REQUIRE(mock.seen.size() == 2);
    CHECK(mock.seen[0].role == "critic");
    const auto second = nlohmann::json::parse(mock.seen[1].user);
    REQUIRE(second.contains("validation_errors"));
    CHECK(second["validation_errors"].size() == 1);

    MockProvider hopeless;
    hopeless.responses = {"no", "nope", "never"};
    CHECK_THROWS_AS(critic_diagnose(ctx, kSite, hopeless), DiagnosisError);
    CHECK(hopeless.seen.size() == kRepromptBudget);
}

TEST_CASE("generator re-prompts for missing types and heuristics fill the rest") {
    const auto ctx = make_ctx({{EvidenceKey::no_discovery, 0.8}});
    const auto rules = heuristic_provider_rules(ctx);
    const auto card = rules.card;

    // First reply: targeted + conservative valid, exploratory broken.
    nlohmann::json first = {{"candidates", nlohmann::json::array()}};
    first["candidates"].push_back(shaping_config_to_json(rules.proposals[0]));
    auto broken = shaping_config_to_json(rules.proposals[1]);
    broken["mode"] = "warp-drive";
    first["candidates"].push_back(broken);
    first["candidates"].push_back(shaping_config_to_json(rules.proposals[2]));
    nlohmann::json second = {{"candidates",
                              {shaping_config_to_json(rules.proposals[1])}}};

    MockProvider mock;
    mock.responses = {first.dump(), second.dump()};
    const auto proposals = generator_propose(card, ctx, 3, kSite, mock);
    REQUIRE(proposals.size() == 3);
    CHECK(proposals[0].metadata.candidate_type == "targeted");
    CHECK(proposals[1].metadata.candidate_type == "exploratory");
    CHECK(proposals[2].metadata.candidate_type == "conservative");
    REQUIRE(mock.seen.size() == 2);
    const auto req2 = nlohmann::json::parse(mock.seen[1].user);
    CHECK(req2["missing_types"] ==
          nlohmann::json::array({"exploratory"}));
    CHECK(req2["already_accepted"].size() == 2);
    CHECK(req2["validation_errors"].size() == 1);

    // A provider that never cooperates: the deterministic rules fill all 3.
    MockProvider useless;
    useless.responses = {"x", "y", "z"};
    const auto filled = generator_propose(card, ctx, 3, kSite, useless);
    REQUIRE(filled.size() == 3);
    for (int i = 0; i < 3; ++i)
        CHECK(filled[i].metadata.candidate_type == candidate_types()[i]);
    CHECK(filled[0].mode == Mode::early_discovery);

    CHECK_THROWS_AS(generator_propose(card, ctx, 2, kSite, mock),
                    ContractViolation);
}

TEST_CASE("transcripts: heuristic provider records every exchange") {
    const auto root = fresh_dir("record");
    TranscriptStore store(root);
    const auto ctx = make_ctx({{EvidenceKey::approach_stall, 0.3}});
    auto provider = make_provider({.kind = "heuristic"}, &store);

    const auto card = critic_diagnose(ctx, {"initial-search", 1}, *provider);
    generator_propose(card, ctx, 3, {"initial-search", 1}, *provider);
    generator_propose(card, ctx, 3, {"initial-search", 2}, *provider);

    const auto files = files_under(root);
    REQUIRE(files.size() == 3);
    CHECK(files[0] == fs::path("initial-search/1/0000_critic.json"));
    CHECK(files[1] == fs::path("initial-search/1/0001_generator.json"));
    CHECK(files[2] == fs::path("initial-search/2/0000_generator.json"));

    const auto rec = nlohmann::json::parse(slurp(root / files[0]));
    LlmRequest req{rec["role"], rec["system"], rec["user"]};
    CHECK(rec["request_hash"] == request_hash(req));
    CHECK_NOTHROW(nlohmann::json::parse(rec["response"].get<std::string>()));
}

TEST_CASE("transcripts: scripted replay is bytewise identical and tamper-evident") {
    const auto src = fresh_dir("replay_src");
    const auto dst = fresh_dir("replay_dst");
    const auto ctx = make_ctx({{EvidenceKey::target_collision, 0.9}});

    TranscriptStore record_store(src);
    auto live = make_provider({.kind = "heuristic"}, &record_store);
    const auto card = critic_diagnose(ctx, kSite, *live);
    const auto proposals = generator_propose(card, ctx, 3, kSite, *live);

    TranscriptStore replay_store(dst);
    ProviderSpec scripted{.kind = "scripted", .transcript_dir = src.string()};
    auto replay = make_provider(scripted, &replay_store);
    const auto card2 = critic_diagnose(ctx, kSite, *replay);
    const auto proposals2 = generator_propose(card, ctx, 3, kSite, *replay);

    CHECK(card2 == card);
    REQUIRE(proposals2.size() == proposals.size());
    for (std::size_t i = 0; i < proposals.size(); ++i)
        CHECK(proposals2[i] == proposals[i]);

    const auto src_files = files_under(src);
    const auto dst_files = files_under(dst);
    REQUIRE(src_files == dst_files);
    for (const auto& f : src_files) CHECK(slurp(src / f) == slurp(dst / f));

    // One more call than was recorded -> exhaustion.
    CHECK_THROWS_AS(critic_diagnose(ctx, kSite, *replay), IntegrityError);

    // A replay driven by different inputs diverges on the request hash.
    auto replay3 = make_provider(scripted, nullptr);
    auto other_ctx = ctx;
    other_ctx.stage.steps_consumed += 1;
    CHECK_THROWS_WITH_AS(critic_diagnose(other_ctx, kSite, *replay3),
                         doctest::Contains("diverged"), IntegrityError);

    // Tampering with a recorded transcript breaks its internal hash.
    const auto victim = src / "C1" / "1" / "0000_critic.json";
    auto j = nlohmann::json::parse(slurp(victim));
    j["user"] = "tampered";
    std::ofstream(victim) << j.dump(2) << "\n";
    auto replay4 = make_provider(scripted, nullptr);
    CHECK_THROWS_WITH_AS(critic_diagnose(ctx, kSite, *replay4),
                         doctest::Contains("corrupt"), IntegrityError);
}

TEST_CASE("engine: merged roles share one provider and one transcript cursor") {
    const auto src = fresh_dir("merged_src");
    const auto ctx = make_ctx({{EvidenceKey::near_success, 0.4}});
    {
        TranscriptStore store(src);
        LlmEngine engine({.critic = {.kind = "heuristic"},
                          .generator = {.kind = "heuristic"},
                          .merged_roles = true},
                         &store);
        const auto card = engine.diagnose(ctx, kSite);
        engine.propose(card, ctx, 3, kSite);
    }
    const auto files = files_under(src);
    REQUIRE(files.size() == 2);
    CHECK(files[0] == fs::path("C1/1/0000_merged.json"));
    CHECK(files[1] == fs::path("C1/1/0001_merged.json"));

    // Scripted replay through the merged engine consumes the same cursor.
    LlmEngine replay({.critic = {.kind = "scripted",
                                 .transcript_dir = src.string()},
                      .generator = {.kind = "scripted",
                                    .transcript_dir = src.string()},
                      .merged_roles = true},
                     nullptr);
    const auto card = replay.diagnose(ctx, kSite);
    CHECK(replay.propose(card, ctx, 3, kSite).size() == 3);
}

TEST_CASE("provider spec JSON round trips and rejects nonsense") {
    ProviderSpec remote{.kind = "remote",
                        .endpoint = "http://127.0.0.1:9/v1/chat",
                        .model = "m",
                        .credential_env = "KEY",
                        .timeout_seconds = 5,
                        .retries = 1};
    const auto back = provider_spec_from_json(provider_spec_to_json(remote));
    CHECK(back == remote);
    CHECK_THROWS_AS(provider_spec_from_json({{"kind", "telepathy"}}),
                    ConfigError);
    CHECK_THROWS_AS(provider_spec_from_json({{"kind", "remote"}}), ConfigError);
    CHECK_THROWS_AS(provider_spec_from_json({{"kind", "scripted"}}),
                    ConfigError);
    const auto eng = engine_config_from_json(
        engine_config_to_json({.critic = remote,
                               .generator = {.kind = "heuristic"},
                               .merged_roles = false}));
    CHECK(eng.critic == remote);
    CHECK(eng.generator.kind == "heuristic");
}

TEST_CASE("remote provider: wire format, credentials, failure modes") {
    const auto ctx = make_ctx({{EvidenceKey::low_coverage, 0.6}});
    const auto good_card =
        guidance_card_to_json(heuristic_provider_rules(ctx).card).dump();

    httplib::Server server;
    std::string seen_auth;
    nlohmann::json seen_body;
    server.Post("/v1/chat", [&](const httplib::Request& req,
                                httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_body = nlohmann::json::parse(req.body);
        nlohmann::json reply = {
            {"choices",
             {{{"message", {{"role", "assistant"}, {"content", good_card}}}}}}};
        res.set_content(reply.dump(), "application/json");
    });
    server.Post("/fail", [](const httplib::Request&, httplib::Response& res) {
        res.status = 500;
        res.set_content("overloaded", "text/plain");
    });
    server.Post("/weird", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("not json at all", "text/plain");
    });

    const int port = server.bind_to_any_port("127.0.0.1");
    if (port <= 0) {
        MESSAGE("loopback bind unavailable; skipping remote-provider checks");
        return;
    }
    std::thread serve([&] { server.listen_after_bind(); });
    server.wait_until_ready();
    const std::string base = "http://127.0.0.1:" + std::to_string(port);

    setenv("SHAPELAB_TEST_KEY", "secret-token", 1);
    ProviderSpec spec{.kind = "remote",
                      .endpoint = base + "/v1/chat",
                      .model = "test-model",
                      .credential_env = "SHAPELAB_TEST_KEY",
                      .timeout_seconds = 5,
                      .retries = 1};

    const auto store_root = fresh_dir("remote");
    TranscriptStore store(store_root);
    auto provider = make_provider(spec, &store);
    const auto card = critic_diagnose(ctx, kSite, *provider);
    CHECK(card.supporting_evidence_keys ==
          std::vector<std::string>{"low_coverage"});
    CHECK(seen_auth == "Bearer secret-token");
    CHECK(seen_body["model"] == "test-model");
    CHECK(seen_body["temperature"] == 0.0);
    REQUIRE(seen_body["messages"].size() == 2);
    CHECK(seen_body["messages"][0]["role"] == "system");
    CHECK(seen_body["messages"][1]["role"] == "user");
    // The user prompt carries the context document itself.
    const auto user =
        nlohmann::json::parse(seen_body["messages"][1]["content"].get<std::string>());
    CHECK(user["context"] == checkpoint_context_to_json(ctx));
    CHECK(files_under(store_root).size() == 1);

    ProviderSpec missing_key = spec;
    missing_key.credential_env = "SHAPELAB_DEFINITELY_NOT_SET";
    auto no_key = make_provider(missing_key, nullptr);
    CHECK_THROWS_AS(critic_diagnose(ctx, kSite, *no_key), ConfigError);

    ProviderSpec failing = spec;
    failing.endpoint = base + "/fail";
    auto fail_provider = make_provider(failing, nullptr);
    CHECK_THROWS_AS(critic_diagnose(ctx, kSite, *fail_provider),
                    TransportError);

    ProviderSpec weird = spec;
    weird.endpoint = base + "/weird";
    auto weird_provider = make_provider(weird, nullptr);
    CHECK_THROWS_AS(critic_diagnose(ctx, kSite, *weird_provider),
                    TransportError);

    ProviderSpec unreachable = spec;
    unreachable.endpoint = "http://127.0.0.1:1/v1/chat";
    unreachable.timeout_seconds = 1;
    unreachable.retries = 0;
    auto dead = make_provider(unreachable, nullptr);
    CHECK_THROWS_AS(critic_diagnose(ctx, kSite, *dead), TransportError);

    server.stop();
    serve.join();
}
