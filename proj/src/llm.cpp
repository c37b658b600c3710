#include "shapelab/llm.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>

#include <httplib.h>

#include "shapelab/errors.hpp"
#include "shapelab/hash.hpp"

namespace shapelab {

namespace {

using nlohmann::json;

json branch_note_to_json(const BranchNote& note) {
    json j;
    j["checkpoint"] = note.checkpoint;
    j["id"] = note.id;
    j["config"] = note.config ? shaping_config_to_json(*note.config) : json();
    j["score"] = note.score;
    j["margin"] = note.margin;
    j["decision"] = note.decision;
    return j;
}

BranchNote branch_note_from_json(const json& j) {
    // Severe-invalid branches carry NaN scores, which dump as null.
    const auto num = [&](const char* key) {
        const auto& v = j.at(key);
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                           : v.get<double>();
    };
    BranchNote note;
    note.checkpoint = j.at("checkpoint").get<std::string>();
    note.id = j.at("id").get<std::string>();
    if (j.contains("config") && !j.at("config").is_null())
        note.config = shaping_config_from_json(j.at("config"));
    note.score = num("score");
    note.margin = num("margin");
    note.decision = j.at("decision").get<std::string>();
    return note;
}

// Pulls the single JSON object out of a response, tolerating stray prose or
// a markdown fence around it.
json extract_json_object(const std::string& content) {
    auto parsed = json::parse(content, nullptr, /*allow_exceptions=*/false);
    if (!parsed.is_discarded() && parsed.is_object()) return parsed;
    const auto first = content.find('{');
    const auto last = content.rfind('}');
    if (first != std::string::npos && last != std::string::npos && last > first) {
        parsed = json::parse(content.substr(first, last - first + 1), nullptr,
                             false);
        if (!parsed.is_discarded() && parsed.is_object()) return parsed;
    }
    throw ConfigError("rejected: response is not a single JSON object");
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(v));
    return buf;
}

// ---------------------------------------------------------------------------
// Heuristic rule table.
// ---------------------------------------------------------------------------

struct KeyRule {
    EvidenceKey key;
    Mode preferred;
    Mode secondary;
    const char* failure;
    const char* risk;
};

constexpr KeyRule kKeyRules[] = {
    {EvidenceKey::low_coverage, Mode::coverage_recovery, Mode::early_discovery,
     "exploration collapse: the team revisits a small region and leaves most "
     "of the grid unvisited",
     "over-weighting coverage can distract from collection once foods are "
     "found"},
    {EvidenceKey::no_discovery, Mode::early_discovery, Mode::coverage_recovery,
     "discovery failure: foods are rarely or never observed",
     "over-weighting coverage can distract from collection once foods are "
     "found"},
    {EvidenceKey::approach_stall, Mode::early_discovery,
     Mode::coverage_recovery,
     "approach stall: foods are discovered but agents do not close distance",
     "pure approach shaping can crowd every agent onto one food"},
    {EvidenceKey::lone_load_failures, Mode::collection_readiness,
     Mode::balanced_progress,
     "premature solo loads: agents attempt loads without enough combined "
     "level nearby",
     "readiness shaping can freeze agents next to food they cannot lift "
     "alone"},
    {EvidenceKey::target_collision, Mode::allocation_balance,
     Mode::collection_readiness,
     "target collision: agents crowd the same food instead of splitting",
     "allocation shaping can split agents that must jointly load a high-level "
     "food"},
    {EvidenceKey::allocation_imbalance, Mode::allocation_balance,
     Mode::balanced_progress,
     "poor allocation: nearest-target assignment leaves foods uncovered",
     "allocation shaping can split agents that must jointly load a high-level "
     "food"},
    {EvidenceKey::late_instability, Mode::late_stability,
     Mode::collection_readiness,
     "late instability: failed loads and move reversals persist despite "
     "nonzero returns",
     "stability shaping can suppress the exploration needed for remaining "
     "foods"},
    {EvidenceKey::near_success, Mode::collection_readiness,
     Mode::late_stability,
     "near success: some episodes fully collect; consistency is the "
     "bottleneck",
     "strong shaping near convergence can destabilize an already-working "
     "policy"},
};

const KeyRule& rule_for(EvidenceKey key) {
    for (const auto& r : kKeyRules)
        if (r.key == key) return r;
    throw ContractViolation("no heuristic rule for evidence key");
}

// Per-key template; defaults to the preferred mode's canonical template,
// with sharper overrides where the key pins a specific component.
Weights key_template(EvidenceKey key) {
    switch (key) {
        case EvidenceKey::approach_stall:
            return {0.10, 0.45, 0.20, 0.15, 0.05, 0.05};
        case EvidenceKey::near_success:
            return {0.30, 0.15, 0.05, 0.35, 0.10, 0.05};
        default:
            return mode_template(rule_for(key).preferred);
    }
}

std::string severity_text(const Finding& f) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "severity %.2f past the %s threshold",
                  f.severity, evidence_key_name(f.key));
    return buf;
}

}  // namespace

Weights mode_template(Mode m) {
    switch (m) {
        case Mode::balanced_progress:
            return {0.20, 0.20, 0.15, 0.20, 0.15, 0.10};
        case Mode::early_discovery:
            return {0.05, 0.20, 0.55, 0.05, 0.10, 0.05};
        case Mode::coverage_recovery:
            return {0.10, 0.15, 0.55, 0.10, 0.05, 0.05};
        case Mode::collection_readiness:
            return {0.20, 0.10, 0.05, 0.45, 0.15, 0.05};
        case Mode::allocation_balance:
            return {0.10, 0.15, 0.05, 0.15, 0.45, 0.10};
        case Mode::late_stability:
            return {0.25, 0.05, 0.05, 0.10, 0.10, 0.45};
    }
    throw ContractViolation("unknown mode");
}

// ---------------------------------------------------------------------------
// Context serialization.
// ---------------------------------------------------------------------------

nlohmann::json checkpoint_context_to_json(const CheckpointContext& ctx) {
    json j;
    j["stage"] = {{"env", ctx.stage.env_name},
                  {"steps_consumed", ctx.stage.steps_consumed},
                  {"phase", ctx.stage.phase}};
    j["recent_returns"] = curve_to_json(ctx.recent_returns);
    j["evidence"] = evidence_summary_to_json(ctx.evidence);
    j["evidence_keys"] = evidence_keys_to_json(ctx.keys);
    j["current_config"] = ctx.current_config
                              ? shaping_config_to_json(*ctx.current_config)
                              : json();
    auto hist = json::array();
    for (const auto& note : ctx.history) hist.push_back(branch_note_to_json(note));
    j["branch_history"] = hist;
    j["reference_returns"] = ctx.reference_returns
                                 ? curve_to_json(*ctx.reference_returns)
                                 : json();
    const auto size = j.dump().size();
    if (size > kMaxContextBytes)
        throw ContractViolation("context document is " + std::to_string(size) +
                                " bytes; the bound is " +
                                std::to_string(kMaxContextBytes) +
                                " — trim_context first");
    return j;
}

CheckpointContext checkpoint_context_from_json(const nlohmann::json& j) {
    CheckpointContext ctx;
    const auto& stage = j.at("stage");
    ctx.stage.env_name = stage.at("env").get<std::string>();
    ctx.stage.steps_consumed = stage.at("steps_consumed").get<std::int64_t>();
    ctx.stage.phase = stage.at("phase").get<std::string>();
    ctx.recent_returns = curve_from_json(j.at("recent_returns"));
    ctx.evidence = evidence_summary_from_json(j.at("evidence"));
    ctx.keys = evidence_keys_from_json(j.at("evidence_keys"));
    if (j.contains("current_config") && !j.at("current_config").is_null())
        ctx.current_config = shaping_config_from_json(j.at("current_config"));
    for (const auto& e : j.at("branch_history"))
        ctx.history.push_back(branch_note_from_json(e));
    if (j.contains("reference_returns") && !j.at("reference_returns").is_null())
        ctx.reference_returns = curve_from_json(j.at("reference_returns"));
    return ctx;
}

CheckpointContext trim_context(CheckpointContext ctx) {
    const auto keep_tail = [](Curve& c, std::size_t n) {
        if (c.size() > n) c.erase(c.begin(), c.end() - n);
    };
    keep_tail(ctx.recent_returns, kContextCurvePoints);
    if (ctx.reference_returns) keep_tail(*ctx.reference_returns, kContextCurvePoints);
    if (ctx.history.size() > kContextHistoryNotes)
        ctx.history.erase(ctx.history.begin(),
                          ctx.history.end() - kContextHistoryNotes);
    return ctx;
}

// ---------------------------------------------------------------------------
// Guidance card.
// ---------------------------------------------------------------------------

nlohmann::json guidance_card_to_json(const GuidanceCard& card) {
    json j;
    auto failures = json::array();
    for (const auto& f : card.diagnosed_failures)
        failures.push_back({{"failure_mode", f.failure_mode},
                            {"explanation", f.explanation}});
    j["diagnosed_failures"] = failures;
    j["supporting_evidence_keys"] = card.supporting_evidence_keys;
    auto modes = json::array();
    for (Mode m : card.constraints.allowed_modes) modes.push_back(mode_name(m));
    j["constraints"] = {{"allowed_modes", modes},
                        {"weight_mass_hint", card.constraints.weight_mass_hint},
                        {"beta_min", card.constraints.beta_min},
                        {"beta_max", card.constraints.beta_max}};
    j["risks"] = card.risks;
    return j;
}

GuidanceCard guidance_card_from_json(const nlohmann::json& j) {
    GuidanceCard card;
    if (!j.contains("diagnosed_failures") || !j.at("diagnosed_failures").is_array())
        throw ConfigError("rejected: card needs a diagnosed_failures array");
    for (const auto& e : j.at("diagnosed_failures")) {
        DiagnosedFailure f;
        f.failure_mode = e.at("failure_mode").get<std::string>();
        f.explanation = e.value("explanation", std::string());
        if (f.failure_mode.empty())
            throw ConfigError("rejected: empty failure_mode");
        card.diagnosed_failures.push_back(std::move(f));
    }
    if (card.diagnosed_failures.empty())
        throw ConfigError("rejected: card diagnoses nothing");
    if (j.contains("supporting_evidence_keys"))
        card.supporting_evidence_keys =
            j.at("supporting_evidence_keys").get<std::vector<std::string>>();
    if (j.contains("constraints")) {
        const auto& c = j.at("constraints");
        for (const auto& name : c.value("allowed_modes", std::vector<std::string>{})) {
            const auto mode = mode_from_name(name);
            if (!mode)
                throw ConfigError("rejected: unknown mode '" + name +
                                  "' in allowed_modes");
            card.constraints.allowed_modes.push_back(*mode);
        }
        card.constraints.weight_mass_hint =
            c.value("weight_mass_hint", std::string());
        card.constraints.beta_min = c.value("beta_min", 0.1);
        card.constraints.beta_max = c.value("beta_max", 0.6);
    }
    if (!(card.constraints.beta_min > 0.0) ||
        card.constraints.beta_min > card.constraints.beta_max ||
        card.constraints.beta_max > kBetaMax)
        throw ConfigError("rejected: beta bounds must satisfy 0 < min <= max <= 1");
    if (j.contains("risks"))
        card.risks = j.at("risks").get<std::vector<std::string>>();
    return card;
}

void validate_card(const GuidanceCard& card, const CheckpointContext& ctx) {
    for (const auto& name : card.supporting_evidence_keys) {
        const bool present = std::any_of(
            ctx.keys.begin(), ctx.keys.end(), [&](const Finding& f) {
                return name == evidence_key_name(f.key);
            });
        if (!present)
            throw ConfigError("rejected: supporting key '" + name +
                              "' is not among the context's evidence keys");
    }
}

// ---------------------------------------------------------------------------
// Provider spec.
// ---------------------------------------------------------------------------

nlohmann::json provider_spec_to_json(const ProviderSpec& spec) {
    json j;
    j["kind"] = spec.kind;
    if (spec.kind == "remote") {
        j["endpoint"] = spec.endpoint;
        j["model"] = spec.model;
        j["credential_env"] = spec.credential_env;
        j["timeout_seconds"] = spec.timeout_seconds;
        j["retries"] = spec.retries;
    } else if (spec.kind == "scripted") {
        j["transcript_dir"] = spec.transcript_dir;
    } else {
        j["rules_version"] = spec.rules_version;
    }
    return j;
}

ProviderSpec provider_spec_from_json(const nlohmann::json& j) {
    ProviderSpec spec;
    spec.kind = j.value("kind", std::string("heuristic"));
    if (spec.kind != "remote" && spec.kind != "scripted" &&
        spec.kind != "heuristic")
        throw ConfigError("unknown provider kind '" + spec.kind + "'");
    spec.endpoint = j.value("endpoint", std::string());
    spec.model = j.value("model", std::string());
    spec.credential_env = j.value("credential_env", std::string("SHAPELAB_API_KEY"));
    spec.timeout_seconds = j.value("timeout_seconds", 60);
    spec.retries = j.value("retries", 2);
    spec.transcript_dir = j.value("transcript_dir", std::string());
    spec.rules_version = j.value("rules_version", 1);
    if (spec.kind == "remote" && spec.endpoint.empty())
        throw ConfigError("remote provider needs an endpoint");
    if (spec.kind == "scripted" && spec.transcript_dir.empty())
        throw ConfigError("scripted provider needs a transcript_dir");
    return spec;
}

// ---------------------------------------------------------------------------
// Transcript persistence.
// ---------------------------------------------------------------------------

std::string request_hash(const LlmRequest& req) {
    Fnv1a h;
    h.add_str(req.role).add_str(req.system).add_str(req.user);
    return hex64(h.value());
}

TranscriptStore::TranscriptStore(std::filesystem::path root)
    : root_(std::move(root)) {}

std::filesystem::path TranscriptStore::record(const CallSite& site,
                                              const LlmRequest& req,
                                              const std::string& response) {
    std::lock_guard<std::mutex> lock(mu_);
    const auto dir = root_ / site.phase / std::to_string(site.round);
    std::filesystem::create_directories(dir);
    int& seq = next_seq_[dir.string()];
    char name[32];
    std::snprintf(name, sizeof(name), "%04d_%s.json", seq, req.role.c_str());
    ++seq;
    const auto path = dir / name;
    json j;
    j["role"] = req.role;
    j["request_hash"] = request_hash(req);
    j["system"] = req.system;
    j["user"] = req.user;
    j["response"] = response;
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    out.flush();
    if (!out)
        throw IntegrityError("failed to persist transcript " + path.string());
    return path;
}

// ---------------------------------------------------------------------------
// Providers.
// ---------------------------------------------------------------------------

namespace {

class HeuristicProvider : public Provider {
  public:
    HeuristicProvider(ProviderSpec spec, TranscriptStore* store)
        : spec_(std::move(spec)), store_(store) {}

    std::string complete(const CallSite& site, const LlmRequest& req) override {
        const auto user = json::parse(req.user);
        const auto ctx = checkpoint_context_from_json(user.at("context"));
        const auto out = heuristic_provider_rules(ctx);
        std::string content;
        if (user.at("task") == "diagnose") {
            content = guidance_card_to_json(out.card).dump();
        } else {
            auto candidates = json::array();
            for (const auto& p : out.proposals)
                candidates.push_back(shaping_config_to_json(p));
            content = json{{"candidates", candidates}}.dump();
        }
        if (store_) store_->record(site, req, content);
        return content;
    }

    const ProviderSpec& spec() const override { return spec_; }

  private:
    ProviderSpec spec_;
    TranscriptStore* store_;
};

class ScriptedProvider : public Provider {
  public:
    ScriptedProvider(ProviderSpec spec, TranscriptStore* store)
        : spec_(std::move(spec)), store_(store),
          source_(spec_.transcript_dir) {
        if (!std::filesystem::is_directory(source_))
            throw ConfigError("transcript_dir does not exist: " +
                              source_.string());
    }

    std::string complete(const CallSite& site, const LlmRequest& req) override {
        const auto dir = source_ / site.phase / std::to_string(site.round);
        if (!std::filesystem::is_directory(dir))
            throw IntegrityError("no recorded transcripts under " + dir.string());
        std::vector<std::string> files;
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.path().extension() == ".json")
                files.push_back(e.path().filename().string());
        std::sort(files.begin(), files.end());
        std::size_t& cursor = cursor_[dir.string()];
        if (cursor >= files.size())
            throw IntegrityError("transcript exhausted at " + dir.string() +
                                 " (call " + std::to_string(cursor + 1) + ")");
        const auto path = dir / files[cursor];
        ++cursor;
        std::ifstream in(path);
        json j;
        in >> j;
        if (!in) throw IntegrityError("unreadable transcript " + path.string());
        if (j.at("role") != req.role)
            throw IntegrityError("replay role diverged at " + path.string() +
                                 ": recorded " +
                                 j.at("role").get<std::string>() + ", got " +
                                 req.role);
        const LlmRequest recorded{j.at("role").get<std::string>(),
                                  j.at("system").get<std::string>(),
                                  j.at("user").get<std::string>()};
        if (j.at("request_hash") != request_hash(recorded))
            throw IntegrityError("transcript " + path.string() +
                                 " is corrupt: stored hash does not match "
                                 "stored request");
        if (j.at("request_hash") != request_hash(req))
            throw IntegrityError("replayed request diverged at " +
                                 path.string());
        const std::string response = j.at("response").get<std::string>();
        if (store_ && std::filesystem::weakly_canonical(store_->root()) !=
                          std::filesystem::weakly_canonical(source_))
            store_->record(site, req, response);
        return response;
    }

    const ProviderSpec& spec() const override { return spec_; }

  private:
    ProviderSpec spec_;
    TranscriptStore* store_;
    std::filesystem::path source_;
    std::map<std::string, std::size_t> cursor_;
};

class RemoteProvider : public Provider {
  public:
    RemoteProvider(ProviderSpec spec, TranscriptStore* store)
        : spec_(std::move(spec)), store_(store) {
        const auto scheme_end = spec_.endpoint.find("://");
        if (scheme_end == std::string::npos)
            throw ConfigError("endpoint must look like http://host:port/path");
        const auto path_start = spec_.endpoint.find('/', scheme_end + 3);
        base_ = spec_.endpoint.substr(
            0, path_start == std::string::npos ? spec_.endpoint.size()
                                               : path_start);
        path_ = path_start == std::string::npos
                    ? std::string("/")
                    : spec_.endpoint.substr(path_start);
    }

    std::string complete(const CallSite& site, const LlmRequest& req) override {
        const char* key = std::getenv(spec_.credential_env.c_str());
        if (!key || !*key)
            throw ConfigError("credential environment variable '" +
                              spec_.credential_env + "' is not set");
        json body;
        body["model"] = spec_.model;
        body["temperature"] = 0.0;
        body["response_format"] = {{"type", "json_object"}};
        body["messages"] = {{{"role", "system"}, {"content", req.system}},
                            {{"role", "user"}, {"content", req.user}}};

        httplib::Client client(base_);
        client.set_connection_timeout(spec_.timeout_seconds, 0);
        client.set_read_timeout(spec_.timeout_seconds, 0);
        client.set_write_timeout(spec_.timeout_seconds, 0);
        const httplib::Headers headers = {
            {"Authorization", std::string("Bearer ") + key}};

        std::string last_error;
        for (int attempt = 0; attempt <= spec_.retries; ++attempt) {
            auto res = client.Post(path_, headers, body.dump(),
                                   "application/json");
            if (!res) {
                last_error = httplib::to_string(res.error());
                continue;
            }
            if (res->status == 200) {
                const std::string content = extract_content(res->body);
                if (store_) store_->record(site, req, content);
                return content;
            }
            last_error = "HTTP " + std::to_string(res->status) + ": " +
                         res->body.substr(0, 200);
            if (res->status < 500) break;  // no point retrying client errors
        }
        throw TransportError("provider " + base_ + " unreachable: " + last_error);
    }

    const ProviderSpec& spec() const override { return spec_; }

  private:
    static std::string extract_content(const std::string& body) {
        const auto j = json::parse(body, nullptr, false);
        if (j.is_discarded())
            throw TransportError("provider returned a non-JSON envelope");
        if (j.contains("choices") && j.at("choices").is_array() &&
            !j.at("choices").empty()) {
            const auto& msg = j.at("choices").at(0).at("message");
            if (msg.contains("content") && msg.at("content").is_string())
                return msg.at("content").get<std::string>();
        }
        if (j.contains("content") && j.at("content").is_string())
            return j.at("content").get<std::string>();
        throw TransportError("provider envelope is missing message content");
    }

    ProviderSpec spec_;
    TranscriptStore* store_;
    std::string base_;
    std::string path_;
};

}  // namespace

std::unique_ptr<Provider> make_provider(const ProviderSpec& spec,
                                        TranscriptStore* store) {
    if (spec.kind == "heuristic")
        return std::make_unique<HeuristicProvider>(spec, store);
    if (spec.kind == "scripted")
        return std::make_unique<ScriptedProvider>(spec, store);
    if (spec.kind == "remote")
        return std::make_unique<RemoteProvider>(spec, store);
    throw ConfigError("unknown provider kind '" + spec.kind + "'");
}

// ---------------------------------------------------------------------------
// Heuristic rules.
// ---------------------------------------------------------------------------

HeuristicOutput heuristic_provider_rules(const CheckpointContext& ctx) {
    HeuristicOutput out;
    GuidanceCard& card = out.card;

    if (ctx.keys.empty()) {
        card.diagnosed_failures.push_back(
            {"no salient failure signature",
             "returns are flat or improving without a dominant failure key"});
        card.constraints.allowed_modes = {Mode::balanced_progress};
        card.constraints.weight_mass_hint =
            "keep weights balanced; no component above 0.5";
        card.risks = {"shaping without a clear diagnosis adds noise; keep "
                      "beta moderate"};
    } else {
        for (std::size_t i = 0; i < ctx.keys.size() && i < 4; ++i) {
            const auto& rule = rule_for(ctx.keys[i].key);
            card.diagnosed_failures.push_back(
                {rule.failure, severity_text(ctx.keys[i])});
        }
        for (const auto& f : ctx.keys)
            card.supporting_evidence_keys.push_back(evidence_key_name(f.key));
        for (const auto& f : ctx.keys) {
            const auto& rule = rule_for(f.key);
            for (Mode m : {rule.preferred, rule.secondary}) {
                auto& modes = card.constraints.allowed_modes;
                if (std::find(modes.begin(), modes.end(), m) == modes.end())
                    modes.push_back(m);
            }
            if (std::find(card.risks.begin(), card.risks.end(), rule.risk) ==
                    card.risks.end() &&
                card.risks.size() < 4)
                card.risks.push_back(rule.risk);
        }
        const auto& top = rule_for(ctx.keys.front().key);
        card.constraints.weight_mass_hint =
            std::string("concentrate mass on the ") + mode_name(top.preferred) +
            " components";
    }

    // Targeted: the top key's template at full diagnostic strength.
    ShapingConfig targeted;
    std::string top_key_name;
    if (ctx.keys.empty()) {
        targeted.mode = Mode::balanced_progress;
        targeted.weights = mode_template(Mode::balanced_progress);
        targeted.impl_id = "h-targeted-balanced";
    } else {
        const auto& top = ctx.keys.front();
        top_key_name = evidence_key_name(top.key);
        targeted.mode = rule_for(top.key).preferred;
        targeted.weights = key_template(top.key);
        targeted.impl_id = "h-targeted-" + top_key_name;
        targeted.metadata.evidence_keys = {top_key_name};
        targeted.metadata.risk_notes = rule_for(top.key).risk;
    }
    targeted.beta = kBetaTargeted;
    targeted.metadata.candidate_type = "targeted";
    targeted.metadata.expected_effect =
        std::string("shift potential mass toward ") + mode_name(targeted.mode);

    // Exploratory: the strongest direction not already taken by targeted.
    ShapingConfig exploratory;
    exploratory.mode = targeted.mode;  // replaced below
    const Finding* source = nullptr;
    for (const auto& f : ctx.keys) {
        if (rule_for(f.key).preferred != targeted.mode) {
            source = &f;
            break;
        }
    }
    if (source) {
        exploratory.mode = rule_for(source->key).preferred;
        exploratory.weights = key_template(source->key);
        exploratory.metadata.evidence_keys = {evidence_key_name(source->key)};
    } else {
        exploratory.mode = static_cast<Mode>(
            (static_cast<int>(targeted.mode) + 1) % kNumModes);
        exploratory.weights = mode_template(exploratory.mode);
    }
    exploratory.beta = kBetaExploratory;
    exploratory.impl_id =
        std::string("h-exploratory-") + mode_name(exploratory.mode);
    exploratory.metadata.candidate_type = "exploratory";
    exploratory.metadata.expected_effect =
        std::string("test the ") + mode_name(exploratory.mode) +
        " direction at reduced strength";
    exploratory.metadata.risk_notes =
        "a different direction may regress the current bottleneck";

    // Conservative: pull the current weights a little toward the targeted
    // template; keep mode and beta. If the blend breaks the current mode's
    // mass constraint, retry under the targeted mode, then fall back to the
    // unchanged current configuration.
    ShapingConfig conservative;
    if (!ctx.current_config) {
        conservative.mode = Mode::balanced_progress;
        conservative.weights = mode_template(Mode::balanced_progress);
        conservative.beta = kBetaExploratory;
    } else {
        const ShapingConfig& cur = *ctx.current_config;
        conservative = cur;
        for (int i = 0; i < kNumComponents; ++i)
            conservative.weights[i] =
                (1.0 - kConservativeBlend) * cur.weights[i] +
                kConservativeBlend * targeted.weights[i];
        try {
            normalize_and_validate(conservative);
        } catch (const ConfigError&) {
            conservative.mode = targeted.mode;
            try {
                normalize_and_validate(conservative);
            } catch (const ConfigError&) {
                conservative = cur;
            }
        }
    }
    conservative.impl_id = "h-conservative";
    conservative.metadata = {};
    conservative.metadata.candidate_type = "conservative";
    conservative.metadata.expected_effect =
        "stay close to the current configuration with a small pull toward "
        "the targeted template";
    conservative.metadata.risk_notes = "may be too timid to move the metric";
    if (!top_key_name.empty())
        conservative.metadata.evidence_keys = {top_key_name};

    out.proposals = {normalize_and_validate(targeted),
                     normalize_and_validate(exploratory),
                     normalize_and_validate(conservative)};
    return out;
}

// ---------------------------------------------------------------------------
// Prompts.
// ---------------------------------------------------------------------------

namespace {

const char* kSchemaNotes =
    "Valid modes: balanced-progress, early-discovery, coverage-recovery, "
    "collection-readiness, allocation-balance, late-stability. Weight "
    "components: col (collection), app (approach), cov (coverage), ready "
    "(load readiness), alloc (target allocation), stab (stability). Mode "
    "mass constraints after normalization: early-discovery and "
    "coverage-recovery need cov+app >= 0.6; collection-readiness needs "
    "ready+col >= 0.5; allocation-balance needs alloc >= 0.3; "
    "late-stability needs stab+col >= 0.5; balanced-progress caps every "
    "weight at 0.5. beta must lie in (0, 1].";

const char* kCardSchema =
    "{\"diagnosed_failures\":[{\"failure_mode\":str,\"explanation\":str}],"
    "\"supporting_evidence_keys\":[str],"
    "\"constraints\":{\"allowed_modes\":[str],\"weight_mass_hint\":str,"
    "\"beta_min\":num,\"beta_max\":num},\"risks\":[str]}";

const char* kCandidateSchema =
    "{\"candidates\":[{\"impl_id\":str,\"mode\":str,\"beta\":num,"
    "\"active_components\":[str],\"weights\":{\"col\":num,\"app\":num,"
    "\"cov\":num,\"ready\":num,\"alloc\":num,\"stab\":num},"
    "\"metadata\":{\"candidate_type\":str,\"evidence_keys\":[str],"
    "\"expected_effect\":str,\"risk_notes\":str}}]}";

}  // namespace

std::string critic_system_prompt() {
    return std::string(
               "You are the critic in a reward-shaping workbench for "
               "cooperative multi-agent foraging. The user message is a JSON "
               "context with recent sparse-return metrics, behavior evidence, "
               "derived evidence keys, the current shaping configuration, "
               "branch history, and an optional fixed-reference window. "
               "Diagnose the current learning bottlenecks and constrain the "
               "next proposals. Respond with exactly one JSON object, no "
               "prose, matching: ") +
           kCardSchema +
           " Every supporting key must be one of the context's evidence "
           "keys. " +
           kSchemaNotes;
}

std::string generator_system_prompt() {
    return std::string(
               "You are the generator in a reward-shaping workbench for "
               "cooperative multi-agent foraging. The user message carries a "
               "guidance card and the same JSON context the critic saw. "
               "Propose exactly the requested number of candidates: one "
               "targeted update addressing the diagnosed bottleneck, one "
               "exploratory alternative testing a different direction, and "
               "one conservative adjustment staying near the current "
               "configuration. Respond with exactly one JSON object, no "
               "prose, matching: ") +
           kCandidateSchema + " " + kSchemaNotes;
}

std::string merged_system_prompt() {
    return std::string(
               "You are the single language engine of a reward-shaping "
               "workbench for cooperative multi-agent foraging, covering "
               "both diagnosis and proposal. When the user task is "
               "\"diagnose\", respond with one JSON guidance card matching: ") +
           kCardSchema +
           " When the user task is \"propose\", respond with one JSON object "
           "matching: " +
           kCandidateSchema +
           " Never add prose around the JSON. " + kSchemaNotes;
}

// ---------------------------------------------------------------------------
// Engine operations.
// ---------------------------------------------------------------------------

GuidanceCard critic_diagnose(const CheckpointContext& ctx, const CallSite& site,
                             Provider& provider, bool merged_roles) {
    const json ctx_json = checkpoint_context_to_json(ctx);
    std::vector<std::string> feedback;
    for (int attempt = 0; attempt < kRepromptBudget; ++attempt) {
        json user = {{"task", "diagnose"}, {"context", ctx_json}};
        if (!feedback.empty()) user["validation_errors"] = feedback;
        const LlmRequest req{
            merged_roles ? "merged" : "critic",
            merged_roles ? merged_system_prompt() : critic_system_prompt(),
            user.dump()};
        const std::string content = provider.complete(site, req);
        try {
            auto card = guidance_card_from_json(extract_json_object(content));
            validate_card(card, ctx);
            return card;
        } catch (const ConfigError& e) {
            feedback.push_back(e.what());
        }
    }
    throw DiagnosisError("critic produced no valid guidance card in " +
                         std::to_string(kRepromptBudget) +
                         " attempts; last error: " + feedback.back());
}

std::vector<ShapingConfig> generator_propose(const GuidanceCard& card,
                                             const CheckpointContext& ctx,
                                             int n, const CallSite& site,
                                             Provider& provider,
                                             bool merged_roles) {
    if (n != static_cast<int>(candidate_types().size()))
        throw ContractViolation("the per-round budget is 3 candidates");
    const json ctx_json = checkpoint_context_to_json(ctx);
    const json card_json = guidance_card_to_json(card);

    std::map<std::string, ShapingConfig> accepted;  // keyed by candidate_type
    std::vector<std::string> feedback;
    for (int attempt = 0;
         attempt < kRepromptBudget && accepted.size() < candidate_types().size();
         ++attempt) {
        json user = {{"task", "propose"},
                     {"n", n},
                     {"context", ctx_json},
                     {"guidance_card", card_json}};
        if (!accepted.empty()) {
            auto done = json::array();
            std::vector<std::string> missing;
            for (const auto& t : candidate_types()) {
                if (accepted.count(t))
                    done.push_back(shaping_config_to_json(accepted.at(t)));
                else
                    missing.push_back(t);
            }
            user["already_accepted"] = done;
            user["missing_types"] = missing;
        }
        if (!feedback.empty()) user["validation_errors"] = feedback;
        const LlmRequest req{
            merged_roles ? "merged" : "generator",
            merged_roles ? merged_system_prompt() : generator_system_prompt(),
            user.dump()};
        const std::string content = provider.complete(site, req);
        feedback.clear();
        try {
            const auto j = extract_json_object(content);
            if (!j.contains("candidates") || !j.at("candidates").is_array())
                throw ConfigError("rejected: response must carry a candidates array");
            for (const auto& cj : j.at("candidates")) {
                try {
                    auto cfg = normalize_and_validate(shaping_config_from_json(cj));
                    const auto& type = cfg.metadata.candidate_type;
                    if (std::find(candidate_types().begin(),
                                  candidate_types().end(),
                                  type) == candidate_types().end())
                        throw ConfigError(
                            "rejected: candidate_type must be targeted, "
                            "exploratory or conservative (got '" + type + "')");
                    if (cfg.impl_id.empty())
                        throw ConfigError("rejected: impl_id must be non-empty");
                    if (accepted.count(type))
                        throw ConfigError("rejected: duplicate candidate_type '" +
                                          type + "'");
                    accepted.emplace(type, std::move(cfg));
                } catch (const ConfigError& e) {
                    feedback.push_back(e.what());
                }
            }
        } catch (const ConfigError& e) {
            feedback.push_back(e.what());
        }
    }

    if (accepted.size() < candidate_types().size()) {
        // The provider never produced a full round; the deterministic rules
        // fill the remaining slots.
        auto fallback = heuristic_provider_rules(ctx);
        for (auto& p : fallback.proposals)
            if (!accepted.count(p.metadata.candidate_type))
                accepted.emplace(p.metadata.candidate_type, std::move(p));
    }

    std::vector<ShapingConfig> out;
    for (const auto& t : candidate_types()) out.push_back(accepted.at(t));
    return out;
}

// ---------------------------------------------------------------------------
// Engine.
// ---------------------------------------------------------------------------

nlohmann::json engine_config_to_json(const EngineConfig& cfg) {
    return {{"critic", provider_spec_to_json(cfg.critic)},
            {"generator", provider_spec_to_json(cfg.generator)},
            {"merged_roles", cfg.merged_roles}};
}

EngineConfig engine_config_from_json(const nlohmann::json& j) {
    EngineConfig cfg;
    cfg.critic = provider_spec_from_json(j.at("critic"));
    cfg.generator = provider_spec_from_json(j.at("generator"));
    cfg.merged_roles = j.value("merged_roles", false);
    return cfg;
}

LlmEngine::LlmEngine(EngineConfig cfg, TranscriptStore* store)
    : cfg_(std::move(cfg)) {
    critic_ = make_provider(cfg_.critic, store);
    if (cfg_.merged_roles || cfg_.generator == cfg_.critic)
        generator_ = critic_;
    else
        generator_ = make_provider(cfg_.generator, store);
}

GuidanceCard LlmEngine::diagnose(const CheckpointContext& ctx,
                                 const CallSite& site) {
    return critic_diagnose(ctx, site, *critic_, cfg_.merged_roles);
}

std::vector<ShapingConfig> LlmEngine::propose(const GuidanceCard& card,
                                              const CheckpointContext& ctx,
                                              int n, const CallSite& site) {
    return generator_propose(card, ctx, n, site, *generator_,
                             cfg_.merged_roles);
}

}  // namespace shapelab
