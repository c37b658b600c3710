#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "shapelab/csv.hpp"
#include "shapelab/evidence.hpp"
#include "shapelab/shaping.hpp"

namespace shapelab {

// ---------------------------------------------------------------------------
// Language engine: critic diagnosis and generator proposal over structured
// JSON schemas. Providers are pluggable (remote endpoint, scripted replay,
// offline heuristic); nothing leaves this module unless it validated, and
// every request/response pair is persisted before the workflow proceeds.
// ---------------------------------------------------------------------------

inline constexpr int kRepromptBudget = 3;
inline constexpr std::size_t kMaxContextBytes = 32 * 1024;
inline constexpr int kContextCurvePoints = 25;   // window kept by trim_context
inline constexpr int kContextHistoryNotes = 16;  // history kept by trim_context
inline constexpr double kBetaTargeted = 0.5;
inline constexpr double kBetaExploratory = 0.25;
inline constexpr double kConservativeBlend = 0.1;  // pull toward the template

// Where in the workflow a provider call happens; routes transcript files to
// llm_transcripts/<phase>/<round>/.
struct CallSite {
    std::string phase;  // "initial-search", "C1", "C2"
    int round = 1;
};

struct StageDescriptor {
    std::string env_name;
    std::int64_t steps_consumed = 0;
    std::string phase;

    bool operator==(const StageDescriptor&) const = default;
};

// Compact outcome of one prior branch, carried as context for later rounds.
struct BranchNote {
    std::string checkpoint;  // "initial-search", "C1", "C2"
    std::string id;          // "NC", "R1-u2", "R2-p3", ...
    std::optional<ShapingConfig> config;
    double score = 0.0;
    double margin = 0.0;
    std::string decision;

    bool operator==(const BranchNote&) const = default;
};

// Everything the engine is allowed to see. Aggregates only — never raw
// trajectories — and the serialized document is bounded to kMaxContextBytes.
struct CheckpointContext {
    StageDescriptor stage;
    Curve recent_returns;
    EvidenceSummary evidence;
    EvidenceKeys keys;
    std::optional<ShapingConfig> current_config;
    std::vector<BranchNote> history;
    std::optional<Curve> reference_returns;  // fixed-reference window
};

// Throws ContractViolation if the document exceeds kMaxContextBytes.
nlohmann::json checkpoint_context_to_json(const CheckpointContext& ctx);
CheckpointContext checkpoint_context_from_json(const nlohmann::json& j);

// Caps curve windows and history so the serialized context stays bounded;
// keeps the most recent entries.
CheckpointContext trim_context(CheckpointContext ctx);

struct DiagnosedFailure {
    std::string failure_mode;
    std::string explanation;

    bool operator==(const DiagnosedFailure&) const = default;
};

struct GenerationConstraints {
    std::vector<Mode> allowed_modes;
    std::string weight_mass_hint;
    double beta_min = 0.1;
    double beta_max = 0.6;

    bool operator==(const GenerationConstraints&) const = default;
};

struct GuidanceCard {
    std::vector<DiagnosedFailure> diagnosed_failures;
    std::vector<std::string> supporting_evidence_keys;
    GenerationConstraints constraints;
    std::vector<std::string> risks;

    bool operator==(const GuidanceCard&) const = default;
};

nlohmann::json guidance_card_to_json(const GuidanceCard& card);
// Schema errors (unknown mode, bad beta bounds, missing fields) throw
// ConfigError with a reason usable as re-prompt feedback.
GuidanceCard guidance_card_from_json(const nlohmann::json& j);
// Cross-checks the card against its context: every supporting key must be a
// known key present in ctx.keys.
void validate_card(const GuidanceCard& card, const CheckpointContext& ctx);

inline const std::vector<std::string>& candidate_types() {
    static const std::vector<std::string> kTypes = {"targeted", "exploratory",
                                                    "conservative"};
    return kTypes;
}

// ---------------------------------------------------------------------------
// Providers.
// ---------------------------------------------------------------------------

struct ProviderSpec {
    std::string kind = "heuristic";  // remote | scripted | heuristic

    // remote
    std::string endpoint;  // http://host:port/path
    std::string model;
    std::string credential_env = "SHAPELAB_API_KEY";
    int timeout_seconds = 60;
    int retries = 2;

    // scripted: root of a recorded run's llm_transcripts tree
    std::string transcript_dir;

    // heuristic
    int rules_version = 1;

    bool operator==(const ProviderSpec&) const = default;
};

nlohmann::json provider_spec_to_json(const ProviderSpec& spec);
ProviderSpec provider_spec_from_json(const nlohmann::json& j);

struct LlmRequest {
    std::string role;  // "critic" | "generator" | "merged"
    std::string system;
    std::string user;  // the context payload, as a JSON document
};

// Hex FNV-1a over (role, system, user); recorded with each transcript and
// re-checked on scripted replay.
std::string request_hash(const LlmRequest& req);

// Persists request/response pairs as llm_transcripts/<phase>/<round>/
// <seq>_<role>.json. Sequence numbers restart per directory; writes are
// serialized.
class TranscriptStore {
  public:
    explicit TranscriptStore(std::filesystem::path root);

    // Returns the path written. Persisted (flushed) before returning.
    std::filesystem::path record(const CallSite& site, const LlmRequest& req,
                                 const std::string& response);

    const std::filesystem::path& root() const { return root_; }

  private:
    std::filesystem::path root_;
    std::map<std::string, int> next_seq_;
    std::mutex mu_;
};

class Provider {
  public:
    virtual ~Provider() = default;
    // Returns the raw response content. Records the pair to the attached
    // store (if any) before returning. Transport problems throw
    // TransportError; replay divergence throws IntegrityError.
    virtual std::string complete(const CallSite& site, const LlmRequest& req) = 0;
    virtual const ProviderSpec& spec() const = 0;
};

// store may be null (no persistence). Scripted providers replay from
// spec.transcript_dir and re-record into store unless it is the same tree.
std::unique_ptr<Provider> make_provider(const ProviderSpec& spec,
                                        TranscriptStore* store);

// ---------------------------------------------------------------------------
// Deterministic heuristic rules: the offline stand-in provider. Every
// evidence key maps to a failure mode, a preferred shaping mode, and a
// weight template; targeted = top key's template, exploratory = the
// strongest unused direction's template, conservative = current weights
// pulled kConservativeBlend toward the template.
// ---------------------------------------------------------------------------

struct HeuristicOutput {
    GuidanceCard card;
    std::vector<ShapingConfig> proposals;  // targeted, exploratory, conservative
};

HeuristicOutput heuristic_provider_rules(const CheckpointContext& ctx);

// Canonical weight template per mode (sums to 1, satisfies the mode's mass
// constraint). Exposed for the fixed-shaping baseline and for tests.
Weights mode_template(Mode m);

// ---------------------------------------------------------------------------
// Engine operations.
// ---------------------------------------------------------------------------

std::string critic_system_prompt();
std::string generator_system_prompt();
std::string merged_system_prompt();

// Runs the critic with up to kRepromptBudget attempts, feeding validation
// errors back on each retry. Throws DiagnosisError once the budget is
// exhausted; TransportError propagates immediately.
GuidanceCard critic_diagnose(const CheckpointContext& ctx, const CallSite& site,
                             Provider& provider, bool merged_roles = false);

// Collects n (= 3) proposals with distinct candidate types, re-prompting
// with rejection reasons; after kRepromptBudget attempts the heuristic
// rules fill any remaining slots. Output order is fixed: targeted,
// exploratory, conservative. Every result passed normalize_and_validate.
std::vector<ShapingConfig> generator_propose(const GuidanceCard& card,
                                             const CheckpointContext& ctx, int n,
                                             const CallSite& site,
                                             Provider& provider,
                                             bool merged_roles = false);

struct EngineConfig {
    ProviderSpec critic;
    ProviderSpec generator;
    bool merged_roles = false;

    bool operator==(const EngineConfig&) const = default;
};

nlohmann::json engine_config_to_json(const EngineConfig& cfg);
EngineConfig engine_config_from_json(const nlohmann::json& j);

// Binds providers for the two roles. With merged_roles (or identical
// specs) one provider instance serves both, so scripted replay consumes a
// single transcript cursor.
class LlmEngine {
  public:
    LlmEngine(EngineConfig cfg, TranscriptStore* store);

    GuidanceCard diagnose(const CheckpointContext& ctx, const CallSite& site);
    std::vector<ShapingConfig> propose(const GuidanceCard& card,
                                       const CheckpointContext& ctx, int n,
                                       const CallSite& site);

    const EngineConfig& config() const { return cfg_; }

  private:
    EngineConfig cfg_;
    std::shared_ptr<Provider> critic_;
    std::shared_ptr<Provider> generator_;
};

}  // namespace shapelab
