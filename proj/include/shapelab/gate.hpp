#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "shapelab/csv.hpp"
#include "shapelab/shaping.hpp"

namespace shapelab {

// ---------------------------------------------------------------------------
// Validation gate: deterministic, stability-aware scoring of branch learning
// curves against a mandatory no-change control. The language engine proposes;
// this gate alone decides.
// ---------------------------------------------------------------------------

inline constexpr int kGateLastK = 5;
inline constexpr double kGateTauTie = 0.02;
inline constexpr double kSpikeWarningGap = 0.3;

struct BranchCurve {
    std::string id;
    Curve points;
    std::string origin_checkpoint;
    std::optional<ShapingConfig> config;  // none for unshaped branches
};

struct BranchScore {
    std::string id;
    double last_k_mean = 0.0;  // mean of the last k returns
    double auc = 0.0;          // trapezoidal area / step span (return units)
    double final = 0.0;
    double best = 0.0;
    double spike_gap = 0.0;    // best - last_k_mean
    double std_last_k = 0.0;   // population std over the last k returns
    double score = 0.0;        // 0.35 LastK + 0.35 AUC + 0.20 Final
                               // + 0.10 Best - 0.10 (SpikeGap + StdLastK)
    bool severe_invalid = false;
    std::vector<std::string> risk_flags;
};

// Scores one curve; k is clipped to the curve length. Curves with fewer than
// 2 points or any non-finite return come back flagged severe_invalid (the
// degenerate statistics are still filled in where computable). A spike gap
// above kSpikeWarningGap adds a warning flag, never a veto.
BranchScore score_branch(const BranchCurve& curve, int k = kGateLastK);

enum class GateReason : int {
    clear_improvement = 0,
    near_tie_rejected,
    all_below_control,
    risk_rejected,
};

const char* gate_reason_name(GateReason r);

struct ScoredUpdate {
    BranchScore score;
    double margin = 0.0;  // S(b) - S(control)
};

struct GateDecision {
    BranchScore control;
    std::vector<ScoredUpdate> updates;  // input order preserved
    std::string winner_id;
    GateReason reason = GateReason::all_below_control;
};

// Picks the winner: the argmax-margin valid update if its margin exceeds
// tau_tie, otherwise the control. Ties between updates break by higher
// LastK, then lower SpikeGap, then lexicographically smaller id. A branch
// flagged severe_invalid can never win; if only such a branch beat tau_tie
// the decision reports risk_rejected.
GateDecision decide(const BranchScore& control,
                    const std::vector<BranchScore>& updates,
                    double tau_tie = kGateTauTie);

nlohmann::json branch_score_to_json(const BranchScore& s);
BranchScore branch_score_from_json(const nlohmann::json& j);
nlohmann::json gate_decision_to_json(const GateDecision& d);
GateDecision gate_decision_from_json(const nlohmann::json& j);

}  // namespace shapelab
