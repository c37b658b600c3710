#include "shapelab/gate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "shapelab/errors.hpp"

namespace shapelab {

namespace {

constexpr const char* kReasonNames[] = {"clear_improvement", "near_tie_rejected",
                                        "all_below_control", "risk_rejected"};

bool better_tiebreak(const ScoredUpdate& a, const ScoredUpdate& b) {
    if (a.margin != b.margin) return a.margin > b.margin;
    if (a.score.last_k_mean != b.score.last_k_mean)
        return a.score.last_k_mean > b.score.last_k_mean;
    if (a.score.spike_gap != b.score.spike_gap)
        return a.score.spike_gap < b.score.spike_gap;
    return a.score.id < b.score.id;
}

}  // namespace

const char* gate_reason_name(GateReason r) {
    return kReasonNames[static_cast<int>(r)];
}

BranchScore score_branch(const BranchCurve& curve, int k) {
    BranchScore s;
    s.id = curve.id;
    const auto& pts = curve.points;
    const int n = static_cast<int>(pts.size());

    if (n < 2) {
        s.severe_invalid = true;
        s.risk_flags.push_back("short_curve");
    }
    for (const auto& p : pts) {
        if (!std::isfinite(p.mean_sparse_return)) {
            s.severe_invalid = true;
            s.risk_flags.push_back("non_finite_return");
            break;
        }
    }
    if (n == 0) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        s.last_k_mean = s.auc = s.final = s.best = s.spike_gap = s.std_last_k = nan;
        s.score = nan;
        return s;
    }

    const int keff = std::min(std::max(k, 1), n);
    double sum = 0.0;
    for (int i = n - keff; i < n; ++i) sum += pts[i].mean_sparse_return;
    s.last_k_mean = sum / keff;
    double var = 0.0;
    for (int i = n - keff; i < n; ++i) {
        const double d = pts[i].mean_sparse_return - s.last_k_mean;
        var += d * d;
    }
    s.std_last_k = std::sqrt(var / keff);

    s.final = pts.back().mean_sparse_return;
    s.best = pts[0].mean_sparse_return;
    for (const auto& p : pts) s.best = std::max(s.best, p.mean_sparse_return);

    if (n >= 2) {
        const double span =
            static_cast<double>(pts.back().env_steps - pts.front().env_steps);
        if (span <= 0.0) {
            s.severe_invalid = true;
            s.risk_flags.push_back("non_increasing_steps");
            s.auc = std::numeric_limits<double>::quiet_NaN();
        } else {
            double area = 0.0;
            for (int i = 1; i < n; ++i)
                area += (pts[i].env_steps - pts[i - 1].env_steps) *
                        (pts[i].mean_sparse_return + pts[i - 1].mean_sparse_return) /
                        2.0;
            s.auc = area / span;
        }
    } else {
        s.auc = pts[0].mean_sparse_return;  // degenerate single-point curve
    }

    s.spike_gap = s.best - s.last_k_mean;
    s.score = 0.35 * s.last_k_mean + 0.35 * s.auc + 0.20 * s.final +
              0.10 * s.best - 0.10 * (s.spike_gap + s.std_last_k);
    if (s.spike_gap > kSpikeWarningGap) s.risk_flags.push_back("spike_gap_warning");
    return s;
}

GateDecision decide(const BranchScore& control,
                    const std::vector<BranchScore>& updates, double tau_tie) {
    if (updates.empty())
        throw ContractViolation("gate: decide needs at least one update branch");
    if (control.severe_invalid || !std::isfinite(control.score))
        throw ContractViolation("gate: control curve is invalid; cannot anchor margins");

    GateDecision d;
    d.control = control;
    for (const auto& u : updates)
        d.updates.push_back({u, u.score - control.score});

    const ScoredUpdate* best_valid = nullptr;
    const ScoredUpdate* best_invalid = nullptr;
    for (const auto& u : d.updates) {
        if (!u.score.severe_invalid && std::isfinite(u.score.score)) {
            if (!best_valid || better_tiebreak(u, *best_valid)) best_valid = &u;
        } else if (std::isfinite(u.score.score)) {
            if (!best_invalid || better_tiebreak(u, *best_invalid)) best_invalid = &u;
        }
    }

    if (best_valid && best_valid->margin > tau_tie) {
        d.winner_id = best_valid->score.id;
        d.reason = GateReason::clear_improvement;
        return d;
    }

    d.winner_id = control.id;
    if (best_invalid && best_invalid->margin > tau_tie &&
        (!best_valid || best_invalid->margin > best_valid->margin)) {
        // Only a severely-invalid branch cleared the bar: vetoed on risk.
        d.reason = GateReason::risk_rejected;
    } else if (best_valid && best_valid->margin > 0.0) {
        d.reason = GateReason::near_tie_rejected;
    } else {
        d.reason = GateReason::all_below_control;
    }
    return d;
}

nlohmann::json branch_score_to_json(const BranchScore& s) {
    return {{"id", s.id},
            {"last_k_mean", s.last_k_mean},
            {"auc", s.auc},
            {"final", s.final},
            {"best", s.best},
            {"spike_gap", s.spike_gap},
            {"std_last_k", s.std_last_k},
            {"score", s.score},
            {"severe_invalid", s.severe_invalid},
            {"risk_flags", s.risk_flags}};
}

BranchScore branch_score_from_json(const nlohmann::json& j) {
    // Non-finite statistics serialize as null; bring them back as NaN.
    const auto num = [&](const char* key) {
        const auto& v = j.at(key);
        return v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                           : v.get<double>();
    };
    BranchScore s;
    s.id = j.at("id").get<std::string>();
    s.last_k_mean = num("last_k_mean");
    s.auc = num("auc");
    s.final = num("final");
    s.best = num("best");
    s.spike_gap = num("spike_gap");
    s.std_last_k = num("std_last_k");
    s.score = num("score");
    s.severe_invalid = j.at("severe_invalid").get<bool>();
    s.risk_flags = j.at("risk_flags").get<std::vector<std::string>>();
    return s;
}

nlohmann::json gate_decision_to_json(const GateDecision& d) {
    auto updates = nlohmann::json::array();
    for (const auto& u : d.updates) {
        auto j = branch_score_to_json(u.score);
        j["margin"] = u.margin;
        updates.push_back(std::move(j));
    }
    return {{"control", branch_score_to_json(d.control)},
            {"updates", updates},
            {"winner", d.winner_id},
            {"reason", gate_reason_name(d.reason)}};
}

GateDecision gate_decision_from_json(const nlohmann::json& j) {
    GateDecision d;
    d.control = branch_score_from_json(j.at("control"));
    for (const auto& u : j.at("updates")) {
        ScoredUpdate su;
        su.score = branch_score_from_json(u);
        su.margin = u.at("margin").get<double>();
        d.updates.push_back(std::move(su));
    }
    d.winner_id = j.at("winner").get<std::string>();
    const std::string reason = j.at("reason").get<std::string>();
    bool found = false;
    for (int r = 0; r < 4; ++r) {
        if (reason == gate_reason_name(static_cast<GateReason>(r))) {
            d.reason = static_cast<GateReason>(r);
            found = true;
            break;
        }
    }
    if (!found) throw ConfigError("unknown gate reason '" + reason + "'");
    return d;
}

}  // namespace shapelab
