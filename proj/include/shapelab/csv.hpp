#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace shapelab {

// One point of a learning curve: cumulative environment steps consumed by
// the producing segment chain, and the mean sparse evaluation return there.
struct CurvePoint {
    std::int64_t env_steps = 0;
    double mean_sparse_return = 0.0;

    bool operator==(const CurvePoint&) const = default;
};

using Curve = std::vector<CurvePoint>;

// Serializes with full round-trip precision ("%.17g"). Header line is
// "env_steps,mean_sparse_return".
std::string curve_to_csv(const Curve& curve);

// Parses a curve CSV; throws ConfigError on malformed header or rows.
Curve curve_from_csv(const std::string& text);

void write_curve_csv(const std::filesystem::path& path, const Curve& curve);
Curve read_curve_csv(const std::filesystem::path& path);

// JSON form used wherever curves are embedded in structured records.
nlohmann::json curve_to_json(const Curve& curve);
Curve curve_from_json(const nlohmann::json& j);

// Formats a double with shortest round-trip precision (%.17g).
std::string format_double(double v);

}  // namespace shapelab
