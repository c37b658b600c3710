#include "shapelab/csv.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "shapelab/errors.hpp"

namespace shapelab {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string curve_to_csv(const Curve& curve) {
    std::string out = "env_steps,mean_sparse_return\n";
    for (const auto& p : curve) {
        out += std::to_string(p.env_steps);
        out += ',';
        out += format_double(p.mean_sparse_return);
        out += '\n';
    }
    return out;
}

Curve curve_from_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("curve csv: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "env_steps,mean_sparse_return")
        throw ConfigError("curve csv: bad header '" + line + "'");

    Curve curve;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw ConfigError("curve csv: line " + std::to_string(lineno) + " has no comma");

        errno = 0;
        char* end = nullptr;
        const std::string steps_str = line.substr(0, comma);
        const long long steps = std::strtoll(steps_str.c_str(), &end, 10);
        if (errno != 0 || end == steps_str.c_str() || *end != '\0')
            throw ConfigError("curve csv: bad env_steps on line " + std::to_string(lineno));

        errno = 0;
        const std::string ret_str = line.substr(comma + 1);
        const double ret = std::strtod(ret_str.c_str(), &end);
        if (errno != 0 || end == ret_str.c_str() || *end != '\0')
            throw ConfigError("curve csv: bad return on line " + std::to_string(lineno));

        curve.push_back({steps, ret});
    }
    return curve;
}

void write_curve_csv(const std::filesystem::path& path, const Curve& curve) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open for write: " + path.string());
    out << curve_to_csv(curve);
    if (!out) throw ConfigError("write failed: " + path.string());
}

Curve read_curve_csv(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open for read: " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return curve_from_csv(buf.str());
}

nlohmann::json curve_to_json(const Curve& curve) {
    auto arr = nlohmann::json::array();
    for (const auto& p : curve)
        arr.push_back({{"env_steps", p.env_steps},
                       {"mean_sparse_return", p.mean_sparse_return}});
    return arr;
}

Curve curve_from_json(const nlohmann::json& j) {
    Curve curve;
    for (const auto& e : j)
        curve.push_back({e.at("env_steps").get<std::int64_t>(),
                         e.at("mean_sparse_return").get<double>()});
    return curve;
}

}  // namespace shapelab
