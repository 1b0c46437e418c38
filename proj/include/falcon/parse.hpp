// Small text helpers shared by the config and report parsers.
#pragma once

#include <cmath>
#include <optional>
#include <string>

namespace falcon {
namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

// Whole-string finite number or nothing; no partial parses.
inline std::optional<double> parse_double(const std::string& s) {
    try {
        std::size_t pos = 0;
        double d = std::stod(s, &pos);
        if (pos != s.size() || !std::isfinite(d)) return std::nullopt;
        return d;
    } catch (...) {
        return std::nullopt;
    }
}

}  // namespace detail
}  // namespace falcon
