#pragma once

// Flat "key = value" text: one pair per line, '#' comments, sorted on write.
// Shared by config files, checkpoints, manifests, and metric reports.

#include <cstdio>
#include <cstdint>
#include <map>
#include <string>

#include "attnseq/error.hpp"

namespace attnseq::kv {

using Map = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::string serialize(const Map& m) {
    std::string out;
    for (const auto& [k, v] : m) {
        out += k;
        out += " = ";
        out += v;
        out += '\n';
    }
    return out;
}

inline Map parse(const std::string& text) {
    Map m;
    std::size_t pos = 0;
    int line_no = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        const std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
        pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw DataError("config line " + std::to_string(line_no) + ": expected 'key = value', got '" + t + "'");
        }
        const std::string key = trim(t.substr(0, eq));
        if (key.empty()) throw DataError("config line " + std::to_string(line_no) + ": empty key");
        m[key] = trim(t.substr(eq + 1));
    }
    return m;
}

inline const std::string& get_str(const Map& m, const std::string& key) {
    const auto it = m.find(key);
    if (it == m.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
}

inline std::string get_str(const Map& m, const std::string& key, const std::string& fallback) {
    const auto it = m.find(key);
    return it == m.end() ? fallback : it->second;
}

inline std::int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

inline double parse_f64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::int64_t get_i64(const Map& m, const std::string& key) { return parse_i64(key, get_str(m, key)); }
inline std::int64_t get_i64(const Map& m, const std::string& key, std::int64_t fallback) {
    const auto it = m.find(key);
    return it == m.end() ? fallback : parse_i64(key, it->second);
}
inline double get_f64(const Map& m, const std::string& key) { return parse_f64(key, get_str(m, key)); }
inline double get_f64(const Map& m, const std::string& key, double fallback) {
    const auto it = m.find(key);
    return it == m.end() ? fallback : parse_f64(key, it->second);
}
inline bool get_bool(const Map& m, const std::string& key, bool fallback) {
    const auto it = m.find(key);
    return it == m.end() ? fallback : parse_bool(key, it->second);
}

inline std::string fmt_i64(std::int64_t v) { return std::to_string(v); }

// Shortest representation that parses back to the identical double.
inline std::string fmt_f64(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    double back = 0.0;
    std::sscanf(buf, "%lg", &back);
    if (back == v) {
        for (int prec = 1; prec <= 16; ++prec) {
            char shorter[64];
            std::snprintf(shorter, sizeof shorter, "%.*g", prec, v);
            std::sscanf(shorter, "%lg", &back);
            if (back == v) return shorter;
        }
    }
    return buf;
}

inline std::string fmt_bool(bool v) { return v ? "true" : "false"; }

}  // namespace attnseq::kv
