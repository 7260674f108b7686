#pragma once

// `key = value` configuration files: one assignment per line, `#` starts a
// comment, keys are dotted (`refine.lambda_min`). Values are bound to typed
// fields through a key table; unknown keys and malformed values are errors
// that name the file and line.

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mvps/error.hpp"

namespace mvps {

struct ConfigEntry {
    std::string key;
    std::string value;
    std::size_t line = 0;
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

}  // namespace detail

inline std::vector<ConfigEntry> parse_config_text(const std::string& text, const std::string& source = "<config>") {
    std::vector<ConfigEntry> out;
    std::map<std::string, std::size_t> seen;
    std::istringstream is(text);
    std::string raw;
    std::size_t lineno = 0;
    while (std::getline(is, raw)) {
        ++lineno;
        const auto hash = raw.find('#');
        const std::string line = detail::trim(std::string_view(raw).substr(0, hash));
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ParseError(source, lineno, "expected 'key = value'");
        ConfigEntry e{detail::trim(std::string_view(line).substr(0, eq)), detail::trim(std::string_view(line).substr(eq + 1)),
                      lineno};
        if (e.key.empty()) throw ParseError(source, lineno, "empty key");
        for (char c : e.key)
            if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_'))
                throw ParseError(source, lineno, "invalid character in key '" + e.key + "'");
        if (const auto it = seen.find(e.key); it != seen.end())
            throw ParseError(source, lineno, "duplicate key '" + e.key + "' (first set on line " +
                                                 std::to_string(it->second) + ")");
        seen[e.key] = lineno;
        out.push_back(std::move(e));
    }
    return out;
}

inline std::vector<ConfigEntry> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError(path, "cannot open config file");
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str(), path);
}

// Typed value conversion; throws InputError with a short reason.
namespace config_value {

inline double to_double(const std::string& v) {
    double x = 0.0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) throw InputError("expected a number, got '" + v + "'");
    return x;
}

inline long long to_int(const std::string& v) {
    long long x = 0;
    const auto* end = v.data() + v.size();
    const auto r = std::from_chars(v.data(), end, x);
    if (r.ec != std::errc() || r.ptr != end) throw InputError("expected an integer, got '" + v + "'");
    return x;
}

inline bool to_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw InputError("expected true/false, got '" + v + "'");
}

inline std::string from_double(double x) {
    std::ostringstream os;
    os << std::setprecision(17) << x;
    return os.str();
}

}  // namespace config_value

// A documented key bound to a field of T. `field` is a generic accessor such as
// [](auto& c) -> auto& { return c.refine.tol; }.
template <typename T>
struct ConfigKey {
    std::string key;
    std::string doc;
    std::function<void(T&, const std::string&)> set;
    std::function<std::string(const T&)> get;
};

template <typename T, typename F>
ConfigKey<T> double_key(std::string key, std::string doc, F field) {
    return {std::move(key), std::move(doc),
            [field](T& c, const std::string& v) { field(c) = config_value::to_double(v); },
            [field](const T& c) { return config_value::from_double(field(c)); }};
}

template <typename T, typename F>
ConfigKey<T> int_key(std::string key, std::string doc, F field) {
    return {std::move(key), std::move(doc),
            [field](T& c, const std::string& v) {
                using I = std::remove_reference_t<decltype(field(c))>;
                field(c) = static_cast<I>(config_value::to_int(v));
            },
            [field](const T& c) { return std::to_string(field(c)); }};
}

template <typename T, typename F>
ConfigKey<T> bool_key(std::string key, std::string doc, F field) {
    return {std::move(key), std::move(doc), [field](T& c, const std::string& v) { field(c) = config_value::to_bool(v); },
            [field](const T& c) { return std::string(field(c) ? "true" : "false"); }};
}

template <typename T, typename F>
ConfigKey<T> string_key(std::string key, std::string doc, F field) {
    return {std::move(key), std::move(doc), [field](T& c, const std::string& v) { field(c) = v; },
            [field](const T& c) { return std::string(field(c)); }};
}

// Applies entries in order. Unknown keys and conversion failures raise ParseError.
template <typename T>
void apply_config(T& cfg, const std::vector<ConfigKey<T>>& table, const std::vector<ConfigEntry>& entries,
                  const std::string& source = "<config>") {
    for (const auto& e : entries) {
        const auto it = std::find_if(table.begin(), table.end(), [&](const auto& k) { return k.key == e.key; });
        if (it == table.end()) throw ParseError(source, e.line, "unknown key '" + e.key + "'");
        try {
            it->set(cfg, e.value);
        } catch (const InputError& err) {
            throw ParseError(source, e.line, e.key + ": " + err.what());
        }
    }
}

// Every key with its current value, one `key = value  # doc` line each.
template <typename T>
std::string dump_config(const T& cfg, const std::vector<ConfigKey<T>>& table, bool with_docs = true) {
    std::ostringstream os;
    for (const auto& k : table) {
        os << k.key << " = " << k.get(cfg);
        if (with_docs && !k.doc.empty()) os << "  # " << k.doc;
        os << "\n";
    }
    return os.str();
}

}  // namespace mvps
