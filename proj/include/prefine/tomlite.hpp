#pragma once

// Minimal TOML reader covering the subset this project emits and consumes:
// comments, [sections], and key = value pairs with string / integer / float /
// boolean / flat-array values. Keys are flattened to "section.key".

#include <cctype>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "prefine/common.hpp"

namespace prefine::toml {

struct Value;
using Array = std::vector<Value>;

struct Value {
    std::variant<int64_t, double, bool, std::string, Array> v;

    bool is_int() const { return std::holds_alternative<int64_t>(v); }
    bool is_real() const { return is_int() || std::holds_alternative<double>(v); }
    bool is_bool() const { return std::holds_alternative<bool>(v); }
    bool is_string() const { return std::holds_alternative<std::string>(v); }
    bool is_array() const { return std::holds_alternative<Array>(v); }

    int64_t as_int() const { return std::get<int64_t>(v); }
    double as_real() const { return is_int() ? static_cast<double>(as_int()) : std::get<double>(v); }
    bool as_bool() const { return std::get<bool>(v); }
    const std::string& as_string() const { return std::get<std::string>(v); }
    const Array& as_array() const { return std::get<Array>(v); }
};

using Table = std::map<std::string, Value>;

namespace detail {

inline void skip_ws(const std::string& s, size_t& i) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
}

inline Value parse_value(const std::string& s, size_t& i, int line);

inline Value parse_scalar(const std::string& s, size_t& i, int line) {
    skip_ws(s, i);
    if (i >= s.size()) throw ConfigError("toml", "missing value on line " + std::to_string(line));
    const char c = s[i];
    if (c == '"') {
        std::string out;
        ++i;
        while (i < s.size() && s[i] != '"') {
            if (s[i] == '\\' && i + 1 < s.size()) {
                ++i;
                switch (s[i]) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default:
                        throw ConfigError("toml", "bad escape on line " + std::to_string(line));
                }
            } else {
                out += s[i];
            }
            ++i;
        }
        if (i >= s.size()) throw ConfigError("toml", "unterminated string on line " + std::to_string(line));
        ++i;
        return Value{out};
    }
    if (s.compare(i, 4, "true") == 0) {
        i += 4;
        return Value{true};
    }
    if (s.compare(i, 5, "false") == 0) {
        i += 5;
        return Value{false};
    }
    // number: int unless it contains '.', 'e', 'E', or the words inf/nan
    size_t start = i;
    while (i < s.size() && (std::isalnum(static_cast<unsigned char>(s[i])) || s[i] == '+' ||
                            s[i] == '-' || s[i] == '.' || s[i] == '_')) {
        ++i;
    }
    std::string tok = s.substr(start, i - start);
    if (tok.empty()) throw ConfigError("toml", "bad value on line " + std::to_string(line));
    std::string clean;
    for (char ch : tok)
        if (ch != '_') clean += ch;
    const bool is_float = clean.find_first_of(".eE") != std::string::npos ||
                          clean.find("inf") != std::string::npos || clean.find("nan") != std::string::npos;
    try {
        if (is_float) return Value{std::stod(clean)};
        return Value{static_cast<int64_t>(std::stoll(clean))};
    } catch (const std::exception&) {
        throw ConfigError("toml", "cannot parse number '" + tok + "' on line " + std::to_string(line));
    }
}

inline Value parse_value(const std::string& s, size_t& i, int line) {
    skip_ws(s, i);
    if (i < s.size() && s[i] == '[') {
        Array arr;
        ++i;
        skip_ws(s, i);
        if (i < s.size() && s[i] == ']') {
            ++i;
            return Value{arr};
        }
        while (true) {
            arr.push_back(parse_value(s, i, line));
            skip_ws(s, i);
            if (i < s.size() && s[i] == ',') {
                ++i;
                continue;
            }
            if (i < s.size() && s[i] == ']') {
                ++i;
                return Value{arr};
            }
            throw ConfigError("toml", "bad array on line " + std::to_string(line));
        }
    }
    return parse_scalar(s, i, line);
}

}  // namespace detail

inline Table parse(const std::string& text) {
    Table out;
    std::string section;
    size_t pos = 0;
    int line = 0;
    while (pos < text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string raw = text.substr(pos, eol - pos);
        pos = eol + 1;
        ++line;
        if (!raw.empty() && raw.back() == '\r') raw.pop_back();

        size_t i = 0;
        detail::skip_ws(raw, i);
        if (i >= raw.size() || raw[i] == '#') continue;
        if (raw[i] == '[') {
            size_t close = raw.find(']', i);
            if (close == std::string::npos)
                throw ConfigError("toml", "unterminated section on line " + std::to_string(line));
            section = raw.substr(i + 1, close - i - 1);
            continue;
        }
        size_t eq = raw.find('=', i);
        if (eq == std::string::npos)
            throw ConfigError("toml", "expected key = value on line " + std::to_string(line));
        std::string key = raw.substr(i, eq - i);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        if (key.empty()) throw ConfigError("toml", "empty key on line " + std::to_string(line));
        size_t vi = eq + 1;
        Value val = detail::parse_value(raw, vi, line);
        detail::skip_ws(raw, vi);
        if (vi < raw.size() && raw[vi] != '#')
            throw ConfigError("toml", "trailing characters on line " + std::to_string(line));
        out[section.empty() ? key : section + "." + key] = std::move(val);
    }
    return out;
}

inline Table parse_file(const std::filesystem::path& path) {
    return parse(read_file(path));
}

}  // namespace prefine::toml
