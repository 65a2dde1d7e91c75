#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "ttsf/common.hpp"

namespace ttsf {

// Flat key=value configuration text. One `key = value` pair per line,
// '#' starts a comment, blank lines ignored. Keys are kept sorted so the
// serialized form is canonical.
struct KVMap {
    std::map<std::string, std::string> entries;

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    static KVMap parse_text(const std::string& text, const std::string& origin = "<text>") {
        KVMap kv;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            }
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty()) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            }
            kv.entries[key] = value;
        }
        return kv;
    }

    static KVMap parse_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw DataError("cannot open config file '" + path + "'");
        std::ostringstream buf;
        buf << in.rdbuf();
        return parse_text(buf.str(), path);
    }

    bool has(const std::string& key) const { return entries.count(key) > 0; }

    void set(const std::string& key, const std::string& value) { entries[key] = value; }
    void set_i64(const std::string& key, std::int64_t v) { entries[key] = std::to_string(v); }
    void set_f64(const std::string& key, double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        entries[key] = os.str();
    }
    void set_bool(const std::string& key, bool v) { entries[key] = v ? "true" : "false"; }

    const std::string& get(const std::string& key) const {
        auto it = entries.find(key);
        if (it == entries.end()) throw ConfigError("missing config key '" + key + "'");
        return it->second;
    }

    std::string get_or(const std::string& key, const std::string& fallback) const {
        auto it = entries.find(key);
        return it == entries.end() ? fallback : it->second;
    }

    std::int64_t get_i64(const std::string& key) const {
        try {
            std::size_t pos = 0;
            const std::int64_t v = std::stoll(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
        }
    }

    std::int64_t get_i64_or(const std::string& key, std::int64_t fallback) const {
        return has(key) ? get_i64(key) : fallback;
    }

    double get_f64(const std::string& key) const {
        try {
            std::size_t pos = 0;
            const double v = std::stod(get(key), &pos);
            if (pos != get(key).size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
        }
    }

    double get_f64_or(const std::string& key, double fallback) const {
        return has(key) ? get_f64(key) : fallback;
    }

    bool get_bool_or(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config key '" + key + "' is not a boolean: '" + v + "'");
    }

    std::string to_text() const {
        std::ostringstream os;
        for (const auto& [k, v] : entries) os << k << " = " << v << "\n";
        return os.str();
    }

    void write_file(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw DataError("cannot write config file '" + path + "'");
        out << to_text();
    }

    // FNV-1a over the canonical text; stable across runs and platforms.
    std::string hash_hex() const {
        std::uint64_t h = 1469598103934665603ull;
        for (const char c : to_text()) {
            h ^= static_cast<unsigned char>(c);
            h *= 1099511628211ull;
        }
        std::ostringstream os;
        os << std::hex << h;
        return os.str();
    }
};

}  // namespace ttsf
