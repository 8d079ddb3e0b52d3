#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "rawflow/common.hpp"

namespace rawflow {

// Flat key=value text config. '#' starts a comment; blank lines ignored.
// Overrides are applied after loading (CLI --set key=value). Typed getters
// validate values; unknown_keys() supports schema checks.
class Config {
public:
    Config() = default;

    static Config load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw io_error("Config: cannot open " + path);
        Config cfg;
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string trimmed = trim(line);
            if (trimmed.empty()) continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos)
                throw parse_error("Config: missing '=' at " + path + ":" +
                                  std::to_string(lineno));
            cfg.set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (key.empty()) throw parse_error("Config: empty key");
        values_[key] = value;
    }

    // "key=value" form used by --set flags
    void set_pair(const std::string& pair) {
        const auto eq = pair.find('=');
        if (eq == std::string::npos)
            throw parse_error("Config: override must be key=value: " + pair);
        set(trim(pair.substr(0, eq)), trim(pair.substr(eq + 1)));
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& dflt) const {
        const auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    double get_double(const std::string& key, double dflt) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            std::size_t used = 0;
            const double v = std::stod(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw parse_error("Config: '" + key + "' is not a number: " + it->second);
        }
    }

    long get_int(const std::string& key, long dflt) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        try {
            std::size_t used = 0;
            const long v = std::stol(it->second, &used);
            if (used != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw parse_error("Config: '" + key + "' is not an integer: " + it->second);
        }
    }

    bool get_bool(const std::string& key, bool dflt) const {
        const auto it = values_.find(key);
        if (it == values_.end()) return dflt;
        if (it->second == "true" || it->second == "1") return true;
        if (it->second == "false" || it->second == "0") return false;
        throw parse_error("Config: '" + key + "' is not a bool: " + it->second);
    }

    // Keys not in the allowed set; a non-empty result means a typo'd config.
    std::vector<std::string> unknown_keys(const std::vector<std::string>& allowed) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : values_) {
            bool found = false;
            for (const auto& a : allowed)
                if (a == k) {
                    found = true;
                    break;
                }
            if (!found) out.push_back(k);
        }
        return out;
    }

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace rawflow
