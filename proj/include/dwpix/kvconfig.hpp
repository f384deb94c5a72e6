#pragma once

#include <cinttypes>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dwpix/common.hpp"

// Flat key/value configuration files:
//   # comment
//   key = value
// Values are scalars or comma-separated lists. Keys are dotted paths
// (e.g. "device.r_p0_ohm"). Used for device parameters, fit models and
// run manifests; the schema of each file type is documented in docs/.

namespace dwpix {

class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse(const std::string& text) {
        KvConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            require_user(eq != std::string::npos,
                         "config line " + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
            const std::string key = trim(t.substr(0, eq));
            const std::string val = trim(t.substr(eq + 1));
            require_user(!key.empty(), "config line " + std::to_string(lineno) + ": empty key");
            cfg.set(key, val);
        }
        return cfg;
    }

    static KvConfig load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        require_user(f.good(), "cannot open config file: " + path);
        std::ostringstream ss;
        ss << f.rdbuf();
        return parse(ss.str());
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) {
        if (!values_.count(key)) order_.push_back(key);
        values_[key] = value;
    }
    void set_double(const std::string& key, double v) { set(key, fmt_double(v)); }
    void set_int(const std::string& key, std::int64_t v) { set(key, std::to_string(v)); }
    void set_u64(const std::string& key, std::uint64_t v) { set(key, std::to_string(v)); }
    void set_doubles(const std::string& key, const std::vector<double>& vs) {
        std::string s;
        for (size_t i = 0; i < vs.size(); ++i) {
            if (i) s += ",";
            s += fmt_double(vs[i]);
        }
        set(key, s);
    }

    const std::string& get_string(const std::string& key) const {
        auto it = values_.find(key);
        require_user(it != values_.end(), "missing config key: " + key);
        return it->second;
    }
    std::string get_string_or(const std::string& key, const std::string& dflt) const {
        auto it = values_.find(key);
        return it == values_.end() ? dflt : it->second;
    }

    double get_double(const std::string& key) const { return to_double(get_string(key), key); }
    double get_double_or(const std::string& key, double dflt) const {
        return has(key) ? get_double(key) : dflt;
    }
    std::int64_t get_int(const std::string& key) const {
        const std::string& s = get_string(key);
        try {
            size_t pos = 0;
            const std::int64_t v = std::stoll(s, &pos);
            require_user(pos == s.size(), "config key " + key + ": not an integer: '" + s + "'");
            return v;
        } catch (const std::invalid_argument&) {
            throw UserError("config key " + key + ": not an integer: '" + s + "'");
        } catch (const std::out_of_range&) {
            throw UserError("config key " + key + ": integer out of range: '" + s + "'");
        }
    }
    std::int64_t get_int_or(const std::string& key, std::int64_t dflt) const {
        return has(key) ? get_int(key) : dflt;
    }
    std::uint64_t get_u64(const std::string& key) const {
        const std::string& s = get_string(key);
        try {
            size_t pos = 0;
            const std::uint64_t v = std::stoull(s, &pos);
            require_user(pos == s.size(), "config key " + key + ": not an unsigned integer: '" + s + "'");
            return v;
        } catch (const std::invalid_argument&) {
            throw UserError("config key " + key + ": not an unsigned integer: '" + s + "'");
        } catch (const std::out_of_range&) {
            throw UserError("config key " + key + ": integer out of range: '" + s + "'");
        }
    }
    std::vector<double> get_doubles(const std::string& key) const {
        const std::string& s = get_string(key);
        std::vector<double> out;
        std::istringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(to_double(trim(item), key));
        require_user(!out.empty(), "config key " + key + ": empty list");
        return out;
    }

    /// Serialize in insertion order (deterministic output).
    std::string dump() const {
        std::string out;
        for (const auto& k : order_) {
            out += k;
            out += " = ";
            out += values_.at(k);
            out += "\n";
        }
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        require_user(f.good(), "cannot write config file: " + path);
        f << dump();
    }

    const std::vector<std::string>& keys() const { return order_; }

    /// Round-trip exact double formatting.
    static std::string fmt_double(double v) {
        char buf[40];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }

private:
    static std::string trim(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    static double to_double(const std::string& s, const std::string& key) {
        try {
            size_t pos = 0;
            const double v = std::stod(s, &pos);
            require_user(pos == s.size(), "config key " + key + ": not a number: '" + s + "'");
            return v;
        } catch (const std::invalid_argument&) {
            throw UserError("config key " + key + ": not a number: '" + s + "'");
        } catch (const std::out_of_range&) {
            throw UserError("config key " + key + ": number out of range: '" + s + "'");
        }
    }

    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
};

} // namespace dwpix
