#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgdrop {

/// Raised for bad user input (config files, flags); the CLI maps it to
/// exit code 1, runtime failures to 2.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key=value store. File format: one `key = value` per line, lines whose
/// first non-space character is '#' are comments. Writing preserves insertion
/// order and is byte-deterministic.
class KvMap {
public:
    static KvMap parse_text(const std::string& text, const std::string& origin = "<text>") {
        KvMap kv;
        std::istringstream in(text);
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + t + "'");
            const std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            if (key.empty())
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
            kv.set(key, value);
        }
        return kv;
    }

    static KvMap parse_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file: " + path);
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return parse_text(text, path);
    }

    void set(const std::string& key, const std::string& value) {
        auto it = index_.find(key);
        if (it == index_.end()) {
            index_[key] = items_.size();
            items_.emplace_back(key, value);
        } else {
            items_[it->second].second = value;
        }
    }

    bool has(const std::string& key) const { return index_.count(key) != 0; }

    const std::string& get(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("missing config key: " + key);
        return items_[it->second].second;
    }

    std::string get_or(const std::string& key, const std::string& def) const {
        auto it = index_.find(key);
        return it == index_.end() ? def : items_[it->second].second;
    }

    double get_double(const std::string& key, double def) const {
        if (!has(key)) return def;
        return to_double(key, get(key));
    }

    long long get_int(const std::string& key, long long def) const {
        if (!has(key)) return def;
        const std::string& v = get(key);
        try {
            std::size_t pos = 0;
            const long long r = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": expected an integer, got '" + v + "'");
        }
    }

    std::size_t get_size(const std::string& key, std::size_t def) const {
        const long long v = get_int(key, static_cast<long long>(def));
        if (v < 0) throw ConfigError("config key " + key + ": must be >= 0");
        return static_cast<std::size_t>(v);
    }

    bool get_bool(const std::string& key, bool def) const {
        if (!has(key)) return def;
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
        if (v == "false" || v == "0" || v == "no" || v == "off") return false;
        throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
    }

    const std::vector<std::pair<std::string, std::string>>& items() const { return items_; }

    void write_file(const std::string& path) const {
        std::ofstream f(path, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + path);
        for (const auto& [k, v] : items_) f << k << "=" << v << "\n";
        if (!f) throw std::runtime_error("write failed for " + path);
    }

private:
    static std::string trim(const std::string& s) {
        std::size_t a = 0, b = s.size();
        while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
        while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
        return s.substr(a, b - a);
    }

    static double to_double(const std::string& key, const std::string& v) {
        try {
            std::size_t pos = 0;
            const double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": expected a number, got '" + v + "'");
        }
    }

    std::vector<std::pair<std::string, std::string>> items_;
    std::map<std::string, std::size_t> index_;
};

} // namespace sgdrop
