#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace voldet {

/// Flat `key = value` configuration with a closed key registry. Files use one
/// pair per line with `#` comments; every key not in the registry is
/// rejected. Environment variables VOLDET_<KEY> (uppercase, non-alphanumerics
/// as underscores) override file values.
class RunConfig {
public:
    /// Registry defaults (the desk-scale configuration).
    static RunConfig defaults();

    /// defaults ->  file overrides -> environment overrides.
    static RunConfig load(const std::string& path, bool apply_env = true);

    void set(const std::string& key, const std::string& value);
    bool has(const std::string& key) const;

    const std::string& get_str(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<std::int64_t> get_int_list(const std::string& key) const; // comma-separated

    void apply_env_overrides();

    /// Canonical sorted `key = value` text (the config-hash input).
    std::string canonical_text() const;
    std::uint64_t hash() const;

    static std::string env_name(const std::string& key);

private:
    std::map<std::string, std::string> values_;
};

} // namespace voldet
