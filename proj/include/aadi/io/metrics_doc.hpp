/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

/// @file metrics_doc.hpp
/// @brief Metrics document written by the CLI commands.
///
/// JSON with a fixed key order:
///   {
///     "format": "aadi-metrics/1",
///     "command": "...",
///     "seed": N,
///     "config_digest": "<16 hex digits>",
///     "timestamp": "YYYY-MM-DDTHH:MM:SSZ",     (omitted from canonical_text)
///     "metrics": { name: number | null, ... }, insertion order
///     "curves":  { name: [numbers], ... },     insertion order
///     "info":    { name: string, ... }         insertion order
///   }
/// Numbers are printed in shortest round-trip form.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace aadi {

struct MetricsDocument {
    std::string command;
    std::uint64_t seed = 0;
    std::string config_digest;
    std::string timestamp;
    std::vector<std::pair<std::string, std::optional<double>>> metrics;
    std::vector<std::pair<std::string, std::vector<double>>> curves;
    std::vector<std::pair<std::string, std::string>> info;

    void set(const std::string& name, std::optional<double> v) { metrics.emplace_back(name, v); }
    void curve(const std::string& name, std::vector<double> v) { curves.emplace_back(name, std::move(v)); }
    void note(const std::string& name, std::string v) { info.emplace_back(name, std::move(v)); }

    std::optional<double> metric(const std::string& name) const {
        for (const auto& [k, v] : metrics) {
            if (k == name) return v;
        }
        return std::nullopt;
    }

    const std::vector<double>* find_curve(const std::string& name) const {
        for (const auto& [k, v] : curves) {
            if (k == name) return &v;
        }
        return nullptr;
    }

    nlohmann::ordered_json to_json(bool with_timestamp) const {
        nlohmann::ordered_json j;
        j["format"] = "aadi-metrics/1";
        j["command"] = command;
        j["seed"] = seed;
        j["config_digest"] = config_digest;
        if (with_timestamp) j["timestamp"] = timestamp;
        auto& m = j["metrics"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : metrics) {
            if (v && std::isfinite(*v)) {
                m[k] = *v;
            } else {
                m[k] = nullptr;
            }
        }
        auto& c = j["curves"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : curves) c[k] = v;
        auto& n = j["info"] = nlohmann::ordered_json::object();
        for (const auto& [k, v] : info) n[k] = v;
        return j;
    }

    std::string to_text() const { return to_json(true).dump(2) + "\n"; }

    /// Everything except the timestamp; identical for identical (config, seed).
    std::string canonical_text() const { return to_json(false).dump(2) + "\n"; }
};

inline std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace aadi
