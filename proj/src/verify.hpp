#pragma once

// Theorem-verification suite. Each suite checks one result against an
// independent computation on a named fixture and reports a measured error
// next to its tolerance.

#include "config.hpp"
#include "experiments.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ssldyn::harness {

enum class ToleranceProfile { Default, Strict };

ToleranceProfile parse_profile(const std::string& s);
std::string profile_name(ToleranceProfile p);

struct CheckRow {
    std::string theorem; // suite id
    std::string fixture;
    std::string quantity;
    double measured = 0;
    double tolerance = 0;
    bool pass = false;
};

struct SuiteInfo {
    std::string id;
    std::string fixture;
    std::string description;
};

const std::vector<SuiteInfo>& list_suites();

struct VerifyOptions {
    ToleranceProfile profile = ToleranceProfile::Default;
    // Suite ids or fixture names to run; unset runs everything, empty runs nothing.
    std::optional<std::vector<std::string>> fixtures;
    // Suite id whose closed form is perturbed by a relative 1e-3, to check
    // that the suite notices.
    std::string mutate;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct VerifyReport {
    std::vector<CheckRow> rows;
    bool ok() const;
    std::vector<const CheckRow*> for_suite(const std::string& id) const;
    bool suite_ok(const std::string& id) const;
};

// Throws ConfigError for unknown ids in fixtures or mutate.
VerifyReport verify_all(const VerifyOptions& opt);

OutputFiles verify_outputs(const VerifyReport& rep, const std::string& echo);

} // namespace ssldyn::harness
