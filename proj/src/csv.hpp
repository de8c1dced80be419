#pragma once

// CSV output. Long format is one row per (run_id, step, metric, value); the
// wide summary has one row per run. Every file starts with the config echo
// as '#' comment lines, so readers need comment='#' or equivalent.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace ssldyn::harness {

struct ProbeSample {
    std::size_t step = 0;
    std::string metric;
    double value = 0.0;
};

struct ExperimentRecord {
    std::string run_id;
    std::string config_echo;
    std::vector<ProbeSample> series;
    std::vector<std::pair<std::string, double>> summary; // final reports, in insertion order
    std::string status = "ok";                           // ok | diverged
    std::string message;

    void probe(std::size_t step, const std::string& metric, double value) { series.push_back({step, metric, value}); }
    void report(const std::string& key, double value) { summary.emplace_back(key, value); }
    const double* find(const std::string& key) const;
};

// Shortest text that reads back to the same double; nan and inf spelled out.
std::string fmt(double v);
std::string csv_field(const std::string& s);

void write_echo(std::ostream& os, const std::string& echo);
void write_long_csv(std::ostream& os, const std::string& echo, const std::vector<ExperimentRecord>& runs);
// Columns: run_id, status, then every summary key in order of first appearance.
void write_summary_csv(std::ostream& os, const std::string& echo, const std::vector<ExperimentRecord>& runs);

// Creates parent directories and writes atomically enough for our use
// (write to path, throw on failure).
void write_file(const std::string& path, const std::string& contents);

} // namespace ssldyn::harness
