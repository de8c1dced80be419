#include "csv.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace ssldyn::harness {

const double* ExperimentRecord::find(const std::string& key) const {
    for (const auto& [k, v] : summary)
        if (k == key) return &v;
    return nullptr;
}

std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

void write_echo(std::ostream& os, const std::string& echo) {
    std::istringstream in(echo);
    std::string line;
    while (std::getline(in, line)) os << "# " << line << '\n';
}

void write_long_csv(std::ostream& os, const std::string& echo, const std::vector<ExperimentRecord>& runs) {
    write_echo(os, echo);
    os << "run_id,step,metric,value\n";
    for (const auto& r : runs)
        for (const auto& p : r.series)
            os << csv_field(r.run_id) << ',' << p.step << ',' << csv_field(p.metric) << ',' << fmt(p.value) << '\n';
}

void write_summary_csv(std::ostream& os, const std::string& echo, const std::vector<ExperimentRecord>& runs) {
    std::vector<std::string> keys;
    for (const auto& r : runs)
        for (const auto& [k, v] : r.summary)
            if (std::find(keys.begin(), keys.end(), k) == keys.end()) keys.push_back(k);
    write_echo(os, echo);
    os << "run_id,status";
    for (const auto& k : keys) os << ',' << csv_field(k);
    os << '\n';
    for (const auto& r : runs) {
        os << csv_field(r.run_id) << ',' << r.status;
        for (const auto& k : keys) {
            os << ',';
            if (const double* v = r.find(k)) os << fmt(*v);
        }
        os << '\n';
    }
}

void write_file(const std::string& path, const std::string& contents) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << contents;
    if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

} // namespace ssldyn::harness
