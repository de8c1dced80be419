#include "experiments.hpp"
#include "fixtures.hpp"
#include "pool.hpp"

#include <sstream>

namespace ssldyn::harness {

const PairedComparison* AblationResult::comparison(const std::string& with, const std::string& without) const {
    for (const auto& c : comparisons)
        if (c.with == with && c.without == without) return &c;
    return nullptr;
}

namespace {

std::string cell_key(const CellFlags& f) {
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (on) s += (s.empty() ? "" : "+") + std::string(name);
    };
    add(f.predictor, "P");
    add(f.bn, "BN");
    add(f.ema, "EMA");
    return s.empty() ? "none" : s;
}

} // namespace

AblationResult byol_ablate(const ExperimentConfig& cfg, std::size_t threads) {
    cfg.validate();
    if (cfg.loss != "byol") throw ConfigError("byol-ablate: loss.kind must be byol");
    AblationResult res;
    struct Trial {
        std::size_t cell, seed;
        ExperimentConfig cfg;
    };
    std::vector<Trial> trials;
    for (const auto& name : cfg.cells) {
        res.cells.push_back({cell_key(parse_cell(name)), {}, {}});
        for (std::size_t s = 0; s < cfg.seeds; ++s) {
            ExperimentConfig c = apply_cell(cfg, name);
            c.seed = cfg.seed + s;
            for (const char* m : {"nc", "collapse"})
                if (std::find(c.probes.begin(), c.probes.end(), m) == c.probes.end()) c.probes.push_back(m);
            trials.push_back({res.cells.size() - 1, s, c});
        }
    }
    res.runs.resize(trials.size());
    parallel_for(trials.size(), threads, [&](std::size_t i) {
        res.runs[i] = train(trials[i].cfg);
        res.runs[i].run_id = res.cells[trials[i].cell].name + "_s" + std::to_string(trials[i].seed);
    });
    for (std::size_t i = 0; i < trials.size(); ++i) {
        const ExperimentRecord& r = res.runs[i];
        const double* nc = r.find("final_nc");
        const double* col = r.find("final_collapse");
        const bool ok = r.status == "ok";
        res.cells[trials[i].cell].nc.push_back(nc && ok ? *nc : std::nan(""));
        res.cells[trials[i].cell].collapse.push_back(col && ok ? *col : std::nan(""));
    }

    // each cell against the same cell without BN, and without the predictor
    auto find_cell = [&](const std::string& key) -> const AblationCell* {
        for (const auto& c : res.cells)
            if (c.name == key) return &c;
        return nullptr;
    };
    for (const auto& c : res.cells) {
        const CellFlags f = parse_cell(c.name);
        for (int drop = 0; drop < 2; ++drop) {
            CellFlags g = f;
            bool& flag = drop == 0 ? g.bn : g.predictor;
            if (!flag) continue;
            flag = false;
            const AblationCell* other = find_cell(cell_key(g));
            if (!other) continue;
            PairedComparison pc;
            pc.with = c.name;
            pc.without = other->name;
            for (std::size_t s = 0; s < c.nc.size(); ++s) pc.diffs.push_back(c.nc[s] - other->nc[s]);
            pc.median_paired_diff = median(pc.diffs);
            pc.diff_of_medians = median(c.nc) - median(other->nc);
            res.comparisons.push_back(pc);
        }
    }

    const std::string echo = cfg.echo();
    std::ostringstream sm, paired, runs, rep;
    write_echo(sm, echo);
    sm << "cell,seeds,nc_median,nc_mean,nc_std,collapse_median,collapse_mean\n";
    rep << "BYOL ablation: root NC after " << cfg.steps << " steps, " << cfg.seeds << " paired seeds\n";
    for (const auto& c : res.cells) {
        sm << c.name << ',' << c.nc.size() << ',' << fmt(median(c.nc)) << ',' << fmt(mean(c.nc)) << ',' << fmt(stddev(c.nc))
           << ',' << fmt(median(c.collapse)) << ',' << fmt(mean(c.collapse)) << '\n';
        char line[200];
        std::snprintf(line, sizeof line, "  %-10s NC median %.3f mean %.3f+-%.3f  collapse median %.4g\n", c.name.c_str(),
                      median(c.nc), mean(c.nc), stddev(c.nc), median(c.collapse));
        rep << line;
    }
    write_echo(paired, echo);
    paired << "with,without,median_paired_diff,diff_of_medians,mean_diff\n";
    for (const auto& p : res.comparisons) {
        paired << p.with << ',' << p.without << ',' << fmt(p.median_paired_diff) << ',' << fmt(p.diff_of_medians) << ','
               << fmt(mean(p.diffs)) << '\n';
        char line[200];
        std::snprintf(line, sizeof line, "  %s vs %s: median paired diff %.3f, diff of medians %.3f\n", p.with.c_str(),
                      p.without.c_str(), p.median_paired_diff, p.diff_of_medians);
        rep << line;
    }
    for (const auto& r : res.runs)
        if (r.status != "ok") rep << "  run " << r.run_id << ": " << r.status << " " << r.message << "\n";
    for (std::size_t k = 0; k < res.cells.size(); ++k) {
        std::vector<ExperimentRecord> mine;
        for (std::size_t i = 0; i < trials.size(); ++i)
            if (trials[i].cell == k) mine.push_back(res.runs[i]);
        std::ostringstream cell_csv;
        write_long_csv(cell_csv, echo, mine);
        res.files["byol_cell_" + res.cells[k].name + ".csv"] = cell_csv.str();
    }
    write_summary_csv(runs, echo, res.runs);
    res.files["byol_ablate_summary.csv"] = sm.str();
    res.files["byol_ablate_paired.csv"] = paired.str();
    res.files["byol_ablate_runs.csv"] = runs.str();
    res.files["byol_ablate_report.txt"] = rep.str();
    return res;
}

} // namespace ssldyn::harness
