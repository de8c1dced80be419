#pragma once

// Training runs and the grids built from them. Every command returns the
// files it would write as (relative name, contents) so that callers can
// compare outputs without touching the disk.

#include "config.hpp"
#include "csv.hpp"

#include "ssldyn/network.hpp"

#include <map>
#include <string>
#include <vector>

namespace ssldyn::harness {

using OutputFiles = std::map<std::string, std::string>;

struct TrainResult {
    ExperimentRecord record;
    Network initial;
    Network final;
};

// SGD on the configured loss (info_nce: contrastive, byol: BYOL) with the
// configured probes. Step 0 holds the init-only probes. A non-finite loss
// stops the run with status "diverged".
TrainResult train_full(const ExperimentConfig& cfg, const std::string& run_id = "run0");
inline ExperimentRecord train(const ExperimentConfig& cfg) { return train_full(cfg).record; }
OutputFiles train_outputs(const ExperimentConfig& cfg);

struct TableCell {
    double rho_lo = 0, rho_hi = 0;
    std::size_t per_latent = 0;
    std::vector<double> init, converged; // root NC per seed
};

struct TableResult {
    std::vector<ExperimentRecord> runs;
    std::vector<TableCell> cells;
    OutputFiles files;

    const TableCell* cell(double rho_lo, std::size_t per_latent) const;
};

// Grid over grid.rho_lo x grid.per_latent x grid.seeds contrastive runs;
// init and converged root NC per run, mean/std/median per cell.
TableResult reproduce_table_hltm(const ExperimentConfig& cfg, std::size_t threads);

struct AblationCell {
    std::string name;
    std::vector<double> nc, collapse; // per seed
};

struct PairedComparison {
    std::string with, without;
    double median_paired_diff = 0; // median over seeds of NC(with) - NC(without)
    double diff_of_medians = 0;
    std::vector<double> diffs;
};

struct AblationResult {
    std::vector<ExperimentRecord> runs;
    std::vector<AblationCell> cells;
    std::vector<PairedComparison> comparisons;
    OutputFiles files;

    const PairedComparison* comparison(const std::string& with, const std::string& without) const;
};

// BYOL runs for every grid.cells entry and seed. Seeds are paired: seed s
// uses the same tree and initial backbone in every cell.
AblationResult byol_ablate(const ExperimentConfig& cfg, std::size_t threads);

// Covariance operators of the configured tree network at init and after
// optim.epochs contrastive epochs, with spectra.
OutputFiles probe_op(const ExperimentConfig& cfg);

// Translation-model operators, growth traces and init selectivity.
OutputFiles toy1d_outputs(const ExperimentConfig& cfg, std::size_t threads);

void write_outputs(const std::string& dir, const OutputFiles& files);

} // namespace ssldyn::harness
