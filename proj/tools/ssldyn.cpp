#include "config.hpp"
#include "experiments.hpp"
#include "pool.hpp"
#include "verify.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

using namespace ssldyn::harness;

namespace {

struct GlobalOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::size_t threads = 0; // 0: hardware concurrency
    std::string tolerance = "default";
};

ExperimentConfig table_defaults() {
    ExperimentConfig c;
    c.probe_every = 10;
    return c;
}

ExperimentConfig ablate_defaults() {
    ExperimentConfig c;
    c.loss = "byol";
    c.lr = 0.3;
    c.steps = 1000;
    c.probe_every = 1000;
    c.l2_normalize = false;
    c.cells = {"P", "P+BN", "BN", "none"};
    return c;
}

ExperimentConfig toy1d_defaults() {
    ExperimentConfig c;
    c.model = "toy1d";
    return c;
}

ExperimentConfig probe_defaults() {
    ExperimentConfig c;
    c.tree.depth = 3;
    c.epochs = 10;
    c.samples = 8192;
    c.operators = {"simp", "weighted", "ev", "ve"};
    return c;
}

ExperimentConfig resolve(const GlobalOptions& g, const ExperimentConfig& base) {
    ExperimentConfig c = g.config.empty() ? base : ExperimentConfig::load(g.config, base);
    if (g.seed) c.seed = *g.seed;
    c.validate();
    return c;
}

std::size_t threads_of(const GlobalOptions& g) { return g.threads ? g.threads : default_threads(); }

void emit(const GlobalOptions& g, const OutputFiles& files) {
    write_outputs(g.out, files);
    for (const auto& [name, text] : files)
        if (name.size() > 4 && name.substr(name.size() - 4) == ".txt") std::cout << text;
    std::cout << "wrote " << files.size() << " files to " << g.out << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Numerical lab for dual-network self-supervised learning dynamics"};
    app.require_subcommand(1);
    GlobalOptions g;
    app.add_option("--config", g.config, "INI config file")->check(CLI::ExistingFile);
    app.add_option("--seed", g.seed, "Base seed, overrides run.seed");
    app.add_option("--out", g.out, "Output directory");
    app.add_option("--threads", g.threads, "Worker threads (0: all cores)");
    app.add_option("--tolerance", g.tolerance, "Verification tolerance profile")
        ->check(CLI::IsMember({"strict", "default"}));

    auto* verify = app.add_subcommand("verify", "Check every result against its oracle");
    std::vector<std::string> fixtures;
    std::string mutate;
    bool list = false;
    verify->add_option("--fixtures", fixtures, "Suite ids or fixture names to run")->delimiter(',');
    verify->add_option("--mutate", mutate, "Perturb one suite's closed form to check that it fails");
    verify->add_flag("--list", list, "List suites and exit");

    auto* train_cmd = app.add_subcommand("train", "One training run with probes");
    auto* table = app.add_subcommand("table-hltm", "Root NC grid over polarity range and width");
    auto* toy = app.add_subcommand("toy1d", "Translation-model operators and growth");
    auto* ablate = app.add_subcommand("byol-ablate", "BYOL predictor/BN/EMA ablation");
    auto* probe = app.add_subcommand("probe-op", "Covariance operators and spectra at init and after training");
    for (auto* sub : app.get_subcommands({})) sub->fallthrough();

    CLI11_PARSE(app, argc, argv);

    try {
        if (verify->parsed()) {
            if (list) {
                for (const auto& s : list_suites()) std::cout << s.id << "  [" << s.fixture << "]  " << s.description << "\n";
                return 0;
            }
            const ExperimentConfig cfg = resolve(g, ExperimentConfig{});
            VerifyOptions opt;
            opt.profile = parse_profile(g.tolerance);
            opt.fixtures = fixtures.empty() ? cfg.fixtures : std::optional(fixtures);
            opt.mutate = mutate;
            opt.seed = cfg.seed;
            opt.threads = threads_of(g);
            const VerifyReport rep = verify_all(opt);
            emit(g, verify_outputs(rep, cfg.echo()));
            return rep.ok() ? 0 : 1;
        }
        if (train_cmd->parsed()) emit(g, train_outputs(resolve(g, ExperimentConfig{})));
        else if (table->parsed()) emit(g, reproduce_table_hltm(resolve(g, table_defaults()), threads_of(g)).files);
        else if (toy->parsed()) emit(g, toy1d_outputs(resolve(g, toy1d_defaults()), threads_of(g)));
        else if (ablate->parsed()) emit(g, byol_ablate(resolve(g, ablate_defaults()), threads_of(g)).files);
        else if (probe->parsed()) emit(g, probe_op(resolve(g, probe_defaults())));
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
