#include "experiments.hpp"
#include "fixtures.hpp"
#include "pool.hpp"

#include "ssldyn/toy1d.hpp"

#include <sstream>

namespace ssldyn::harness {

namespace {

// First draw from the stream that is selective for a single pattern.
NeuronSpec selective_init(const Toy1dModel& m, const ExperimentConfig& cfg, Rng& rng) {
    const auto patterns = local_patterns(m, cfg.toy_width);
    const double lim = cfg.sigma_w * std::sqrt(3.0 / static_cast<double>(cfg.toy_width));
    for (int tries = 0; tries < 100000; ++tries) {
        NeuronSpec n;
        n.kind = NeuronKind::LocalRelu;
        n.width = cfg.toy_width;
        n.w.resize(cfg.toy_width);
        for (auto& v : n.w) v = rng.uniform(-lim, lim);
        if (cfg.toy_bias) n.bias = rng.uniform(-lim, lim);
        if (selective_pattern(n, patterns)) return n;
    }
    throw std::runtime_error("toy1d: no selective initial neuron found");
}

void write_matrix(std::ostream& os, const Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? "," : "") << fmt(m(i, j));
        os << '\n';
    }
}

struct Toy1dRun {
    ExperimentRecord rec;
    std::map<std::string, std::string> files;
};

} // namespace

OutputFiles toy1d_outputs(const ExperimentConfig& cfg, std::size_t threads) {
    cfg.validate();
    const std::string echo = cfg.echo();
    std::vector<Toy1dRun> runs(cfg.toy_d.size());
    parallel_for(runs.size(), threads, [&](std::size_t i) {
        const std::size_t d = cfg.toy_d[i];
        const Toy1dModel m(d);
        Rng rng = Rng(cfg.seed).split(d);
        Toy1dRun& run = runs[i];
        run.rec.run_id = "d" + std::to_string(d);

        NeuronSpec global, local;
        local.kind = NeuronKind::LocalLinear;
        local.width = cfg.toy_width;
        const NeuronSpec relu = selective_init(m, cfg, rng);
        for (const NeuronSpec* n : std::initializer_list<const NeuronSpec*>{&global, &local, &relu}) {
            const CovOperator op = enumerate_op(m, *n);
            std::ostringstream os;
            write_echo(os, echo);
            os << "# d=" << d << " neuron=" << n->name() << "\n";
            write_matrix(os, op.m);
            run.files["toy1d_op_d" + std::to_string(d) + "_" + n->name() + ".csv"] = os.str();
            run.rec.report("op_frobenius_" + n->name(), op.m.frobenius());
        }

        const GrowthTrace g = growth_trace(m, relu, cfg.toy_alpha, cfg.toy_steps);
        for (std::size_t t = 0; t < g.proj.size(); ++t) run.rec.probe(t, "proj", g.proj[t]);
        run.rec.probe(0, "response_gap", response_gap(m, relu));
        run.rec.probe(g.steps_run, "response_gap", response_gap(m, g.final));
        run.rec.report("c_p", g.c_p);
        run.rec.report("expected_ratio", g.expected_ratio);
        run.rec.report("max_ratio_err", g.max_ratio_err);
        run.rec.report("monotone", g.monotone);
        run.rec.report("flipped", g.flipped);
        run.rec.report("steps_run", static_cast<double>(g.steps_run));
        const Rng init_rng = Rng(cfg.seed).split(1000 + d);
        run.rec.report("init_selectivity", init_selectivity_probability(m, cfg.toy_width, cfg.sigma_w, cfg.toy_trials,
                                                                        init_rng, cfg.toy_bias));
    });

    OutputFiles out;
    std::vector<ExperimentRecord> recs;
    for (auto& r : runs) {
        out.insert(r.files.begin(), r.files.end());
        recs.push_back(r.rec);
    }
    std::ostringstream lg, sm;
    write_long_csv(lg, echo, recs);
    write_summary_csv(sm, echo, recs);
    out["toy1d_growth.csv"] = lg.str();
    out["toy1d_summary.csv"] = sm.str();
    return out;
}

} // namespace ssldyn::harness
