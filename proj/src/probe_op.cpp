#include "experiments.hpp"
#include "fixtures.hpp"

#include "ssldyn/covop.hpp"

#include <sstream>

namespace ssldyn::harness {

OutputFiles probe_op(const ExperimentConfig& cfg) {
    cfg.validate();
    if (cfg.model != "hltm") throw ConfigError("probe-op: model.kind must be hltm");
    SimclrTrial tr = make_simclr_trial(cfg, cfg.seed);
    if (tr.tree.num_leaves() > kMaxEnumeratedLeaves)
        throw ConfigError("probe-op: operators are enumerated exactly and need a tree with at most 16 leaves");
    const std::size_t l = cfg.probe_layer ? cfg.probe_layer : tr.tn.net.num_linear();
    if (l > tr.tn.net.num_linear()) throw ConfigError("probes.layer exceeds the number of linear layers");
    const AugmentedDataset ds = hltm_dataset(tr.tree);
    const SimclrOptions opt = simclr_options(cfg);
    const std::string echo = cfg.echo();

    OutputFiles out;
    std::ostringstream spec;
    write_echo(spec, echo);
    spec << "phase,operator,index,eigenvalue,cos_with_w,min_eig,frobenius\n";
    auto emit = [&](const std::string& phase) {
        const Network& net = tr.tn.net;
        const ConnStats s = compute_stats(net, ds, l);
        const Vec w = vec(net.weight(l));
        for (const auto& kind : cfg.operators) {
            CovOperator op;
            if (kind == "simp") op = op_simp(s, l);
            else if (kind == "weighted") op = op_weighted(s, ds, LossKind::info_nce(cfg.tau), l);
            else if (kind == "ev") op = op_beta(s, 0.0, l).EV;
            else op = op_beta(s, 0.0, l).VE;
            std::ostringstream os;
            write_echo(os, echo);
            write_operator_csv(os, op, cfg.seed);
            out["op_" + kind + "_l" + std::to_string(l) + "_" + phase + ".csv"] = os.str();
            const SpectrumSummary sum = spectrum_summary(op.m, w);
            for (std::size_t i = 0; i < sum.top.size(); ++i)
                spec << phase << ',' << kind << ',' << i << ',' << fmt(sum.top[i]) << ',' << fmt(sum.cos_with_w[i]) << ','
                     << fmt(sum.min_eig) << ',' << fmt(op.m.frobenius()) << '\n';
        }
    };
    emit("init");
    for (std::size_t ep = 0; ep < cfg.epochs; ++ep) simclr_epoch(tr.tn.net, tr.tree, tr.roots, opt, tr.rng);
    emit("trained");
    out["spectrum.csv"] = spec.str();
    return out;
}

} // namespace ssldyn::harness
