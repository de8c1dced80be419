#include "experiments.hpp"
#include "fixtures.hpp"

#include "ssldyn/covop.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

namespace ssldyn::harness {

namespace {

bool wants(const ExperimentConfig& cfg, const std::string& m) {
    return std::find(cfg.probes.begin(), cfg.probes.end(), m) != cfg.probes.end();
}

// Records every requested probe except the loss.
struct Prober {
    const ExperimentConfig& cfg;
    const HltmTree& tree;
    const LabeledSamples& eval;
    const AugmentedDataset* collapse_ds;
    std::optional<AugmentedDataset> exact; // for op_norm

    void check(const Network& net) {
        if (wants(cfg, "op_norm")) {
            if (tree.num_leaves() > kMaxEnumeratedLeaves)
                throw ConfigError("probes.metrics: op_norm needs a tree with at most 16 leaves");
            if (net.has_batch_coupling(BackMode::Jacobian))
                throw ConfigError("probes.metrics: op_norm is undefined with batch normalization");
            exact = hltm_dataset(tree);
        }
        if (wants(cfg, "collapse") && !collapse_ds) throw ConfigError("probes.metrics: collapse needs loss.kind = byol");
        if (cfg.probe_layer > net.num_linear()) throw ConfigError("probes.layer exceeds the number of linear layers");
    }

    void run(ExperimentRecord& rec, std::size_t step, const TreeNet& layout, const Network& net) {
        if (wants(cfg, "nc")) {
            TreeNet cur = layout;
            cur.net = net;
            rec.probe(step, "nc", root_nc(cur, eval));
        }
        if (wants(cfg, "op_norm")) {
            const std::size_t l = cfg.probe_layer ? cfg.probe_layer : net.num_linear();
            rec.probe(step, "op_norm", op_simp(net, *exact, l).m.frobenius());
        }
        if (wants(cfg, "collapse")) rec.probe(step, "collapse", collapse_metric(net, *collapse_ds));
        if (wants(cfg, "weight_norm")) rec.probe(step, "weight_norm", weight_norm(net));
    }
};

void summarize(ExperimentRecord& rec, std::size_t steps_run) {
    rec.report("steps_run", static_cast<double>(steps_run));
    std::vector<std::string> metrics;
    for (const auto& p : rec.series)
        if (std::find(metrics.begin(), metrics.end(), p.metric) == metrics.end()) metrics.push_back(p.metric);
    for (const auto& m : metrics) {
        const ProbeSample *first = nullptr, *last = nullptr;
        for (const auto& p : rec.series)
            if (p.metric == m) {
                if (!first) first = &p;
                last = &p;
            }
        if (first->step == 0) rec.report("init_" + m, first->value);
        rec.report("final_" + m, last->value);
    }
}

TrainResult train_simclr(const ExperimentConfig& cfg, const std::string& run_id) {
    SimclrTrial tr = make_simclr_trial(cfg, cfg.seed);
    const SimclrOptions opt = simclr_options(cfg);
    TrainResult res{{}, tr.tn.net, {}};
    ExperimentRecord& rec = res.record;
    rec.run_id = run_id;
    rec.config_echo = cfg.echo();
    Prober pr{cfg, tr.tree, tr.eval, nullptr, std::nullopt};
    pr.check(tr.tn.net);
    pr.run(rec, 0, tr.tn, tr.tn.net);
    std::size_t done = 0;
    for (std::size_t ep = 1; ep <= cfg.epochs; ++ep) {
        const double loss = simclr_epoch(tr.tn.net, tr.tree, tr.roots, opt, tr.rng);
        done = ep;
        if (wants(cfg, "loss")) rec.probe(ep, "loss", loss);
        if (!std::isfinite(loss) || !tr.tn.net.weight(1).all_finite()) {
            rec.status = "diverged";
            rec.message = "non-finite loss at epoch " + std::to_string(ep);
            break;
        }
        if (ep % cfg.probe_every == 0 || ep == cfg.epochs) pr.run(rec, ep, tr.tn, tr.tn.net);
    }
    summarize(rec, done);
    res.final = tr.tn.net;
    return res;
}

TrainResult train_byol(const ExperimentConfig& cfg, const std::string& run_id) {
    ByolTrial tr = make_byol_trial(cfg, cfg.seed);
    ByolOptions opt = byol_options(cfg);
    TrainResult res{{}, tr.sys.online, {}};
    ExperimentRecord& rec = res.record;
    rec.run_id = run_id;
    rec.config_echo = cfg.echo();
    Prober pr{cfg, tr.tree, tr.eval, &tr.collapse_ds, std::nullopt};
    pr.check(tr.sys.online);
    pr.run(rec, 0, tr.tn, tr.sys.online);
    std::size_t done = 0;
    while (done < cfg.steps) {
        // chunks consume the stream exactly like one long call
        opt.steps = std::min(cfg.probe_every, cfg.steps - done);
        const auto losses = byol_train(tr.sys, tr.tree, opt, tr.rng);
        done += losses.size();
        double mean_loss = 0;
        for (double l : losses) mean_loss += l / static_cast<double>(losses.size());
        if (wants(cfg, "loss")) rec.probe(done, "loss", mean_loss);
        if (!std::isfinite(mean_loss)) {
            rec.status = "diverged";
            rec.message = "non-finite loss at step " + std::to_string(done);
            break;
        }
        pr.run(rec, done, tr.tn, tr.sys.online);
    }
    summarize(rec, done);
    res.final = tr.sys.online;
    return res;
}

} // namespace

TrainResult train_full(const ExperimentConfig& cfg, const std::string& run_id) {
    cfg.validate();
    if (cfg.model != "hltm") throw ConfigError("train: model.kind must be hltm (use the toy1d command for the translation model)");
    if (cfg.loss == "byol") return train_byol(cfg, run_id);
    return train_simclr(cfg, run_id);
}

OutputFiles train_outputs(const ExperimentConfig& cfg) {
    const TrainResult r = train_full(cfg);
    OutputFiles out;
    std::ostringstream lg, sm, rep;
    write_long_csv(lg, cfg.echo(), {r.record});
    write_summary_csv(sm, cfg.echo(), {r.record});
    out["train_long.csv"] = lg.str();
    out["train_summary.csv"] = sm.str();
    rep << "train " << r.record.run_id << ": status " << r.record.status;
    if (!r.record.message.empty()) rep << " (" << r.record.message << ")";
    rep << "\n";
    for (const auto& [k, v] : r.record.summary) rep << "  " << k << " = " << fmt(v) << "\n";
    out["train_report.txt"] = rep.str();
    return out;
}

void write_outputs(const std::string& dir, const OutputFiles& files) {
    for (const auto& [name, text] : files) write_file((std::filesystem::path(dir) / name).string(), text);
}

} // namespace ssldyn::harness
