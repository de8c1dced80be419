#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ssldyn::harness {

SimclrTrial make_simclr_trial(const ExperimentConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng(seed).split(0);
    HltmTree t = cfg.tree.build(rng);
    TreeNet tn = build_tree_network(t, cfg.per_latent);
    tn.net.validate(tree_net_limits(tn));
    tn.net.init_uniform(rng, cfg.sigma_w);
    std::vector<Assignment> zs;
    zs.reserve(cfg.eval_samples);
    for (std::size_t i = 0; i < cfg.eval_samples; ++i) zs.push_back(sample(t, rng));
    LabeledSamples ev = labeled_from_samples(t, zs);
    auto roots = draw_roots(t, cfg.samples, rng);
    return {std::move(t), std::move(tn), std::move(ev), std::move(roots), rng};
}

SimclrOptions simclr_options(const ExperimentConfig& cfg) {
    SimclrOptions o;
    o.tau = cfg.tau;
    o.lr = cfg.lr;
    o.batch = cfg.batch;
    o.epochs = cfg.epochs;
    o.n_samples = cfg.samples;
    o.l2_normalize = cfg.l2_normalize;
    return o;
}

AugmentedDataset collapse_dataset(const HltmTree& t, Rng& rng) {
    if (t.num_leaves() <= kMaxEnumeratedLeaves) return hltm_dataset(t);
    constexpr std::size_t kViews = 2048;
    AugmentedDataset ds;
    ds.groups.resize(2);
    Matrix X(t.num_leaves(), 1);
    for (std::uint8_t r = 0; r < 2; ++r) {
        Assignment z(t.num_nodes());
        z[0] = r;
        for (std::size_t i = 0; i < kViews; ++i) {
            write_visible(t, augment(t, z, rng), X, 0);
            ds.groups[r].push_back({1.0 / kViews, X.col(0)});
        }
        ds.bases.push_back({r ? t.p_root_one() : 1.0 - t.p_root_one(), ds.groups[r][0].x, r});
    }
    return ds;
}

ByolTrial make_byol_trial(const ExperimentConfig& cfg, std::uint64_t seed) {
    Rng rng = Rng(seed).split(0);
    HltmTree t = cfg.tree.build(rng);
    std::optional<BatchNormConfig> bn;
    if (cfg.hidden_bn) bn = BatchNormConfig{};
    TreeNet tn = build_tree_network(t, cfg.per_latent, false, bn);
    tn.net.validate(tree_net_limits(tn));
    tn.net.init_uniform(rng, cfg.sigma_w);
    std::optional<Network> pred;
    if (cfg.predictor) pred = linear_predictor(tn.net.output_dim(), cfg.predictor_beta, cfg.predictor_noise, &rng);
    ByolSystem sys = ByolSystem::make(tn.net, pred);
    sys.use_ema = cfg.ema;
    sys.gamma_ema = cfg.ema ? cfg.gamma_ema : 0.0;
    sys.stop_gradient = cfg.stop_gradient;
    sys.validate();
    std::vector<Assignment> zs;
    zs.reserve(cfg.eval_samples);
    for (std::size_t i = 0; i < cfg.eval_samples; ++i) zs.push_back(sample(t, rng));
    LabeledSamples ev = labeled_from_samples(t, zs);
    AugmentedDataset ds = collapse_dataset(t, rng);
    return {std::move(t), std::move(tn), std::move(sys), std::move(ev), std::move(ds), rng};
}

ByolOptions byol_options(const ExperimentConfig& cfg) {
    ByolOptions o;
    o.lr = cfg.lr;
    o.batch = cfg.batch;
    o.steps = cfg.steps;
    o.l2_normalize = cfg.l2_normalize;
    return o;
}

CellFlags parse_cell(const std::string& cell) {
    CellFlags f;
    if (cell == "none") return f;
    std::size_t start = 0;
    while (start <= cell.size()) {
        const std::size_t end = std::min(cell.find('+', start), cell.size());
        const std::string tok = cell.substr(start, end - start);
        if (tok == "P") f.predictor = true;
        else if (tok == "BN") f.bn = true;
        else if (tok == "EMA") f.ema = true;
        else throw ConfigError("grid.cells: unknown component '" + tok + "' in '" + cell + "'");
        start = end + 1;
    }
    return f;
}

ExperimentConfig apply_cell(ExperimentConfig cfg, const std::string& cell) {
    const CellFlags f = parse_cell(cell);
    cfg.predictor = f.predictor;
    cfg.hidden_bn = f.bn;
    cfg.ema = f.ema;
    if (f.ema) cfg.stop_gradient = true;
    return cfg;
}

double weight_norm(const Network& net) {
    double s = 0;
    for (std::size_t l = 1; l <= net.num_linear(); ++l) {
        const double f = net.weight(l).frobenius();
        s += f * f;
    }
    return std::sqrt(s);
}

Vec fd_weight_grad(Network net, std::size_t l, const std::function<double(const Network&)>& f, double h) {
    Matrix& W = net.weight(l);
    Matrix G(W.rows(), W.cols());
    for (std::size_t i = 0; i < W.rows(); ++i)
        for (std::size_t j = 0; j < W.cols(); ++j) {
            const double w0 = W(i, j);
            W(i, j) = w0 + h;
            const double up = f(net);
            W(i, j) = w0 - h;
            const double dn = f(net);
            W(i, j) = w0;
            G(i, j) = (up - dn) / (2 * h);
        }
    return vec(G);
}

double min_gate_margin(const Network& net, const ForwardTrace& t) {
    double m = INFINITY;
    for (std::size_t k = 0; k < net.layers().size(); ++k) {
        const auto kind = net.layers()[k].kind;
        if (kind != LayerKind::ReLU && kind != LayerKind::LeakyReLU) continue;
        for (double v : t.acts[k].raw()) m = std::min(m, std::fabs(v));
    }
    return m;
}

Vec random_vec(Rng& rng, std::size_t n, double a) {
    Vec v(n);
    for (auto& x : v) x = rng.uniform(-a, a);
    return v;
}

Network random_relu_net(Rng& rng, std::size_t depth, std::size_t max_width, std::size_t in, std::size_t out) {
    std::vector<std::size_t> dims{in};
    for (std::size_t k = 1; k < depth; ++k) dims.push_back(2 + rng.below(max_width - 1));
    dims.push_back(out);
    Network net = make_mlp(dims);
    net.init_uniform(rng);
    return net;
}

Network centred_backbone(const std::vector<std::size_t>& dims, std::size_t l, Rng& rng) {
    Network net(dims[0]);
    for (std::size_t k = 1; k < dims.size(); ++k) {
        net.add_linear(dims[k]);
        if (k < l) net.add_relu();
        if (k == l) net.add_grad_center();
    }
    net.init_uniform(rng);
    return net;
}

Network random_linear(std::size_t n, Rng& rng) {
    Network p(n);
    p.add_linear(n);
    p.init_uniform(rng);
    return p;
}

double median(std::vector<double> v) {
    if (v.empty()) return std::nan("");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    if (v.empty()) return std::nan("");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
}

} // namespace ssldyn::harness
