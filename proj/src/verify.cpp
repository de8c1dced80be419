#include "verify.hpp"

#include "fixtures.hpp"
#include "pool.hpp"

#include "ssldyn/byol.hpp"
#include "ssldyn/covop.hpp"
#include "ssldyn/hltm.hpp"
#include "ssldyn/losses.hpp"
#include "ssldyn/toy1d.hpp"

#include <functional>
#include <numbers>
#include <sstream>

namespace ssldyn::harness {

ToleranceProfile parse_profile(const std::string& s) {
    if (s == "default") return ToleranceProfile::Default;
    if (s == "strict") return ToleranceProfile::Strict;
    throw ConfigError("--tolerance must be strict or default, got '" + s + "'");
}

std::string profile_name(ToleranceProfile p) { return p == ToleranceProfile::Strict ? "strict" : "default"; }

bool VerifyReport::ok() const {
    return std::all_of(rows.begin(), rows.end(), [](const CheckRow& r) { return r.pass; });
}

std::vector<const CheckRow*> VerifyReport::for_suite(const std::string& id) const {
    std::vector<const CheckRow*> out;
    for (const auto& r : rows)
        if (r.theorem == id) out.push_back(&r);
    return out;
}

bool VerifyReport::suite_ok(const std::string& id) const {
    const auto rs = for_suite(id);
    return !rs.empty() && std::all_of(rs.begin(), rs.end(), [](const CheckRow* r) { return r->pass; });
}

namespace {

struct Ctx {
    const SuiteInfo& info;
    Rng rng;
    bool strict = false;
    bool mutated = false;
    std::vector<CheckRow> rows;

    double tol(double def, double str) const { return strict ? str : def; }
    // Relative 1e-3 perturbation of a closed form when this suite is mutated.
    double mut() const { return mutated ? 1.0 + 1e-3 : 1.0; }
    void check(const std::string& quantity, double measured, double tolerance) {
        rows.push_back({info.id, info.fixture, quantity, measured, tolerance, measured <= tolerance});
    }
};

// ---------------------------------------------------------------------------
// pair gradient and loss partials

void gradient_identity(Ctx& c) {
    double worst_fd = 0, worst_bp = 0;
    int checked = 0;
    while (checked < 200) {
        const std::size_t depth = 2 + c.rng.below(3);
        Network n1 = random_relu_net(c.rng, depth, 8, 4, 3);
        Network n2 = n1;
        n2.init_uniform(c.rng);
        const Vec x1 = random_vec(c.rng, 4), x2 = random_vec(c.rng, 4);
        if (min_gate_margin(n1, n1.forward(x1)) < 1e-4) continue;
        const std::size_t l = 1 + c.rng.below(depth);
        const PairGrad g = pair_grad(n1, n2, x1, x2, l);
        const Vec f2 = n2.output(x2);
        const Vec fd = fd_weight_grad(n1, l, [&](const Network& n) {
            const Vec d = n.output(x1) - f2;
            return 0.5 * dot(d, d);
        });
        worst_fd = std::max(worst_fd, rel_err(c.mut() * g.kron_form, fd, 1e-6));
        worst_bp = std::max(worst_bp, rel_err(g.backprop, g.kron_form, 1e-12));
        ++checked;
    }
    c.check("max rel err kron form vs finite differences", worst_fd, c.tol(1e-5, 1e-6));
    c.check("max rel err backprop vs kron form", worst_bp, c.tol(1e-12, 1e-13));
}

void loss_partials_balance(Ctx& c) {
    double worst = 0, worst_beta = 0, bad_signs = 0;
    for (int i = 0; i < 1000; ++i) {
        const int H = 1 + static_cast<int>(c.rng.below(4));
        const double tau = c.rng.uniform(0.05, 2.0), r0 = c.rng.uniform(0, 1), rp = c.rng.uniform(0, 2);
        Vec rm(H);
        for (auto& r : rm) r = c.rng.uniform(0, 2);
        for (const auto& k : {LossKind::simple(H), LossKind::soft_triplet(tau, r0, H), LossKind::info_nce(tau, H)}) {
            Partials p = loss_partials(k, rp, rm);
            p.d_plus *= c.mut();
            const auto chk = check_common_property(p);
            bad_signs += !chk.signs_ok;
            worst = std::max(worst, std::fabs(chk.sum));
        }
        const double beta = c.rng.uniform(-1, 1);
        worst_beta = std::max(worst_beta, std::fabs(loss_partials(LossKind::simple_beta(beta, H), rp, rm).sum() - beta));
    }
    c.check("max |sum of partials| over 1000 draws x 3 losses", worst, c.tol(1e-12, 1e-13));
    c.check("sign violations", bad_signs, 0);
    c.check("max |sum - beta| for the beta extension", worst_beta, c.tol(1e-12, 1e-13));
}

// ---------------------------------------------------------------------------
// covariance operators

std::size_t leaf_mask(const Vec& x, const HltmTree& t) {
    std::size_t m = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] == t.encoding().hi) m |= std::size_t{1} << i;
    return m;
}

// E[-(grad(x1, x+) - grad(x1, x-))] by summing cached pair gradients over
// every (root, x1, x+) and independent x-.
Vec brute_force_simple_update(const Network& net, const HltmTree& t, const AugmentedDataset& ds, std::size_t l) {
    const std::size_t states = std::size_t{1} << t.num_leaves();
    std::vector<Vec> cache(states * states);
    auto grad = [&](const Vec& a, const Vec& b) -> const Vec& {
        Vec& g = cache[leaf_mask(a, t) * states + leaf_mask(b, t)];
        if (g.empty()) g = pair_grad(net, net, a, b, l).backprop;
        return g;
    };
    Vec pos(net.width_in(l) * net.width_out(l), 0.0), neg = pos;
    const Vec P = ds.group_probs();
    for (std::size_t g = 0; g < ds.groups.size(); ++g)
        for (const auto& v1 : ds.groups[g]) {
            for (const auto& vp : ds.groups[g]) axpy(P[g] * v1.prob * vp.prob, grad(v1.x, vp.x), pos);
            for (const auto& base : ds.bases)
                for (const auto& vn : ds.groups[base.group])
                    axpy(P[g] * v1.prob * base.prob * vn.prob, grad(v1.x, vn.x), neg);
        }
    return -1.0 * (pos - neg);
}

void large_batch_update(Ctx& c) {
    double worst = 0, worst_psd = 0;
    for (std::size_t depth : {2u, 2u, 2u, 3u, 3u}) {
        const HltmTree t = HltmTree::random(depth, 2, c.rng.uniform(-0.8, 0.8), -0.95, 0.95, c.rng);
        TreeNet tn = build_tree_network(t, 2);
        tn.net.init_uniform(c.rng);
        const AugmentedDataset ds = hltm_dataset(t);
        for (std::size_t l = 1; l <= tn.net.num_linear(); ++l) {
            const Matrix op = op_simp(tn.net, ds, l).m;
            const Vec predicted = c.mut() * matvec(op, vec(tn.net.weight(l)));
            worst = std::max(worst, rel_err(predicted, brute_force_simple_update(tn.net, t, ds, l), 1e-12));
            const double tr = op.trace();
            if (tr > 0) worst_psd = std::max(worst_psd, -min_eigenvalue(symmetrize(op)) / tr);
        }
    }
    c.check("max rel err expected update vs operator times vec(W)", worst, c.tol(1e-8, 1e-10));
    c.check("max -min_eig / trace", worst_psd, c.tol(1e-9, 1e-12));
}

Network net_4_4_2(Rng& rng) {
    Network net = make_mlp({4, 4, 2});
    net.init_uniform(rng);
    return net;
}

void weighted_operator(Ctx& c) {
    double worst_simple = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const Network net = net_4_4_2(c.rng);
        const auto ds = random_dataset(c.rng, 4, 5, 3, 0.3);
        for (std::size_t l : {1u, 2u}) {
            const Matrix a = op_weighted(net, ds, LossKind::simple(), l).m;
            worst_simple = std::max(worst_simple, (c.mut() * a - op_simp(net, ds, l).m).max_abs());
        }
    }
    c.check("max |op_weighted(simple) - op_simp|", worst_simple, c.tol(1e-10, 1e-12));

    double excess = -INFINITY, point_mass = 0, not_shrinking = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const Network net = net_4_4_2(c.rng);
        std::vector<Vec> xs;
        std::vector<std::vector<Vec>> deltas;
        for (int i = 0; i < 4; ++i) {
            xs.push_back(random_vec(c.rng, 4));
            std::vector<Vec> d;
            for (int j = 0; j < 3; ++j) d.push_back(random_vec(c.rng, 4));
            deltas.push_back(d);
        }
        for (const auto& k : {LossKind::info_nce(0.5), LossKind::soft_triplet(0.5, 0.2)}) {
            double prev = INFINITY;
            for (double s : {0.3, 0.15, 0.075, 0.0}) {
                const auto ds = shrink_dataset(xs, deltas, s);
                const auto r = verify_update_equation(net, ds, k, 1);
                const double bound = residue_bound(net, ds, k, 1) * (c.mutated ? 1e-3 : 1.0);
                excess = std::max(excess, r.theta_norm - bound);
                not_shrinking += !(r.theta_norm < prev + 1e-15);
                prev = r.theta_norm;
            }
            point_mass = std::max(point_mass, prev);
        }
    }
    c.check("max residue minus its bound", excess, c.tol(1e-12, 1e-12));
    c.check("residue growth as augmentation shrinks", not_shrinking, 0);
    c.check("max residue under point-mass augmentation", point_mass, c.tol(1e-6, 1e-9));
}

void ev_ve_decomposition(Ctx& c) {
    double worst_law = 0, worst_update = 0;
    for (int trial = 0; trial < 10; ++trial) {
        const Network net = net_4_4_2(c.rng);
        const auto ds = random_dataset(c.rng, 4, 4, 5, 0.4);
        const auto s = compute_stats(net, ds, 1);
        const auto ops = op_beta(s, 0.3, 1);
        // joint variance over every (x, x') draw by a direct two-pass sum
        std::vector<std::pair<double, Matrix>> draws;
        Matrix mean_k(16, 2);
        for (const auto& b : ds.bases)
            for (const auto& v : ds.groups[b.group]) {
                const Matrix K = connection(net, v.x, 1);
                mean_k.axpy(b.prob * v.prob, K);
                draws.push_back({b.prob * v.prob, K});
            }
        Matrix joint(16, 16);
        for (auto& [w, K] : draws) {
            const Matrix d = K - mean_k;
            joint.axpy(w, d * d.transpose());
        }
        worst_law = std::max(worst_law, (c.mut() * (ops.EV.m + ops.VE.m) - joint).max_abs());
        for (double beta : {-0.5, 0.25, 0.5, 1.0}) {
            const auto r = verify_update_equation(net, ds, LossKind::simple_beta(beta), 1);
            const Vec predicted = c.mut() * matvec(op_beta(s, beta, 1).combo.m, vec(net.weight(1)));
            worst_update = std::max(worst_update, rel_err(predicted, r.expected, 1e-12));
        }
    }
    c.check("max |EV + VE - joint variance|", worst_law, c.tol(1e-9, 1e-12));
    c.check("max rel err beta update vs (VE - beta EV) vec(W)", worst_update, c.tol(1e-8, 1e-10));
}

// ---------------------------------------------------------------------------
// BYOL

void bn_correction(Ctx& c) {
    double worst = 0, worst_update = 0, smallest = INFINITY;
    for (int trial = 0; trial < 20; ++trial) {
        const auto ds = random_dataset(c.rng, 4, 4, 3, 0.4);
        const std::size_t l = 1 + trial % 3;
        const auto s = ByolSystem::make(centred_backbone({4, 5, 4, 3}, l, c.rng), random_linear(3, c.rng));
        const auto emp = bn_correction_empirical(s, ds, l);
        const auto ts = tower_stats(s, ds, l);
        const Vec closed = c.mut() * bn_correction_closed_form(ts);
        smallest = std::min(smallest, norm2(closed));
        worst = std::max(worst, rel_err(emp.delta, closed));
        worst_update = std::max(worst_update, rel_err(population_update(s, ds, l), corrected_update(ts, l).corrected));
    }
    c.check("max rel err closed form vs empirical correction", worst, c.tol(1e-6, 1e-8));
    c.check("max rel err corrected update vs population update", worst_update, c.tol(1e-8, 1e-10));
    // a vanishing correction would make the comparison vacuous
    c.check("-min correction norm", -smallest, -1e-6);
}

void bn_correction_simclr(Ctx& c) {
    const std::vector<LossKind> kinds = {LossKind::simple(2), LossKind::soft_triplet(0.5, 0.1, 2), LossKind::info_nce(0.5, 2)};
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t l = 1 + trial % 2;
        const Network net = centred_backbone({4, 6, 5, 3}, l, c.rng);
        std::vector<PairBatch> batch(4);
        for (auto& pb : batch) {
            pb.x1 = random_vec(c.rng, 4);
            pb.x_plus = pb.x1 + random_vec(c.rng, 4, 0.2);
            for (int k = 0; k < 2; ++k) pb.negatives.push_back(random_vec(c.rng, 4));
        }
        for (const auto& kind : kinds) {
            const auto r = simclr_bn_correction(net, kind, batch, l);
            const double extra = c.mutated ? 1e-3 * r.grad_norm : 0.0;
            worst = std::max(worst, (norm2(r.delta) + extra) / std::max(1.0, r.grad_norm));
        }
    }
    c.check("max |correction| / max(1, |gradient|) over 50 nets x 3 losses", worst, c.tol(1e-10, 1e-12));
}

void bn_sym_grad(Ctx& c) {
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto ds = random_dataset(c.rng, 4, 3, 4, 0.5);
        Network b = make_mlp({4, 6, 5, 3});
        b.init_uniform(c.rng);
        const auto s = ByolSystem::make(b);
        for (std::size_t l = 1; l <= 3; ++l) {
            const Matrix ev = op_beta(b, ds, 0.0, l).EV.m;
            const Vec expected = -c.mut() * matvec(ev, vec(b.weight(l)));
            worst = std::max(worst, rel_err(population_update(s, ds, l), expected, 1e-12));
        }
    }
    c.check("max rel err no-predictor update vs -EV vec(W)", worst, c.tol(1e-8, 1e-10));
}

// The calibrated collapse fixture: depth-3 binary tree, rho ~ U[0.7, 1],
// 10 units per latent, no predictor, no BN, lr 0.3, 500 steps.
ExperimentConfig collapse_fixture() {
    ExperimentConfig cfg;
    cfg.loss = "byol";
    cfg.tree.depth = 3;
    cfg.tree.rho_lo = 0.7;
    cfg.per_latent = 10;
    cfg.predictor = false;
    cfg.hidden_bn = false;
    cfg.l2_normalize = false;
    cfg.lr = 0.3;
    cfg.steps = 500;
    cfg.probe_every = 500;
    cfg.probes = {"collapse"};
    cfg.eval_samples = 0;
    return cfg;
}

void byol_collapse(Ctx& c) {
    std::vector<double> metric;
    for (std::uint64_t s = 0; s < 10; ++s) {
        ExperimentConfig cfg = collapse_fixture();
        cfg.seed = s;
        if (c.mutated) cfg.lr = 0.0;
        const auto rec = train(cfg);
        const double* m = rec.find("final_collapse");
        metric.push_back(m && rec.status == "ok" ? *m : INFINITY);
    }
    c.check("median collapse metric after 500 steps over 10 seeds", median(metric), 0.05);
}

void predictor_beta(Ctx& c) {
    double worst = 0, worst_update = 0, worst_psd = 0;
    for (double beta : {0.25, 0.5, 0.75}) {
        for (int trial = 0; trial < 5; ++trial) {
            const auto ds = random_dataset(c.rng, 4, 4, 3, 0.4);
            const std::size_t l = 1 + trial % 2;
            const auto s = ByolSystem::make(centred_backbone({4, 5, 3}, l, c.rng), linear_predictor(3, beta));
            const auto pe = predictor_effect(s, ds, l);
            const Matrix vx = op_simp(s.online, ds, l).m;
            worst = std::max(worst, rel_err(pe.contrastive, c.mut() * beta * (1 - beta) * vx));
            worst_update = std::max(worst_update, rel_err(population_update(s, ds, l), pe.update_stop, 1e-12));
            worst_psd = std::max(worst_psd, -min_eigenvalue(symmetrize(pe.contrastive)) / pe.contrastive.trace());
        }
    }
    c.check("max rel err contrastive term vs beta(1-beta) V_x[Kbar]", worst, c.tol(1e-8, 1e-10));
    c.check("max rel err decomposed vs population update", worst_update, c.tol(1e-8, 1e-10));
    c.check("max -min_eig / trace of the contrastive term", worst_psd, c.tol(1e-9, 1e-12));
}

void no_stop_gradient(Ctx& c) {
    double worst_min = -INFINITY, worst_update = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const auto ds = random_dataset(c.rng, 4, 4, 3, 0.4);
        const std::size_t l = 1 + trial % 2;
        Network pred = random_linear(3, c.rng);
        if (trial % 3 == 0) pred = linear_predictor(3, 0.1 * trial);
        auto s = ByolSystem::make(centred_backbone({4, 5, 3}, l, c.rng), pred);
        s.stop_gradient = false;
        const auto pe = predictor_effect(s, ds, l);
        worst_min = std::max(worst_min, sym_eigen(symmetrize(pe.nsg_term)).values.back());
        worst_update = std::max(worst_update, rel_err(population_update(s, ds, l), c.mut() * pe.update_no_stop, 1e-12));
    }
    c.check("max over 20 fixtures of the smallest eigenvalue", worst_min, c.tol(1e-9, 1e-12));
    c.check("max rel err decomposed vs population update", worst_update, c.tol(1e-8, 1e-10));
}

// ---------------------------------------------------------------------------
// translation model

void toy1d_operators(Ctx& c) {
    double linear = 0, rank1 = 0, closed = 0, ratio = 0;
    auto relu = [](Vec w, std::optional<double> b = std::nullopt) {
        NeuronSpec n;
        n.kind = NeuronKind::LocalRelu;
        n.width = w.size();
        n.w = std::move(w);
        n.bias = b;
        return n;
    };
    const std::vector<std::pair<NeuronSpec, Vec>> cases = {
        {relu({-2, 1}), {0, 1}}, {relu({1, -2}), {1, 0}}, {relu({1, 1}, -1.5), {1, 1, 1}}, {relu({-2, 1}, -0.5), {0, 1, 1}}};
    for (std::size_t d : {5u, 8u, 16u}) {
        const Toy1dModel m(d);
        NeuronSpec global, local;
        local.kind = NeuronKind::LocalLinear;
        linear = std::max({linear, c.mut() * enumerate_op(m, global).m.frobenius(), enumerate_op(m, local).m.frobenius()});
        if (c.mutated) linear = std::max(linear, 1e-3);
        for (const auto& [n, xp] : cases) {
            const Matrix op = enumerate_op(m, n).m;
            closed = std::max(closed, (op - c.mut() / (4.0 * d * d) * outer(xp, xp)).max_abs());
            const auto e = sym_eigen(op);
            const Vec v = e.vectors.col(0);
            const double cos = dot(v, xp) / (norm2(v) * norm2(xp));
            rank1 = std::max(rank1, 1 - cos * cos);
        }
        const GrowthTrace g = growth_trace(m, relu({-2, 1}), 0.1, 50);
        ratio = std::max(ratio, g.max_ratio_err + (c.mutated ? 1e-3 : 0.0));
    }
    c.check("max Frobenius norm of the linear-neuron operators", linear, c.tol(1e-12, 1e-14));
    c.check("max |op - x_p x_p^T / (4 d²)|", closed, c.tol(1e-12, 1e-15));
    c.check("max 1 - cos² of the leading eigenvector with x_p", rank1, c.tol(1e-10, 1e-12));
    c.check("max growth ratio error", ratio, c.tol(1e-10, 1e-12));
}

// ---------------------------------------------------------------------------
// tree model

void child_covariance(Ctx& c) {
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t depth = 2 + trial % 3;
        const auto t = HltmTree::random(depth, 2, c.rng.uniform(-0.8, 0.8), -0.95, 0.95, c.rng);
        auto tn = build_tree_network(t, 1 + c.rng.below(3));
        tn.net.init_uniform(c.rng);
        const auto e = enumerate(t);
        const auto s = labeled_from_enumeration(e);
        const auto tr = tn.net.forward(s.X);
        for (std::size_t mu = 0; mu < t.level_offset(t.depth()); ++mu) {
            const Matrix F = child_activations(t, tn, tr, mu);
            const auto nu = child_unit_latents(t, tn.map, mu);
            Vec sk(F.rows());
            for (std::size_t k = 0; k < F.rows(); ++k) {
                Matrix row(1, F.cols());
                std::copy(F.row_ptr(k), F.row_ptr(k) + F.cols(), row.row_ptr(0));
                sk[k] = 0.5 * (conditional_mean(e, row, nu[k], 1)[0] - conditional_mean(e, row, nu[k], 0)[0]);
            }
            const Matrix closed_form = c.mut() * closed_form_child_covariance(t, mu, sk, nu);
            worst = std::max(worst, rel_err(closed_form, enumerated_root_covariance(t, e, F), 1e-12));
        }
    }
    c.check("max rel err closed form vs enumeration over 20 trees", worst, c.tol(1e-8, 1e-10));
}

void o_factor_decay(Ctx& c) {
    double worst = -INFINITY;
    for (int trial = 0; trial < 20; ++trial) {
        const auto t = HltmTree::random(4, 2, c.rng.uniform(-0.9, 0.9), -0.9, 0.9, c.rng);
        for (std::size_t v = 1; v < t.num_nodes(); ++v) {
            const double child = o_factor(t, v) * (c.mutated ? 1.0 / (t.rho(v) * t.rho(v)) : 1.0);
            worst = std::max(worst, child - o_factor(t, t.parent(v)));
        }
    }
    c.check("max o(child) - o(parent)", worst, 0.0);
}

// ---------------------------------------------------------------------------
// lucky nodes

// P(Y1 >= a, Y2 >= 0) for a standard bivariate normal with correlation r.
double bivariate_tail(double a, double r) {
    const double h = 1e-4;
    double s = 0;
    for (double y = a + h / 2; y < a + 12; y += h) {
        const double phi = std::exp(-y * y / 2) / std::sqrt(2 * std::numbers::pi);
        s += phi * 0.5 * std::erfc(-r * y / std::sqrt(2 * (1 - r * r))) * h;
    }
    return s;
}

void mills_brackets(Ctx& c) {
    double failures = 0, worst = 0;
    for (int i = 0; i < 20; ++i) {
        const double y = std::pow(10.0, -2.0 + 4.0 * i / 19.0);
        MillsRatio m = mills_ratio(y);
        if (c.mutated) m.value = m.tight_hi * c.mut();
        failures += !(m.tight_lo < m.value && m.value < m.tight_hi);
        failures += !(m.coarse_lo < m.value && m.value < m.coarse_hi);
        const double ref = std::sqrt(std::numbers::pi / 2) * std::exp(y * y / 2) * std::erfc(y / std::sqrt(2.0));
        worst = std::max(worst, std::fabs(m.value - ref) / ref);
    }
    c.check("bracket violations at 20 log-spaced y (both pairs)", failures, 0);
    c.check("max rel err quadrature vs erfc form", worst, c.tol(1e-9, 1e-12));
}

void lucky_bracket(Ctx& c) {
    double violations = 0;
    for (double cc : {4.0, 9.0, 16.0})
        for (double g : {0.0, 0.2, 0.5, 0.9}) {
            const auto b = lucky_node_bound(cc, g, 1.0);
            const double n = b.n_required * c.mut() * c.mut() * c.mut() * (c.mutated ? 1.2 : 1.0);
            violations += !(b.n_lo <= n && n <= b.n_hi);
            violations += !(b.n_lo_quadratic >= b.n_lo && b.n_hi_quadratic >= b.n_hi);
        }
    c.check("quadrature requirement outside its bracket", violations, 0);
}

void rho_threshold_check(Ctx& c) {
    double worst = 0, sign_errors = 0;
    for (double cc : {1.0, 4.0, 9.0, 16.0}) {
        const double r = rho_threshold(cc) * c.mut();
        const Vec s{1.0, 1.0};
        worst = std::max(worst, std::fabs(selectivity_threshold(1, 1, s, {r, r}, cc, 0)));
        sign_errors += !(selectivity_threshold(1, 1, s, {r + 1e-4, r + 1e-4}, cc, 0) > 0);
        sign_errors += !(selectivity_threshold(1, 1, s, {r - 1e-4, r - 1e-4}, cc, 0) < 0);
    }
    c.check("max |selectivity threshold at the critical polarity|", worst, c.tol(1e-12, 1e-14));
    c.check("sign errors around the critical polarity", sign_errors, 0);
}

void lucky_empirical(Ctx& c) {
    // γ = 0.2 from 2x / (1 + x²) = 0.2 on a 64-dimensional fixture
    const double x = (1.0 - std::sqrt(1.0 - 0.04)) / 0.2;
    Vec up(64, x), um(64, x);
    for (int i = 0; i < 32; ++i) up[i] = 1.0, um[32 + i] = 1.0;
    const Vec h = 0.5 * (up + um), a = 0.5 * (up - um);
    const auto b = lucky_node_bound(9, 0.2, 1.0);
    const std::size_t units = static_cast<std::size_t>(std::ceil(b.n_hi_quadratic)) + 1, trials = 500;
    const auto r = lucky_node_empirical(h, a, 9, 1.0, units, trials, c.rng.split(0), WeightLaw::Gaussian);
    const double p = bivariate_tail(3.0, -0.2) * c.mut() * (c.mutated ? 1.2 : 1.0);
    c.check("(1 - eta) - frequency above the upper bracket", (1.0 - std::exp(-1.0)) - r.frequency, 0.0);
    c.check("|unit rate - bivariate tail| in standard errors", std::fabs(r.unit_rate - p) / std::sqrt(p / (units * trials)),
            4.0);
    c.check("lucky units with non-positive gap", r.gaps_positive ? 0.0 : 1.0, 0.0);
}

struct Suite {
    SuiteInfo info;
    void (*run)(Ctx&);
};

const std::vector<Suite>& suites() {
    static const std::vector<Suite> s = {
        {{"gradient-identity", "relu-mlp-200", "pair gradient in connection form vs central differences"}, gradient_identity},
        {{"loss-partials", "random-draws-1000x3", "partials of the loss family sum to zero"}, loss_partials_balance},
        {{"large-batch-update", "hltm-depth2-3", "expected simple-loss update equals the operator times vec(W)"},
         large_batch_update},
        {{"weighted-operator", "mlp-4-4-2", "weighted operator and residue bound"}, weighted_operator},
        {{"ev-ve", "mlp-4-4-2", "total variance law and the beta-loss update"}, ev_ve_decomposition},
        {{"bn-correction", "gradcenter-mlp-4-5-4-3", "closed-form BN-mean correction vs backprop"}, bn_correction},
        {{"bn-correction-simclr", "symmetric-batch-50x3", "BN-mean correction vanishes for symmetric contrastive batches"},
         bn_correction_simclr},
        {{"bn-sym-grad", "mlp-4-6-5-3", "no-predictor BYOL update equals -EV vec(W)"}, bn_sym_grad},
        {{"byol-collapse", "hltm-d3-n10-500steps", "no-predictor no-BN BYOL collapses"}, byol_collapse},
        {{"predictor-beta", "gradcenter-mlp-4-5-3", "scalar predictor gives beta(1-beta) V_x[Kbar]"}, predictor_beta},
        {{"no-stop-gradient", "gradcenter-mlp-4-5-3", "no-stop-gradient term is never positive definite"}, no_stop_gradient},
        {{"toy1d-operators", "ring-5-8-16", "translation-model operators and growth"}, toy1d_operators},
        {{"child-covariance", "random-trees-depth2-4", "closed-form child covariance vs enumeration"}, child_covariance},
        {{"o-factor-decay", "random-trees-depth4", "o factor decreases with depth when |rho| <= 0.9"}, o_factor_decay},
        {{"mills-brackets", "log-spaced-20", "Mills ratio brackets contain the quadrature"}, mills_brackets},
        {{"lucky-bracket", "c-gamma-grid", "analytic bracket contains the quadrature requirement"}, lucky_bracket},
        {{"rho-threshold", "c-grid", "selectivity threshold changes sign at the critical polarity"}, rho_threshold_check},
        {{"lucky-empirical", "gaussian-d64-c9-g0.2", "lucky-node frequency above the upper bracket"}, lucky_empirical},
    };
    return s;
}

} // namespace

const std::vector<SuiteInfo>& list_suites() {
    static const std::vector<SuiteInfo> infos = [] {
        std::vector<SuiteInfo> v;
        for (const auto& s : suites()) v.push_back(s.info);
        return v;
    }();
    return infos;
}

VerifyReport verify_all(const VerifyOptions& opt) {
    const auto& all = suites();
    auto known = [&](const std::string& name) {
        return std::any_of(all.begin(), all.end(), [&](const Suite& s) { return s.info.id == name || s.info.fixture == name; });
    };
    if (opt.fixtures)
        for (const auto& f : *opt.fixtures)
            if (!known(f)) throw ConfigError("verify: unknown suite or fixture '" + f + "'");
    if (!opt.mutate.empty() && !known(opt.mutate)) throw ConfigError("verify: unknown suite for --mutate '" + opt.mutate + "'");

    std::vector<std::size_t> chosen;
    for (std::size_t i = 0; i < all.size(); ++i) {
        const auto& s = all[i].info;
        if (!opt.fixtures || std::find_if(opt.fixtures->begin(), opt.fixtures->end(), [&](const std::string& f) {
                                 return f == s.id || f == s.fixture;
                             }) != opt.fixtures->end())
            chosen.push_back(i);
    }
    std::vector<std::vector<CheckRow>> rows(chosen.size());
    parallel_for(chosen.size(), opt.threads, [&](std::size_t k) {
        const Suite& s = all[chosen[k]];
        Ctx ctx{s.info, Rng(opt.seed).split(chosen[k]), opt.profile == ToleranceProfile::Strict,
                opt.mutate == s.info.id, {}};
        s.run(ctx);
        rows[k] = std::move(ctx.rows);
    });
    VerifyReport rep;
    for (auto& r : rows) rep.rows.insert(rep.rows.end(), r.begin(), r.end());
    return rep;
}

OutputFiles verify_outputs(const VerifyReport& rep, const std::string& echo) {
    std::ostringstream csv, txt;
    write_echo(csv, echo);
    csv << "theorem,fixture,quantity,measured,tolerance,status\n";
    for (const auto& r : rep.rows)
        csv << r.theorem << ',' << r.fixture << ',' << csv_field(r.quantity) << ',' << fmt(r.measured) << ','
            << fmt(r.tolerance) << ',' << (r.pass ? "pass" : "FAIL") << '\n';
    std::size_t failed = 0;
    for (const auto& r : rep.rows) {
        char line[400];
        std::snprintf(line, sizeof line, "%-4s %-20s %-24s %-58s measured %-12.4g tol %.3g\n", r.pass ? "ok" : "FAIL",
                      r.theorem.c_str(), r.fixture.c_str(), r.quantity.c_str(), r.measured, r.tolerance);
        txt << line;
        failed += !r.pass;
    }
    txt << rep.rows.size() << " checks, " << failed << " failed\n";
    return {{"verify.csv", csv.str()}, {"verify_report.txt", txt.str()}};
}

} // namespace ssldyn::harness
