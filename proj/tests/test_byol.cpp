#include "oracles.hpp"
#include "ssldyn/byol.hpp"

#include <gtest/gtest.h>

using namespace ssldyn;

namespace {

// dims[0] -> ... -> dims.back(); ReLU below layer l, a gradient-centring
// layer right after layer l, linear above it.
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

Network random_predictor(std::size_t n, Rng& rng) {
    Network p(n);
    p.add_linear(n);
    p.init_uniform(rng);
    return p;
}

// Every (group, view i, view j) triple as its own column pair, weights
// P_a q_i q_j; the gradient then comes from one backward pass per tower.
Vec triple_update(const ByolSystem& s, const AugmentedDataset& ds, std::size_t l, BackMode mode) {
    const Vec P = ds.group_probs();
    std::vector<Vec> x1, xp;
    Vec w;
    for (std::size_t a = 0; a < ds.groups.size(); ++a)
        for (const auto& vi : ds.groups[a])
            for (const auto& vj : ds.groups[a]) {
                x1.push_back(vi.x);
                xp.push_back(vj.x);
                w.push_back(P[a] * vi.prob * vj.prob);
            }
    Network on = s.online_full(), tg = s.target;
    if (mode == BackMode::Jacobian) {
        on = detach_means(on);
        tg = detach_means(tg);
    }
    const auto t1 = on.forward(batch_of(x1), &w);
    const auto tt = tg.forward(batch_of(xp), &w);
    Matrix G(t1.output().rows(), w.size());
    for (std::size_t b = 0; b < w.size(); ++b)
        for (std::size_t r = 0; r < G.rows(); ++r) G(r, b) = w[b] * (t1.output()(r, b) - tt.output()(r, b));
    Matrix dW = on.backward(t1, G, mode).dW.at(l - 1);
    if (!s.stop_gradient) dW += tg.backward(tt, -1.0 * G, mode).dW.at(l - 1);
    return -1.0 * vec(dW);
}

} // namespace

TEST(Byol, SystemShapesAndPadding) {
    Rng rng(1);
    auto s = ByolSystem::make(make_mlp({4, 5, 3}), random_predictor(3, rng));
    EXPECT_EQ(s.online_full().num_linear(), 3u);
    const Network pt = s.padded_target();
    EXPECT_EQ(pt.num_linear(), 3u);
    const Vec x{0.1, -0.2, 0.3, 0.4};
    EXPECT_LE(norm2(pt.output(x) - s.target.output(x)), 1e-15);
    EXPECT_THROW(ByolSystem::make(make_mlp({4, 5, 3}), random_predictor(2, rng)), std::invalid_argument);
    s.use_ema = true;
    s.gamma_ema = 0.5;
    s.stop_gradient = false;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Byol, IdentityPredictorSameInputsGivesZeroGradient) {
    Rng rng(2);
    Network b = make_mlp({4, 6, 3});
    b.init_uniform(rng);
    auto s = ByolSystem::make(b, linear_predictor(3, 1.0));
    Matrix X(4, 5);
    for (std::size_t q = 0; q < X.size(); ++q) X.data()[q] = rng.uniform(-1, 1);
    const auto g = byol_batch_grad(s, X, X);
    EXPECT_EQ(g.loss, 0.0);
    for (const auto& m : g.dW) EXPECT_EQ(m.max_abs(), 0.0);
}

TEST(Byol, BatchGradientMatchesFiniteDifferences) {
    Rng rng(3);
    for (int trial = 0; trial < 10; ++trial) {
        Network b(4);
        b.add_linear(5).add_batch_norm({}).add_relu().add_linear(3);
        b.init_uniform(rng);
        auto s = ByolSystem::make(b, random_predictor(3, rng));
        s.stop_gradient = trial % 2 == 0;
        Matrix X1(4, 6), Xp(4, 6);
        for (std::size_t q = 0; q < X1.size(); ++q) {
            X1.data()[q] = rng.uniform(-1, 1);
            Xp.data()[q] = X1.data()[q] + rng.uniform(-0.3, 0.3);
        }
        const auto g = byol_batch_grad(s, X1, Xp);
        for (std::size_t l = 1; l <= 2; ++l) {
            auto loss = [&](const Network& n) {
                ByolSystem c = s;
                c.online = n;
                if (!s.stop_gradient) c.target = n;
                return byol_batch_grad(c, X1, Xp).loss;
            };
            const Vec fd = oracle::fd_weight_grad(s.online, l, loss);
            EXPECT_LE(rel_err(vec(g.dW[l - 1]), fd, 1e-6), 1e-6) << "trial " << trial << " layer " << l;
        }
    }
}

TEST(Byol, PopulationGradientMatchesTripleEnumeration) {
    Rng rng(4);
    for (int trial = 0; trial < 6; ++trial) {
        const auto ds = random_dataset(rng, 4, 3, 3, 0.4);
        auto s = ByolSystem::make(centred_backbone({4, 5, 4, 3}, 2, rng), random_predictor(3, rng));
        s.stop_gradient = trial % 2 == 0;
        for (BackMode mode : {BackMode::Batch, BackMode::Jacobian})
            for (std::size_t l = 1; l <= 3; ++l) {
                const Vec oracle_u = triple_update(s, ds, l, mode);
                EXPECT_LE(rel_err(population_update(s, ds, l, mode), oracle_u, 1e-12), 1e-10);
            }
    }
}

TEST(ByolTheory, NoPredictorUpdateIsMinusExpectedVariance) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto ds = random_dataset(rng, 4, 3, 4, 0.5);
        Network b = make_mlp({4, 6, 5, 3});
        b.init_uniform(rng);
        const auto s = ByolSystem::make(b);
        for (std::size_t l = 1; l <= 3; ++l) {
            const Matrix ev = op_beta(b, ds, 0.0, l).EV.m;
            const Vec expected = -1.0 * matvec(ev, vec(b.weight(l)));
            EXPECT_LE(rel_err(population_update(s, ds, l), expected, 1e-12), 1e-8);
        }
    }
}

TEST(ByolTheory, DetachedCentringGivesZeroCorrection) {
    Rng rng(6);
    Network b(4);
    b.add_linear(5).add_batch_norm({.mean_norm = true, .mean_detached = true}).add_relu().add_linear(3);
    b.init_uniform(rng);
    const auto s = ByolSystem::make(b, random_predictor(3, rng));
    const auto ds = random_dataset(rng, 4, 3, 3, 0.4);
    EXPECT_EQ(norm2(bn_correction_empirical(s, ds, 1).delta), 0.0);
}

TEST(ByolTheory, CorrectionClosedFormMatchesEmpirical) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const auto ds = random_dataset(rng, 4, 4, 3, 0.4);
        const std::size_t l = 1 + trial % 3;
        auto s = ByolSystem::make(centred_backbone({4, 5, 4, 3}, l, rng), random_predictor(3, rng));
        const auto emp = bn_correction_empirical(s, ds, l);
        EXPECT_TRUE(emp.linear_top);
        const auto ts = tower_stats(s, ds, l);
        const Vec closed = bn_correction_closed_form(ts);
        EXPECT_GT(norm2(closed), 1e-6);
        EXPECT_LE(rel_err(emp.delta, closed), 1e-6);
        const auto cu = corrected_update(ts, l);
        EXPECT_LE(rel_err(population_update(s, ds, l), cu.corrected), 1e-8);
        EXPECT_LE(rel_err(population_update(s, ds, l, BackMode::Jacobian), cu.plain), 1e-8);
        EXPECT_LE(rel_err(cu.delta, closed, 1e-12), 1e-8);
    }
}

TEST(ByolTheory, CorrectionVanishesForIdenticalTowersAndZeroMeanConnections) {
    Rng rng(8);
    const auto ds = random_dataset(rng, 4, 4, 3, 0.4);
    // no predictor, W' = W
    auto s = ByolSystem::make(centred_backbone({4, 5, 3}, 1, rng));
    EXPECT_LE(norm2(bn_correction_closed_form(tower_stats(s, ds, 1))), 1e-14);
    // E_x[K̄] = 0: inputs symmetric about the origin with a linear net
    AugmentedDataset sym = ds;
    const std::size_t n = ds.groups.size();
    for (std::size_t a = 0; a < n; ++a) {
        auto g = ds.groups[a];
        for (auto& v : g) v.x = -1.0 * v.x;
        sym.groups.push_back(g);
        sym.bases.push_back({0.0, -1.0 * ds.bases[a].x, n + a});
    }
    for (auto& b : sym.bases) b.prob = 1.0 / static_cast<double>(2 * n);
    Network lin(4);
    lin.add_linear(5).add_grad_center().add_linear(3);
    lin.init_uniform(rng);
    auto s2 = ByolSystem::make(lin, random_predictor(3, rng));
    const auto ts = tower_stats(s2, sym, 1);
    EXPECT_LE(expected_kbar(ts.online).max_abs(), 1e-15);
    EXPECT_LE(norm2(bn_correction_closed_form(ts)), 1e-14);
    EXPECT_LE(norm2(bn_correction_empirical(s2, sym, 1).delta), 1e-14);
}

TEST(ByolTheory, SymmetricContrastiveCorrectionIsZero) {
    Rng rng(9);
    const std::vector<LossKind> kinds = {LossKind::simple(2), LossKind::soft_triplet(0.5, 0.1, 2), LossKind::info_nce(0.5, 2)};
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t l = 1 + trial % 2;
        const Network net = centred_backbone({4, 6, 5, 3}, l, rng);
        std::vector<PairBatch> batch(4);
        for (auto& pb : batch) {
            Vec x(4);
            for (auto& v : x) v = rng.uniform(-1, 1);
            pb.x1 = x;
            pb.x_plus = x;
            for (auto& v : pb.x_plus) v += rng.uniform(-0.2, 0.2);
            for (int k = 0; k < 2; ++k) {
                Vec y(4);
                for (auto& v : y) v = rng.uniform(-1, 1);
                pb.negatives.push_back(y);
            }
        }
        for (const auto& kind : kinds) {
            const auto c = simclr_bn_correction(net, kind, batch, l);
            worst = std::max(worst, norm2(c.delta) / std::max(1.0, c.grad_norm));
        }
    }
    EXPECT_LE(worst, 1e-10);
}

TEST(ByolTheory, AnchorOnlyGradientIsNotBalanced) {
    // negative control: centring one branch alone changes the update
    Rng rng(10);
    const Network net = centred_backbone({4, 6, 3}, 1, rng);
    ByolSystem s = ByolSystem::make(net, random_predictor(3, rng));
    const auto ds = random_dataset(rng, 4, 3, 3, 0.4);
    EXPECT_GT(norm2(bn_correction_empirical(s, ds, 1).delta), 1e-6);
}

TEST(ByolPredictor, ScalarPredictorGivesWeightedCovariance) {
    Rng rng(11);
    for (double beta : {0.25, 0.5, 0.75, 1.0}) {
        for (int trial = 0; trial < 5; ++trial) {
            const auto ds = random_dataset(rng, 4, 4, 3, 0.4);
            const std::size_t l = 1 + trial % 2;
            auto s = ByolSystem::make(centred_backbone({4, 5, 3}, l, rng), linear_predictor(3, beta));
            const auto pe = predictor_effect(s, ds, l);
            ASSERT_TRUE(pe.beta.has_value());
            EXPECT_LE((pe.contrastive - *pe.beta_form).max_abs(), 1e-8 * std::max(1.0, pe.beta_form->max_abs()));
            if (beta == 1.0) {
                EXPECT_LE(pe.contrastive.max_abs(), 1e-15);
            }
            if (beta < 1.0) {
                const auto vx = op_simp(s.online, ds, l).m;
                EXPECT_LE(rel_err(pe.contrastive, beta * (1 - beta) * vx), 1e-8);
                EXPECT_GE(min_eigenvalue(symmetrize(pe.contrastive)), -1e-9 * pe.contrastive.trace());
            }
            EXPECT_LE(rel_err(population_update(s, ds, l), pe.update_stop, 1e-12), 1e-8);
        }
    }
}

TEST(ByolPredictor, GeneralPredictorUpdateMatchesPopulation) {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        const auto ds = random_dataset(rng, 4, 4, 3, 0.4);
        const std::size_t l = 1 + trial % 2;
        auto s = ByolSystem::make(centred_backbone({4, 5, 3}, l, rng), random_predictor(3, rng));
        const auto pe = predictor_effect(s, ds, l);
        EXPECT_FALSE(pe.beta.has_value());
        EXPECT_LE(rel_err(population_update(s, ds, l), pe.update_stop), 1e-8);
        s.stop_gradient = false;
        EXPECT_LE(rel_err(population_update(s, ds, l), pe.update_no_stop), 1e-8);
    }
}

TEST(ByolPredictor, NoStopGradientTermIsNegativeSemidefinite) {
    Rng rng(13);
    double worst_min = -1e300, worst_max_ratio = -1e300;
    for (int trial = 0; trial < 20; ++trial) {
        const auto ds = random_dataset(rng, 4, 4, 3, 0.4);
        const std::size_t l = 1 + trial % 2;
        Network pred = random_predictor(3, rng);
        if (trial % 3 == 0) pred = linear_predictor(3, 0.1 * trial);
        auto s = ByolSystem::make(centred_backbone({4, 5, 3}, l, rng), pred);
        const auto pe = predictor_effect(s, ds, l);
        const auto e = sym_eigen(symmetrize(pe.nsg_term));
        worst_min = std::max(worst_min, e.values.back());
        worst_max_ratio = std::max(worst_max_ratio, e.values.front() / std::fabs(pe.nsg_term.trace()));
    }
    EXPECT_LE(worst_min, 1e-9);
    EXPECT_LE(worst_max_ratio, 1e-9);
}

TEST(ByolEma, LimitsAndGeometricDecay) {
    Rng rng(14);
    Network a = make_mlp({3, 4, 2});
    a.init_uniform(rng);
    Network b = a;
    b.init_uniform(rng);
    ByolSystem s = ByolSystem::make(a);
    s.target = b;
    s.gamma_ema = 0.0;
    ByolSystem s0 = s;
    ema_step(s0);
    for (std::size_t l = 1; l <= 2; ++l) EXPECT_EQ((s0.target.weight(l) - a.weight(l)).max_abs(), 0.0);
    ByolSystem s1 = s;
    s1.gamma_ema = 1.0;
    ema_step(s1);
    for (std::size_t l = 1; l <= 2; ++l) EXPECT_EQ((s1.target.weight(l) - b.weight(l)).max_abs(), 0.0);
    ByolSystem s2 = s;
    s2.gamma_ema = 0.996;
    auto gap = [](const ByolSystem& x) {
        double g = 0;
        for (std::size_t l = 1; l <= 2; ++l) g += std::pow((x.target.weight(l) - x.online.weight(l)).frobenius(), 2);
        return std::sqrt(g);
    };
    const double g0 = gap(s2);
    for (int i = 0; i < 100; ++i) ema_step(s2);
    EXPECT_NEAR(gap(s2) / g0, std::pow(0.996, 100), 1e-12);
}

TEST(ByolCollapse, MetricLimits) {
    Network constant(3);
    constant.add_linear(2);
    Rng rng(15);
    const auto ds = random_dataset(rng, 3, 5, 3, 0.2);
    EXPECT_EQ(collapse_metric(constant, ds), 0.0);
    Network id(3);
    id.add_linear(3);
    id.weight(1) = Matrix::identity(3);
    EXPECT_GT(collapse_metric(id, ds), 10.0);
    std::vector<Vec> xs{{1, 0, 0}, {0, 2, 0}, {0, 0, -1}};
    EXPECT_GT(collapse_metric(id, point_mass_dataset(xs)), 1e9);
}
