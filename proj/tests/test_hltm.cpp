#include "oracles.hpp"
#include "ssldyn/covop.hpp"
#include "ssldyn/hltm.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

using namespace ssldyn;

namespace {

// Brute force over every latent configuration: P(leaves) and P(z_v = 1, leaves).
struct BruteForce {
    std::vector<double> p;                 // by leaf bitmask
    std::vector<std::vector<double>> joint1;
};

BruteForce brute_force(const HltmTree& t) {
    const std::size_t n = t.num_nodes(), nl = t.num_leaves();
    BruteForce b;
    b.p.assign(std::size_t{1} << nl, 0.0);
    b.joint1.assign(b.p.size(), std::vector<double>(n, 0.0));
    for (std::size_t cfg = 0; cfg < (std::size_t{1} << n); ++cfg) {
        auto z = [&](std::size_t v) { return int((cfg >> v) & 1); };
        double pr = z(0) ? t.p_root_one() : 1 - t.p_root_one();
        for (std::size_t v = 1; v < n; ++v) pr *= z(v) == z(t.parent(v)) ? 0.5 * (1 + t.rho(v)) : 0.5 * (1 - t.rho(v));
        std::size_t leaves = 0;
        for (std::size_t v = t.level_offset(t.depth()); v < n; ++v) leaves |= std::size_t(z(v)) << t.leaf_index(v);
        b.p[leaves] += pr;
        for (std::size_t v = 0; v < n; ++v)
            if (z(v)) b.joint1[leaves][v] += pr;
    }
    return b;
}

std::size_t mask_of(const Vec& x, const HltmTree& t) {
    std::size_t m = 0;
    for (std::size_t i = 0; i < x.size(); ++i)
        if (x[i] == t.encoding().hi) m |= std::size_t{1} << i;
    return m;
}

HltmTree random_tree(Rng& rng, std::size_t depth, double lo = -0.95, double hi = 0.95) {
    return HltmTree::random(depth, 2, rng.uniform(-0.8, 0.8), lo, hi, rng);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace

TEST(HltmTree, LayoutAndParents) {
    auto t = HltmTree::uniform(3, 2, 0.0, 0.5);
    EXPECT_EQ(t.num_nodes(), 15u);
    EXPECT_EQ(t.num_leaves(), 8u);
    EXPECT_EQ(t.parent(1), 0u);
    EXPECT_EQ(t.parent(6), 2u);
    EXPECT_EQ(t.children(2), (std::vector<std::size_t>{5, 6}));
    EXPECT_TRUE(t.is_ancestor(0, 14));
    EXPECT_FALSE(t.is_ancestor(1, 14));
    EXPECT_THROW(HltmTree(2, 2, 0.0, {0.1, 0.2}), std::invalid_argument);
    EXPECT_THROW(HltmTree::uniform(2, 2, 0.0, 1.5), std::invalid_argument);
}

TEST(Sample, UnitPolarityCopiesRoot) {
    auto t = HltmTree::uniform(4, 2, 0.2, 1.0);
    Rng rng(1);
    for (int i = 0; i < 200; ++i) {
        auto z = sample(t, rng);
        for (auto v : z) EXPECT_EQ(v, z[0]);
    }
}

TEST(Sample, ZeroPolarityEdgeIsUniform) {
    std::vector<double> rho(6, 1.0);
    rho[0] = 0.0; // edge 0 -> 1
    HltmTree t(2, 2, 1.0, rho);
    Rng rng(2);
    const int n = 100000;
    int ones = 0;
    for (int i = 0; i < n; ++i) ones += sample(t, rng)[1];
    EXPECT_NEAR(ones / double(n), 0.5, 3 * std::sqrt(0.25 / n));
}

TEST(Sample, ConditionalMatchesPolarityWithinThreeSigma) {
    Rng rng(3);
    auto t = HltmTree::random(2, 2, 0.0, 0.1, 0.9, rng);
    const int n = 100000;
    std::vector<int> both(t.num_nodes(), 0), parent_one(t.num_nodes(), 0);
    for (int i = 0; i < n; ++i) {
        auto z = sample(t, rng);
        for (std::size_t v = 1; v < z.size(); ++v)
            if (z[t.parent(v)]) {
                ++parent_one[v];
                both[v] += z[v];
            }
    }
    for (std::size_t v = 1; v < t.num_nodes(); ++v) {
        const double p = 0.5 * (1 + t.rho(v));
        EXPECT_NEAR(both[v] / double(parent_one[v]), p, 3 * std::sqrt(p * (1 - p) / parent_one[v]));
    }
}

TEST(Augment, KeepsRootAndResamplesLeavesOnly) {
    Rng rng(4);
    auto t = HltmTree::uniform(1, 3, 0.0, 0.3);
    Assignment z = sample(t, rng);
    bool changed = false;
    for (int i = 0; i < 50; ++i) {
        auto a = augment(t, z, rng);
        EXPECT_EQ(a[0], z[0]);
        changed |= a != z;
    }
    EXPECT_TRUE(changed);
}

TEST(Augment, UnitPolarityIsIdentity) {
    Rng rng(5);
    auto t = HltmTree::uniform(3, 2, 0.0, 1.0);
    for (int i = 0; i < 20; ++i) {
        auto z = sample(t, rng);
        EXPECT_EQ(augment(t, z, rng), z);
    }
}

TEST(Augment, LeafMarginalMatchesEnumeration) {
    Rng rng(6);
    auto t = random_tree(rng, 2);
    auto e = enumerate(t);
    const Vec x1 = conditional_mean(e, [&] {
        Matrix F(t.num_leaves(), e.size());
        for (std::size_t c = 0; c < e.size(); ++c) F.set_col(c, e.x[c]);
        return F;
    }(), 0, 1);
    Assignment z(t.num_nodes(), 0);
    z[0] = 1;
    const int n = 100000;
    Vec mean(t.num_leaves(), 0.0);
    for (int i = 0; i < n; ++i) mean = mean + (1.0 / n) * visible(t, augment(t, z, rng));
    for (std::size_t i = 0; i < mean.size(); ++i) EXPECT_NEAR(mean[i], x1[i], 3 * 1.0 / std::sqrt(double(n)));
}

TEST(Polarity, AdjacentAndProduct) {
    std::vector<double> rho{0.9, 0.5, 0.8, 0.1, 0.2, 0.3};
    HltmTree t(2, 2, 0.0, rho);
    EXPECT_DOUBLE_EQ(polarity_product(t, 0, 1), 0.9);
    EXPECT_NEAR(polarity_product(t, 0, 3), 0.72, 1e-15);
    EXPECT_THROW(polarity_product(t, 1, 5), std::invalid_argument);
}

TEST(Polarity, DeepChainMatchesMarkovMarginalization) {
    Rng rng(7);
    auto t = HltmTree::random(5, 1, 0.0, -1.0, 1.0, rng);
    // P(z5 = 1 | z0 = 1) - P(z5 = 1 | z0 = 0) by summing all intermediate paths
    double diff = 0.0;
    for (int z0 = 0; z0 <= 1; ++z0) {
        double p1 = 0.0;
        for (int path = 0; path < 32; ++path) {
            int prev = z0;
            double pr = 1.0;
            for (int k = 0; k < 5; ++k) {
                const int z = (path >> k) & 1;
                pr *= z == prev ? 0.5 * (1 + t.rho(k + 1)) : 0.5 * (1 - t.rho(k + 1));
                prev = z;
            }
            if (prev) p1 += pr;
        }
        diff += z0 ? p1 : -p1;
    }
    EXPECT_NEAR(polarity_product(t, 0, 5), diff, 1e-12);
}

TEST(Transitions, ChainProductAndDecomposition) {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
        const Matrix P = transition_matrix(a) * transition_matrix(b);
        EXPECT_LE((P - transition_matrix(a * b)).max_abs(), 1e-12);
        Matrix half{{0.5, 0.5}, {0.5, 0.5}};
        EXPECT_LE((transition_matrix(a) - half - c_matrix(a)).max_abs(), 1e-15);
        EXPECT_LE((c_matrix(a) * c_matrix(b) - c_matrix(a * b)).max_abs(), 1e-15);
    }
}

TEST(Enumeration, MatchesBruteForceOverAllLatents) {
    Rng rng(9);
    for (std::size_t depth : {1u, 2u, 3u}) {
        auto t = random_tree(rng, depth);
        auto e = enumerate(t);
        auto bf = brute_force(t);
        double total = 0.0;
        for (std::size_t c = 0; c < e.size(); ++c) {
            const std::size_t m = mask_of(e.x[c], t);
            EXPECT_NEAR(e.p[c], bf.p[m], 1e-14);
            for (std::size_t v = 0; v < t.num_nodes(); ++v) EXPECT_NEAR(e.p[c] * e.post1[c][v], bf.joint1[m][v], 1e-14);
            total += e.p[c];
        }
        EXPECT_NEAR(total, 1.0, 1e-12);
    }
}

TEST(Enumeration, DatasetIsValidAndRootGrouped) {
    Rng rng(10);
    auto t = random_tree(rng, 2);
    auto ds = hltm_dataset(t);
    EXPECT_NO_THROW(ds.validate());
    ASSERT_EQ(ds.groups.size(), 2u);
    EXPECT_NEAR(ds.group_probs()[1], t.p_root_one(), 1e-12);
    EXPECT_THROW(enumerate(HltmTree::uniform(5, 2, 0.0, 0.5)), SizeLimitError);
}

TEST(Enumeration, MeanConnectionMatchesLatentBruteForce) {
    Rng rng(11);
    auto t = random_tree(rng, 2);
    Network net = make_mlp({4, 4, 2});
    net.init_uniform(rng);
    auto ds = hltm_dataset(t);
    auto bf = brute_force(t);
    for (int z0 = 0; z0 <= 1; ++z0) {
        const double pz = z0 ? t.p_root_one() : 1 - t.p_root_one();
        for (std::size_t l = 1; l <= 2; ++l) {
            Matrix expect;
            for (std::size_t m = 0; m < bf.p.size(); ++m) {
                const double w = (z0 ? bf.joint1[m][0] : bf.p[m] - bf.joint1[m][0]) / pz;
                Vec x(4);
                for (std::size_t i = 0; i < 4; ++i) x[i] = t.leaf_value((m >> i) & 1);
                Matrix K = connection(net, x, l);
                K *= w;
                if (expect.size() == 0) expect = K;
                else expect += K;
            }
            EXPECT_LE(rel_err(mean_connection(net, ds, z0, l), expect, 1e-12), 1e-12);
        }
    }
}

TEST(Enumeration, SimpleUpdateMatchesOperatorOnDepthTwoTree) {
    Rng rng(12);
    for (int trial = 0; trial < 5; ++trial) {
        auto t = random_tree(rng, 2);
        Network net = make_mlp({4, 4, 2});
        net.init_uniform(rng);
        auto ds = hltm_dataset(t);
        for (std::size_t l = 1; l <= 2; ++l) {
            // E[-(∂r+ - ∂r-)] over (group, x1, x+) and an independent x-;
            // per-pair gradients cached by leaf bitmask
            std::vector<std::vector<Vec>> cache(16, std::vector<Vec>(16));
            auto grad = [&](const Vec& a, const Vec& b) -> const Vec& {
                Vec& g = cache[mask_of(a, t)][mask_of(b, t)];
                if (g.empty()) g = pair_grad(net, net, a, b, l).backprop;
                return g;
            };
            Vec expect(net.width_in(l) * net.width_out(l), 0.0);
            const Vec P = ds.group_probs();
            for (std::size_t g = 0; g < ds.groups.size(); ++g)
                for (const auto& v1 : ds.groups[g])
                    for (const auto& vp : ds.groups[g])
                        for (const auto& base : ds.bases)
                            for (const auto& vn : ds.groups[base.group]) {
                                const double w = P[g] * v1.prob * vp.prob * base.prob * vn.prob;
                                axpy(-w, grad(v1.x, vp.x) - grad(v1.x, vn.x), expect);
                            }
            auto chk = verify_update_equation(net, ds, LossKind::simple(), l);
            EXPECT_LE(rel_err(chk.expected, expect, 1e-12), 1e-8);
            EXPECT_LE(chk.rel_err, 1e-8);
        }
    }
}

TEST(TreeNet, MasksFollowTheTree) {
    auto t = HltmTree::uniform(3, 2, 0.0, 0.5);
    auto tn = build_tree_network(t, 3);
    ASSERT_EQ(tn.net.num_linear(), 3u);
    EXPECT_EQ(tn.net.width_out(1), 4u * 3);
    EXPECT_EQ(tn.net.width_out(2), 2u * 3);
    EXPECT_EQ(tn.net.width_out(3), 3u);
    Rng rng(13);
    tn.net.init_uniform(rng);
    // unit 0 of layer 1 belongs to node 7 whose children are leaves 0 and 1
    const Matrix& W1 = tn.net.weight(1);
    for (std::size_t j = 0; j < 8; ++j) {
        if (j < 2) EXPECT_NE(W1(0, j), 0.0);
        else EXPECT_EQ(W1(0, j), 0.0);
    }
    // layer 2 rows 0..2 belong to node 1 (fed by nodes 3, 4 = units 0..5),
    // rows 3..5 to node 2 (fed by nodes 5, 6 = units 6..11)
    const Matrix& W2 = tn.net.weight(2);
    for (std::size_t j = 0; j < 12; ++j) {
        EXPECT_EQ(W2(0, j) != 0.0, j < 6);
        EXPECT_EQ(W2(3, j) != 0.0, j >= 6);
    }
    EXPECT_NO_THROW(tn.net.validate(tree_net_limits(tn)));
}

TEST(TreeNet, UnitRowsMatchNaiveForward) {
    Rng rng(14);
    auto t = random_tree(rng, 3);
    auto tn = build_tree_network(t, 2);
    tn.net.init_uniform(rng);
    const Vec x = visible(t, sample(t, rng));
    auto tr = tn.net.forward(x);
    EXPECT_LE(norm2(tn.unit_rows(tr, 0).col(0) - oracle::naive_forward(tn.net, x)), 1e-13);
    EXPECT_EQ(tn.unit_rows(tr, 9).col(0), Vec{x[2]});
}

TEST(ChildCovariance, ClosedFormMatchesEnumeration) {
    Rng rng(15);
    int checked = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t depth = 2 + trial % 3;
        auto t = random_tree(rng, depth);
        auto tn = build_tree_network(t, 1 + rng.below(3));
        tn.net.init_uniform(rng);
        auto e = enumerate(t);
        auto s = labeled_from_enumeration(e);
        auto tr = tn.net.forward(s.X);
        for (std::size_t mu = 0; mu < t.level_offset(t.depth()); ++mu) {
            const Matrix F = child_activations(t, tn, tr, mu);
            const auto nu = child_unit_latents(t, tn.map, mu);
            Vec sk(F.rows());
            for (std::size_t k = 0; k < F.rows(); ++k) {
                Matrix row(1, F.cols());
                std::copy(F.row_ptr(k), F.row_ptr(k) + F.cols(), row.row_ptr(0));
                sk[k] = 0.5 * (conditional_mean(e, row, nu[k], 1)[0] - conditional_mean(e, row, nu[k], 0)[0]);
            }
            const Matrix closed = closed_form_child_covariance(t, mu, sk, nu);
            const Matrix enumerated = enumerated_root_covariance(t, e, F);
            EXPECT_LE(rel_err(closed, enumerated, 1e-12), 1e-8) << "depth " << depth << " node " << mu;
            Matrix V(2, F.rows());
            const Vec m0 = conditional_mean(e, F, 0, 0), m1 = conditional_mean(e, F, 0, 1);
            for (std::size_t k = 0; k < F.rows(); ++k) V(0, k) = m0[k], V(1, k) = m1[k];
            const Matrix tr_form = tr_form_covariance({1 - t.p_root_one(), t.p_root_one()}, V);
            EXPECT_LE(rel_err(tr_form, enumerated, 1e-12), 1e-10);
            ++checked;
        }
    }
    EXPECT_GT(checked, 100);
}

TEST(ChildCovariance, DeterministicRootGivesZero) {
    std::vector<double> rho(6, 0.7);
    for (double r0 : {1.0, -1.0}) {
        HltmTree t(2, 2, r0, rho);
        const Matrix m = closed_form_child_covariance(t, 0, {0.3, -0.2}, {1, 2});
        EXPECT_EQ(m.max_abs(), 0.0);
    }
}

TEST(ChildCovariance, PolarityVanishesAlongDeepChains) {
    double prev = 1e300;
    for (std::size_t L = 3; L <= 8; ++L) {
        auto t = HltmTree::uniform(L, 1, 0.3, 0.9);
        const double o = o_factor(t, L - 1);
        EXPECT_LT(o, prev);
        prev = o;
    }
}

TEST(Selectivity, LeafLayerFollowsEncoding) {
    Rng rng(16);
    for (auto enc : {LeafEncoding{-1, 1}, LeafEncoding{0, 1}}) {
        auto t = HltmTree::random(2, 2, 0.1, 0.2, 0.9, rng, enc);
        auto tn = build_tree_network(t, 2);
        tn.net.init_uniform(rng);
        auto s = labeled_from_enumeration(enumerate(t));
        std::vector<std::size_t> leaves;
        for (std::size_t v = t.level_offset(2); v < t.num_nodes(); ++v) leaves.push_back(v);
        auto rep = measure_selectivity(tn, s, leaves);
        for (const auto& l : rep.latents) {
            EXPECT_NEAR(l.units[0].s, 0.5 * (enc.hi - enc.lo), 1e-12);
            EXPECT_NEAR(l.nc, 1.0, 1e-12);
        }
    }
}

TEST(Selectivity, ConstantUnitHasNoSelectivity) {
    SelectivityAccumulator acc;
    Matrix F(1, 4);
    for (std::size_t b = 0; b < 4; ++b) F(0, b) = 2.5;
    acc.add({0.25, 0.25, 0.25, 0.25}, {0, 1, 0, 1}, F, 0);
    auto r = acc.finish(0);
    EXPECT_EQ(r.units[0].s, 0.0);
    EXPECT_EQ(r.units[0].corr, 0.0);
    EXPECT_EQ(r.nc, 0.0);
}

TEST(Selectivity, SampledLabelsAgreeWithEnumeration) {
    Rng rng(17);
    auto t = random_tree(rng, 3, 0.5, 0.95);
    auto tn = build_tree_network(t, 3);
    tn.net.init_uniform(rng);
    auto exact = measure_selectivity(tn, labeled_from_enumeration(enumerate(t)), {0, 1, 3});
    std::vector<Assignment> zs;
    for (int i = 0; i < 100000; ++i) zs.push_back(sample(t, rng));
    auto mc = measure_selectivity(tn, labeled_from_samples(t, zs), {0, 1, 3});
    for (std::size_t q = 0; q < 3; ++q) {
        EXPECT_NEAR(mc.latents[q].nc, exact.latents[q].nc, 0.02);
        EXPECT_GE(exact.latents[q].nc, 0.0);
        EXPECT_LE(exact.latents[q].nc, 1.0);
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(mc.latents[q].units[j].s, exact.latents[q].units[j].s, 0.03);
    }
}

TEST(Selectivity, UntrainedWideRootCorrelation) {
    // L = 5, |N| = 10, rho ~ U[0.9, 1]: reported initial root NC 0.88 ± 0.05
    std::vector<double> ncs;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng = Rng(seed).split(0);
        auto t = HltmTree::random(5, 2, 0.0, 0.9, 1.0, rng);
        auto tn = build_tree_network(t, 10);
        tn.net.init_uniform(rng);
        std::vector<Assignment> zs;
        for (int i = 0; i < 8192; ++i) zs.push_back(sample(t, rng));
        ncs.push_back(root_nc(tn, labeled_from_samples(t, zs)));
    }
    EXPECT_NEAR(median(ncs), 0.88, 0.15);
}

TEST(Mills, QuadratureMatchesErfcForm) {
    for (double y : {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0}) {
        const double ref = std::sqrt(std::numbers::pi / 2) * std::exp(y * y / 2) * std::erfc(y / std::sqrt(2.0));
        EXPECT_NEAR(mills_ratio_quadrature(y), ref, 1e-9 * std::max(1.0, ref));
    }
}

TEST(Mills, BracketsContainQuadrature) {
    for (int i = 0; i < 20; ++i) {
        const double y = std::pow(10.0, -2.0 + 4.0 * i / 19.0);
        auto m = mills_ratio(y);
        EXPECT_TRUE(m.tight_ok) << y;
        EXPECT_TRUE(m.coarse_ok) << y;
    }
    auto one = mills_ratio(1.0);
    EXPECT_GT(one.value, 2 / (std::sqrt(5.0) + 1));
    EXPECT_LT(one.value, 4.0 / 6.0);
    EXPECT_NEAR(mills_ratio(100.0).value * 100.0, 1.0, 0.01);
    for (double y : {0.5, 1.0, 2.0, 5.0}) EXPECT_TRUE(mills_ratio(y).coarse_ok);
}

TEST(LuckyBound, RhoThreshold) {
    EXPECT_NEAR(rho_threshold(9.0), std::sqrt(0.4), 1e-15);
    const Vec s{1.0, 1.0};
    EXPECT_GT(selectivity_threshold(1, 1, s, {0.6325, 0.6325}, 9, 0), 0.0);
    EXPECT_LT(selectivity_threshold(1, 1, s, {0.6324, 0.6324}, 9, 0), 0.0);
    EXPECT_LT(selectivity_threshold(1, 1, s, {0.9, 0.9}, 9, 0.9), selectivity_threshold(1, 1, s, {0.9, 0.9}, 9, 0));
}

TEST(LuckyBound, BracketOrderingAndGrowth) {
    auto b = lucky_node_bound(9, 0.2, 1.0);
    EXPECT_LE(b.r_hat_lo, b.r_hat);
    EXPECT_GE(b.r_hat_hi, b.r_hat);
    EXPECT_LE(b.n_lo, b.n_required);
    EXPECT_GE(b.n_hi, b.n_required);
    double prev = 0;
    for (double g : {0.5, 0.9, 0.99, 0.999}) {
        const double n = lucky_node_bound(9, g, 1.0).n_required;
        EXPECT_GT(n, prev);
        prev = n;
    }
    EXPECT_THROW(lucky_node_bound(9, 1.0, 1.0), std::invalid_argument);
}

namespace {

// P(Y1 >= a, Y2 >= 0) for a standard bivariate normal with correlation r,
// as ∫_a^∞ φ(y) Φ(r y / √(1-r²)) dy on a fine midpoint grid.
double bivariate_tail(double a, double r) {
    const double h = 1e-4;
    double s = 0;
    for (double y = a + h / 2; y < a + 12; y += h) {
        const double phi = std::exp(-y * y / 2) / std::sqrt(2 * std::numbers::pi);
        s += phi * 0.5 * std::erfc(-r * y / std::sqrt(2 * (1 - r * r))) * h;
    }
    return s;
}

} // namespace

TEST(LuckyBound, LuckyEventRateMatchesGaussianTail) {
    const double x = (1.0 - std::sqrt(1.0 - 0.04)) / 0.2; // 2x / (1 + x²) = 0.2
    Vec up(64, x), um(64, x);
    for (int i = 0; i < 32; ++i) up[i] = 1.0, um[32 + i] = 1.0;
    const Vec h = 0.5 * (up + um), a = 0.5 * (up - um);
    EXPECT_NEAR(gamma_of(h, a), 0.2, 1e-12);
    const std::size_t units = 2698, trials = 200;
    auto r = lucky_node_empirical(h, a, 9, 1.0, units, trials, Rng(18), WeightLaw::Gaussian);
    const double p = bivariate_tail(3.0, -0.2);
    EXPECT_NEAR(r.unit_rate, p, 4 * std::sqrt(p / (units * trials)));
    EXPECT_TRUE(r.gaps_positive);
    // the lemma's bound with the full quadratic form stays below the exact tail
    auto b = lucky_node_bound(9, 0.2, 1.0);
    EXPECT_LE(1.0 / b.n_hi_quadratic, p);
    EXPECT_GT(1.0 / b.n_hi, p);
}

TEST(ReluLemmas, SharpenedJensenAndVarianceSquashing) {
    Rng rng(19);
    for (int i = 0; i < 1000; ++i) {
        const std::size_t n = 2 + rng.below(8);
        Vec v(n), p(n);
        double s = 0;
        for (std::size_t k = 0; k < n; ++k) {
            v[k] = rng.uniform(-3, 3);
            p[k] = rng.uniform(0.01, 1);
            s += p[k];
        }
        for (auto& q : p) q /= s;
        auto m = relu_moments(v, p);
        EXPECT_GE(m.jensen_gap(), -1e-15);
        EXPECT_LE(m.jensen_gap(), std::sqrt(m.var) + 1e-15);
        EXPECT_LE(m.relu_var, m.var + 1e-15);
    }
}

TEST(Simclr, GradientMatchesFiniteDifference) {
    Rng rng(20);
    auto t = random_tree(rng, 3, 0.5, 0.95);
    auto tn = build_tree_network(t, 2);
    tn.net.init_uniform(rng);
    Matrix X1(8, 6), X2(8, 6);
    for (std::size_t b = 0; b < 6; ++b) {
        auto z = sample(t, rng);
        write_visible(t, augment(t, z, rng), X1, b);
        write_visible(t, augment(t, z, rng), X2, b);
    }
    SimclrOptions opt;
    opt.tau = 0.5;
    const auto g = simclr_grad(tn.net, X1, X2, opt);
    for (std::size_t l = 1; l <= 3; ++l) {
        Vec fd = oracle::fd_weight_grad(tn.net, l, [&](const Network& n) { return simclr_grad(n, X1, X2, opt).loss; });
        // masked-out entries carry no gradient; compare on the mask only
        Vec an = vec(g.dW[l - 1]);
        const Matrix& W = tn.net.weight(l);
        const Vec wv = vec(W);
        for (std::size_t q = 0; q < wv.size(); ++q)
            if (wv[q] == 0.0) fd[q] = 0.0;
        EXPECT_LE(rel_err(an, fd, 1e-6), 1e-5) << "layer " << l;
    }
}

TEST(Simclr, OperatorNormGrowsDuringTraining) {
    std::vector<double> before, after;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng = Rng(100 + seed).split(0);
        auto t = HltmTree::random(3, 2, 0.0, 0.7, 1.0, rng);
        auto tn = build_tree_network(t, 2);
        tn.net.init_uniform(rng);
        auto ds = hltm_dataset(t);
        before.push_back(op_simp(tn.net, ds, 3).m.frobenius());
        SimclrOptions opt;
        opt.n_samples = 2048;
        const auto roots = draw_roots(t, opt.n_samples, rng);
        for (int ep = 0; ep < 10; ++ep) simclr_epoch(tn.net, t, roots, opt, rng);
        after.push_back(op_simp(tn.net, ds, 3).m.frobenius());
    }
    EXPECT_GT(median(after), median(before));
}

TEST(Dump, OneAssignmentPerLine) {
    auto t = HltmTree::uniform(1, 2, 0.0, 1.0);
    std::ostringstream os;
    write_assignments(os, t, {Assignment{1, 1, 1}, Assignment{0, 0, 0}});
    EXPECT_EQ(os.str(), "1 1 1\n0 -1 -1\n");
}
