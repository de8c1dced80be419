#pragma once

// Symmetric binary hierarchical latent tree models (SB-HLTM).
//
// Nodes are stored breadth first: node 0 is the root z0, level k holds
// branching^k nodes, and the last level holds the visible leaves. Each
// non-root node carries the polarity rho of the edge from its parent, with
// P(child = parent) = (1 + rho) / 2. The root has P(z0 = 1) = (1 + rho0) / 2.
//
// The matching network has one masked Linear layer per latent level; every
// latent owns |N| units whose receptive field is the units of its children.

#include "ssldyn/dataset.hpp"
#include "ssldyn/linalg.hpp"
#include "ssldyn/losses.hpp"
#include "ssldyn/network.hpp"
#include "ssldyn/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace ssldyn {

inline constexpr std::size_t kNoParent = std::numeric_limits<std::size_t>::max();

struct LeafEncoding {
    double lo = -1.0; // value of a leaf in state 0
    double hi = 1.0;  // value of a leaf in state 1
};

class HltmTree {
public:
    // Complete tree of the given depth (number of edges from root to leaf).
    // rho holds one polarity per non-root node in breadth-first order.
    HltmTree(std::size_t depth, std::size_t branching, double rho0, std::vector<double> rho, LeafEncoding enc = {})
        : depth_(depth), branching_(branching), rho0_(rho0), enc_(enc) {
        if (depth == 0) throw std::invalid_argument("HltmTree: depth must be at least 1");
        if (branching == 0) throw std::invalid_argument("HltmTree: branching must be at least 1");
        if (std::fabs(rho0) > 1.0) throw std::invalid_argument("HltmTree: rho0 outside [-1, 1]");
        offset_.push_back(0);
        std::size_t width = 1;
        for (std::size_t k = 0; k <= depth; ++k) {
            offset_.push_back(offset_.back() + width);
            width *= branching;
        }
        const std::size_t n = offset_.back();
        if (rho.size() != n - 1) throw std::invalid_argument("HltmTree: need one polarity per non-root node");
        rho_.assign(1, 0.0);
        for (double r : rho) {
            if (!(std::fabs(r) <= 1.0)) throw std::invalid_argument("HltmTree: polarity outside [-1, 1]");
            rho_.push_back(r);
        }
        level_.resize(n);
        parent_.resize(n);
        for (std::size_t k = 0; k <= depth; ++k)
            for (std::size_t i = offset_[k]; i < offset_[k + 1]; ++i) {
                level_[i] = k;
                parent_[i] = k == 0 ? kNoParent : offset_[k - 1] + (i - offset_[k]) / branching;
            }
    }

    // Per-edge polarities drawn from Uniform[rho_lo, rho_hi].
    static HltmTree random(std::size_t depth, std::size_t branching, double rho0, double rho_lo, double rho_hi, Rng& rng,
                           LeafEncoding enc = {}) {
        std::size_t n = 0, width = 1;
        for (std::size_t k = 0; k <= depth; ++k, width *= branching) n += width;
        std::vector<double> rho(n - 1);
        for (auto& r : rho) r = rng.uniform(rho_lo, rho_hi);
        return HltmTree(depth, branching, rho0, std::move(rho), enc);
    }

    static HltmTree uniform(std::size_t depth, std::size_t branching, double rho0, double rho, LeafEncoding enc = {}) {
        std::size_t n = 0, width = 1;
        for (std::size_t k = 0; k <= depth; ++k, width *= branching) n += width;
        return HltmTree(depth, branching, rho0, std::vector<double>(n - 1, rho), enc);
    }

    std::size_t depth() const { return depth_; }
    std::size_t branching() const { return branching_; }
    double rho0() const { return rho0_; }
    double rho(std::size_t node) const { return rho_.at(node); }
    const LeafEncoding& encoding() const { return enc_; }
    std::size_t num_nodes() const { return offset_.back(); }
    std::size_t num_leaves() const { return level_size(depth_); }
    std::size_t level(std::size_t node) const { return level_.at(node); }
    std::size_t level_offset(std::size_t k) const { return offset_.at(k); }
    std::size_t level_size(std::size_t k) const { return offset_.at(k + 1) - offset_.at(k); }
    std::size_t parent(std::size_t node) const { return parent_.at(node); }
    bool is_leaf(std::size_t node) const { return level_.at(node) == depth_; }
    std::size_t leaf_index(std::size_t node) const { return node - offset_[depth_]; }
    std::size_t first_child(std::size_t node) const {
        return offset_[level_[node] + 1] + (node - offset_[level_[node]]) * branching_;
    }
    std::vector<std::size_t> children(std::size_t node) const {
        if (is_leaf(node)) return {};
        std::vector<std::size_t> c(branching_);
        for (std::size_t i = 0; i < branching_; ++i) c[i] = first_child(node) + i;
        return c;
    }
    bool is_ancestor(std::size_t mu, std::size_t nu) const {
        for (std::size_t v = nu; v != kNoParent; v = parent_[v])
            if (v == mu) return true;
        return false;
    }

    double p_root_one() const { return 0.5 * (1.0 + rho0_); }
    double leaf_value(int z) const { return z ? enc_.hi : enc_.lo; }

private:
    std::size_t depth_, branching_;
    double rho0_;
    LeafEncoding enc_;
    std::vector<double> rho_;
    std::vector<std::size_t> offset_, level_, parent_;
};

using Assignment = std::vector<std::uint8_t>;

inline Assignment sample(const HltmTree& t, Rng& rng) {
    Assignment z(t.num_nodes());
    z[0] = rng.bernoulli(t.p_root_one());
    for (std::size_t v = 1; v < z.size(); ++v) {
        const bool keep = rng.bernoulli(0.5 * (1.0 + t.rho(v)));
        z[v] = keep ? z[t.parent(v)] : 1 - z[t.parent(v)];
    }
    return z;
}

// Keeps z0 and redraws every other latent top-down.
inline Assignment augment(const HltmTree& t, const Assignment& z, Rng& rng) {
    Assignment out(z.size());
    out[0] = z.at(0);
    for (std::size_t v = 1; v < z.size(); ++v) {
        const bool keep = rng.bernoulli(0.5 * (1.0 + t.rho(v)));
        out[v] = keep ? out[t.parent(v)] : 1 - out[t.parent(v)];
    }
    return out;
}

inline Vec visible(const HltmTree& t, const Assignment& z) {
    Vec x(t.num_leaves());
    const std::size_t off = t.level_offset(t.depth());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = t.leaf_value(z[off + i]);
    return x;
}

// Writes the visible vector of z into column b of X.
inline void write_visible(const HltmTree& t, const Assignment& z, Matrix& X, std::size_t b) {
    const std::size_t off = t.level_offset(t.depth());
    for (std::size_t i = 0; i < t.num_leaves(); ++i) X(i, b) = t.leaf_value(z[off + i]);
}

// One assignment per line: root value, then the visible vector.
inline void write_assignments(std::ostream& os, const HltmTree& t, const std::vector<Assignment>& zs) {
    char buf[32];
    for (const auto& z : zs) {
        os << int(z[0]);
        for (double v : visible(t, z)) {
            std::snprintf(buf, sizeof buf, " %.17g", v);
            os << buf;
        }
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Transition algebra

// P(i, j) = P(z_child = j | z_parent = i).
inline Matrix transition_matrix(double rho) {
    const double s = 0.5 * (1.0 + rho), d = 0.5 * (1.0 - rho);
    return Matrix{{s, d}, {d, s}};
}

// C(rho) = rho/2 q qᵀ with q = [-1, 1].
inline Matrix c_matrix(double rho) {
    return Matrix{{0.5 * rho, -0.5 * rho}, {-0.5 * rho, 0.5 * rho}};
}

// Product of edge polarities from mu down to nu; cross-checked against the
// product of transition matrices.
inline double polarity_product(const HltmTree& t, std::size_t mu, std::size_t nu) {
    if (!t.is_ancestor(mu, nu)) throw std::invalid_argument("polarity_product: mu is not an ancestor of nu");
    std::vector<std::size_t> path;
    for (std::size_t v = nu; v != mu; v = t.parent(v)) path.push_back(v);
    double prod = 1.0;
    Matrix P = Matrix::identity(2);
    for (auto it = path.rbegin(); it != path.rend(); ++it) {
        prod *= t.rho(*it);
        P = P * transition_matrix(t.rho(*it));
    }
    const double from_matrix = P(1, 1) - P(0, 1);
    if (std::fabs(from_matrix - prod) > 1e-12)
        throw std::logic_error("polarity_product: transition-matrix product disagrees with edge product");
    return prod;
}

// ---------------------------------------------------------------------------
// Exact enumeration over leaf configurations

struct Enumeration {
    std::vector<Vec> x;           // visible vector per configuration
    Vec p;                        // P(leaves)
    std::vector<Vec> post1;       // post1[c][node] = P(z_node = 1 | leaves_c)
    Vec marginal1;                // P(z_node = 1)

    std::size_t size() const { return x.size(); }
};

inline constexpr std::size_t kMaxEnumeratedLeaves = 16;

inline Enumeration enumerate(const HltmTree& t) {
    const std::size_t nl = t.num_leaves(), n = t.num_nodes();
    if (nl > kMaxEnumeratedLeaves) throw SizeLimitError("enumerate: more than 16 leaves");
    Enumeration e;
    e.marginal1.assign(n, 0.0);
    std::vector<std::array<double, 2>> lam(n), up(n), down(n);
    const std::size_t count = std::size_t{1} << nl;
    for (std::size_t cfg = 0; cfg < count; ++cfg) {
        // upward: lam[v](z) = P(leaves under v | z_v = z); up[v](z) = message to the parent
        for (std::size_t v = n; v-- > 0;) {
            if (t.is_leaf(v)) {
                const int bit = (cfg >> t.leaf_index(v)) & 1;
                lam[v] = {bit ? 0.0 : 1.0, bit ? 1.0 : 0.0};
            } else {
                lam[v] = {1.0, 1.0};
                for (std::size_t c : t.children(v)) {
                    lam[v][0] *= up[c][0];
                    lam[v][1] *= up[c][1];
                }
            }
            if (v > 0) {
                const double s = 0.5 * (1.0 + t.rho(v)), d = 0.5 * (1.0 - t.rho(v));
                up[v] = {s * lam[v][0] + d * lam[v][1], d * lam[v][0] + s * lam[v][1]};
            }
        }
        const double p1 = t.p_root_one();
        const double pl = (1.0 - p1) * lam[0][0] + p1 * lam[0][1];
        if (pl <= 0.0) continue;
        // downward: down[v](z) = P(z_v = z, leaves outside v's subtree)
        down[0] = {1.0 - p1, p1};
        Vec post(n);
        for (std::size_t v = 0; v < n; ++v) {
            if (v > 0) {
                const std::size_t par = t.parent(v);
                std::array<double, 2> other{down[par][0], down[par][1]};
                for (std::size_t c : t.children(par)) {
                    if (c == v) continue;
                    other[0] *= up[c][0];
                    other[1] *= up[c][1];
                }
                const double s = 0.5 * (1.0 + t.rho(v)), d = 0.5 * (1.0 - t.rho(v));
                down[v] = {s * other[0] + d * other[1], d * other[0] + s * other[1]};
            }
            post[v] = down[v][1] * lam[v][1] / pl;
        }
        Vec x(nl);
        for (std::size_t i = 0; i < nl; ++i) x[i] = t.leaf_value((cfg >> i) & 1);
        for (std::size_t v = 0; v < n; ++v) e.marginal1[v] += pl * post[v];
        e.x.push_back(std::move(x));
        e.p.push_back(pl);
        e.post1.push_back(std::move(post));
    }
    return e;
}

// Root-grouped augmentation dataset: one group per root value, views are the
// leaf configurations weighted by P(leaves | z0).
inline AugmentedDataset hltm_dataset(const HltmTree& t, const Enumeration& e) {
    AugmentedDataset d;
    for (int z0 = 0; z0 <= 1; ++z0) {
        const double pz = z0 ? t.p_root_one() : 1.0 - t.p_root_one();
        if (pz <= 0.0) continue;
        std::vector<AugmentedDataset::View> views;
        for (std::size_t c = 0; c < e.size(); ++c) {
            const double joint = e.p[c] * (z0 ? e.post1[c][0] : 1.0 - e.post1[c][0]);
            if (joint <= 0.0) continue;
            views.push_back({joint / pz, e.x[c]});
            d.bases.push_back({joint, e.x[c], d.groups.size()});
        }
        d.groups.push_back(std::move(views));
    }
    return d;
}

inline AugmentedDataset hltm_dataset(const HltmTree& t) { return hltm_dataset(t, enumerate(t)); }

// E[f | z_node = value] from per-configuration values f[c] (rows of F are units).
inline Vec conditional_mean(const Enumeration& e, const Matrix& F, std::size_t node, int value) {
    Vec m(F.rows(), 0.0);
    double mass = 0.0;
    for (std::size_t c = 0; c < e.size(); ++c) {
        const double w = e.p[c] * (value ? e.post1[c][node] : 1.0 - e.post1[c][node]);
        mass += w;
        for (std::size_t k = 0; k < F.rows(); ++k) m[k] += w * F(k, c);
    }
    if (mass <= 0.0) throw std::domain_error("conditional_mean: conditioning event has zero probability");
    for (auto& v : m) v /= mass;
    return m;
}

// V_{z0}[E[f | z0]] by enumeration.
inline Matrix enumerated_root_covariance(const HltmTree& t, const Enumeration& e, const Matrix& F) {
    const double p1 = t.p_root_one();
    if (p1 <= 0.0 || p1 >= 1.0) return Matrix(F.rows(), F.rows());
    const Vec m1 = conditional_mean(e, F, 0, 1), m0 = conditional_mean(e, F, 0, 0);
    return (p1 * (1.0 - p1)) * outer(m1 - m0, m1 - m0);
}

// General transition-regularized form Vᵀ (P0 - P0 1 1ᵀ P0) V, where P0 is the
// root marginal (as a diagonal) and row i of V is E[f | z0 = i].
inline Matrix tr_form_covariance(const Vec& p0, const Matrix& V) {
    if (V.rows() != p0.size()) throw std::invalid_argument("tr_form_covariance: shape mismatch");
    Matrix mid = Matrix::diag(p0) - outer(p0, p0);
    return V.transpose() * mid * V;
}

// o_mu a aᵀ with a_k = rho_{mu, nu(k)} s_k and o_mu = rho_{0 mu}^2 (1 - rho0^2).
inline Matrix closed_form_child_covariance(const HltmTree& t, std::size_t mu, const Vec& s,
                                           const std::vector<std::size_t>& nu_of_unit) {
    if (s.size() != nu_of_unit.size()) throw std::invalid_argument("closed_form_child_covariance: shape mismatch");
    Vec a(s.size());
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (t.parent(nu_of_unit[k]) != mu) throw std::invalid_argument("closed_form_child_covariance: unit not under mu");
        a[k] = t.rho(nu_of_unit[k]) * s[k];
    }
    const double r0mu = polarity_product(t, 0, mu);
    const double o = r0mu * r0mu * (1.0 - t.rho0() * t.rho0());
    return o * outer(a, a);
}

inline double o_factor(const HltmTree& t, std::size_t mu) {
    const double r = polarity_product(t, 0, mu);
    return r * r * (1.0 - t.rho0() * t.rho0());
}

// ---------------------------------------------------------------------------
// Tree-structured network

struct NodeMap {
    std::size_t per_latent = 1;          // |N_mu|
    std::vector<std::size_t> act_index;  // per node: index into ForwardTrace::acts
    std::vector<std::size_t> first_unit; // per node: first row within that activation
    std::vector<std::size_t> count;      // per node: number of units (1 for leaves)
};

struct TreeNet {
    Network net;
    NodeMap map;

    // Activations of the units of `node` for every sample (count x B).
    Matrix unit_rows(const ForwardTrace& tr, std::size_t node) const {
        const Matrix& A = tr.acts.at(map.act_index[node]);
        Matrix out(map.count[node], A.cols());
        for (std::size_t j = 0; j < out.rows(); ++j)
            std::copy(A.row_ptr(map.first_unit[node] + j), A.row_ptr(map.first_unit[node] + j) + A.cols(), out.row_ptr(j));
        return out;
    }
};

// Hidden levels use ReLU; the root block is linear. The root block is
// followed by L2Normalize when l2_normalize is set. hidden_bn inserts a
// BatchNorm between every hidden masked Linear and its ReLU.
inline TreeNet build_tree_network(const HltmTree& t, std::size_t per_latent, bool l2_normalize = false,
                                  std::optional<BatchNormConfig> hidden_bn = std::nullopt) {
    if (per_latent == 0) throw std::invalid_argument("build_tree_network: need at least one unit per latent");
    TreeNet tn;
    tn.map.per_latent = per_latent;
    const std::size_t n = t.num_nodes();
    tn.map.act_index.assign(n, 0);
    tn.map.first_unit.assign(n, 0);
    tn.map.count.assign(n, per_latent);
    for (std::size_t v = t.level_offset(t.depth()); v < n; ++v) {
        tn.map.first_unit[v] = t.leaf_index(v);
        tn.map.count[v] = 1;
    }
    tn.net = Network(t.num_leaves());
    for (std::size_t k = t.depth(); k-- > 0;) {
        std::vector<std::vector<std::size_t>> mask;
        for (std::size_t v = t.level_offset(k); v < t.level_offset(k + 1); ++v) {
            tn.map.first_unit[v] = (v - t.level_offset(k)) * per_latent;
            std::vector<std::size_t> rf;
            for (std::size_t c : t.children(v))
                for (std::size_t j = 0; j < tn.map.count[c]; ++j) rf.push_back(tn.map.first_unit[c] + j);
            for (std::size_t j = 0; j < per_latent; ++j) mask.push_back(rf);
        }
        const std::size_t width = mask.size();
        tn.net.add_linear_masked(width, std::move(mask));
        if (k > 0 && hidden_bn) tn.net.add_batch_norm(*hidden_bn);
        if (k > 0) tn.net.add_relu();
        const std::size_t act = tn.net.layers().size();
        for (std::size_t v = t.level_offset(k); v < t.level_offset(k + 1); ++v) tn.map.act_index[v] = act;
    }
    if (l2_normalize) tn.net.add_l2_normalize();
    return tn;
}

inline NetLimits tree_net_limits(const TreeNet& tn) {
    NetLimits lim;
    lim.max_width = tn.net.input_dim();
    for (const auto& L : tn.net.layers()) lim.max_width = std::max(lim.max_width, L.out_dim);
    return lim;
}

// Latent ν(k) of every unit feeding mu's units, in mask order.
inline std::vector<std::size_t> child_unit_latents(const HltmTree& t, const NodeMap& m, std::size_t mu) {
    std::vector<std::size_t> nu;
    for (std::size_t c : t.children(mu))
        for (std::size_t j = 0; j < m.count[c]; ++j) nu.push_back(c);
    return nu;
}

// Activations of the units feeding mu (stacked children), one column per sample.
inline Matrix child_activations(const HltmTree& t, const TreeNet& tn, const ForwardTrace& tr, std::size_t mu) {
    std::vector<Matrix> parts;
    std::size_t rows = 0;
    for (std::size_t c : t.children(mu)) {
        parts.push_back(tn.unit_rows(tr, c));
        rows += parts.back().rows();
    }
    Matrix F(rows, tr.batch());
    std::size_t r = 0;
    for (const auto& P : parts)
        for (std::size_t i = 0; i < P.rows(); ++i, ++r)
            std::copy(P.row_ptr(i), P.row_ptr(i) + P.cols(), F.row_ptr(r));
    return F;
}

// ---------------------------------------------------------------------------
// Selectivity and normalized correlation

struct UnitSelectivity {
    double v1 = 0, v0 = 0, vbar = 0, s = 0, corr = 0;
};

struct LatentSelectivity {
    std::size_t node = 0;
    std::vector<UnitSelectivity> units;
    double nc = 0.0; // max_j |corr(f_j, z)|
};

struct SelectivityReport {
    std::vector<LatentSelectivity> latents;

    const LatentSelectivity& at(std::size_t node) const {
        for (const auto& l : latents)
            if (l.node == node) return l;
        throw std::out_of_range("SelectivityReport: node not measured");
    }
};

// Weighted samples with (possibly soft) labels: z1[node][b] = P(z_node = 1 | x_b).
struct LabeledSamples {
    Matrix X;
    Vec w;
    std::vector<Vec> z1;
};

inline LabeledSamples labeled_from_enumeration(const Enumeration& e) {
    LabeledSamples s;
    s.X = Matrix(e.x.front().size(), e.size());
    for (std::size_t c = 0; c < e.size(); ++c) s.X.set_col(c, e.x[c]);
    s.w = e.p;
    s.z1.assign(e.marginal1.size(), Vec(e.size()));
    for (std::size_t c = 0; c < e.size(); ++c)
        for (std::size_t v = 0; v < e.marginal1.size(); ++v) s.z1[v][c] = e.post1[c][v];
    return s;
}

inline LabeledSamples labeled_from_samples(const HltmTree& t, const std::vector<Assignment>& zs) {
    LabeledSamples s;
    s.X = Matrix(t.num_leaves(), zs.size());
    s.w.assign(zs.size(), 1.0 / static_cast<double>(zs.size()));
    s.z1.assign(t.num_nodes(), Vec(zs.size()));
    for (std::size_t b = 0; b < zs.size(); ++b) {
        write_visible(t, zs[b], s.X, b);
        for (std::size_t v = 0; v < t.num_nodes(); ++v) s.z1[v][b] = zs[b][v];
    }
    return s;
}

// Running sums for one latent's units.
struct SelectivityAccumulator {
    double sw = 0, swz = 0;
    Vec swf, swf2, swzf;

    void add(const Vec& w, const Vec& z1, const Matrix& F, std::size_t col0) {
        if (swf.empty()) swf.assign(F.rows(), 0.0), swf2.assign(F.rows(), 0.0), swzf.assign(F.rows(), 0.0);
        for (std::size_t b = 0; b < F.cols(); ++b) {
            sw += w[col0 + b];
            swz += w[col0 + b] * z1[col0 + b];
        }
        for (std::size_t j = 0; j < F.rows(); ++j) {
            const double* f = F.row_ptr(j);
            double a = 0, b2 = 0, c = 0;
            for (std::size_t b = 0; b < F.cols(); ++b) {
                const double wb = w[col0 + b];
                a += wb * f[b];
                b2 += wb * f[b] * f[b];
                c += wb * z1[col0 + b] * f[b];
            }
            swf[j] += a;
            swf2[j] += b2;
            swzf[j] += c;
        }
    }

    LatentSelectivity finish(std::size_t node) const {
        LatentSelectivity out;
        out.node = node;
        const double pz = swz / sw;
        const double var_z = pz * (1.0 - pz);
        for (std::size_t j = 0; j < swf.size(); ++j) {
            UnitSelectivity u;
            const double ef = swf[j] / sw, ef2 = swf2[j] / sw, ezf = swzf[j] / sw;
            if (swz > 0) u.v1 = swzf[j] / swz;
            if (sw - swz > 0) u.v0 = (swf[j] - swzf[j]) / (sw - swz);
            u.vbar = 0.5 * (u.v1 + u.v0);
            u.s = 0.5 * (u.v1 - u.v0);
            const double var_f = std::max(0.0, ef2 - ef * ef);
            const double cov = ezf - ef * pz;
            const double den = std::sqrt(var_f * var_z);
            u.corr = den > 1e-15 * std::max(1.0, ef2) ? std::clamp(cov / den, -1.0, 1.0) : 0.0;
            out.nc = std::max(out.nc, std::fabs(u.corr));
            out.units.push_back(u);
        }
        return out;
    }
};

// Chunked so that large sample sets never materialize every activation at once.
inline SelectivityReport measure_selectivity(const TreeNet& tn, const LabeledSamples& s, const std::vector<std::size_t>& nodes,
                                             std::size_t chunk = 4096) {
    std::vector<SelectivityAccumulator> acc(nodes.size());
    const std::size_t B = s.X.cols();
    for (std::size_t c0 = 0; c0 < B; c0 += chunk) {
        const std::size_t cn = std::min(chunk, B - c0);
        Matrix Xc(s.X.rows(), cn);
        for (std::size_t i = 0; i < s.X.rows(); ++i) std::copy(s.X.row_ptr(i) + c0, s.X.row_ptr(i) + c0 + cn, Xc.row_ptr(i));
        const ForwardTrace tr = tn.net.forward(Xc);
        for (std::size_t q = 0; q < nodes.size(); ++q) acc[q].add(s.w, s.z1.at(nodes[q]), tn.unit_rows(tr, nodes[q]), c0);
    }
    SelectivityReport rep;
    for (std::size_t q = 0; q < nodes.size(); ++q) rep.latents.push_back(acc[q].finish(nodes[q]));
    return rep;
}

inline double root_nc(const TreeNet& tn, const LabeledSamples& s) { return measure_selectivity(tn, s, {0}).latents[0].nc; }

// ---------------------------------------------------------------------------
// Lucky nodes at initialization

// r(y) = ∫_0^∞ exp(-y t - t²/2) dt by adaptive Simpson on [0, T], T = min(40, 40/y).
// The tolerance is relative to 2/(√(y²+4)+y), which is within a factor of 2
// of r(y); the analytic brackets get very tight for large y.
inline double mills_ratio_quadrature(double y, double rel_tol = 1e-14) {
    if (y < 0) throw std::invalid_argument("mills_ratio_quadrature: y must be non-negative");
    const double tol = rel_tol * 2.0 / (std::sqrt(y * y + 4.0) + y);
    auto f = [y](double t) { return std::exp(-y * t - 0.5 * t * t); };
    const double T = y > 1.0 ? 40.0 / y : 40.0;
    std::function<double(double, double, double, double, double, double, int)> rec =
        [&](double a, double b, double fa, double fm, double fb, double whole, int depth) -> double {
        const double m = 0.5 * (a + b), lm = 0.5 * (a + m), rm = 0.5 * (m + b);
        const double flm = f(lm), frm = f(rm);
        const double left = (m - a) / 6.0 * (fa + 4 * flm + fm), right = (b - m) / 6.0 * (fm + 4 * frm + fb);
        if (depth <= 0 || std::fabs(left + right - whole) <= 15.0 * tol) return left + right + (left + right - whole) / 15.0;
        return rec(a, m, fa, flm, fm, left, depth - 1) + rec(m, b, fm, frm, fb, right, depth - 1);
    };
    const double fa = f(0), fm = f(0.5 * T), fb = f(T);
    return rec(0, T, fa, fm, fb, T / 6.0 * (fa + 4 * fm + fb), 60);
}

inline double mills_tight_lo(double y) { return 2.0 / (std::sqrt(y * y + 4.0) + y); }
inline double mills_tight_hi(double y) { return 4.0 / (std::sqrt(y * y + 8.0) + 3.0 * y); }
inline double mills_coarse_lo(double y) { return y / (1.0 + y * y); }
inline double mills_coarse_hi(double y) { return 1.0 / y; }

struct MillsRatio {
    double y = 0, value = 0, e = 0;
    double tight_lo = 0, tight_hi = 0, coarse_lo = 0, coarse_hi = 0;
    bool tight_ok = false, coarse_ok = false;
};

inline MillsRatio mills_ratio(double y) {
    MillsRatio m;
    m.y = y;
    m.value = mills_ratio_quadrature(y);
    m.e = 1.0 / m.value - y;
    if (y > 0) {
        m.tight_lo = mills_tight_lo(y);
        m.tight_hi = mills_tight_hi(y);
        m.coarse_lo = mills_coarse_lo(y);
        m.coarse_hi = mills_coarse_hi(y);
        m.tight_ok = m.tight_lo < m.value && m.value < m.tight_hi;
        m.coarse_ok = m.coarse_lo < m.value && m.value < m.coarse_hi && 0 < m.e && m.e < 1.0 / y;
    }
    return m;
}

struct LuckyBound {
    double c = 0, gamma = 0, log_inv_eta = 0;
    double kappa1 = 0, kappa2 = 0;
    double r_hat = 0, r_hat_lo = 0, r_hat_hi = 0; // quadrature value and bracket
    double n_required = 0;                        // from the quadrature R-hat
    double n_lo = 0, n_hi = 0;                    // bracket from the analytic r bounds
    long long n_lo_int = 0, n_hi_int = 0;         // floor(n_lo), ceil(n_hi)
    // Same bracket with exp(y0ᵀ M y0 / 2) = exp(c / (2(1-γ²))) in place of e^{c/2}.
    double n_lo_quadratic = 0, n_hi_quadratic = 0;
};

// R-hat(c, g) = max[r(k1) r(k2 + g e(k1)), r(k2) r(k1 + g e(k2))] evaluated
// with r replaced by `r`. Monotonicity of r gives brackets: pass the lower
// bound for a lower R-hat and the upper bound for an upper R-hat.
inline double r_hat_with(double k1, double k2, double g, const std::function<double(double)>& r) {
    auto e = [&](double y) { return 1.0 / r(y) - y; };
    return std::max(r(k1) * r(k2 + g * e(k1)), r(k2) * r(k1 + g * e(k2)));
}

// Required |N_mu| >= 2π e^{c/2} ln(1/η) / (√(1-γ²) R-hat(c, γ)).
inline LuckyBound lucky_node_bound(double c, double gamma, double log_inv_eta) {
    if (!(c > 0)) throw std::invalid_argument("lucky_node_bound: c must be positive");
    if (!(gamma >= 0 && gamma < 1)) throw std::invalid_argument("lucky_node_bound: gamma must be in [0, 1)");
    if (!(log_inv_eta > 0)) throw std::invalid_argument("lucky_node_bound: ln(1/eta) must be positive");
    LuckyBound b;
    b.c = c;
    b.gamma = gamma;
    b.log_inv_eta = log_inv_eta;
    b.kappa1 = std::sqrt(c / (1.0 - gamma * gamma));
    b.kappa2 = gamma * b.kappa1;
    auto rq = [](double y) { return mills_ratio_quadrature(y); };
    b.r_hat = r_hat_with(b.kappa1, b.kappa2, gamma, rq);
    // a lower r gives a larger e, hence a larger argument and a smaller r again
    auto rhat_lo = [&] {
        auto rl = [](double y) { return y > 0 ? mills_tight_lo(y) : 1.0; };
        auto e_hi = [&](double y) { return 1.0 / rl(y) - y; };
        return std::max(rl(b.kappa1) * rl(b.kappa2 + gamma * e_hi(b.kappa1)),
                        rl(b.kappa2) * rl(b.kappa1 + gamma * e_hi(b.kappa2)));
    };
    auto rhat_hi = [&] {
        auto rh = [](double y) { return y > 0 ? mills_tight_hi(y) : std::sqrt(2.0); };
        auto e_lo = [&](double y) { return 1.0 / rh(y) - y; };
        return std::max(rh(b.kappa1) * rh(b.kappa2 + gamma * e_lo(b.kappa1)),
                        rh(b.kappa2) * rh(b.kappa1 + gamma * e_lo(b.kappa2)));
    };
    b.r_hat_lo = rhat_lo();
    b.r_hat_hi = rhat_hi();
    const double scale = 2.0 * std::numbers::pi * std::exp(0.5 * c) * log_inv_eta / std::sqrt(1.0 - gamma * gamma);
    b.n_required = scale / b.r_hat;
    b.n_lo = scale / b.r_hat_hi;
    b.n_hi = scale / b.r_hat_lo;
    const double q = std::exp(0.5 * c * (1.0 / (1.0 - gamma * gamma) - 1.0));
    b.n_lo_quadratic = b.n_lo * q;
    b.n_hi_quadratic = b.n_hi * q;
    b.n_lo_int = static_cast<long long>(std::floor(b.n_lo));
    b.n_hi_int = static_cast<long long>(std::ceil(b.n_hi));
    return b;
}

// Polarity above which the selectivity threshold is positive when sigma_l = 0.
inline double rho_threshold(double c) { return std::sqrt(6.0 / (c + 6.0)); }

// (3 σ_w² / 4 v̄_j) [ (1/|ch|) Σ s_k² ((c+6)/6 ρ_k² - 1) - σ_l² ]
inline double selectivity_threshold(double sigma_w, double vbar_j, const Vec& s, const Vec& rho, double c, double sigma_l) {
    if (s.size() != rho.size() || s.empty()) throw std::invalid_argument("selectivity_threshold: shape mismatch");
    double acc = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) acc += s[k] * s[k] * ((c + 6.0) / 6.0 * rho[k] * rho[k] - 1.0);
    acc /= static_cast<double>(s.size());
    return 3.0 * sigma_w * sigma_w / (4.0 * vbar_j) * (acc - sigma_l * sigma_l);
}

// γ = (‖h‖² - ‖a‖²) / (‖h + a‖ ‖h - a‖)
inline double gamma_of(const Vec& h, const Vec& a) {
    return (dot(h, h) - dot(a, a)) / (norm2(h + a) * norm2(h - a));
}

struct LuckyEmpirical {
    std::size_t trials = 0, hits = 0;
    double frequency = 0.0;
    double unit_rate = 0.0;     // fraction of all drawn units satisfying the event
    bool gaps_positive = true;  // every lucky unit had 2 wᵀa > 0
};

enum class WeightLaw {
    Uniform,  // Uniform[-σ√(3/d), σ√(3/d)] per entry
    Gaussian, // N(0, σ²/d) per entry, the large-d limit of the pre-activations
};

// Each trial draws n_units weight vectors w and records whether one satisfies
// wᵀ(h+a) >= √c σ/√d ‖h+a‖ and wᵀ(h-a) < 0.
inline LuckyEmpirical lucky_node_empirical(const Vec& h, const Vec& a, double c, double sigma_w, std::size_t n_units,
                                           std::size_t trials, const Rng& base, WeightLaw law = WeightLaw::Uniform) {
    const std::size_t d = h.size();
    const Vec up = h + a, um = h - a;
    const double lim = sigma_w * std::sqrt(3.0 / static_cast<double>(d));
    const double thr = std::sqrt(c) * sigma_w / std::sqrt(static_cast<double>(d)) * norm2(up);
    LuckyEmpirical r;
    r.trials = trials;
    std::size_t lucky_units = 0;
    Vec w(d);
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = base.split(t);
        bool hit = false;
        for (std::size_t j = 0; j < n_units; ++j) {
            if (law == WeightLaw::Uniform)
                for (auto& v : w) v = rng.uniform(-lim, lim);
            else
                for (auto& v : w) v = rng.normal() * sigma_w / std::sqrt(static_cast<double>(d));
            if (dot(w, up) >= thr && dot(w, um) < 0) {
                hit = true;
                ++lucky_units;
                if (!(2.0 * dot(w, a) > 0)) r.gaps_positive = false;
            }
        }
        r.hits += hit;
    }
    r.frequency = static_cast<double>(r.hits) / static_cast<double>(trials);
    r.unit_rate = static_cast<double>(lucky_units) / static_cast<double>(trials * n_units);
    return r;
}

// Mean, variance of a discrete distribution and of its ReLU image.
struct ReluMoments {
    double mean = 0, var = 0, relu_mean = 0, relu_var = 0;
    double jensen_gap() const { return relu_mean - std::max(0.0, mean); }
};

inline ReluMoments relu_moments(const Vec& values, const Vec& probs) {
    if (values.size() != probs.size()) throw std::invalid_argument("relu_moments: shape mismatch");
    ReluMoments m;
    for (std::size_t i = 0; i < values.size(); ++i) {
        m.mean += probs[i] * values[i];
        m.relu_mean += probs[i] * std::max(0.0, values[i]);
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        m.var += probs[i] * (values[i] - m.mean) * (values[i] - m.mean);
        const double r = std::max(0.0, values[i]) - m.relu_mean;
        m.relu_var += probs[i] * r * r;
    }
    return m;
}

// ---------------------------------------------------------------------------
// Contrastive training on tree samples

struct SimclrOptions {
    double tau = 0.1;
    double lr = 0.1;
    std::size_t batch = 128;
    std::size_t epochs = 50;
    std::size_t n_samples = 64000;
    bool l2_normalize = true;
};

// Root values of the training set.
inline std::vector<std::uint8_t> draw_roots(const HltmTree& t, std::size_t n, Rng& rng) {
    std::vector<std::uint8_t> z0(n);
    for (auto& z : z0) z = rng.bernoulli(t.p_root_one());
    return z0;
}

namespace detail {

// Normalizes columns of Y in place (zero columns stay zero) and returns norms.
inline Vec normalize_columns(Matrix& Y) {
    Vec nrm(Y.cols(), 0.0);
    for (std::size_t b = 0; b < Y.cols(); ++b) {
        double s = 0;
        for (std::size_t i = 0; i < Y.rows(); ++i) s += Y(i, b) * Y(i, b);
        nrm[b] = std::sqrt(s);
        if (nrm[b] > 1e-12)
            for (std::size_t i = 0; i < Y.rows(); ++i) Y(i, b) /= nrm[b];
    }
    return nrm;
}

// Pulls dY back through column normalization.
inline void normalize_backward(const Matrix& Yn, const Vec& nrm, Matrix& G) {
    for (std::size_t b = 0; b < G.cols(); ++b) {
        if (nrm[b] <= 1e-12) {
            for (std::size_t i = 0; i < G.rows(); ++i) G(i, b) = 0.0;
            continue;
        }
        double yg = 0;
        for (std::size_t i = 0; i < G.rows(); ++i) yg += Yn(i, b) * G(i, b);
        for (std::size_t i = 0; i < G.rows(); ++i) G(i, b) = (G(i, b) - Yn(i, b) * yg) / nrm[b];
    }
}

} // namespace detail

struct SimclrGrad {
    double loss = 0.0;
    std::vector<Matrix> dW; // per linear layer
};

// Mean InfoNCE loss (H = 1) of a batch of two-view pairs and its weight
// gradient. The negative of anchor i is the positive view of pair
// (i + 1) mod B; gradients flow through all three branches.
inline SimclrGrad simclr_grad(const Network& net, const Matrix& X1, const Matrix& X2, const SimclrOptions& opt) {
    const std::size_t B = X1.cols();
    const ForwardTrace t1 = net.forward(X1), t2 = net.forward(X2);
    Matrix Y1 = t1.output(), Y2 = t2.output();
    Vec n1, n2;
    if (opt.l2_normalize) {
        n1 = detail::normalize_columns(Y1);
        n2 = detail::normalize_columns(Y2);
    }
    const LossKind kind = LossKind::info_nce(opt.tau, 1);
    Matrix G1(Y1.rows(), B), G2(Y2.rows(), B);
    SimclrGrad out;
    const double scale = 1.0 / static_cast<double>(B);
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t k = (i + 1) % B;
        double rp = 0, rm = 0;
        for (std::size_t r = 0; r < Y1.rows(); ++r) {
            rp += 0.5 * (Y1(r, i) - Y2(r, i)) * (Y1(r, i) - Y2(r, i));
            rm += 0.5 * (Y1(r, i) - Y2(r, k)) * (Y1(r, i) - Y2(r, k));
        }
        out.loss += loss_value(kind, rp, {rm}) * scale;
        const Partials p = loss_partials(kind, rp, {rm});
        for (std::size_t r = 0; r < Y1.rows(); ++r) {
            const double dp = p.d_plus * (Y1(r, i) - Y2(r, i)) * scale;
            const double dm = p.d_minus[0] * (Y1(r, i) - Y2(r, k)) * scale;
            G1(r, i) += dp + dm;
            G2(r, i) -= dp;
            G2(r, k) -= dm;
        }
    }
    if (opt.l2_normalize) {
        detail::normalize_backward(Y1, n1, G1);
        detail::normalize_backward(Y2, n2, G2);
    }
    Backprop b1 = net.backward(t1, G1, BackMode::Batch, true, false);
    const Backprop b2 = net.backward(t2, G2, BackMode::Batch, true, false);
    for (std::size_t l = 0; l < b1.dW.size(); ++l) b1.dW[l] += b2.dW[l];
    out.dW = std::move(b1.dW);
    return out;
}

inline double simclr_step(Network& net, const Matrix& X1, const Matrix& X2, const SimclrOptions& opt) {
    const SimclrGrad g = simclr_grad(net, X1, X2, opt);
    for (std::size_t l = 1; l <= net.num_linear(); ++l) net.weight(l).axpy(-opt.lr, g.dW[l - 1]);
    return g.loss;
}

// One epoch over the root values in shuffled order with fresh augmentations
// for every view. Returns the mean batch loss.
inline double simclr_epoch(Network& net, const HltmTree& t, const std::vector<std::uint8_t>& roots, const SimclrOptions& opt,
                           Rng& rng) {
    std::vector<std::size_t> order(roots.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    std::size_t steps = 0;
    Assignment z(t.num_nodes());
    for (std::size_t s = 0; s + 1 < order.size(); s += opt.batch) {
        const std::size_t B = std::min(opt.batch, order.size() - s);
        if (B < 2) break;
        Matrix X1(t.num_leaves(), B), X2(t.num_leaves(), B);
        for (std::size_t b = 0; b < B; ++b) {
            z[0] = roots[order[s + b]];
            write_visible(t, augment(t, z, rng), X1, b);
            write_visible(t, augment(t, z, rng), X2, b);
        }
        total += simclr_step(net, X1, X2, opt);
        ++steps;
    }
    return steps ? total / static_cast<double>(steps) : 0.0;
}

} // namespace ssldyn
