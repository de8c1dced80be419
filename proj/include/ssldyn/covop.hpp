#pragma once

// Covariance operators over vec(W_l)-space, computed by exact enumeration of
// an AugmentedDataset, plus the expected-update oracles they are checked
// against.

#include "ssldyn/dataset.hpp"
#include "ssldyn/linalg.hpp"
#include "ssldyn/losses.hpp"
#include "ssldyn/network.hpp"

#include <functional>
#include <iomanip>
#include <ostream>
#include <string>

namespace ssldyn {

struct CovOperator {
    std::size_t layer = 0;
    std::string kind;
    std::string estimation = "exact-enumeration";
    Matrix m;
};

struct GroupStats {
    Vec p;                 // view probabilities
    std::vector<Matrix> K; // per view
    std::vector<Vec> f;    // per view output
    Matrix Kbar;
    Vec fbar;
    Vec M1;                // Σ_v p_v K_v f_v
    double tr_var_f = 0.0; // tr V_aug[f]
};

struct ConnStats {
    std::vector<GroupStats> g;
    Vec P;                  // group probabilities
    std::vector<Vec> f_base; // unaugmented outputs
    double M_K = 0.0;        // max Frobenius norm of K over views and bases
    std::size_t D = 0, nL = 0;
};

inline void require_per_sample(const Network& net) {
    if (net.has_batch_coupling(BackMode::Jacobian))
        throw std::invalid_argument("covop: batch-coupled layers are not supported here");
}

inline Matrix batch_of(const std::vector<Vec>& xs) {
    Matrix X(xs.front().size(), xs.size());
    for (std::size_t b = 0; b < xs.size(); ++b) X.set_col(b, xs[b]);
    return X;
}

inline ConnStats compute_stats(const Network& net, const AugmentedDataset& ds, std::size_t l) {
    ds.validate(1e-9);
    require_per_sample(net);
    ConnStats s;
    s.P = ds.group_probs();
    s.nL = net.output_dim();
    s.D = net.width_in(l) * net.width_out(l);
    for (const auto& grp : ds.groups) {
        std::vector<Vec> xs;
        for (const auto& v : grp) xs.push_back(v.x);
        auto t = net.forward(batch_of(xs));
        GroupStats gs;
        gs.K = connections(net, t, l);
        gs.Kbar = Matrix(s.D, s.nL);
        gs.fbar = Vec(s.nL, 0.0);
        gs.M1 = Vec(s.D, 0.0);
        for (std::size_t v = 0; v < grp.size(); ++v) {
            const double p = grp[v].prob;
            gs.p.push_back(p);
            gs.f.push_back(t.output().col(v));
            gs.Kbar.axpy(p, gs.K[v]);
            axpy(p, gs.f[v], gs.fbar);
            axpy(p, matvec(gs.K[v], gs.f[v]), gs.M1);
            s.M_K = std::max(s.M_K, gs.K[v].frobenius());
        }
        for (std::size_t v = 0; v < grp.size(); ++v) {
            const Vec d = gs.f[v] - gs.fbar;
            gs.tr_var_f += gs.p[v] * dot(d, d);
        }
        s.g.push_back(std::move(gs));
    }
    std::vector<Vec> xs;
    for (const auto& b : ds.bases) xs.push_back(b.x);
    auto tb = net.forward(batch_of(xs));
    auto Kb = connections(net, tb, l);
    for (std::size_t b = 0; b < xs.size(); ++b) {
        s.f_base.push_back(tb.output().col(b));
        s.M_K = std::max(s.M_K, Kb[b].frobenius());
    }
    return s;
}

inline Matrix mean_connection(const Network& net, const AugmentedDataset& ds, std::size_t group, std::size_t l) {
    AugmentedDataset one;
    one.groups.push_back(ds.groups.at(group));
    one.bases.push_back({1.0, ds.groups.at(group).front().x, 0});
    return compute_stats(net, one, l).g[0].Kbar;
}

struct McMean {
    Matrix mean;
    double stderr_frob = 0.0; // Frobenius norm of the per-entry standard error
};

// Monte-Carlo K̄ for augmentations that can only be sampled.
inline McMean mean_connection_mc(const Network& net, const std::function<Vec(Rng&)>& draw, std::size_t n, std::size_t l,
                                 Rng& rng) {
    if (n < 2) throw std::invalid_argument("mean_connection_mc: need at least two draws");
    Matrix sum, sumsq;
    for (std::size_t i = 0; i < n; ++i) {
        Matrix K = connection(net, draw(rng), l);
        if (i == 0) {
            sum = Matrix(K.rows(), K.cols());
            sumsq = Matrix(K.rows(), K.cols());
        }
        sum += K;
        for (std::size_t q = 0; q < K.size(); ++q) sumsq.data()[q] += K.data()[q] * K.data()[q];
    }
    McMean r;
    r.mean = (1.0 / static_cast<double>(n)) * sum;
    double acc = 0.0;
    for (std::size_t q = 0; q < sum.size(); ++q) {
        const double m = r.mean.data()[q];
        const double var = (sumsq.data()[q] / static_cast<double>(n) - m * m) * static_cast<double>(n) / (n - 1.0);
        acc += std::max(0.0, var) / static_cast<double>(n);
    }
    r.stderr_frob = std::sqrt(acc);
    return r;
}

inline Matrix expected_kbar(const ConnStats& s) {
    Matrix m(s.D, s.nL);
    for (std::size_t g = 0; g < s.g.size(); ++g) m.axpy(s.P[g], s.g[g].Kbar);
    return m;
}

// V_x[K̄_l(x)] = E[K̄K̄ᵀ] - E[K̄]E[K̄]ᵀ
inline CovOperator op_simp(const ConnStats& s, std::size_t l) {
    if (s.g.empty()) throw std::invalid_argument("op_simp: empty dataset");
    Matrix second(s.D, s.D);
    for (std::size_t g = 0; g < s.g.size(); ++g) second.axpy(s.P[g], s.g[g].Kbar * s.g[g].Kbar.transpose());
    const Matrix m = expected_kbar(s);
    return {l, "simp", "exact-enumeration", second - m * m.transpose()};
}

inline CovOperator op_simp(const Network& net, const AugmentedDataset& ds, std::size_t l) {
    return op_simp(compute_stats(net, ds, l), l);
}

// ½ Σ_{b,b'} p_b p_b' ξ(r(x_b, x_b')) (K̄(x_b) - K̄(x_b'))(.)ᵀ, with r on the
// unaugmented outputs. The pair difference is not re-centred: the sum is the
// raw ξ-weighted second moment.
inline CovOperator op_weighted(const ConnStats& s, const AugmentedDataset& ds, const LossKind& kind, std::size_t l) {
    const std::size_t G = s.g.size();
    Matrix wgt(G, G);
    for (std::size_t a = 0; a < ds.bases.size(); ++a)
        for (std::size_t b = 0; b < ds.bases.size(); ++b) {
            const auto& A = ds.bases[a];
            const auto& B = ds.bases[b];
            if (A.group == B.group) continue;
            wgt(A.group, B.group) += A.prob * B.prob * xi_weight(kind, half_sq_dist(s.f_base[a], s.f_base[b]));
        }
    Matrix op(s.D, s.D);
    for (std::size_t a = 0; a < G; ++a)
        for (std::size_t b = 0; b < G; ++b) {
            if (wgt(a, b) == 0.0) continue;
            const Matrix d = s.g[a].Kbar - s.g[b].Kbar;
            op.axpy(0.5 * wgt(a, b), d * d.transpose());
        }
    return {l, "weighted-" + kind.name(), "exact-enumeration", op};
}

inline CovOperator op_weighted(const Network& net, const AugmentedDataset& ds, const LossKind& kind, std::size_t l) {
    return op_weighted(compute_stats(net, ds, l), ds, kind, l);
}

struct BetaOperators {
    CovOperator EV, VE, combo;
};

// EV = E_x V_aug[K], VE = V_x E_aug[K], combo = -β EV + VE.
inline BetaOperators op_beta(const ConnStats& s, double beta, std::size_t l) {
    Matrix ev(s.D, s.D);
    for (std::size_t g = 0; g < s.g.size(); ++g) {
        const auto& gs = s.g[g];
        Matrix second(s.D, s.D);
        for (std::size_t v = 0; v < gs.K.size(); ++v) second.axpy(gs.p[v], gs.K[v] * gs.K[v].transpose());
        ev.axpy(s.P[g], second - gs.Kbar * gs.Kbar.transpose());
    }
    BetaOperators r;
    r.EV = {l, "EV", "exact-enumeration", ev};
    r.VE = op_simp(s, l);
    r.VE.kind = "VE";
    r.combo = {l, "beta-combo", "exact-enumeration", r.VE.m - beta * ev};
    return r;
}

inline BetaOperators op_beta(const Network& net, const AugmentedDataset& ds, double beta, std::size_t l) {
    return op_beta(compute_stats(net, ds, l), beta, l);
}

// V over joint (x, x') draws of K_l(x').
inline Matrix joint_variance(const ConnStats& s) {
    Matrix second(s.D, s.D), mean(s.D, s.nL);
    for (std::size_t g = 0; g < s.g.size(); ++g)
        for (std::size_t v = 0; v < s.g[g].K.size(); ++v) {
            const double w = s.P[g] * s.g[g].p[v];
            second.axpy(w, s.g[g].K[v] * s.g[g].K[v].transpose());
            mean.axpy(w, s.g[g].K[v]);
        }
    return second - mean * mean.transpose();
}

struct UpdateCheck {
    Vec expected;        // E[-∂L/∂vec(W_l)] over all pair draws
    Vec predicted;       // operator · vec(W_l)
    double rel_err = 0.0;
    Matrix op_expected;  // E[F K1 (K+ - K-)ᵀ], F = -∂L/∂r-
    Matrix theta;        // op_expected - predicting operator
    double theta_norm = 0.0;
    std::size_t tuples = 0;
    bool brute_force = false;
};

inline constexpr std::size_t kMaxTuples = 50'000'000;

// Large-batch update for H = 1 by exact enumeration. Constant-partial and
// frozen-ξ losses factorize over the augmentation and use real network
// outputs; the others enumerate every (x1, x+, x-) view triple.
inline UpdateCheck verify_update_equation(const Network& net, const AugmentedDataset& ds, const LossKind& kind,
                                          std::size_t l) {
    if (kind.H != 1) throw std::invalid_argument("verify_update_equation: H must be 1 (use the Monte-Carlo probe)");
    const ConnStats s = compute_stats(net, ds, l);
    const Vec w = vec(net.weight(l));
    const std::size_t G = s.g.size();
    UpdateCheck r;
    r.expected = Vec(s.D, 0.0);
    r.op_expected = Matrix(s.D, s.D);
    Matrix predictor;

    if (kind.constant_partials()) {
        const Partials p = loss_partials(kind, 0.0, Vec{0.0});
        const double dp = p.d_plus, dm = p.d_minus[0];
        Vec fall(s.nL, 0.0);
        for (std::size_t g = 0; g < G; ++g) axpy(s.P[g], s.g[g].fbar, fall);
        const Matrix Kall = expected_kbar(s);
        for (std::size_t g = 0; g < G; ++g) {
            const auto& gs = s.g[g];
            // E[K1 (f1 - f+)] and E[K1 (f1 - f-)]
            const Vec pos = gs.M1 - matvec(gs.Kbar, gs.fbar);
            const Vec neg = gs.M1 - matvec(gs.Kbar, fall);
            axpy(-s.P[g] * dp, pos, r.expected);
            axpy(-s.P[g] * dm, neg, r.expected);
            // E[F K1 (K+ - K-)ᵀ] with F = -dm
            r.op_expected.axpy(-dm * s.P[g], gs.Kbar * (gs.Kbar - Kall).transpose());
        }
        r.tuples = ds.num_views();
        if (kind.type == LossKind::SimpleBeta) {
            const auto ops = op_beta(s, kind.beta, l);
            // the β r+ term: -β E[K1 (f1 - f+)] = -β EV w, not of the F form
            r.op_expected -= kind.beta * ops.EV.m;
            predictor = ops.combo.m;
        } else {
            predictor = op_simp(s, l).m;
        }
    } else if (kind.type == LossKind::ExactNce) {
        for (std::size_t a = 0; a < ds.bases.size(); ++a)
            for (std::size_t b = 0; b < ds.bases.size(); ++b) {
                const auto& A = ds.bases[a];
                const auto& B = ds.bases[b];
                const double wt = A.prob * B.prob * xi_weight(kind, half_sq_dist(s.f_base[a], s.f_base[b]));
                const auto& ga = s.g[A.group];
                const auto& gb = s.g[B.group];
                // -E[ξ K1 (f- - f+)] = ξ K̄_a (f̄_a - f̄_b)
                axpy(wt, matvec(ga.Kbar, ga.fbar - gb.fbar), r.expected);
                r.op_expected.axpy(wt, ga.Kbar * (ga.Kbar - gb.Kbar).transpose());
            }
        r.tuples = ds.bases.size() * ds.bases.size();
        predictor = op_weighted(s, ds, kind, l).m;
    } else {
        double pairs = 0.0, views = 0.0;
        for (std::size_t g = 0; g < G; ++g) {
            pairs += static_cast<double>(s.g[g].K.size() * s.g[g].K.size());
            views += static_cast<double>(s.g[g].K.size());
        }
        if (pairs * views > static_cast<double>(kMaxTuples))
            throw SizeLimitError("verify_update_equation: too many view triples to enumerate");
        r.brute_force = true;
        for (std::size_t g = 0; g < G; ++g) {
            const auto& gs = s.g[g];
            for (std::size_t i = 0; i < gs.K.size(); ++i) {
                const Vec& f1 = gs.f[i];
                for (std::size_t h = 0; h < G; ++h) {
                    const auto& hs = s.g[h];
                    Matrix A(s.D, s.nL);
                    Vec acc(s.nL, 0.0);
                    for (std::size_t j = 0; j < gs.K.size(); ++j) {
                        const double rp = half_sq_dist(f1, gs.f[j]);
                        for (std::size_t k = 0; k < hs.K.size(); ++k) {
                            const double wt = s.P[g] * gs.p[i] * gs.p[j] * s.P[h] * hs.p[k];
                            const Partials p = loss_partials(kind, rp, Vec{half_sq_dist(f1, hs.f[k])});
                            const double F = -p.d_minus[0];
                            Vec gvec = p.d_plus * (f1 - gs.f[j]);
                            axpy(p.d_minus[0], f1 - hs.f[k], gvec);
                            axpy(-wt, gvec, acc);
                            A.axpy(wt * F, gs.K[j] - hs.K[k]);
                            ++r.tuples;
                        }
                    }
                    axpy(1.0, matvec(gs.K[i], acc), r.expected);
                    r.op_expected += gs.K[i] * A.transpose();
                }
            }
        }
        predictor = op_weighted(s, ds, kind, l).m;
    }

    r.predicted = matvec(predictor, w);
    r.rel_err = norm2(r.expected - r.predicted) / std::max(norm2(r.expected), 1e-300);
    r.theta = r.op_expected - predictor;
    r.theta_norm = r.theta.frobenius();
    return r;
}

struct McUpdate {
    Vec mean;
    double stderr_norm = 0.0;
    std::size_t samples = 0;
};

// Monte-Carlo expected update for any H: x ~ p, x1, x+ ~ p_aug(.|x), and H
// independent negatives x'_k ~ p, x_k- ~ p_aug(.|x'_k).
inline McUpdate expected_update_mc(const Network& net, const AugmentedDataset& ds, const LossKind& kind, std::size_t l,
                                   std::size_t n, Rng& rng) {
    const ConnStats s = compute_stats(net, ds, l);
    Vec cdf;
    double acc = 0.0;
    for (const auto& b : ds.bases) cdf.push_back(acc += b.prob);
    auto pick_base = [&] {
        const double u = rng.uniform() * acc;
        return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    };
    auto pick_view = [&](const GroupStats& gs) {
        double u = rng.uniform(), c = 0.0;
        for (std::size_t v = 0; v < gs.p.size(); ++v)
            if (u < (c += gs.p[v])) return v;
        return gs.p.size() - 1;
    };
    McUpdate r;
    r.mean = Vec(s.D, 0.0);
    Vec sumsq(s.D, 0.0);
    for (std::size_t it = 0; it < n; ++it) {
        const std::size_t b = std::min(pick_base(), ds.bases.size() - 1);
        const auto& gs = s.g[ds.bases[b].group];
        const std::size_t i = pick_view(gs), j = pick_view(gs);
        std::vector<std::pair<const GroupStats*, std::size_t>> negs;
        Vec rm;
        for (int k = 0; k < kind.H; ++k) {
            const std::size_t bb = std::min(pick_base(), ds.bases.size() - 1);
            const auto& hs = s.g[ds.bases[bb].group];
            const std::size_t v = pick_view(hs);
            negs.push_back({&hs, v});
            rm.push_back(half_sq_dist(gs.f[i], hs.f[v]));
        }
        const Partials p = loss_partials(kind, half_sq_dist(gs.f[i], gs.f[j]), rm);
        Vec gvec = p.d_plus * (gs.f[i] - gs.f[j]);
        for (int k = 0; k < kind.H; ++k) axpy(p.d_minus[k], gs.f[i] - negs[k].first->f[negs[k].second], gvec);
        const Vec upd = -1.0 * matvec(gs.K[i], gvec);
        for (std::size_t d = 0; d < s.D; ++d) {
            r.mean[d] += upd[d];
            sumsq[d] += upd[d] * upd[d];
        }
    }
    const double N = static_cast<double>(n);
    double se = 0.0;
    for (std::size_t d = 0; d < s.D; ++d) {
        r.mean[d] /= N;
        se += std::max(0.0, sumsq[d] / N - r.mean[d] * r.mean[d]) / N;
    }
    r.stderr_norm = std::sqrt(se);
    r.samples = n;
    return r;
}

// (2 M_K² / τ^k) { 2 E_{x,x'} ‖f(x) - f(x')‖ (sqrt(tr V_aug[f|x]) + c0(x)) + 3 E_x tr V_aug[f|x] }
// with k = 2 for InfoNCE-type losses and k = 1 for the soft triplet.
inline double residue_bound(const ConnStats& s, const AugmentedDataset& ds, const LossKind& kind) {
    double scale;
    switch (kind.type) {
    case LossKind::Simple:
    case LossKind::SimpleBeta: return 0.0;
    case LossKind::SoftTriplet: scale = 2.0 * s.M_K * s.M_K / kind.tau; break;
    default: scale = 2.0 * s.M_K * s.M_K / (kind.tau * kind.tau); break;
    }
    double cross = 0.0, var = 0.0;
    for (std::size_t a = 0; a < ds.bases.size(); ++a) {
        const auto& A = ds.bases[a];
        const auto& ga = s.g[A.group];
        const double c0 = norm2(s.f_base[a] - ga.fbar);
        const double sd = std::sqrt(ga.tr_var_f);
        var += A.prob * ga.tr_var_f;
        for (std::size_t b = 0; b < ds.bases.size(); ++b)
            cross += A.prob * ds.bases[b].prob * norm2(s.f_base[a] - s.f_base[b]) * (sd + c0);
    }
    return scale * (2.0 * cross + 3.0 * var);
}

inline double residue_bound(const Network& net, const AugmentedDataset& ds, const LossKind& kind, std::size_t l) {
    return residue_bound(compute_stats(net, ds, l), ds, kind);
}

struct SpectrumSummary {
    Vec top;               // leading eigenvalues (up to 5)
    Vec cos_with_w;        // |cos| between vec(W_l) and each leading eigenvector
    double min_eig = 0.0;
};

inline SpectrumSummary spectrum_summary(const Matrix& op, const Vec& w, std::size_t k = 5) {
    const auto e = sym_eigen(symmetrize(op));
    SpectrumSummary s;
    const double wn = std::max(norm2(w), 1e-300);
    for (std::size_t i = 0; i < std::min(k, e.values.size()); ++i) {
        s.top.push_back(e.values[i]);
        s.cos_with_w.push_back(std::fabs(dot(e.vectors.col(i), w)) / wn);
    }
    s.min_eig = e.values.empty() ? 0.0 : e.values.back();
    return s;
}

inline void write_operator_csv(std::ostream& os, const CovOperator& op, std::uint64_t seed) {
    os << "# layer=" << op.layer << " kind=" << op.kind << " estimation=" << op.estimation << " seed=" << seed
       << " rows=" << op.m.rows() << " cols=" << op.m.cols() << "\n";
    os << std::setprecision(17);
    for (std::size_t i = 0; i < op.m.rows(); ++i) {
        for (std::size_t j = 0; j < op.m.cols(); ++j) os << (j ? "," : "") << op.m(i, j);
        os << "\n";
    }
}

} // namespace ssldyn
