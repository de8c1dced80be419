#pragma once

// Asymmetric dual networks trained on positive pairs only: an online
// backbone followed by an optional predictor, and a target backbone kept as
// a copy (or an EMA) of the online one. Also the population-batch gradient,
// the closed-form correction induced by centring the downward gradient, and
// the linear-predictor decomposition.
//
// Population batch: the online tower sees every view (a, i) of the dataset
// with weight P_a q_ai, the target tower the same set. Averaging the pair
// loss over (a, i, j) only needs the per-group mean of the other tower, so
// the gradient is exact without enumerating triples.

#include "ssldyn/covop.hpp"
#include "ssldyn/dataset.hpp"
#include "ssldyn/hltm.hpp"
#include "ssldyn/linalg.hpp"
#include "ssldyn/losses.hpp"
#include "ssldyn/network.hpp"
#include "ssldyn/rng.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

namespace ssldyn {

inline Network concat(const Network& a, const Network& b) {
    if (b.input_dim() != a.output_dim()) throw std::invalid_argument("concat: dimension mismatch");
    Network out = a;
    for (const auto& L : b.layers()) out.layers().push_back(L);
    return out;
}

// n x n Linear layer with W = βI + Uniform[-noise, noise].
inline Network linear_predictor(std::size_t n, double beta, double noise = 0.0, Rng* rng = nullptr) {
    Network p(n);
    p.add_linear(n);
    Matrix& W = p.weight(1);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            W(i, j) = i == j ? beta : 0.0;
            if (noise > 0 && rng) W(i, j) += rng->uniform(-noise, noise);
        }
    return p;
}

// Returns a copy with every BatchNorm mean detached.
inline Network detach_means(Network n) {
    for (auto& L : n.layers())
        if (L.kind == LayerKind::BatchNorm) L.bn.mean_detached = true;
    return n;
}

struct ByolSystem {
    Network online;                   // W_b
    std::optional<Network> predictor; // W_p, fed by the backbone output
    Network target;                   // W'_b
    double gamma_ema = 0.0;
    bool use_ema = false;
    bool stop_gradient = true;

    static ByolSystem make(Network backbone, std::optional<Network> pred = std::nullopt) {
        ByolSystem s;
        s.target = backbone;
        s.online = std::move(backbone);
        s.predictor = std::move(pred);
        s.validate();
        return s;
    }

    void validate() const {
        if (online.layers().size() != target.layers().size() || online.input_dim() != target.input_dim())
            throw std::invalid_argument("ByolSystem: target must have the backbone's shape");
        for (std::size_t l = 1; l <= online.num_linear(); ++l)
            if (online.width_in(l) != target.width_in(l) || online.width_out(l) != target.width_out(l))
                throw std::invalid_argument("ByolSystem: target layer shape mismatch");
        if (predictor) {
            if (predictor->input_dim() != online.output_dim() || predictor->output_dim() != target.output_dim())
                throw std::invalid_argument("ByolSystem: predictor must map backbone output to target output");
            if (predictor->num_linear() == 0) throw std::invalid_argument("ByolSystem: predictor needs a linear layer");
        }
        if (!(gamma_ema >= 0.0 && gamma_ema <= 1.0)) throw std::invalid_argument("ByolSystem: gamma_ema outside [0, 1]");
        if (!stop_gradient && use_ema && gamma_ema > 0.0)
            throw std::invalid_argument("ByolSystem: gradient through the target needs W' = W (no EMA)");
    }

    std::size_t backbone_layers() const { return online.num_linear(); }

    Network online_full() const { return predictor ? concat(online, *predictor) : online; }

    // Target topped with one identity Linear per predictor linear layer, so
    // layer indices and depth match the online tower.
    Network padded_target() const {
        Network t = target;
        const std::size_t pad = predictor ? predictor->num_linear() : 0;
        for (std::size_t k = 0; k < pad; ++k) {
            t.add_linear(t.output_dim());
            t.weight(t.num_linear()) = Matrix::identity(t.output_dim());
        }
        return t;
    }

    // W'_b <- γ W'_b + (1 - γ) W_b; without EMA the target copies the backbone.
    void sync_target() {
        const double g = use_ema ? gamma_ema : 0.0;
        for (std::size_t l = 1; l <= online.num_linear(); ++l) {
            Matrix& T = target.weight(l);
            const Matrix& W = online.weight(l);
            for (std::size_t q = 0; q < T.size(); ++q) T.data()[q] = g * T.data()[q] + (1.0 - g) * W.data()[q];
        }
    }
};

// One EMA step regardless of use_ema (used by the EMA checks).
inline void ema_step(ByolSystem& s) {
    const bool keep = s.use_ema;
    s.use_ema = true;
    s.sync_target();
    s.use_ema = keep;
}

struct ByolGrad {
    double loss = 0.0;
    std::vector<Matrix> dW; // online backbone layers, then predictor layers
};

namespace detail {

inline std::vector<Matrix> add_grads(std::vector<Matrix> a, const std::vector<Matrix>& b) {
    for (std::size_t l = 0; l < b.size(); ++l) a[l] += b[l];
    return a;
}

// Backprop of dY through the backbone-as-target (only when W' = W).
inline std::vector<Matrix> target_branch(const ByolSystem& s, const ForwardTrace& tt, const Matrix& dY, BackMode mode) {
    const Network net = mode == BackMode::Batch ? s.target : detach_means(s.target);
    auto dW = net.backward(tt, dY, mode, true, false).dW;
    if (s.predictor)
        for (const auto& L : s.predictor->layers())
            if (L.kind == LayerKind::Linear) dW.emplace_back(L.out_dim, L.in_dim);
    return dW;
}

} // namespace detail

// Mean of ½‖f(x1; W) - f(x+; W')‖² over pairs (column b of X1 with column b
// of Xp, uniform weights) and its gradient wrt the online weights. In
// BackMode::Jacobian every BatchNorm mean and gradient-centering layer is
// treated as detached.
inline ByolGrad byol_batch_grad(const ByolSystem& s, const Matrix& X1, const Matrix& Xp, BackMode mode = BackMode::Batch) {
    const std::size_t B = X1.cols();
    if (Xp.cols() != B || B == 0) throw std::invalid_argument("byol_batch_grad: batch size mismatch");
    const Network on = mode == BackMode::Batch ? s.online_full() : detach_means(s.online_full());
    const Network tg = mode == BackMode::Batch ? s.target : detach_means(s.target);
    const ForwardTrace t1 = on.forward(X1);
    const ForwardTrace tt = tg.forward(Xp);
    const Matrix& F1 = t1.output();
    const Matrix& Fp = tt.output();
    Matrix G(F1.rows(), B);
    ByolGrad out;
    const double w = 1.0 / static_cast<double>(B);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t r = 0; r < F1.rows(); ++r) {
            const double d = F1(r, b) - Fp(r, b);
            out.loss += 0.5 * w * d * d;
            G(r, b) = w * d;
        }
    out.dW = on.backward(t1, G, mode, true, false).dW;
    if (!s.stop_gradient) out.dW = detail::add_grads(std::move(out.dW), detail::target_branch(s, tt, -1.0 * G, mode));
    return out;
}

// Exact gradient of the pair loss averaged over the whole augmented dataset.
inline ByolGrad byol_population_grad(const ByolSystem& s, const AugmentedDataset& ds, BackMode mode = BackMode::Batch) {
    ds.validate(1e-9);
    const Vec P = ds.group_probs();
    std::vector<Vec> xs;
    Vec w;
    std::vector<std::size_t> grp;
    for (std::size_t a = 0; a < ds.groups.size(); ++a)
        for (const auto& v : ds.groups[a]) {
            xs.push_back(v.x);
            w.push_back(P[a] * v.prob);
            grp.push_back(a);
        }
    const Matrix X = batch_of(xs);
    const Network on = mode == BackMode::Batch ? s.online_full() : detach_means(s.online_full());
    const Network tg = mode == BackMode::Batch ? s.target : detach_means(s.target);
    const ForwardTrace t1 = on.forward(X, &w);
    const ForwardTrace tt = tg.forward(X, &w);
    const Matrix& F1 = t1.output();
    const Matrix& Fp = tt.output();
    const std::size_t n = F1.rows(), G = ds.groups.size();
    std::vector<Vec> m1(G, Vec(n, 0.0)), mp(G, Vec(n, 0.0));
    for (std::size_t b = 0; b < xs.size(); ++b) {
        const double q = w[b] / P[grp[b]];
        for (std::size_t r = 0; r < n; ++r) {
            m1[grp[b]][r] += q * F1(r, b);
            mp[grp[b]][r] += q * Fp(r, b);
        }
    }
    ByolGrad out;
    Matrix G1(n, xs.size()), Gt(n, xs.size());
    for (std::size_t b = 0; b < xs.size(); ++b) {
        const std::size_t a = grp[b];
        for (std::size_t r = 0; r < n; ++r) {
            G1(r, b) = w[b] * (F1(r, b) - mp[a][r]);
            Gt(r, b) = -w[b] * (m1[a][r] - Fp(r, b));
            out.loss += 0.5 * w[b] * (F1(r, b) * F1(r, b) + Fp(r, b) * Fp(r, b));
        }
    }
    for (std::size_t a = 0; a < G; ++a) out.loss -= P[a] * dot(m1[a], mp[a]);
    out.dW = on.backward(t1, G1, mode, true, false).dW;
    if (!s.stop_gradient) out.dW = detail::add_grads(std::move(out.dW), detail::target_branch(s, tt, Gt, mode));
    return out;
}

// vec(ΔW_l) = -vec(∂L/∂W_l) for the population batch.
inline Vec population_update(const ByolSystem& s, const AugmentedDataset& ds, std::size_t l, BackMode mode = BackMode::Batch) {
    return -1.0 * vec(byol_population_grad(s, ds, mode).dW.at(l - 1));
}

// True when every layer above linear layer l of the online tower is Linear
// or a gradient-centring / BatchNorm layer (no pointwise nonlinearity).
inline bool linear_above(const Network& net, std::size_t l) {
    for (std::size_t k = net.linear_pos(l) + 1; k < net.layers().size(); ++k) {
        const LayerKind kd = net.layers()[k].kind;
        if (kd != LayerKind::Linear && kd != LayerKind::GradCenter && kd != LayerKind::BatchNorm) return false;
    }
    return true;
}

struct BnCorrection {
    Vec delta;
    bool linear_top = true; // hypothesis of the closed form
};

// (update backpropagating through the batch mean) - (update with the mean
// detached), population batch.
inline BnCorrection bn_correction_empirical(const ByolSystem& s, const AugmentedDataset& ds, std::size_t l) {
    BnCorrection c;
    c.linear_top = linear_above(s.online_full(), l);
    c.delta = population_update(s, ds, l, BackMode::Batch) - population_update(s, ds, l, BackMode::Jacobian);
    return c;
}

// Connection statistics of both towers at layer l (gradient-centring layers
// count as identity; BatchNorm is rejected).
struct TowerStats {
    ConnStats online, target;
    Vec w, w_target; // vec(W_l), vec(W'_l)
};

inline TowerStats tower_stats(const ByolSystem& s, const AugmentedDataset& ds, std::size_t l) {
    if (l == 0 || l > s.backbone_layers()) throw std::invalid_argument("tower_stats: layer outside the backbone");
    TowerStats t;
    t.online = compute_stats(s.online_full(), ds, l);
    t.target = compute_stats(s.padded_target(), ds, l);
    t.w = vec(s.online.weight(l));
    t.w_target = vec(s.target.weight(l));
    return t;
}

// E_x[K̄(x)] (E_x[K̄ᵀ(x)] w - E_x[K̄ᵀ(x; W')] w')
inline Vec bn_correction_closed_form(const TowerStats& t) {
    const Matrix m = expected_kbar(t.online), mt = expected_kbar(t.target);
    return matvec(m, tmatvec(m, t.w) - tmatvec(mt, t.w_target));
}

// E_x[K̄(x) K̄ᵀ(x; W')] - E[K̄] E[K̄'ᵀ]
inline Matrix cross_covariance(const ConnStats& a, const ConnStats& b) {
    Matrix second(a.D, b.D);
    for (std::size_t g = 0; g < a.g.size(); ++g) second.axpy(a.P[g], a.g[g].Kbar * b.g[g].Kbar.transpose());
    return second - expected_kbar(a) * expected_kbar(b).transpose();
}

struct CorrectedUpdate {
    Vec sym;           // vec(ΔW_l)_s = -E_x V_aug[K] w
    Vec plain;         // expected update without centring
    Vec corrected;     // sym - V_x[K̄] w + Cov_x[K̄, K̄'] w'
    Vec delta;         // corrected - plain
};

inline CorrectedUpdate corrected_update(const TowerStats& t, std::size_t l = 0) {
    const Matrix ev = op_beta(t.online, 0.0, l).EV.m;
    const Matrix vx = op_simp(t.online, l).m;
    const Matrix cov = cross_covariance(t.online, t.target);
    Matrix second_t(t.online.D, t.target.D);
    for (std::size_t g = 0; g < t.online.g.size(); ++g)
        second_t.axpy(t.online.P[g], t.online.g[g].Kbar * t.target.g[g].Kbar.transpose());
    const Matrix m = expected_kbar(t.online);
    CorrectedUpdate u;
    u.sym = -1.0 * matvec(ev, t.w);
    u.plain = u.sym - matvec(vx + m * m.transpose(), t.w) + matvec(second_t, t.w_target);
    u.corrected = u.sym - matvec(vx, t.w) + matvec(cov, t.w_target);
    u.delta = u.corrected - u.plain;
    return u;
}

struct PredictorEffect {
    Matrix wp;
    Matrix contrastive;      // E_x[K̂_b W_pᵀ (I - W_p) K̂_bᵀ]
    Matrix ev_online;        // E_x V_aug[K_b W_pᵀ]
    Matrix ev_backbone;      // E_x V_aug[K_b]
    Matrix nsg_term;         // -V_x[K̄_b (I - W_p)ᵀ]
    std::optional<double> beta;     // set when W_p = βI
    std::optional<Matrix> beta_form; // β(1 - β) V_x[K̄_b]
    Vec update_stop;         // -ev_online w + contrastive w
    Vec update_no_stop;      // -(ev_online + ev_backbone) w + nsg_term w
    Vec update_no_stop_literal; // 2 (-ev_online w) + nsg_term w
};

// Decomposition for a single linear predictor with W' = W_b.
inline PredictorEffect predictor_effect(const ByolSystem& s, const AugmentedDataset& ds, std::size_t l) {
    if (!s.predictor || s.predictor->layers().size() != 1 || s.predictor->layers()[0].kind != LayerKind::Linear)
        throw std::invalid_argument("predictor_effect: needs a single linear predictor");
    if (s.use_ema && s.gamma_ema > 0) throw std::invalid_argument("predictor_effect: needs W' = W (no EMA)");
    PredictorEffect pe;
    pe.wp = s.predictor->weight(1);
    const std::size_t n = pe.wp.rows();
    const Matrix I = Matrix::identity(n);
    const ConnStats b = compute_stats(s.online, ds, l);
    const Matrix mb = expected_kbar(b);
    const Vec w = vec(s.online.weight(l));
    const Matrix inner = pe.wp.transpose() * (I - pe.wp);
    const Matrix imw = (I - pe.wp).transpose();
    pe.contrastive = Matrix(b.D, b.D);
    pe.ev_online = Matrix(b.D, b.D);
    pe.ev_backbone = Matrix(b.D, b.D);
    pe.nsg_term = Matrix(b.D, b.D);
    Matrix vx(b.D, b.D);
    for (std::size_t g = 0; g < b.g.size(); ++g) {
        const auto& gs = b.g[g];
        const Matrix khat = gs.Kbar - mb;
        pe.contrastive.axpy(b.P[g], khat * inner * khat.transpose());
        const Matrix kw = khat * imw;
        pe.nsg_term.axpy(-b.P[g], kw * kw.transpose());
        vx.axpy(b.P[g], khat * khat.transpose());
        for (std::size_t v = 0; v < gs.K.size(); ++v) {
            const Matrix dk = gs.K[v] - gs.Kbar;
            const Matrix dkp = dk * pe.wp.transpose();
            pe.ev_online.axpy(b.P[g] * gs.p[v], dkp * dkp.transpose());
            pe.ev_backbone.axpy(b.P[g] * gs.p[v], dk * dk.transpose());
        }
    }
    bool scalar = true;
    for (std::size_t i = 0; i < n && scalar; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (pe.wp(i, j) != (i == j ? pe.wp(0, 0) : 0.0)) scalar = false;
    if (scalar) {
        pe.beta = pe.wp(0, 0);
        pe.beta_form = (*pe.beta * (1.0 - *pe.beta)) * vx;
    }
    const Vec sym = -1.0 * matvec(pe.ev_online, w);
    pe.update_stop = sym + matvec(pe.contrastive, w);
    pe.update_no_stop = sym - matvec(pe.ev_backbone, w) + matvec(pe.nsg_term, w);
    pe.update_no_stop_literal = 2.0 * sym + matvec(pe.nsg_term, w);
    return pe;
}

// Correction for a symmetric contrastive batch: every branch (anchor,
// positive, negatives) runs through the same net and receives gradient.
// Returns (centred update) - (uncentred update) at layer l and the norm of
// the uncentred gradient.
struct SymmetricCorrection {
    Vec delta;
    double grad_norm = 0.0;
};

inline SymmetricCorrection simclr_bn_correction(const Network& net, const LossKind& kind, const std::vector<PairBatch>& batch,
                                                std::size_t l) {
    std::vector<Vec> xs;
    std::vector<std::size_t> start;
    for (const auto& pb : batch) {
        start.push_back(xs.size());
        xs.push_back(pb.x1);
        xs.push_back(pb.x_plus);
        for (const auto& x : pb.negatives) xs.push_back(x);
    }
    const Matrix X = batch_of(xs);
    const ForwardTrace t = net.forward(X);
    const Matrix& F = t.output();
    Matrix G(F.rows(), X.cols());
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const std::size_t a = start[i], H = batch[i].H();
        const Vec f1 = F.col(a), fp = F.col(a + 1);
        double rp = half_sq_dist(f1, fp);
        Vec rm;
        for (std::size_t k = 0; k < H; ++k) rm.push_back(half_sq_dist(f1, F.col(a + 2 + k)));
        const Partials p = loss_partials(kind, rp, rm);
        for (std::size_t r = 0; r < F.rows(); ++r) {
            const double dp = scale * p.d_plus * (f1[r] - fp[r]);
            G(r, a) += dp;
            G(r, a + 1) -= dp;
            for (std::size_t k = 0; k < H; ++k) {
                const double dm = scale * p.d_minus[k] * (f1[r] - F(r, a + 2 + k));
                G(r, a) += dm;
                G(r, a + 2 + k) -= dm;
            }
        }
    }
    const Vec centred = vec(net.backward(t, G, BackMode::Batch).dW.at(l - 1));
    const Vec plain = vec(detach_means(net).backward(t, G, BackMode::Jacobian).dW.at(l - 1));
    return {plain - centred, norm2(plain)};
}

// tr V_x[E_aug f] / (tr E_x[V_aug f] + eps), with the whole dataset as one
// weighted batch.
inline double collapse_metric(const Network& net, const AugmentedDataset& ds, double eps = 1e-12) {
    const Vec P = ds.group_probs();
    std::vector<Vec> xs;
    Vec w;
    std::vector<std::size_t> grp;
    for (std::size_t a = 0; a < ds.groups.size(); ++a)
        for (const auto& v : ds.groups[a]) {
            xs.push_back(v.x);
            w.push_back(P[a] * v.prob);
            grp.push_back(a);
        }
    const ForwardTrace t = net.forward(batch_of(xs), &w);
    const Matrix& F = t.output();
    const std::size_t n = F.rows();
    std::vector<Vec> mean(ds.groups.size(), Vec(n, 0.0));
    Vec grand(n, 0.0);
    for (std::size_t b = 0; b < xs.size(); ++b)
        for (std::size_t r = 0; r < n; ++r) {
            if (P[grp[b]] > 0) mean[grp[b]][r] += w[b] / P[grp[b]] * F(r, b);
            grand[r] += w[b] * F(r, b);
        }
    double within = 0.0, between = 0.0;
    for (std::size_t b = 0; b < xs.size(); ++b)
        for (std::size_t r = 0; r < n; ++r) {
            const double d = F(r, b) - mean[grp[b]][r];
            within += w[b] * d * d;
        }
    for (std::size_t a = 0; a < mean.size(); ++a)
        for (std::size_t r = 0; r < n; ++r) {
            const double d = mean[a][r] - grand[r];
            between += P[a] * d * d;
        }
    return between / (within + eps);
}

// ---------------------------------------------------------------------------
// Training on tree samples

struct ByolOptions {
    double lr = 0.3;
    std::size_t batch = 128;
    std::size_t steps = 500;
    bool l2_normalize = false; // normalise both outputs inside the loss
};

// Plain SGD step on the online weights, then target sync. Returns the loss.
inline double byol_step(ByolSystem& s, const Matrix& X1, const Matrix& Xp, const ByolOptions& opt) {
    ByolGrad g;
    if (!opt.l2_normalize) {
        g = byol_batch_grad(s, X1, Xp);
    } else {
        const Network on = s.online_full();
        const ForwardTrace t1 = on.forward(X1), tt = s.target.forward(Xp);
        Matrix Y1 = t1.output(), Yp = tt.output();
        const Vec n1 = detail::normalize_columns(Y1), np = detail::normalize_columns(Yp);
        const std::size_t B = X1.cols();
        const double w = 1.0 / static_cast<double>(B);
        Matrix G1(Y1.rows(), B), Gp(Y1.rows(), B);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t r = 0; r < Y1.rows(); ++r) {
                const double d = Y1(r, b) - Yp(r, b);
                g.loss += 0.5 * w * d * d;
                G1(r, b) = w * d;
                Gp(r, b) = -w * d;
            }
        detail::normalize_backward(Y1, n1, G1);
        g.dW = on.backward(t1, G1, BackMode::Batch, true, false).dW;
        if (!s.stop_gradient) {
            detail::normalize_backward(Yp, np, Gp);
            g.dW = detail::add_grads(std::move(g.dW), detail::target_branch(s, tt, Gp, BackMode::Batch));
        }
    }
    if (!std::isfinite(g.loss)) return g.loss;
    const std::size_t nb = s.online.num_linear();
    for (std::size_t l = 1; l <= nb; ++l) s.online.weight(l).axpy(-opt.lr, g.dW[l - 1]);
    if (s.predictor)
        for (std::size_t l = 1; l <= s.predictor->num_linear(); ++l) s.predictor->weight(l).axpy(-opt.lr, g.dW[nb + l - 1]);
    s.online.apply_masks();
    s.sync_target();
    return g.loss;
}

// `steps` SGD steps, each on a fresh batch of roots with two augmentations.
// Returns the per-step losses; stops early on a non-finite loss.
inline std::vector<double> byol_train(ByolSystem& s, const HltmTree& t, const ByolOptions& opt, Rng& rng) {
    std::vector<double> losses;
    Assignment z(t.num_nodes());
    Matrix X1(t.num_leaves(), opt.batch), Xp(t.num_leaves(), opt.batch);
    for (std::size_t step = 0; step < opt.steps; ++step) {
        for (std::size_t b = 0; b < opt.batch; ++b) {
            z[0] = rng.bernoulli(t.p_root_one());
            write_visible(t, augment(t, z, rng), X1, b);
            write_visible(t, augment(t, z, rng), Xp, b);
        }
        losses.push_back(byol_step(s, X1, Xp, opt));
        if (!std::isfinite(losses.back())) break;
    }
    return losses;
}

} // namespace ssldyn
