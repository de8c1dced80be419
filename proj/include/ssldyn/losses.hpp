#pragma once

// Contrastive losses written as functions of the squared half-distances
// r+ = ½‖f(x1) - f(x+)‖² and r_k = ½‖f(x1) - f(x_k-)‖², k = 1..H.
//
// For H > 1 the simple losses sum over negatives:
//   Simple      L = Σ_k (r+ - r_k)
//   SimpleBeta  L = β r+ + Σ_k (r+ - r_k)       (H = 1: (1+β) r+ - r-)
//   SoftTriplet L = τ log(1 + Σ_k exp((r+ - r_k + r0)/τ))
//   InfoNce     L = -log( e^{-r+/τ} / (e^{-r+/τ} + Σ_k e^{-r_k/τ}) )
//   ExactNce    L = Σ_k ξ(r(x, x'_k)) (r+ - r_k), ξ frozen, evaluated on the
//               unaugmented sources.

#include "ssldyn/linalg.hpp"
#include "ssldyn/network.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace ssldyn {

struct LossKind {
    enum Type { Simple, SimpleBeta, SoftTriplet, InfoNce, ExactNce } type = Simple;
    double beta = 0.0;
    double tau = 1.0;
    double r0 = 0.0;
    int H = 1;

    static LossKind simple(int H = 1) { return {Simple, 0.0, 1.0, 0.0, H}; }
    static LossKind simple_beta(double beta, int H = 1) { return {SimpleBeta, beta, 1.0, 0.0, H}; }
    static LossKind soft_triplet(double tau, double r0, int H = 1) { return {SoftTriplet, 0.0, tau, r0, H}; }
    static LossKind info_nce(double tau, int H = 1) { return {InfoNce, 0.0, tau, 0.0, H}; }
    static LossKind exact_nce(double tau, int H = 1) { return {ExactNce, 0.0, tau, 0.0, H}; }

    void validate() const {
        if (!(tau > 0)) throw std::invalid_argument("loss: tau must be positive");
        if (r0 < 0) throw std::invalid_argument("loss: r0 must be non-negative");
        if (H < 1) throw std::invalid_argument("loss: H must be at least 1");
    }
    // Partials sum to zero (the common property) for these kinds.
    bool balanced() const { return type != SimpleBeta; }
    // ∂L/∂r are constants.
    bool constant_partials() const { return type == Simple || type == SimpleBeta; }

    std::string name() const {
        switch (type) {
        case Simple: return "simple";
        case SimpleBeta: return "simple_beta";
        case SoftTriplet: return "soft_triplet";
        case InfoNce: return "info_nce";
        case ExactNce: return "exact_nce";
        }
        return "?";
    }
};

struct Partials {
    double d_plus = 0.0;
    Vec d_minus;
    double sum() const {
        double s = d_plus;
        for (double d : d_minus) s += d;
        return s;
    }
};

namespace detail {
inline double log_sum_exp(const Vec& z) {
    double m = -INFINITY;
    for (double v : z) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    return m + std::log(s);
}
} // namespace detail

inline double loss_value(const LossKind& k, double rp, const Vec& rm) {
    k.validate();
    switch (k.type) {
    case LossKind::Simple:
    case LossKind::SimpleBeta: {
        double s = k.type == LossKind::SimpleBeta ? k.beta * rp : 0.0;
        for (double r : rm) s += rp - r;
        return s;
    }
    case LossKind::SoftTriplet: {
        Vec z{0.0};
        for (double r : rm) z.push_back((rp - r + k.r0) / k.tau);
        return k.tau * detail::log_sum_exp(z);
    }
    case LossKind::InfoNce: {
        Vec z{-rp / k.tau};
        for (double r : rm) z.push_back(-r / k.tau);
        return rp / k.tau + detail::log_sum_exp(z);
    }
    case LossKind::ExactNce:
        throw std::invalid_argument("loss_value: exact_nce needs frozen weights, use exact_loss_value");
    }
    return 0.0;
}

inline Partials loss_partials(const LossKind& k, double rp, const Vec& rm) {
    k.validate();
    Partials p;
    p.d_minus.resize(rm.size());
    switch (k.type) {
    case LossKind::Simple:
    case LossKind::SimpleBeta:
        p.d_plus = static_cast<double>(rm.size()) + (k.type == LossKind::SimpleBeta ? k.beta : 0.0);
        for (auto& d : p.d_minus) d = -1.0;
        break;
    case LossKind::SoftTriplet: {
        Vec z{0.0};
        for (double r : rm) z.push_back((rp - r + k.r0) / k.tau);
        const double lse = detail::log_sum_exp(z);
        for (std::size_t i = 0; i < rm.size(); ++i) {
            const double s = std::exp(z[i + 1] - lse);
            p.d_minus[i] = -s;
            p.d_plus += s;
        }
        break;
    }
    case LossKind::InfoNce: {
        Vec z{-rp / k.tau};
        for (double r : rm) z.push_back(-r / k.tau);
        const double lse = detail::log_sum_exp(z);
        // 1 - softmax+ written as the sum of the negative softmax weights
        for (std::size_t i = 0; i < rm.size(); ++i) {
            const double s = std::exp(z[i + 1] - lse) / k.tau;
            p.d_minus[i] = -s;
            p.d_plus += s;
        }
        break;
    }
    case LossKind::ExactNce:
        throw std::invalid_argument("loss_partials: exact_nce needs frozen weights, use exact_partials");
    }
    return p;
}

// Pairwise weight ξ(r).
inline double xi_weight(const LossKind& k, double r) {
    k.validate();
    switch (k.type) {
    case LossKind::Simple: return 1.0;
    case LossKind::SoftTriplet: {
        const double u = -(r - k.r0) / k.tau;
        return u > 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
    }
    case LossKind::InfoNce:
    case LossKind::ExactNce: {
        const double u = -r / k.tau;
        const double sig = u > 0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
        return sig / k.tau;
    }
    case LossKind::SimpleBeta: break;
    }
    throw std::invalid_argument("xi_weight: no pairwise weight for " + k.name());
}

// Partials of Σ_k ξ_k (r+ - r_k) with ξ held fixed.
inline Partials exact_partials(const Vec& xi) {
    Partials p;
    for (double x : xi) {
        p.d_plus += x;
        p.d_minus.push_back(-x);
    }
    return p;
}

struct CommonPropertyCheck {
    bool signs_ok = true;
    double sum = 0.0;
};

// d+ > 0, each d_k < 0, and the sum of all partials.
inline CommonPropertyCheck check_common_property(const Partials& p) {
    CommonPropertyCheck c;
    c.signs_ok = p.d_plus > 0;
    for (double d : p.d_minus) c.signs_ok = c.signs_ok && d < 0;
    c.sum = p.sum();
    return c;
}

inline double half_sq_dist(const Vec& a, const Vec& b) {
    const Vec d = a - b;
    return 0.5 * dot(d, d);
}

struct PairBatch {
    Vec x1;
    Vec x_plus;
    std::vector<Vec> negatives;
    // unaugmented sources: x for the anchor/positive, x'_k per negative
    std::optional<Vec> source;
    std::vector<Vec> neg_sources;

    std::size_t H() const { return negatives.size(); }
    bool has_provenance() const { return source.has_value() && neg_sources.size() == negatives.size(); }
};

inline bool is_piecewise_linear(const Network& net) {
    for (const auto& L : net.layers())
        if (L.kind != LayerKind::Linear && L.kind != LayerKind::ReLU && L.kind != LayerKind::LeakyReLU) return false;
    return true;
}

// Distances for a batch under one network.
struct BatchDistances {
    Vec f1, fp;
    std::vector<Vec> fn;
    double rp = 0.0;
    Vec rm;
};

inline BatchDistances batch_distances(const Network& net, const PairBatch& b) {
    BatchDistances d;
    d.f1 = net.output(b.x1);
    d.fp = net.output(b.x_plus);
    d.rp = half_sq_dist(d.f1, d.fp);
    for (const auto& x : b.negatives) {
        d.fn.push_back(net.output(x));
        d.rm.push_back(half_sq_dist(d.f1, d.fn.back()));
    }
    return d;
}

struct WeightGrad {
    Vec chain;       // ∂+ K1 (f1 - f+) + Σ_k ∂_k K1 (f1 - f_k)
    Vec cancel_form; // K1 Σ_k ∂_k (K+ - K_k)ᵀ vec W  (balanced losses, piecewise-linear nets)
    bool has_cancel_form = false;
};

// Gradient of the loss wrt vec(W_l) through the anchor (x1) branch, with the
// partials p. The other branches see the same weights but are held fixed.
inline WeightGrad weight_grad_from_partials(const Network& net, const PairBatch& b, const Partials& p, std::size_t l,
                                            bool balanced) {
    const BatchDistances d = batch_distances(net, b);
    const Matrix K1 = connection(net, b.x1, l);
    WeightGrad g;
    Vec acc = p.d_plus * (d.f1 - d.fp);
    for (std::size_t k = 0; k < b.H(); ++k) axpy(p.d_minus[k], d.f1 - d.fn[k], acc);
    g.chain = matvec(K1, acc);

    if (balanced && is_piecewise_linear(net)) {
        const Vec w = vec(net.weight(l));
        const Vec kp = tmatvec(connection(net, b.x_plus, l), w);
        Vec inner(kp.size(), 0.0);
        for (std::size_t k = 0; k < b.H(); ++k) axpy(p.d_minus[k], kp - tmatvec(connection(net, b.negatives[k], l), w), inner);
        g.cancel_form = matvec(K1, inner);
        g.has_cancel_form = true;
        const double scale = std::max(1.0, norm2(g.chain));
        if (norm2(g.chain - g.cancel_form) > 1e-10 * scale)
            throw IdentityMismatch("batch_weight_grad: chain-rule and cancellation forms disagree");
    }
    return g;
}

inline WeightGrad batch_weight_grad(const Network& net, const LossKind& kind, const PairBatch& b, std::size_t l) {
    const BatchDistances d = batch_distances(net, b);
    const Partials p = loss_partials(kind, d.rp, d.rm);
    return weight_grad_from_partials(net, b, p, l, kind.balanced());
}

// ξ_k on the unaugmented distances r(x, x'_k).
inline Vec exact_xi(const Network& net, const LossKind& kind, const PairBatch& b) {
    if (!b.has_provenance()) throw std::invalid_argument("exact loss: batch carries no unaugmented sources");
    const Vec fx = net.output(*b.source);
    Vec xi;
    for (const auto& s : b.neg_sources) xi.push_back(xi_weight(kind, half_sq_dist(fx, net.output(s))));
    return xi;
}

inline double exact_loss_value(const Network& net, const LossKind& kind, const PairBatch& b) {
    const Vec xi = exact_xi(net, kind, b);
    const BatchDistances d = batch_distances(net, b);
    double s = 0.0;
    for (std::size_t k = 0; k < xi.size(); ++k) s += xi[k] * (d.rp - d.rm[k]);
    return s;
}

// g = K1 Σ_k ξ_k (K_k - K+)ᵀ vec W  (ξ frozen).
inline WeightGrad exact_loss_grad(const Network& net, const LossKind& kind, const PairBatch& b, std::size_t l) {
    return weight_grad_from_partials(net, b, exact_partials(exact_xi(net, kind, b)), l, true);
}

// Loss value seen by the anchor branch when tower-1 weights are net1 and the
// other branches use net2 (for finite differences).
inline double anchor_loss(const Network& net1, const Network& net2, const LossKind& kind, const PairBatch& b) {
    const Vec f1 = net1.output(b.x1);
    const double rp = half_sq_dist(f1, net2.output(b.x_plus));
    Vec rm;
    for (const auto& x : b.negatives) rm.push_back(half_sq_dist(f1, net2.output(x)));
    return loss_value(kind, rp, rm);
}

} // namespace ssldyn
