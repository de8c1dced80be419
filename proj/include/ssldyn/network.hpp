#pragma once

// Small feed-forward nets with cached batch forward passes, manual backprop,
// per-layer Jacobians and connections.
//
// Conventions
//  * A batch is an n x B matrix; column b is sample b. Every sample carries a
//    weight w_b (sum 1, default 1/B) used by batch-coupled layers.
//  * "Layer l" means the l-th Linear layer (1-based). f_{l-1} is its input and
//    f~_l its output (the pre-activation).
//  * vec() stacks columns, so W(i, j) sits at j*n_l + i and
//    K_l = f_{l-1} (x) J_lᵀ has shape (n_{l-1} n_l) x n_L.

#include "ssldyn/linalg.hpp"
#include "ssldyn/rng.hpp"

#include <cstdint>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

namespace ssldyn {

enum class LayerKind { Linear, ReLU, LeakyReLU, Power, L2Normalize, BatchNorm, GradCenter };

struct BatchNormConfig {
    bool mean_norm = true;
    bool std_norm = false;
    bool mean_detached = false;
    bool std_detached = false;
    bool affine = false; // never set; kept so configs round-trip
    double eps = 1e-5;
};

struct Layer {
    LayerKind kind = LayerKind::Linear;
    std::size_t in_dim = 0, out_dim = 0;
    Matrix W;                                    // Linear only, out x in
    std::vector<std::vector<std::size_t>> mask;  // Linear: allowed columns per row; empty = dense
    double param = 0.0;                          // LeakyReLU slope or Power exponent
    BatchNormConfig bn;

    bool is_masked() const { return !mask.empty(); }
    bool couples_batch() const { return kind == LayerKind::BatchNorm || kind == LayerKind::GradCenter; }
};

struct NetLimits {
    std::size_t max_width = 32;
    std::size_t max_depth = 8;
};

struct ForwardTrace {
    std::vector<Matrix> acts;  // acts[0] = input, acts[k+1] = output of layer k
    std::vector<Vec> bn_mean;  // per layer position; empty unless BatchNorm
    std::vector<Vec> bn_sigma;
    Vec weights;               // per-sample weights

    std::size_t batch() const { return acts.front().cols(); }
    const Matrix& output() const { return acts.back(); }
};

enum class BackMode {
    Batch,     // full batch coupling through BatchNorm / GradCenter
    Jacobian,  // per-sample derivative; GradCenter acts as identity
};

struct Backprop {
    std::vector<Matrix> dW;     // per linear layer (index l-1)
    std::vector<Matrix> d_acts; // gradient wrt acts[k], filled when requested
};

class Network {
public:
    Network() = default;
    explicit Network(std::size_t input_dim) : input_dim_(input_dim) {}

    std::size_t input_dim() const { return input_dim_; }
    std::size_t output_dim() const { return layers_.empty() ? input_dim_ : layers_.back().out_dim; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::vector<Layer>& layers() { return layers_; }

    Network& add_linear(std::size_t out) {
        Layer L;
        L.kind = LayerKind::Linear;
        L.in_dim = output_dim();
        L.out_dim = out;
        L.W = Matrix(out, L.in_dim);
        return push(std::move(L));
    }
    Network& add_linear_masked(std::size_t out, std::vector<std::vector<std::size_t>> mask) {
        if (mask.size() != out) throw std::invalid_argument("add_linear_masked: one mask row per output unit");
        Layer L;
        L.kind = LayerKind::Linear;
        L.in_dim = output_dim();
        L.out_dim = out;
        L.W = Matrix(out, L.in_dim);
        for (const auto& row : mask)
            for (std::size_t c : row)
                if (c >= L.in_dim) throw std::invalid_argument("add_linear_masked: column out of range");
        L.mask = std::move(mask);
        return push(std::move(L));
    }
    Network& add_relu() { return push(simple(LayerKind::ReLU)); }
    Network& add_leaky_relu(double slope) {
        Layer L = simple(LayerKind::LeakyReLU);
        L.param = slope;
        return push(std::move(L));
    }
    Network& add_power(double p) {
        Layer L = simple(LayerKind::Power);
        L.param = p;
        return push(std::move(L));
    }
    Network& add_l2_normalize() { return push(simple(LayerKind::L2Normalize)); }
    Network& add_batch_norm(BatchNormConfig cfg) {
        if (!cfg.mean_norm && !cfg.std_norm) throw std::invalid_argument("BatchNorm needs mean_norm or std_norm");
        if (cfg.affine) throw std::invalid_argument("affine BatchNorm is not supported");
        Layer L = simple(LayerKind::BatchNorm);
        L.bn = cfg;
        return push(std::move(L));
    }
    // Forward identity; batch backward subtracts the weighted batch mean of
    // the incoming gradient.
    Network& add_grad_center() { return push(simple(LayerKind::GradCenter)); }

    std::size_t num_linear() const {
        std::size_t n = 0;
        for (const auto& L : layers_) n += L.kind == LayerKind::Linear;
        return n;
    }
    // Position in layers() of the l-th Linear layer (1-based).
    std::size_t linear_pos(std::size_t l) const {
        std::size_t n = 0;
        for (std::size_t k = 0; k < layers_.size(); ++k)
            if (layers_[k].kind == LayerKind::Linear && ++n == l) return k;
        throw std::out_of_range("no linear layer " + std::to_string(l));
    }
    Matrix& weight(std::size_t l) { return layers_[linear_pos(l)].W; }
    const Matrix& weight(std::size_t l) const { return layers_[linear_pos(l)].W; }
    std::size_t width_in(std::size_t l) const { return layers_[linear_pos(l)].in_dim; }
    std::size_t width_out(std::size_t l) const { return layers_[linear_pos(l)].out_dim; }

    void validate(const NetLimits& lim = {}) const {
        if (layers_.empty()) throw std::invalid_argument("network has no layers");
        if (num_linear() > lim.max_depth) throw std::invalid_argument("network deeper than the configured cap");
        if (input_dim_ > lim.max_width) throw std::invalid_argument("input wider than the configured cap");
        for (const auto& L : layers_)
            if (L.out_dim > lim.max_width) throw std::invalid_argument("layer wider than the configured cap");
        const LayerKind top = layers_.back().kind;
        if (top == LayerKind::ReLU || top == LayerKind::LeakyReLU || top == LayerKind::Power)
            throw std::invalid_argument("the top layer must not be a pointwise nonlinearity");
    }

    // Uniform[-s sqrt(3/fan_in), s sqrt(3/fan_in)], row-major, masked rows use
    // their own fan-in.
    void init_uniform(Rng& rng, double sigma_w = 1.0) {
        for (auto& L : layers_) {
            if (L.kind != LayerKind::Linear) continue;
            for (std::size_t i = 0; i < L.out_dim; ++i) {
                if (L.is_masked()) {
                    const double a = sigma_w * std::sqrt(3.0 / std::max<std::size_t>(1, L.mask[i].size()));
                    for (std::size_t j : L.mask[i]) L.W(i, j) = rng.uniform(-a, a);
                } else {
                    const double a = sigma_w * std::sqrt(3.0 / std::max<std::size_t>(1, L.in_dim));
                    for (std::size_t j = 0; j < L.in_dim; ++j) L.W(i, j) = rng.uniform(-a, a);
                }
            }
        }
    }

    // Zero out anything a mask forbids (after a dense update, say).
    void apply_masks() {
        for (auto& L : layers_) {
            if (L.kind != LayerKind::Linear || !L.is_masked()) continue;
            for (std::size_t i = 0; i < L.out_dim; ++i) {
                Vec keep(L.in_dim, 0.0);
                for (std::size_t j : L.mask[i]) keep[j] = L.W(i, j);
                for (std::size_t j = 0; j < L.in_dim; ++j) L.W(i, j) = keep[j];
            }
        }
    }

    ForwardTrace forward(const Matrix& X, const Vec* weights = nullptr) const {
        if (X.rows() != input_dim_) throw std::invalid_argument("forward: input dimension mismatch");
        const std::size_t B = X.cols();
        ForwardTrace t;
        t.weights = weights ? *weights : Vec(B, 1.0 / static_cast<double>(B));
        if (t.weights.size() != B) throw std::invalid_argument("forward: weight count mismatch");
        t.acts.reserve(layers_.size() + 1);
        t.acts.push_back(X);
        t.bn_mean.assign(layers_.size(), {});
        t.bn_sigma.assign(layers_.size(), {});
        for (std::size_t k = 0; k < layers_.size(); ++k) {
            const Layer& L = layers_[k];
            const Matrix& in = t.acts[k];
            Matrix out(L.out_dim, B);
            switch (L.kind) {
            case LayerKind::Linear:
                if (L.is_masked()) {
                    for (std::size_t i = 0; i < L.out_dim; ++i) {
                        double* o = out.row_ptr(i);
                        for (std::size_t j : L.mask[i]) {
                            const double w = L.W(i, j);
                            const double* x = in.row_ptr(j);
                            for (std::size_t b = 0; b < B; ++b) o[b] += w * x[b];
                        }
                    }
                } else {
                    out = L.W * in;
                }
                break;
            case LayerKind::ReLU:
                for (std::size_t q = 0; q < out.size(); ++q) out.data()[q] = std::max(0.0, in.data()[q]);
                break;
            case LayerKind::LeakyReLU:
                for (std::size_t q = 0; q < out.size(); ++q) {
                    const double x = in.data()[q];
                    out.data()[q] = x > 0 ? x : L.param * x;
                }
                break;
            case LayerKind::Power:
                for (std::size_t q = 0; q < out.size(); ++q) out.data()[q] = std::pow(in.data()[q], L.param);
                break;
            case LayerKind::L2Normalize:
                for (std::size_t b = 0; b < B; ++b) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < L.in_dim; ++i) s += in(i, b) * in(i, b);
                    s = std::sqrt(s);
                    if (s < 1e-12) throw std::domain_error("L2Normalize: degenerate (near-zero) output");
                    for (std::size_t i = 0; i < L.in_dim; ++i) out(i, b) = in(i, b) / s;
                }
                break;
            case LayerKind::BatchNorm: {
                Vec mu(L.in_dim, 0.0), sig(L.in_dim, 1.0);
                for (std::size_t i = 0; i < L.in_dim; ++i) {
                    const double* x = in.row_ptr(i);
                    double m = 0.0;
                    for (std::size_t b = 0; b < B; ++b) m += t.weights[b] * x[b];
                    double v = 0.0;
                    for (std::size_t b = 0; b < B; ++b) v += t.weights[b] * (x[b] - m) * (x[b] - m);
                    mu[i] = m;
                    sig[i] = std::sqrt(v + L.bn.eps);
                    const double shift = L.bn.mean_norm ? m : 0.0;
                    const double scale = L.bn.std_norm ? sig[i] : 1.0;
                    double* o = out.row_ptr(i);
                    for (std::size_t b = 0; b < B; ++b) o[b] = (x[b] - shift) / scale;
                }
                t.bn_mean[k] = std::move(mu);
                t.bn_sigma[k] = std::move(sig);
                break;
            }
            case LayerKind::GradCenter:
                out = in;
                break;
            }
            t.acts.push_back(std::move(out));
        }
        return t;
    }

    ForwardTrace forward(const Vec& x) const { return forward(Matrix::column(x)); }
    Vec output(const Vec& x) const { return forward(x).output().col(0); }

    // Backprop of an upstream gradient dY (n_L x B, sample weights already
    // folded in). Returns dW for every linear layer when want_dW, and the
    // gradient wrt every cached activation when want_acts.
    Backprop backward(const ForwardTrace& t, const Matrix& dY, BackMode mode = BackMode::Batch,
                      bool want_dW = true, bool want_acts = false) const {
        const std::size_t B = t.batch();
        if (dY.rows() != output_dim() || dY.cols() != B) throw std::invalid_argument("backward: dY shape mismatch");
        Backprop bp;
        if (want_dW) {
            for (const auto& L : layers_)
                if (L.kind == LayerKind::Linear) bp.dW.emplace_back(L.out_dim, L.in_dim);
        }
        if (want_acts) bp.d_acts.assign(layers_.size() + 1, Matrix());
        Matrix g = dY;
        std::size_t lin = num_linear();
        for (std::size_t kk = layers_.size(); kk-- > 0;) {
            const Layer& L = layers_[kk];
            const Matrix& in = t.acts[kk];
            const Matrix& out = t.acts[kk + 1];
            if (want_acts) bp.d_acts[kk + 1] = g;
            Matrix dx(L.in_dim, B);
            switch (L.kind) {
            case LayerKind::Linear: {
                --lin;
                if (L.is_masked()) {
                    for (std::size_t i = 0; i < L.out_dim; ++i) {
                        const double* gi = g.row_ptr(i);
                        for (std::size_t j : L.mask[i]) {
                            const double* x = in.row_ptr(j);
                            if (want_dW) {
                                double s = 0.0;
                                for (std::size_t b = 0; b < B; ++b) s += gi[b] * x[b];
                                bp.dW[lin](i, j) = s;
                            }
                            const double w = L.W(i, j);
                            double* d = dx.row_ptr(j);
                            for (std::size_t b = 0; b < B; ++b) d[b] += w * gi[b];
                        }
                    }
                } else {
                    if (want_dW) bp.dW[lin] = g * in.transpose();
                    for (std::size_t i = 0; i < L.out_dim; ++i) {
                        const double* gi = g.row_ptr(i);
                        for (std::size_t j = 0; j < L.in_dim; ++j) {
                            const double w = L.W(i, j);
                            if (w == 0.0) continue;
                            double* d = dx.row_ptr(j);
                            for (std::size_t b = 0; b < B; ++b) d[b] += w * gi[b];
                        }
                    }
                }
                break;
            }
            case LayerKind::ReLU:
                for (std::size_t q = 0; q < dx.size(); ++q) dx.data()[q] = in.data()[q] > 0 ? g.data()[q] : 0.0;
                break;
            case LayerKind::LeakyReLU:
                for (std::size_t q = 0; q < dx.size(); ++q)
                    dx.data()[q] = in.data()[q] > 0 ? g.data()[q] : L.param * g.data()[q];
                break;
            case LayerKind::Power:
                for (std::size_t q = 0; q < dx.size(); ++q)
                    dx.data()[q] = L.param * std::pow(in.data()[q], L.param - 1.0) * g.data()[q];
                break;
            case LayerKind::L2Normalize:
                for (std::size_t b = 0; b < B; ++b) {
                    double nrm = 0.0, yd = 0.0;
                    for (std::size_t i = 0; i < L.in_dim; ++i) {
                        nrm += in(i, b) * in(i, b);
                        yd += out(i, b) * g(i, b);
                    }
                    nrm = std::sqrt(nrm);
                    for (std::size_t i = 0; i < L.in_dim; ++i) dx(i, b) = (g(i, b) - out(i, b) * yd) / nrm;
                }
                break;
            case LayerKind::BatchNorm: {
                const Vec& mu = t.bn_mean[kk];
                const Vec& sig = t.bn_sigma[kk];
                const auto& cfg = L.bn;
                for (std::size_t i = 0; i < L.in_dim; ++i) {
                    const double* x = in.row_ptr(i);
                    const double* gi = g.row_ptr(i);
                    double* d = dx.row_ptr(i);
                    const double s = cfg.std_norm ? sig[i] : 1.0;
                    const double shift = cfg.mean_norm ? mu[i] : 0.0;
                    if (cfg.std_norm && !cfg.std_detached) {
                        double dsig = 0.0;
                        for (std::size_t b = 0; b < B; ++b) dsig += gi[b] * (-(x[b] - shift) / (sig[i] * sig[i]));
                        const double dvar = dsig / (2.0 * sig[i]);
                        for (std::size_t b = 0; b < B; ++b) d[b] += dvar * 2.0 * t.weights[b] * (x[b] - mu[i]);
                    }
                    double sum_dc = 0.0;
                    for (std::size_t b = 0; b < B; ++b) sum_dc += gi[b] / s;
                    const bool center = cfg.mean_norm && !cfg.mean_detached;
                    for (std::size_t b = 0; b < B; ++b) d[b] += gi[b] / s - (center ? t.weights[b] * sum_dc : 0.0);
                }
                break;
            }
            case LayerKind::GradCenter:
                if (mode == BackMode::Jacobian) {
                    dx = g;
                } else {
                    for (std::size_t i = 0; i < L.in_dim; ++i) {
                        const double* gi = g.row_ptr(i);
                        double sum = 0.0;
                        for (std::size_t b = 0; b < B; ++b) sum += gi[b];
                        double* d = dx.row_ptr(i);
                        for (std::size_t b = 0; b < B; ++b) d[b] = gi[b] - t.weights[b] * sum;
                    }
                }
                break;
            }
            g = std::move(dx);
        }
        if (want_acts) bp.d_acts[0] = g;
        return bp;
    }

    bool has_batch_coupling(BackMode mode) const {
        for (const auto& L : layers_) {
            if (L.kind == LayerKind::BatchNorm) return true;
            if (L.kind == LayerKind::GradCenter && mode == BackMode::Batch) return true;
        }
        return false;
    }

    // J_l(x_b) = d f_L / d f~_l for every sample b (n_L x n_l each). With
    // BatchNorm present only the same-sample path is kept, including the
    // sample's own influence on the batch statistics.
    std::vector<Matrix> jacobians(const ForwardTrace& t, std::size_t l) const {
        const std::size_t pos = linear_pos(l) + 1;
        const std::size_t nL = output_dim(), nl = layers_[pos - 1].out_dim, B = t.batch();
        std::vector<Matrix> J(B, Matrix(nL, nl));
        if (!has_batch_coupling(BackMode::Jacobian)) {
            for (std::size_t k = 0; k < nL; ++k) {
                Matrix dY(nL, B);
                for (std::size_t b = 0; b < B; ++b) dY(k, b) = 1.0;
                auto bp = backward(t, dY, BackMode::Jacobian, false, true);
                const Matrix& d = bp.d_acts[pos];
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < nl; ++j) J[b](k, j) = d(j, b);
            }
        } else {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t k = 0; k < nL; ++k) {
                    Matrix dY(nL, B);
                    dY(k, b) = 1.0;
                    auto bp = backward(t, dY, BackMode::Jacobian, false, true);
                    const Matrix& d = bp.d_acts[pos];
                    for (std::size_t j = 0; j < nl; ++j) J[b](k, j) = d(j, b);
                }
        }
        return J;
    }

    Matrix jacobian(const ForwardTrace& t, std::size_t l, std::size_t b = 0) const {
        if (!has_batch_coupling(BackMode::Jacobian)) return jacobians(t, l)[b];
        const std::size_t pos = linear_pos(l) + 1;
        const std::size_t nL = output_dim(), nl = layers_[pos - 1].out_dim;
        Matrix J(nL, nl);
        for (std::size_t k = 0; k < nL; ++k) {
            Matrix dY(nL, t.batch());
            dY(k, b) = 1.0;
            auto bp = backward(t, dY, BackMode::Jacobian, false, true);
            for (std::size_t j = 0; j < nl; ++j) J(k, j) = bp.d_acts[pos](j, b);
        }
        return J;
    }

    Vec layer_input(const ForwardTrace& t, std::size_t l, std::size_t b = 0) const {
        return t.acts[linear_pos(l)].col(b);
    }
    Vec layer_pre(const ForwardTrace& t, std::size_t l, std::size_t b = 0) const {
        return t.acts[linear_pos(l) + 1].col(b);
    }

    void save(std::ostream& os) const;
    static Network load(std::istream& is);

private:
    Layer simple(LayerKind k) const {
        Layer L;
        L.kind = k;
        L.in_dim = L.out_dim = output_dim();
        return L;
    }
    Network& push(Layer L) {
        layers_.push_back(std::move(L));
        return *this;
    }

    std::size_t input_dim_ = 0;
    std::vector<Layer> layers_;
};

// K_l(x) = f_{l-1}(x) (x) J_l(x)ᵀ.
inline Matrix connection_from(const Vec& f_prev, const Matrix& J) {
    return kron(Matrix::column(f_prev), J.transpose());
}

inline Matrix connection(const Network& net, const ForwardTrace& t, std::size_t l, std::size_t b = 0) {
    return connection_from(net.layer_input(t, l, b), net.jacobian(t, l, b));
}

// All connections of a batch at once.
inline std::vector<Matrix> connections(const Network& net, const ForwardTrace& t, std::size_t l) {
    auto J = net.jacobians(t, l);
    std::vector<Matrix> K;
    K.reserve(J.size());
    for (std::size_t b = 0; b < J.size(); ++b) K.push_back(connection_from(net.layer_input(t, l, b), J[b]));
    return K;
}

inline Matrix connection(const Network& net, const Vec& x, std::size_t l) {
    return connection(net, net.forward(x), l);
}

struct PairGrad {
    Vec kron_form;   // K1 [K1ᵀ vec W1 - K2ᵀ vec W2]
    Vec matrix_form; // vec(J1ᵀ [J1 W1 f1 - J2 W2 f2] f1ᵀ)
    Vec backprop;    // K1 (f_L(x1) - f_L(x2)), straight from the outputs
};

class IdentityMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline void require_same_shape(const Network& a, const Network& b) {
    if (a.input_dim() != b.input_dim() || a.layers().size() != b.layers().size())
        throw std::invalid_argument("dual towers differ in shape");
    for (std::size_t k = 0; k < a.layers().size(); ++k)
        if (a.layers()[k].kind != b.layers()[k].kind || a.layers()[k].out_dim != b.layers()[k].out_dim)
            throw std::invalid_argument("dual towers differ in shape");
}

// Gradient of r = ½‖f_L(x1;W1) - f_L(x2;W2)‖² wrt vec(W_{1,l}).
inline PairGrad pair_grad(const Network& n1, const Network& n2, const Vec& x1, const Vec& x2, std::size_t l) {
    require_same_shape(n1, n2);
    auto t1 = n1.forward(x1), t2 = n2.forward(x2);
    const Matrix J1 = n1.jacobian(t1, l), J2 = n2.jacobian(t2, l);
    const Vec f1 = n1.layer_input(t1, l), f2 = n2.layer_input(t2, l);
    const Matrix K1 = connection_from(f1, J1), K2 = connection_from(f2, J2);
    const Matrix& W1 = n1.weight(l);
    const Matrix& W2 = n2.weight(l);

    PairGrad g;
    g.kron_form = matvec(K1, tmatvec(K1, vec(W1)) - tmatvec(K2, vec(W2)));
    const Vec inner = matvec(J1, matvec(W1, f1)) - matvec(J2, matvec(W2, f2));
    g.matrix_form = vec(outer(tmatvec(J1, inner), f1));
    g.backprop = matvec(K1, t1.output().col(0) - t2.output().col(0));

    const double scale = std::max(1.0, norm2(g.kron_form));
    if (norm2(g.kron_form - g.matrix_form) > 1e-10 * scale)
        throw IdentityMismatch("pair_grad: Kronecker and matrix forms disagree");
    return g;
}

// Same, for r_n = ½‖f1/‖f1‖ - f2/‖f2‖‖² with f the raw outputs of n1, n2.
inline Vec pair_grad_l2norm(const Network& n1, const Network& n2, const Vec& x1, const Vec& x2, std::size_t l) {
    require_same_shape(n1, n2);
    auto t1 = n1.forward(x1), t2 = n2.forward(x2);
    const Vec o1 = t1.output().col(0), o2 = t2.output().col(0);
    const double a1 = norm2(o1), a2 = norm2(o2);
    if (a1 < 1e-12 || a2 < 1e-12) throw std::domain_error("pair_grad_l2norm: degenerate output norm");
    Matrix K1 = connection(n1, t1, l), K2 = connection(n2, t2, l);
    K1 *= 1.0 / a1;
    K2 *= 1.0 / a2;
    const Vec diff = tmatvec(K1, vec(n1.weight(l))) - tmatvec(K2, vec(n2.weight(l)));
    const Vec u = (1.0 / a1) * o1;
    const Vec proj = diff - dot(u, diff) * u;
    return matvec(K1, proj);
}

struct TransitionPair {
    Matrix Vf, Vb;
};

// Top-down recursion V_{m-1} = V_m Q_m G_m with G_m = W_m D_{m-1}, starting
// from V = I at the top linear layer. Single-sample traces only.
inline TransitionPair transition_matrices(const Network& net, const ForwardTrace& t, std::size_t l) {
    const auto& layers = net.layers();
    if (layers.empty() || layers.back().kind != LayerKind::Linear)
        throw std::invalid_argument("transition_matrices: top layer must be linear");
    for (const auto& L : layers)
        if (L.kind == LayerKind::BatchNorm || L.kind == LayerKind::L2Normalize || L.kind == LayerKind::GradCenter)
            throw std::invalid_argument("transition_matrices: non-reversible layer present");
    const std::size_t top = net.num_linear();
    if (l < 1 || l > top) throw std::out_of_range("transition_matrices: bad layer");
    const std::size_t nL = net.output_dim();
    TransitionPair V{Matrix::identity(nL), Matrix::identity(nL)};
    for (std::size_t m = top; m > l; --m) {
        const std::size_t pos = net.linear_pos(m);
        const Matrix& W = layers[pos].W;
        // the activation (if any) sits between the previous linear layer and pos
        const std::size_t prev = net.linear_pos(m - 1);
        Vec d(W.cols(), 1.0);
        double q = 1.0;
        if (pos - prev > 2) throw std::invalid_argument("transition_matrices: more than one activation between linears");
        if (pos - prev == 2) {
            const Layer& A = layers[prev + 1];
            const Matrix& pre = t.acts[prev + 1];
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double x = pre(i, 0);
                switch (A.kind) {
                case LayerKind::ReLU: d[i] = x > 0 ? 1.0 : 0.0; break;
                case LayerKind::LeakyReLU: d[i] = x > 0 ? 1.0 : A.param; break;
                case LayerKind::Power: d[i] = std::pow(x, A.param - 1.0); break;
                default: throw std::invalid_argument("transition_matrices: unsupported activation");
                }
            }
            if (A.kind == LayerKind::Power) q = A.param;
        }
        Matrix G = W;
        for (std::size_t i = 0; i < G.rows(); ++i)
            for (std::size_t j = 0; j < G.cols(); ++j) G(i, j) *= d[j];
        V.Vf = V.Vf * G;
        V.Vb = q * (V.Vb * G);
    }
    return V;
}

// ---- text serialization -------------------------------------------------
//
//   ssldyn-network v1
//   input <n>
//   linear <out> [mask]          followed by <out> rows of <in> weights;
//                                with "mask" each row is preceded by
//                                "<count> <col>..." on its own line
//   relu | leaky_relu <s> | power <p> | l2_normalize | grad_center
//   batch_norm <mean> <std> <mean_detached> <std_detached> <eps>
//   end

inline void Network::save(std::ostream& os) const {
    auto fmt = [](double v) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    os << "ssldyn-network v1\ninput " << input_dim_ << "\n";
    for (const auto& L : layers_) {
        switch (L.kind) {
        case LayerKind::Linear:
            os << "linear " << L.out_dim << (L.is_masked() ? " mask" : "") << "\n";
            for (std::size_t i = 0; i < L.out_dim; ++i) {
                if (L.is_masked()) {
                    os << L.mask[i].size();
                    for (std::size_t c : L.mask[i]) os << ' ' << c;
                    os << "\n";
                }
                for (std::size_t j = 0; j < L.in_dim; ++j) os << (j ? " " : "") << fmt(L.W(i, j));
                os << "\n";
            }
            break;
        case LayerKind::ReLU: os << "relu\n"; break;
        case LayerKind::LeakyReLU: os << "leaky_relu " << fmt(L.param) << "\n"; break;
        case LayerKind::Power: os << "power " << fmt(L.param) << "\n"; break;
        case LayerKind::L2Normalize: os << "l2_normalize\n"; break;
        case LayerKind::GradCenter: os << "grad_center\n"; break;
        case LayerKind::BatchNorm:
            os << "batch_norm " << L.bn.mean_norm << ' ' << L.bn.std_norm << ' ' << L.bn.mean_detached << ' '
               << L.bn.std_detached << ' ' << fmt(L.bn.eps) << "\n";
            break;
        }
    }
    os << "end\n";
}

inline Network Network::load(std::istream& is) {
    std::string line, word;
    std::getline(is, line);
    if (line != "ssldyn-network v1") throw std::runtime_error("network file: unknown header '" + line + "'");
    std::size_t n = 0;
    is >> word >> n;
    if (word != "input") throw std::runtime_error("network file: expected 'input'");
    Network net(n);
    while (is >> word) {
        if (word == "end") return net;
        if (word == "linear") {
            std::size_t out;
            is >> out;
            std::getline(is, line);
            const bool masked = line.find("mask") != std::string::npos;
            const std::size_t in = net.output_dim();
            Matrix W(out, in);
            std::vector<std::vector<std::size_t>> mask;
            for (std::size_t i = 0; i < out; ++i) {
                if (masked) {
                    std::size_t cnt;
                    is >> cnt;
                    std::vector<std::size_t> row(cnt);
                    for (auto& c : row) is >> c;
                    mask.push_back(std::move(row));
                }
                for (std::size_t j = 0; j < in; ++j) is >> W(i, j);
            }
            if (!is) throw std::runtime_error("network file: truncated weights");
            if (masked) net.add_linear_masked(out, std::move(mask));
            else net.add_linear(out);
            net.layers().back().W = std::move(W);
        } else if (word == "relu") {
            net.add_relu();
        } else if (word == "leaky_relu") {
            double s;
            is >> s;
            net.add_leaky_relu(s);
        } else if (word == "power") {
            double p;
            is >> p;
            net.add_power(p);
        } else if (word == "l2_normalize") {
            net.add_l2_normalize();
        } else if (word == "grad_center") {
            net.add_grad_center();
        } else if (word == "batch_norm") {
            BatchNormConfig c;
            is >> c.mean_norm >> c.std_norm >> c.mean_detached >> c.std_detached >> c.eps;
            net.add_batch_norm(c);
        } else {
            throw std::runtime_error("network file: unknown layer '" + word + "'");
        }
    }
    throw std::runtime_error("network file: missing 'end'");
}

// Convenience: dense ReLU MLP dims[0] -> ... -> dims.back(), linear top.
inline Network make_mlp(const std::vector<std::size_t>& dims) {
    if (dims.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output dims");
    Network net(dims[0]);
    for (std::size_t k = 1; k < dims.size(); ++k) {
        net.add_linear(dims[k]);
        if (k + 1 < dims.size()) net.add_relu();
    }
    return net;
}

} // namespace ssldyn
