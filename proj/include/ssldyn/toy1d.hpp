#pragma once

// One-dimensional translation model on a ring of d pixels. Object 1 is the
// pattern 11, object 2 is 101; augmentation moves the object to a uniformly
// random position. A single neuron looks either at the whole ring or at a
// local window starting at pixel 0.

#include "ssldyn/covop.hpp"
#include "ssldyn/dataset.hpp"
#include "ssldyn/linalg.hpp"
#include "ssldyn/rng.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssldyn {

struct Toy1dModel {
    std::size_t d = 8;

    explicit Toy1dModel(std::size_t ring) : d(ring) {
        if (d < 5) throw std::invalid_argument("Toy1dModel: ring size must be at least 5");
    }

    // object in {1, 2}, position in [0, d)
    Vec x(int object, std::size_t pos) const {
        if (object != 1 && object != 2) throw std::invalid_argument("Toy1dModel: object must be 1 or 2");
        Vec v(d, 0.0);
        v[pos % d] = 1.0;
        v[(pos + static_cast<std::size_t>(object)) % d] = 1.0;
        return v;
    }

    // Root-grouped dataset over all 2d states, each with probability 1/(2d).
    AugmentedDataset dataset() const {
        AugmentedDataset ds;
        for (int obj = 1; obj <= 2; ++obj) {
            std::vector<AugmentedDataset::View> views;
            for (std::size_t p = 0; p < d; ++p) {
                views.push_back({1.0 / static_cast<double>(d), x(obj, p)});
                ds.bases.push_back({0.5 / static_cast<double>(d), x(obj, p), static_cast<std::size_t>(obj - 1)});
            }
            ds.groups.push_back(std::move(views));
        }
        return ds;
    }
};

enum class NeuronKind { GlobalLinear, LocalLinear, LocalRelu };

struct NeuronSpec {
    NeuronKind kind = NeuronKind::GlobalLinear;
    std::size_t width = 2;   // receptive field for local neurons
    Vec w;                   // LocalRelu weights (width entries)
    std::optional<double> bias;

    std::string name() const {
        switch (kind) {
        case NeuronKind::GlobalLinear: return "global-linear";
        case NeuronKind::LocalLinear: return "local-linear";
        case NeuronKind::LocalRelu: return "local-relu";
        }
        return "?";
    }
};

// Input seen by the neuron: the window (plus a constant 1 when biased).
inline Vec neuron_input(const Toy1dModel& m, const NeuronSpec& n, const Vec& x) {
    if (n.kind == NeuronKind::GlobalLinear) return x;
    if (n.width == 0 || n.width > m.d) throw std::invalid_argument("neuron_input: bad receptive field width");
    Vec v(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(n.width));
    if (n.bias) v.push_back(1.0);
    return v;
}

inline Vec neuron_weights(const NeuronSpec& n) {
    Vec w = n.w;
    if (n.bias) w.push_back(*n.bias);
    return w;
}

// K(x) = ψ'(wᵀx) x for the ReLU neuron, x for the linear ones.
inline Vec neuron_connection(const Toy1dModel& m, const NeuronSpec& n, const Vec& x) {
    Vec in = neuron_input(m, n, x);
    if (n.kind != NeuronKind::LocalRelu) return in;
    const Vec w = neuron_weights(n);
    if (w.size() != in.size()) throw std::invalid_argument("neuron_connection: weight size mismatch");
    if (!(dot(w, in) > 0)) std::fill(in.begin(), in.end(), 0.0);
    return in;
}

inline double neuron_response(const Toy1dModel& m, const NeuronSpec& n, const Vec& x) {
    const Vec in = neuron_input(m, n, x);
    if (n.kind != NeuronKind::LocalRelu) return n.w.empty() ? 0.0 : dot(n.w, in);
    return std::max(0.0, dot(neuron_weights(n), in));
}

// K̄(z0) = E_{z'}[K(x(z0, z'))]
inline Vec mean_connection_1d(const Toy1dModel& m, const NeuronSpec& n, int object) {
    Vec acc;
    for (std::size_t p = 0; p < m.d; ++p) {
        const Vec k = neuron_connection(m, n, m.x(object, p));
        if (acc.empty()) acc.assign(k.size(), 0.0);
        axpy(1.0 / static_cast<double>(m.d), k, acc);
    }
    return acc;
}

// OP = V_{z0}[K̄(z0)] with both objects equally likely.
inline CovOperator enumerate_op(const Toy1dModel& m, const NeuronSpec& n) {
    const Vec k1 = mean_connection_1d(m, n, 1), k2 = mean_connection_1d(m, n, 2);
    const Vec diff = k1 - k2;
    return {1, "toy1d-" + n.name(), "exact-enumeration", 0.25 * outer(diff, diff)};
}

// Distinct windows of the given width seen at pixel 0 over all states.
inline std::vector<Vec> local_patterns(const Toy1dModel& m, std::size_t width) {
    std::vector<Vec> out;
    for (int obj = 1; obj <= 2; ++obj)
        for (std::size_t p = 0; p < m.d; ++p) {
            const Vec x = m.x(obj, p);
            Vec w(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(width));
            bool seen = false;
            for (const auto& o : out) seen |= o == w;
            if (!seen) out.push_back(w);
        }
    return out;
}

inline bool is_zero_pattern(const Vec& p) {
    for (double v : p)
        if (v != 0.0) return false;
    return true;
}

// Index into `patterns` of the single pattern the neuron fires for, or
// nullopt. Strict: the selected response must be > 0 and every other < 0.
// Without a bias the all-zero window always gives exactly 0 and is skipped.
inline std::optional<std::size_t> selective_pattern(const NeuronSpec& n, const std::vector<Vec>& patterns) {
    std::optional<std::size_t> hit;
    for (std::size_t i = 0; i < patterns.size(); ++i) {
        if (!n.bias && is_zero_pattern(patterns[i])) continue;
        const double r = dot(n.w, patterns[i]) + n.bias.value_or(0.0);
        if (r > 0) {
            if (hit) return std::nullopt;
            hit = i;
        } else if (!(r < 0)) {
            return std::nullopt;
        }
    }
    return hit;
}

struct GrowthTrace {
    std::vector<double> proj;  // x_pᵀ w(t)
    double c_p = 0.0;
    double expected_ratio = 1.0;   // 1 + α c_p ‖x_p‖²
    double max_ratio_err = 0.0;
    bool monotone = true;
    bool flipped = false;          // gating changed before `steps`
    std::size_t steps_run = 0;
    NeuronSpec final;
};

// Iterates w <- (I + α OP(w)) w while the neuron stays selective for the same
// pattern. Throws if the initial neuron is not selective for a single pattern.
inline GrowthTrace growth_trace(const Toy1dModel& m, NeuronSpec n, double alpha, std::size_t steps) {
    if (n.kind != NeuronKind::LocalRelu) throw std::invalid_argument("growth_trace: needs a local ReLU neuron");
    const auto patterns = local_patterns(m, n.width);
    const auto p0 = selective_pattern(n, patterns);
    if (!p0) throw std::invalid_argument("growth_trace: initial weights are not selective for a single pattern");
    Vec xp = patterns[*p0];
    if (n.bias) xp.push_back(1.0);
    GrowthTrace g;
    auto proj = [&] { return dot(xp, neuron_weights(n)); };
    g.proj.push_back(proj());
    const CovOperator op0 = enumerate_op(m, n);
    g.c_p = dot(xp, matvec(op0.m, xp)) / (dot(xp, xp) * dot(xp, xp));
    g.expected_ratio = 1.0 + alpha * g.c_p * dot(xp, xp);
    for (std::size_t t = 0; t < steps; ++t) {
        const CovOperator op = enumerate_op(m, n);
        Vec w = neuron_weights(n);
        w = w + alpha * matvec(op.m, w);
        NeuronSpec next = n;
        next.w.assign(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(n.width));
        if (n.bias) next.bias = w.back();
        n = next;
        const double before = g.proj.back();
        g.proj.push_back(proj());
        g.steps_run = t + 1;
        if (!(g.proj.back() > before) && alpha > 0) g.monotone = false;
        g.max_ratio_err = std::max(g.max_ratio_err, std::fabs(g.proj.back() / before - g.expected_ratio));
        if (selective_pattern(n, patterns) != p0) {
            g.flipped = true;
            break;
        }
    }
    g.final = n;
    return g;
}

// |E[f | object 1] - E[f | object 2]| of the neuron's response.
inline double response_gap(const Toy1dModel& m, const NeuronSpec& n) {
    double r1 = 0, r2 = 0;
    for (std::size_t p = 0; p < m.d; ++p) {
        r1 += neuron_response(m, n, m.x(1, p)) / static_cast<double>(m.d);
        r2 += neuron_response(m, n, m.x(2, p)) / static_cast<double>(m.d);
    }
    return std::fabs(r1 - r2);
}

// Monte-Carlo frequency that a random local ReLU neuron (weights and optional
// bias Uniform[-σ√(3/width), σ√(3/width)]) is strictly selective for exactly
// one pattern. Trial t uses base.split(t).
inline double init_selectivity_probability(const Toy1dModel& m, std::size_t width, double sigma_w, std::size_t trials,
                                           const Rng& base, bool with_bias = false) {
    const auto patterns = local_patterns(m, width);
    const double lim = sigma_w * std::sqrt(3.0 / static_cast<double>(width));
    std::size_t hits = 0;
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng = base.split(t);
        NeuronSpec n;
        n.kind = NeuronKind::LocalRelu;
        n.width = width;
        n.w.resize(width);
        for (auto& v : n.w) v = lim > 0 ? rng.uniform(-lim, lim) : 0.0;
        if (with_bias) n.bias = lim > 0 ? rng.uniform(-lim, lim) : 0.0;
        hits += selective_pattern(n, patterns).has_value();
    }
    return static_cast<double>(hits) / static_cast<double>(trials);
}

} // namespace ssldyn
