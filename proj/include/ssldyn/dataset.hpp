#pragma once

// Finite, fully enumerable datasets with augmentation.
//
// A base point x_b has probability p_b and belongs to an augmentation group;
// every base point of a group shares the same augmentation distribution
// p_aug(.|x) (a list of weighted views). Grouping lets a tree model merge all
// samples with the same root value without listing views once per base.

#include "ssldyn/linalg.hpp"
#include "ssldyn/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace ssldyn {

struct AugmentedDataset {
    struct Base {
        double prob = 0.0;
        Vec x;
        std::size_t group = 0;
    };
    struct View {
        double prob = 0.0;
        Vec x;
    };

    std::vector<Base> bases;
    std::vector<std::vector<View>> groups;

    std::size_t dim() const { return bases.empty() ? 0 : bases.front().x.size(); }
    std::size_t num_views() const {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.size();
        return n;
    }

    Vec group_probs() const {
        Vec P(groups.size(), 0.0);
        for (const auto& b : bases) P.at(b.group) += b.prob;
        return P;
    }

    void validate(double tol = 1e-12) const {
        if (bases.empty()) throw std::invalid_argument("dataset: no base points");
        double total = 0.0;
        for (const auto& b : bases) {
            if (b.group >= groups.size()) throw std::invalid_argument("dataset: base refers to a missing group");
            if (b.prob < 0) throw std::invalid_argument("dataset: negative probability");
            total += b.prob;
        }
        if (std::fabs(total - 1.0) > tol) throw std::invalid_argument("dataset: base probabilities do not sum to 1");
        for (const auto& g : groups) {
            if (g.empty()) throw std::invalid_argument("dataset: empty augmentation group");
            double s = 0.0;
            for (const auto& v : g) s += v.prob;
            if (std::fabs(s - 1.0) > tol) throw std::invalid_argument("dataset: view probabilities do not sum to 1");
        }
    }
};

// Every point is its own group with the point itself as the only view.
inline AugmentedDataset point_mass_dataset(const std::vector<Vec>& xs, Vec probs = {}) {
    if (probs.empty()) probs.assign(xs.size(), 1.0 / static_cast<double>(xs.size()));
    AugmentedDataset d;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        d.bases.push_back({probs[i], xs[i], i});
        d.groups.push_back({{1.0, xs[i]}});
    }
    return d;
}

// Base points x_i with views x_i + s * delta_ij (uniform over j). s = 0 is
// point-mass augmentation.
inline AugmentedDataset shrink_dataset(const std::vector<Vec>& xs, const std::vector<std::vector<Vec>>& deltas, double s) {
    AugmentedDataset d;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        d.bases.push_back({1.0 / static_cast<double>(xs.size()), xs[i], i});
        std::vector<AugmentedDataset::View> g;
        for (const auto& dl : deltas[i]) g.push_back({1.0 / static_cast<double>(deltas[i].size()), xs[i] + s * dl});
        d.groups.push_back(std::move(g));
    }
    return d;
}

// Random fixture: n_base points in [-1, 1]^dim, n_view views each, jittered
// by scale * Uniform[-1, 1].
inline AugmentedDataset random_dataset(Rng& rng, std::size_t dim, std::size_t n_base, std::size_t n_view, double scale) {
    std::vector<Vec> xs;
    std::vector<std::vector<Vec>> deltas;
    for (std::size_t i = 0; i < n_base; ++i) {
        Vec x(dim);
        for (auto& v : x) v = rng.uniform(-1.0, 1.0);
        xs.push_back(x);
        std::vector<Vec> ds;
        for (std::size_t j = 0; j < n_view; ++j) {
            Vec dl(dim);
            for (auto& v : dl) v = rng.uniform(-1.0, 1.0);
            ds.push_back(dl);
        }
        deltas.push_back(ds);
    }
    return shrink_dataset(xs, deltas, scale);
}

} // namespace ssldyn
