#pragma once

// Shared builders for training runs and theorem checks.

#include "config.hpp"

#include "ssldyn/byol.hpp"
#include "ssldyn/hltm.hpp"

#include <functional>
#include <string>
#include <vector>

namespace ssldyn::harness {

// A contrastive run on tree samples. Everything is drawn from one stream,
// Rng(seed).split(0), in this order: tree, initial weights, evaluation
// samples, training roots; training then continues on the same stream.
struct SimclrTrial {
    HltmTree tree;
    TreeNet tn;
    LabeledSamples eval;
    std::vector<std::uint8_t> roots;
    Rng rng;
};

SimclrTrial make_simclr_trial(const ExperimentConfig& cfg, std::uint64_t seed);
SimclrOptions simclr_options(const ExperimentConfig& cfg);

// BYOL on tree samples, same single-stream convention: tree, initial
// weights, predictor, evaluation samples, collapse dataset (sampled trees
// only), then training.
struct ByolTrial {
    HltmTree tree;
    TreeNet tn; // layout of the online backbone
    ByolSystem sys;
    LabeledSamples eval;
    AugmentedDataset collapse_ds;
    Rng rng;
};

ByolTrial make_byol_trial(const ExperimentConfig& cfg, std::uint64_t seed);
ByolOptions byol_options(const ExperimentConfig& cfg);

// Exact root-grouped dataset when the tree has at most 16 leaves, otherwise
// 2048 sampled views per root value.
AugmentedDataset collapse_dataset(const HltmTree& t, Rng& rng);

// "P", "BN", "EMA" joined by '+', or "none".
struct CellFlags {
    bool predictor = false, bn = false, ema = false;
};
CellFlags parse_cell(const std::string& cell);
ExperimentConfig apply_cell(ExperimentConfig cfg, const std::string& cell);

double weight_norm(const Network& net);

// Central differences of a scalar function of W_l, in vec order.
Vec fd_weight_grad(Network net, std::size_t l, const std::function<double(const Network&)>& f, double h = 1e-5);
// Smallest |pre-activation| feeding a ReLU, for boundary exclusion.
double min_gate_margin(const Network& net, const ForwardTrace& t);
Vec random_vec(Rng& rng, std::size_t n, double a = 1.0);
Network random_relu_net(Rng& rng, std::size_t depth, std::size_t max_width, std::size_t in, std::size_t out);
// ReLU below layer l, gradient centring right after layer l, linear above.
Network centred_backbone(const std::vector<std::size_t>& dims, std::size_t l, Rng& rng);
Network random_linear(std::size_t n, Rng& rng);

double median(std::vector<double> v);
double mean(const std::vector<double>& v);
double stddev(const std::vector<double>& v); // sample standard deviation, 0 for fewer than 2 values

} // namespace ssldyn::harness
