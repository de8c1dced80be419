#pragma once

// Experiment configuration. The file format is flat INI text:
//
//   # comment            ; comment
//   [section]
//   key = value
//   list = a, b, c
//
// Keys are addressed as "section.key". Every key must be known to
// ExperimentConfig; unknown keys and duplicates are errors, except that a key
// repeated on adjacent lines reads as one list (scalar keys then fail to
// convert). Nothing is read from the environment.

#include "ssldyn/hltm.hpp"

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssldyn::harness {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Raw "section.key" -> value text, values already trimmed.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::istream& is, const std::string& source = "<stream>");
    static KeyValueConfig parse_string(const std::string& text);
    static KeyValueConfig load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    const std::string& raw(const std::string& key) const;
    void set(const std::string& key, std::string value);
    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

std::vector<std::string> split_list(const std::string& text);

struct TreeSpec {
    std::size_t depth = 5;
    std::size_t branching = 2;
    double rho0 = 0.0;
    double rho_lo = 0.7;
    double rho_hi = 1.0;
    std::vector<double> rho; // explicit polarities in breadth-first order; overrides the range
    double leaf_lo = -1.0;
    double leaf_hi = 1.0;

    HltmTree build(Rng& rng) const;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;

    // model
    std::string model = "hltm"; // hltm | toy1d
    TreeSpec tree;
    std::vector<std::size_t> toy_d{5, 8, 16};
    std::size_t toy_width = 2;
    double toy_alpha = 0.1;
    std::size_t toy_steps = 50;
    std::size_t toy_trials = 100000;
    bool toy_bias = false;

    // network
    std::size_t per_latent = 2;
    double sigma_w = 1.0;
    bool l2_normalize = true;
    bool hidden_bn = false;

    // loss
    std::string loss = "info_nce"; // info_nce | byol
    double tau = 0.1;

    // optimizer: plain SGD
    double lr = 0.1;
    std::size_t batch = 128;
    std::size_t epochs = 50;
    std::size_t samples = 64000;
    std::size_t steps = 500; // BYOL steps

    // probes
    std::vector<std::string> probes{"loss", "nc"};
    std::size_t probe_every = 1;
    std::size_t eval_samples = 8192;
    std::size_t probe_layer = 0; // 0: top linear layer
    std::vector<std::string> operators{"simp"};

    // BYOL
    bool predictor = true;
    double predictor_beta = 0.5;
    double predictor_noise = 0.1;
    bool ema = false;
    double gamma_ema = 0.996;
    bool stop_gradient = true;

    // grids
    std::size_t seeds = 10;
    std::vector<double> grid_rho_lo{0.7, 0.9};
    std::vector<std::size_t> grid_per_latent{2, 10};
    std::vector<std::string> cells{"P", "BN", "P+BN", "P+BN+EMA"};

    // verify
    std::optional<std::vector<std::string>> fixtures; // unset: all

    // Keys present in kv override the fields of base.
    static ExperimentConfig from(const KeyValueConfig& kv, const ExperimentConfig& base);
    static ExperimentConfig from(const KeyValueConfig& kv);
    static ExperimentConfig load(const std::string& path, const ExperimentConfig& base);
    static ExperimentConfig load(const std::string& path);

    void validate() const;
    KeyValueConfig to_kv() const;
    // Canonical INI text; parsing it back gives the same config.
    std::string echo() const;
};

inline ExperimentConfig ExperimentConfig::from(const KeyValueConfig& kv) { return from(kv, ExperimentConfig{}); }
inline ExperimentConfig ExperimentConfig::load(const std::string& path, const ExperimentConfig& base) {
    return from(KeyValueConfig::load(path), base);
}
inline ExperimentConfig ExperimentConfig::load(const std::string& path) { return load(path, ExperimentConfig{}); }

} // namespace ssldyn::harness
