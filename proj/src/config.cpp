#include "config.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <fstream>
#include <sstream>

namespace ssldyn::harness {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

double parse_double(const std::string& key, const std::string& s) {
    double v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw ConfigError(key + ": not a number: '" + s + "'");
    return v;
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw ConfigError(key + ": not a non-negative integer: '" + s + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
    if (s == "false" || s == "0" || s == "no" || s == "off") return false;
    throw ConfigError(key + ": not a boolean: '" + s + "'");
}

// One converter per field type; `read` parses text into the field, `write`
// renders it back.
struct Field {
    std::function<void(const std::string&)> read;
    std::function<std::string()> write;
};

Field bind(const std::string& key, std::uint64_t& v) {
    return {[&v, key](const std::string& s) { v = parse_uint(key, s); }, [&v] { return std::to_string(v); }};
}
static_assert(std::is_same_v<std::size_t, std::uint64_t>, "size_t fields share the uint64 converter");
Field bind(const std::string& key, double& v) {
    return {[&v, key](const std::string& s) { v = parse_double(key, s); }, [&v] { return fmt_double(v); }};
}
Field bind(const std::string& key, bool& v) {
    return {[&v, key](const std::string& s) { v = parse_bool(key, s); }, [&v] { return std::string(v ? "true" : "false"); }};
}
Field bind(const std::string&, std::string& v) {
    return {[&v](const std::string& s) { v = s; }, [&v] { return v; }};
}
Field bind(const std::string& key, std::vector<double>& v) {
    return {[&v, key](const std::string& s) {
                v.clear();
                for (const auto& x : split_list(s)) v.push_back(parse_double(key, x));
            },
            [&v] {
                std::string out;
                for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + fmt_double(v[i]);
                return out;
            }};
}
Field bind(const std::string& key, std::vector<std::size_t>& v) {
    return {[&v, key](const std::string& s) {
                v.clear();
                for (const auto& x : split_list(s)) v.push_back(parse_uint(key, x));
            },
            [&v] {
                std::string out;
                for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
                return out;
            }};
}
Field bind(const std::string&, std::vector<std::string>& v) {
    return {[&v](const std::string& s) { v = split_list(s); },
            [&v] {
                std::string out;
                for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + v[i];
                return out;
            }};
}

// Ordered so that echo() groups keys by section.
std::vector<std::pair<std::string, Field>> fields(ExperimentConfig& c) {
    std::vector<std::pair<std::string, Field>> f;
    auto add = [&](const std::string& key, auto& member) { f.emplace_back(key, bind(key, member)); };
    add("run.seed", c.seed);
    add("model.kind", c.model);
    add("tree.depth", c.tree.depth);
    add("tree.branching", c.tree.branching);
    add("tree.rho0", c.tree.rho0);
    add("tree.rho_lo", c.tree.rho_lo);
    add("tree.rho_hi", c.tree.rho_hi);
    add("tree.rho", c.tree.rho);
    add("tree.leaf_lo", c.tree.leaf_lo);
    add("tree.leaf_hi", c.tree.leaf_hi);
    add("toy1d.d", c.toy_d);
    add("toy1d.width", c.toy_width);
    add("toy1d.alpha", c.toy_alpha);
    add("toy1d.steps", c.toy_steps);
    add("toy1d.trials", c.toy_trials);
    add("toy1d.bias", c.toy_bias);
    add("network.per_latent", c.per_latent);
    add("network.sigma_w", c.sigma_w);
    add("network.l2_normalize", c.l2_normalize);
    add("network.hidden_bn", c.hidden_bn);
    add("loss.kind", c.loss);
    add("loss.tau", c.tau);
    add("optim.lr", c.lr);
    add("optim.batch", c.batch);
    add("optim.epochs", c.epochs);
    add("optim.samples", c.samples);
    add("optim.steps", c.steps);
    add("probes.metrics", c.probes);
    add("probes.every", c.probe_every);
    add("probes.eval_samples", c.eval_samples);
    add("probes.layer", c.probe_layer);
    add("probes.operators", c.operators);
    add("byol.predictor", c.predictor);
    add("byol.beta", c.predictor_beta);
    add("byol.noise", c.predictor_noise);
    add("byol.ema", c.ema);
    add("byol.gamma_ema", c.gamma_ema);
    add("byol.stop_gradient", c.stop_gradient);
    add("grid.seeds", c.seeds);
    add("grid.rho_lo", c.grid_rho_lo);
    add("grid.per_latent", c.grid_per_latent);
    add("grid.cells", c.cells);
    f.emplace_back("verify.fixtures", Field{[&c](const std::string& s) {
                                                if (s == "all") c.fixtures.reset();
                                                else c.fixtures = split_list(s);
                                            },
                                            [&c] {
                                                std::string out;
                                                if (!c.fixtures) return std::string("all");
                                                for (std::size_t i = 0; i < c.fixtures->size(); ++i)
                                                    out += (i ? ", " : "") + (*c.fixtures)[i];
                                                return out;
                                            }});
    return f;
}

} // namespace

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : text + ",") {
        if (ch == ',' || ch == ' ' || ch == '\t') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    return out;
}

KeyValueConfig KeyValueConfig::parse(std::istream& is, const std::string& source) {
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigINI().from_config(is);
    } catch (const CLI::Error& e) {
        throw ConfigError(source + ": " + e.what());
    }
    KeyValueConfig kv;
    for (const auto& it : items) {
        if (it.name == "++" || it.name == "--") continue;
        std::string key;
        for (const auto& p : it.parents) key += p + ".";
        key += it.name;
        if (it.parents.empty()) throw ConfigError(source + ": key '" + it.name + "' outside a [section]");
        if (kv.has(key)) throw ConfigError(source + ": duplicate key '" + key + "'");
        std::string value;
        for (std::size_t i = 0; i < it.inputs.size(); ++i) value += (i ? ", " : "") + trim(it.inputs[i]);
        kv.values_[key] = trim(value);
    }
    return kv;
}

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
    std::istringstream is(text);
    return parse(is, "<string>");
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    return parse(in, path);
}

const std::string& KeyValueConfig::raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing key '" + key + "'");
    return it->second;
}

void KeyValueConfig::set(const std::string& key, std::string value) { values_[key] = std::move(value); }

HltmTree TreeSpec::build(Rng& rng) const {
    const LeafEncoding enc{leaf_lo, leaf_hi};
    if (!rho.empty()) return HltmTree(depth, branching, rho0, rho, enc);
    return HltmTree::random(depth, branching, rho0, rho_lo, rho_hi, rng, enc);
}

ExperimentConfig ExperimentConfig::from(const KeyValueConfig& kv, const ExperimentConfig& base) {
    ExperimentConfig c = base;
    auto f = fields(c);
    for (const auto& [key, value] : kv.values()) {
        auto it = std::find_if(f.begin(), f.end(), [&](const auto& p) { return p.first == key; });
        if (it == f.end()) throw ConfigError("unknown key '" + key + "'");
        it->second.read(value);
    }
    c.validate();
    return c;
}

void ExperimentConfig::validate() const {
    auto need = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    need(model == "hltm" || model == "toy1d", "model.kind must be hltm or toy1d");
    need(loss == "info_nce" || loss == "byol", "loss.kind must be info_nce or byol");
    need(tree.depth >= 1 && tree.branching >= 1, "tree.depth and tree.branching must be at least 1");
    need(std::fabs(tree.rho0) <= 1, "tree.rho0 must lie in [-1, 1]");
    need(tree.rho_lo <= tree.rho_hi && std::fabs(tree.rho_lo) <= 1 && std::fabs(tree.rho_hi) <= 1,
         "tree.rho_lo <= tree.rho_hi within [-1, 1] required");
    need(per_latent >= 1, "network.per_latent must be at least 1");
    need(tau > 0, "loss.tau must be positive");
    need(lr >= 0 && std::isfinite(lr), "optim.lr must be finite and non-negative");
    need(batch >= 2, "optim.batch must be at least 2");
    need(probe_every >= 1, "probes.every must be at least 1");
    need(gamma_ema >= 0 && gamma_ema <= 1, "byol.gamma_ema must lie in [0, 1]");
    need(!(ema && !stop_gradient), "byol.ema requires byol.stop_gradient");
    need(seeds >= 1, "grid.seeds must be at least 1");
    for (const auto& p : probes)
        need(p == "loss" || p == "nc" || p == "op_norm" || p == "collapse" || p == "weight_norm",
             "probes.metrics: unknown metric '" + p + "'");
    for (const auto& o : operators)
        need(o == "simp" || o == "weighted" || o == "ev" || o == "ve", "probes.operators: unknown operator '" + o + "'");
    for (std::size_t d : toy_d) need(d >= 5, "toy1d.d entries must be at least 5");
}

KeyValueConfig ExperimentConfig::to_kv() const {
    ExperimentConfig copy = *this;
    KeyValueConfig kv;
    for (const auto& [key, field] : fields(copy)) kv.set(key, field.write());
    return kv;
}

std::string ExperimentConfig::echo() const {
    ExperimentConfig copy = *this;
    std::string out, section;
    for (const auto& [key, field] : fields(copy)) {
        const auto dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
            section = sec;
        }
        out += key.substr(dot + 1) + " = " + field.write() + "\n";
    }
    return out;
}

} // namespace ssldyn::harness
