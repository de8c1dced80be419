#include "config.hpp"
#include "csv.hpp"
#include "experiments.hpp"
#include "fixtures.hpp"
#include "pool.hpp"
#include "verify.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <fstream>
#include <sstream>

using namespace ssldyn;
using namespace ssldyn::harness;

namespace {

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string config_path(const std::string& name) { return std::string(SSLDYN_SOURCE_DIR) + "/configs/" + name; }

ExperimentConfig tiny_train() {
    ExperimentConfig c;
    c.tree.depth = 2;
    c.epochs = 2;
    c.samples = 512;
    c.batch = 64;
    c.eval_samples = 256;
    c.probes = {"loss", "nc", "weight_norm"};
    return c;
}

} // namespace

TEST(Config, EchoRoundTrips) {
    ExperimentConfig c;
    c.seed = 17;
    c.tree.rho = {0.5, -0.25, 0.75};
    c.tau = 0.123456789;
    c.cells = {"P", "P+BN"};
    c.fixtures = std::vector<std::string>{"loss-partials"};
    const ExperimentConfig back = ExperimentConfig::from(KeyValueConfig::parse_string(c.echo()));
    EXPECT_EQ(back.echo(), c.echo());
    EXPECT_EQ(back.tau, c.tau);
    EXPECT_EQ(back.tree.rho, c.tree.rho);
    ASSERT_TRUE(back.fixtures.has_value());
    EXPECT_EQ(*back.fixtures, *c.fixtures);

    const ExperimentConfig defaults;
    EXPECT_EQ(ExperimentConfig::from(KeyValueConfig::parse_string(defaults.echo())).echo(), defaults.echo());
    EXPECT_FALSE(ExperimentConfig::from(KeyValueConfig::parse_string(defaults.echo())).fixtures.has_value());
}

TEST(Config, OverridesOnlyPresentKeys) {
    ExperimentConfig base;
    base.lr = 0.7;
    const auto c = ExperimentConfig::from(KeyValueConfig::parse_string("[optim]\nepochs = 3\n"), base);
    EXPECT_EQ(c.epochs, 3u);
    EXPECT_EQ(c.lr, 0.7);
}

TEST(Config, RejectsUnknownAndDuplicateKeys) {
    EXPECT_THROW(ExperimentConfig::from(KeyValueConfig::parse_string("[optim]\nlearning_rate = 0.1\n")), ConfigError);
    EXPECT_THROW(KeyValueConfig::parse_string("[optim]\nlr = 0.1\nbatch = 4\nlr = 0.2\n"), ConfigError);
    // adjacent repeats read as one list, which a scalar key rejects
    EXPECT_THROW(ExperimentConfig::from(KeyValueConfig::parse_string("[optim]\nlr = 0.1\nlr = 0.2\n")), ConfigError);
    EXPECT_THROW(ExperimentConfig::from(KeyValueConfig::parse_string("[optim]\nlr = fast\n")), ConfigError);
    EXPECT_THROW(KeyValueConfig::parse_string("lr = 0.1\n"), ConfigError);
}

TEST(Config, ValidateRejectsBadValues) {
    ExperimentConfig c;
    c.probes = {"nc", "entropy"};
    EXPECT_THROW(c.validate(), ConfigError);
    c = ExperimentConfig{};
    c.ema = true;
    c.stop_gradient = false;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ExperimentConfig{};
    c.tau = 0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, ShippedConfigsLoad) {
    for (const char* f : {"table_hltm.ini", "table_hltm_small.ini", "byol_ablate.ini", "collapse.ini", "golden_train.ini",
                          "toy1d.ini", "probe_op.ini", "verify.ini"}) {
        SCOPED_TRACE(f);
        EXPECT_NO_THROW(ExperimentConfig::load(config_path(f)).validate());
    }
}

TEST(Csv, FormatsAndQuotes) {
    EXPECT_EQ(fmt(0.1), "0.1");
    EXPECT_EQ(fmt(std::nan("")), "nan");
    EXPECT_EQ(fmt(-INFINITY), "-inf");
    EXPECT_EQ(std::stod(fmt(1.0 / 3.0)), 1.0 / 3.0);
    EXPECT_EQ(csv_field("a,b"), "\"a,b\"");
    EXPECT_EQ(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    EXPECT_EQ(csv_field("plain"), "plain");
}

TEST(Csv, LongAndSummaryLayout) {
    ExperimentRecord a, b;
    a.run_id = "a";
    a.probe(0, "nc", 0.5);
    a.report("final_nc", 0.5);
    b.run_id = "b";
    b.status = "diverged";
    b.report("steps_run", 3);
    std::ostringstream lg, sm;
    write_long_csv(lg, "[run]\nseed = 1\n", {a, b});
    write_summary_csv(sm, "[run]\nseed = 1\n", {a, b});
    EXPECT_EQ(lg.str(), "# [run]\n# seed = 1\nrun_id,step,metric,value\na,0,nc,0.5\n");
    EXPECT_EQ(sm.str(), "# [run]\n# seed = 1\nrun_id,status,final_nc,steps_run\na,ok,0.5,\nb,diverged,,3\n");
}

TEST(Pool, SameResultForEveryThreadCount) {
    auto run = [](std::size_t threads) {
        std::vector<double> out(97);
        parallel_for(out.size(), threads, [&](std::size_t i) {
            Rng rng = Rng(5).split(i);
            double s = 0;
            for (int k = 0; k < 1000; ++k) s += rng.normal();
            out[i] = s;
        });
        return out;
    };
    const auto one = run(1);
    for (std::size_t t : {2u, 3u, 8u, 200u}) EXPECT_EQ(run(t), one) << t;
}

TEST(Pool, RunsEveryIndexOnceAndRethrows) {
    std::vector<std::atomic<int>> hits(50);
    EXPECT_THROW(parallel_for(50, 4,
                              [&](std::size_t i) {
                                  ++hits[i];
                                  if (i == 7) throw std::runtime_error("trial 7");
                              }),
                 std::runtime_error);
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_NO_THROW(parallel_for(0, 4, [](std::size_t) { FAIL(); }));
}

TEST(Train, ZeroEpochsReportsInitOnly) {
    ExperimentConfig c = tiny_train();
    c.epochs = 0;
    const TrainResult r = train_full(c);
    EXPECT_EQ(r.record.status, "ok");
    for (const auto& s : r.record.series) EXPECT_EQ(s.step, 0u);
    ASSERT_NE(r.record.find("init_nc"), nullptr);
    EXPECT_EQ(*r.record.find("init_nc"), *r.record.find("final_nc"));
    for (std::size_t l = 1; l <= r.initial.num_linear(); ++l) EXPECT_EQ(r.initial.weight(l), r.final.weight(l));
}

TEST(Train, ZeroLearningRateLeavesWeights) {
    ExperimentConfig c = tiny_train();
    c.lr = 0;
    const TrainResult r = train_full(c);
    for (std::size_t l = 1; l <= r.initial.num_linear(); ++l) EXPECT_EQ(r.initial.weight(l), r.final.weight(l));

    c.loss = "byol";
    c.l2_normalize = false;
    c.steps = 20;
    c.probe_every = 10;
    const TrainResult b = train_full(c);
    for (std::size_t l = 1; l <= b.initial.num_linear(); ++l) EXPECT_EQ(b.initial.weight(l), b.final.weight(l));
}

TEST(Train, HugeLearningRateDiverges) {
    ExperimentConfig c = tiny_train();
    c.l2_normalize = false;
    c.lr = 1e12;
    c.epochs = 20;
    const auto r = train(c);
    EXPECT_EQ(r.status, "diverged");
    EXPECT_FALSE(r.message.empty());
}

TEST(Train, SameSeedSameRecord) {
    const ExperimentConfig c = tiny_train();
    const auto a = train_outputs(c), b = train_outputs(c);
    EXPECT_EQ(a, b);
    ExperimentConfig d = c;
    d.seed = 1;
    EXPECT_NE(train_outputs(d).at("train_long.csv"), a.at("train_long.csv"));
}

TEST(Train, GoldenLongCsv) {
    const auto out = train_outputs(ExperimentConfig::load(config_path("golden_train.ini")));
    EXPECT_EQ(out.at("train_long.csv"), read_file(std::string(SSLDYN_SOURCE_DIR) + "/tests/golden/train_long.csv"));
}

TEST(Train, OperatorProbeNeedsEnumerableTree) {
    ExperimentConfig c = tiny_train();
    c.tree.depth = 5;
    c.probes = {"op_norm"};
    EXPECT_THROW(train(c), ConfigError);
}

TEST(Verify, MutationFailsOnlyTheTargetSuite) {
    VerifyOptions opt;
    opt.fixtures = std::vector<std::string>{"loss-partials", "ev-ve"};
    opt.mutate = "ev-ve";
    const auto rep = verify_all(opt);
    EXPECT_TRUE(rep.suite_ok("loss-partials"));
    EXPECT_FALSE(rep.suite_ok("ev-ve"));
    EXPECT_FALSE(rep.ok());
}

TEST(Verify, EmptySelectionIsEmptyAndOk) {
    VerifyOptions opt;
    opt.fixtures = std::vector<std::string>{};
    const auto rep = verify_all(opt);
    EXPECT_TRUE(rep.rows.empty());
    EXPECT_TRUE(rep.ok());
}

TEST(Verify, UnknownIdsAreConfigErrors) {
    VerifyOptions opt;
    opt.fixtures = std::vector<std::string>{"no-such-suite"};
    EXPECT_THROW(verify_all(opt), ConfigError);
    opt.fixtures.reset();
    opt.mutate = "no-such-suite";
    EXPECT_THROW(verify_all(opt), ConfigError);
}

TEST(Verify, SelectsByFixtureName) {
    VerifyOptions opt;
    opt.fixtures = std::vector<std::string>{"log-spaced-20"};
    const auto rep = verify_all(opt);
    ASSERT_FALSE(rep.rows.empty());
    for (const auto& r : rep.rows) EXPECT_EQ(r.theorem, "mills-brackets");
}

TEST(Cells, ParseAndApply) {
    const CellFlags f = parse_cell("P+BN+EMA");
    EXPECT_TRUE(f.predictor && f.bn && f.ema);
    const CellFlags n = parse_cell("none");
    EXPECT_FALSE(n.predictor || n.bn || n.ema);
    EXPECT_THROW(parse_cell("P+XX"), ConfigError);
    ExperimentConfig c;
    c.loss = "byol";
    const auto a = apply_cell(c, "BN");
    EXPECT_FALSE(a.predictor);
    EXPECT_TRUE(a.hidden_bn);
}
