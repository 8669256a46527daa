#include "ibdd/experiment.hpp"

#include "../support/fixtures.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

using namespace ibdd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

// Writes a synthetic 5-class dataset as IDX files and returns a config
// pointing at it, sized for a few seconds of training.
ExperimentConfig tiny_config(const fs::path& root) {
    write_idx(fixture::synthetic_images(5, 64, 1), root / "train-images-idx3-ubyte", root / "train-labels-idx1-ubyte");
    write_idx(fixture::synthetic_images(5, 6, 2, Split::test), root / "t10k-images-idx3-ubyte",
              root / "t10k-labels-idx1-ubyte");
    ExperimentConfig c;
    c.train_images = root / "train-images-idx3-ubyte";
    c.train_labels = root / "train-labels-idx1-ubyte";
    c.test_images = root / "t10k-images-idx3-ubyte";
    c.test_labels = root / "t10k-labels-idx1-ubyte";
    c.ood_classes = {4};
    c.n_support = 5;
    c.repetitions = 2;
    c.base_seed = 10;
    c.gan.epochs = 1;
    c.gan.batch_size = 64;
    c.ib.steps = 3;
    c.d_proj = 8;
    c.output_dir = root / "out";
    return c;
}

// Minimal persisted cell: two-sample score reports and a completion marker.
void fake_cell(const fs::path& results, ClassId c, int r, double before, double after) {
    const fs::path dir = cell_dir(results, c, r);
    auto report = [](double area) {
        ScoreReport s;
        s.scores = {1.0, 0.0};
        s.is_ood = {1, 0};
        s.labels = {0, 1};
        s.curve.area = area;
        s.separation = 2.0 + area;
        s.bandwidth = 1.0;
        return report_to_json(s).dump();
    };
    spit(dir / "score_before.json", report(before));
    spit(dir / "score_after.json", report(after));
    spit(dir / "cell.json", json{{"schema_version", kCellSchemaVersion},
                                 {"ood_class", c},
                                 {"repetition", r},
                                 {"seed", cell_seed(0, c, r)},
                                 {"consumed_labels", json::object()}}
                                .dump());
}

}  // namespace

TEST(Config, RoundTripIsAFixedPoint) {
    ExperimentConfig c;
    c.train_images = "/a/b";
    c.ood_classes = {3, 8};
    c.repetitions = 4;
    c.ib.loss.beta = 3.0;
    c.kde.bandwidth = BandwidthPolicy::fixed(0.7);
    c.head_mode = EmbeddingMode::flatten;
    const std::string once = dump_config(c);
    const std::string twice = dump_config(json::parse(once).get<ExperimentConfig>());
    EXPECT_EQ(once, twice);
}

TEST(Config, ZeroRepetitionsFailsValidation) {
    fixture::TempDir dir("cfg_reps");
    auto c = tiny_config(dir.path);
    c.repetitions = 0;
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        ASSERT_EQ(e.problems().size(), 1u);
        EXPECT_NE(e.problems()[0].find("repetitions"), std::string::npos);
    }
}

TEST(Config, MissingPathsAndUnknownFieldsAreReported) {
    ExperimentConfig c;
    c.train_images = "/definitely/missing";
    const auto p = c.problems();
    EXPECT_GE(p.size(), 4u);
    EXPECT_THROW(json::parse(R"({"repetitons": 3})").get<ExperimentConfig>(), ConfigError);
    EXPECT_THROW(json::parse(R"({"repetitions": "three"})").get<ExperimentConfig>(), ConfigError);
    EXPECT_THROW(json::parse(R"({"ib": {"scope": "everything"}})").get<ExperimentConfig>().validate(), ConfigError);
}

TEST(Config, RelativeDataPathsResolveAgainstConfigFile) {
    fixture::TempDir dir("cfg_rel");
    spit(dir.path / "sub" / "c.json", R"({"data": {"train_images": "x/imgs"}})");
    const auto c = load_config(dir.path / "sub" / "c.json");
    EXPECT_EQ(c.train_images, dir.path / "sub" / "x/imgs");
}

TEST(Seeds, CellSeedLayout) {
    EXPECT_EQ(cell_seed(7, 0, 0), 7u);
    EXPECT_EQ(cell_seed(7, 3, 2), 3009u);
    EXPECT_EQ(cell_dir("out", 8, 1), fs::path("out/ood_8/rep_1"));
}

TEST(Aggregate, MeansOverExactlyTheRepetitions) {
    fixture::TempDir dir("agg");
    fake_cell(dir.path, 2, 0, 0.2, 0.4);
    fake_cell(dir.path, 2, 1, 0.4, 0.8);
    fake_cell(dir.path, 5, 0, 0.5, 0.6);
    const auto rep = aggregate_results(dir.path);
    ASSERT_EQ(rep.rows.size(), 2u);
    const auto& r2 = rep.rows[0];
    EXPECT_EQ(r2.ood_class, 2);
    EXPECT_EQ(r2.auprc_before.size(), 2u);
    EXPECT_NEAR(r2.mean_before, 0.3, 1e-15);
    EXPECT_NEAR(r2.std_before, 0.1, 1e-15);
    EXPECT_NEAR(r2.mean_after, 0.6, 1e-15);
    for (const auto& row : rep.rows) {
        const auto [lo, hi] = std::minmax_element(row.auprc_after.begin(), row.auprc_after.end());
        EXPECT_GE(row.mean_after, *lo);
        EXPECT_LE(row.mean_after, *hi);
    }
    const std::string csv = rep.to_csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "ood_class,phase,mean_auprc,std_auprc");
    EXPECT_NE(csv.find("5,after,0.6,0\n"), std::string::npos);
}

TEST(Aggregate, RegenerationIsByteIdentical) {
    fixture::TempDir dir("agg_bytes");
    fake_cell(dir.path, 1, 0, 0.11, 0.22);
    fake_cell(dir.path, 1, 1, 0.33, 0.44);
    write_aggregate(aggregate_results(dir.path), dir.path);
    const auto a = slurp(dir.path / "aggregate.json");
    const auto b = slurp(dir.path / "aggregate.csv");
    write_aggregate(aggregate_results(dir.path), dir.path);
    EXPECT_EQ(a, slurp(dir.path / "aggregate.json"));
    EXPECT_EQ(b, slurp(dir.path / "aggregate.csv"));
}

TEST(Aggregate, EmptyDirectoryIsAnError) {
    fixture::TempDir dir("agg_empty");
    EXPECT_THROW(aggregate_results(dir.path), std::runtime_error);
}

TEST(Aggregate, SchemaMismatchNamesTheFile) {
    fixture::TempDir dir("agg_schema");
    fake_cell(dir.path, 0, 0, 0.1, 0.2);
    const fs::path bad = cell_dir(dir.path, 0, 0) / "score_after.json";
    auto j = json::parse(slurp(bad));
    j["schema_version"] = 99;
    spit(bad, j.dump());
    try {
        aggregate_results(dir.path);
        FAIL();
    } catch (const ReportSchemaError& e) {
        EXPECT_NE(std::string(e.what()).find("score_after.json"), std::string::npos);
    }
}

TEST(Aggregate, IgnoresIncompleteCells) {
    fixture::TempDir dir("agg_partial");
    fake_cell(dir.path, 3, 0, 0.1, 0.2);
    fake_cell(dir.path, 3, 1, 0.3, 0.4);
    fs::remove(cell_dir(dir.path, 3, 1) / "cell.json");
    EXPECT_EQ(aggregate_results(dir.path).rows[0].repetitions, std::vector<int>{0});
}

TEST(Run, ResumeReproducesUninterruptedAggregate) {
    fixture::TempDir dir("run_resume");
    auto cfg = tiny_config(dir.path);
    const auto full = run_experiments(cfg);
    const std::string expected = full.to_json_text();
    ASSERT_EQ(full.rows.size(), 1u);
    ASSERT_EQ(full.rows[0].repetitions.size(), 2u);
    EXPECT_TRUE(fs::exists(cfg.output_dir / "config.resolved.json"));
    for (const char* f : {"pretrain_log.jsonl", "retrain_log.jsonl", "discriminator.params", "head.params",
                          "score_before.json", "score_after.json", "prototypes.json"}) {
        EXPECT_TRUE(fs::exists(cell_dir(cfg.output_dir, 4, 1) / f)) << f;
    }

    // simulate a kill after the first repetition
    fs::remove_all(cell_dir(cfg.output_dir, 4, 1));
    fs::remove(cfg.output_dir / "aggregate.json");
    std::vector<std::string> progress;
    RunOptions opts;
    opts.resume = true;
    opts.progress = [&](const std::string& m) { progress.push_back(m); };
    const auto resumed = run_experiments(cfg, opts);
    EXPECT_EQ(resumed.to_json_text(), expected);
    ASSERT_EQ(progress.size(), 2u);
    EXPECT_NE(progress[0].find("skip"), std::string::npos);

    for (const auto& c : read_cells(cfg.output_dir)) EXPECT_EQ(c.consumed_labels.count(4), 0u);
}

TEST(Run, CheckpointReloadReproducesStoredReport) {
    fixture::TempDir dir("run_ckpt");
    auto cfg = tiny_config(dir.path);
    cfg.repetitions = 1;
    run_experiments(cfg);
    const fs::path cell = cell_dir(cfg.output_dir, 4, 0);
    for (auto phase : {CheckpointPhase::before, CheckpointPhase::after}) {
        auto ck = load_checkpoint(cfg, cell, phase);
        const auto rep = evaluate_task(ck.discriminator, ck.head, ck.task, cfg.kde);
        const auto stored = json::parse(slurp(cell / (phase == CheckpointPhase::before ? "score_before.json"
                                                                                         : "score_after.json")));
        EXPECT_EQ(report_to_json(rep), stored);
    }
}

TEST(Run, OutputRootEnvironmentOverride) {
    fixture::TempDir dir("run_env");
    auto cfg = tiny_config(dir.path);
    cfg.repetitions = 1;
    cfg.ib.steps = 1;
    cfg.output_dir = "relative_out";
    ::setenv(kOutputRootEnv, (dir.path / "root").c_str(), 1);
    run_experiments(cfg);
    ::unsetenv(kOutputRootEnv);
    EXPECT_TRUE(fs::exists(dir.path / "root" / "relative_out" / "aggregate.csv"));
}

#ifdef IBDD_CLI_PATH
namespace {
int run_cli(const std::string& args) {
    const int status = std::system((std::string(IBDD_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
}
}  // namespace

TEST(Cli, ExitCodes) {
    fixture::TempDir dir("cli");
    auto cfg = tiny_config(dir.path);
    cfg.repetitions = 0;
    spit(dir.path / "bad.json", dump_config(cfg));
    EXPECT_EQ(run_cli("run -c " + (dir.path / "bad.json").string()), 1);
    EXPECT_EQ(run_cli("run --no-such-flag"), 1);
    EXPECT_EQ(run_cli("report " + (dir.path / "nothing").string()), 2);

    cfg.repetitions = 1;
    cfg.ib.steps = 1;
    spit(dir.path / "good.json", dump_config(cfg));
    EXPECT_EQ(run_cli("run -c " + (dir.path / "good.json").string() + " --steps 2"), 0);
    const auto resolved = json::parse(slurp(cfg.output_dir / "config.resolved.json"));
    EXPECT_EQ(resolved["ib"]["steps"], 2);
    EXPECT_EQ(run_cli("report " + cfg.output_dir.string()), 0);
    const auto cell = cell_dir(cfg.output_dir, 4, 0);
    EXPECT_EQ(run_cli("eval -c " + (dir.path / "good.json").string() + " --cell " + cell.string() + " --phase before --out " +
                      (dir.path / "e.json").string()),
              0);
    EXPECT_EQ(json::parse(slurp(dir.path / "e.json")), json::parse(slurp(cell / "score_before.json")));
    EXPECT_EQ(run_cli("export-embeddings -c " + (dir.path / "good.json").string() + " --cell " + cell.string() +
                      " --with-support --out " + (dir.path / "emb.csv").string()),
              0);
    std::istringstream csv(slurp(dir.path / "emb.csv"));
    std::string header;
    std::getline(csv, header);
    EXPECT_EQ(header, "id,label,is_ood,z0,z1,z2,z3,z4,z5,z6,z7");
    int rows = 0;
    for (std::string line; std::getline(csv, line);) ++rows;
    EXPECT_EQ(rows, 30 + 20);  // test rows, then 4 classes x 5 support rows
}
#endif
