#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "acdm/config.hpp"
#include "acdm/flow_data.hpp"
#include "acdm/pipeline.hpp"

using namespace acdm;
namespace fs = std::filesystem;

// End-to-end exercises of the CLI binary plus config-layer units.

namespace {

#ifndef ACDM_BENCH_BIN
#define ACDM_BENCH_BIN "acdm-bench"
#endif

int run_cli(const std::string& args) {
    std::string cmd = std::string(ACDM_BENCH_BIN) + " " + args + " 2>>cli_test_stderr.log";
    int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

fs::path write_fast_config(const fs::path& dir) {
    json j;
    j["preset"] = "acdm-R20";
    j["data"] = {{"dir", (dir / "data").string()}, {"grid", {64, 32}}, {"train_re", {300, 600}},
                 {"test_low_re", json::array()}, {"test_high_re", {450}}, {"var_sequence", false},
                 {"total_steps", 420}, {"discard_steps", 300}};
    j["model"] = {{"width", 8}, {"step_embed_dim", 16}};
    j["objective"] = {{"R", 12}};
    j["rollout"] = {{"horizon", 5}, {"ensemble", 2}};
    j["run"] = {{"seed", 3}, {"steps", 12}, {"batch", 2}, {"lr", 1e-3},
                {"out_dir", (dir / "run").string()}, {"jobs", 2}, {"log_every", 50}};
    fs::create_directories(dir);
    auto path = dir / "fast.json";
    std::ofstream os(path);
    os << j.dump(2);
    return path;
}

}  // namespace

TEST_CASE("config layer: presets, overrides, validation paths", "[cli]") {
    // preset + override round trip
    json j = preset_config("acdm-R20");
    j["run"] = {{"seed", 1}};
    apply_override(j, "objective.R=50");
    apply_override(j, "run.lr=0.001");
    auto cfg = parse_config(j);
    CHECK(cfg.objective.R == 50);
    CHECK(cfg.run.lr == 0.001);
    CHECK(cfg.model.in_channels == 12);  // k=2 conditioning + noised target, 4 channels each
    CHECK(cfg.model.out_channels == 4);

    // seed mandatory
    json no_seed = preset_config("unet");
    REQUIRE_THROWS_WITH(parse_config(no_seed), Catch::Matchers::ContainsSubstring("run.seed"));

    // field-path errors
    json bad = preset_config("acdm-R20");
    bad["run"] = {{"seed", 1}};
    bad["data"]["grid"] = {64, 40};
    try {
        parse_config(bad);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.field_path == "data.grid");
    }

    json bad2 = preset_config("unet-tn-1e-2");
    bad2["run"] = {{"seed", 1}};
    bad2["objective"]["n"] = 0.0;
    REQUIRE_THROWS_AS(parse_config(bad2), ConfigError);

    // every shipped preset parses
    for (const auto& name : {"acdm-R20", "acdm-ncn", "unet", "unet-ut-m8", "unet-tn-1e-2",
                             "resnet-dil", "fno-16", "refiner-R4-s1e-6"}) {
        json p = preset_config(name);
        p["run"] = {{"seed", 1}};
        CHECK_NOTHROW(parse_config(p));
    }

    // environment variable satisfies the seed requirement
    setenv("ACDM_BENCH_SEED", "99", 1);
    auto cfg2 = parse_config(preset_config("unet"));
    CHECK(cfg2.run.seed == 99);
    unsetenv("ACDM_BENCH_SEED");
}

TEST_CASE("cli pipeline: generate, train, rollout, evaluate, report", "[cli][pipeline]") {
    fs::path dir = "cli_pipeline_work";
    fs::remove_all(dir);
    auto cfg_path = write_fast_config(dir);
    std::string c = " -c " + cfg_path.string();

    REQUIRE(run_cli("generate" + c) == 0);
    REQUIRE(fs::exists(dir / "data" / "manifest.json"));
    REQUIRE(fs::exists(dir / "data" / "stats.json"));

    REQUIRE(run_cli("train" + c) == 0);
    REQUIRE(fs::exists(dir / "run" / "model.acwt"));
    REQUIRE(fs::exists(dir / "run" / "loss.csv"));
    REQUIRE(fs::exists(dir / "run" / "run.json"));
    {
        std::ifstream is(dir / "run" / "run.json");
        auto j = json::parse(is);
        CHECK(j.contains("version"));
        CHECK(j.contains("config"));  // reproducible from the output directory alone
    }

    REQUIRE(run_cli("rollout" + c) == 0);
    int rollout_files = 0;
    for (const auto& e : fs::directory_iterator(dir / "run" / "rollouts"))
        if (e.path().extension() == ".flowseq") ++rollout_files;
    CHECK(rollout_files == 2);  // one sequence, two members

    REQUIRE(run_cli("evaluate" + c + " --pred " + (dir / "run" / "rollouts").string() +
                    " -s run.out_dir=" + (dir / "eval").string()) == 0);
    REQUIRE(fs::exists(dir / "eval" / "report.json"));
    REQUIRE(fs::exists(dir / "eval" / "mse.csv"));

    // report over two copies of the method dir: deterministic name ordering
    fs::create_directories(dir / "evalB");
    fs::copy(dir / "eval" / "report.json", dir / "evalB" / "report.json");
    REQUIRE(run_cli("report " + (dir / "evalB").string() + " " + (dir / "eval").string() +
                    " > " + (dir / "table.txt").string()) == 0);
    std::ifstream table(dir / "table.txt");
    std::string line;
    std::vector<std::string> lines;
    while (std::getline(table, line)) lines.push_back(line);
    REQUIRE(lines.size() == 4);
    CHECK(lines[2].rfind("eval", 0) == 0);  // sorted: "eval" before "evalB"
    CHECK(lines[3].rfind("evalB", 0) == 0);

    fs::remove_all(dir);
    fs::remove("cli_test_stderr.log");
}

TEST_CASE("cli exit codes: config 2, missing checkpoint 3, NaN 4", "[cli]") {
    fs::path dir = "cli_exit_work";
    fs::remove_all(dir);
    auto cfg_path = write_fast_config(dir);
    std::string c = " -c " + cfg_path.string();

    CHECK(run_cli("train -c does_not_exist.json") == 2);
    CHECK(run_cli("generate" + c + " -s data.grid=[64,40]") == 2);
    CHECK(run_cli("rollout" + c + " --checkpoint missing.acwt") == 3);

    // lr large enough to overflow the squared residuals within a few steps
    REQUIRE(run_cli("generate" + c) == 0);
    CHECK(run_cli("train" + c + " -s run.lr=1e160 -s objective.loss=mse -s run.steps=10") == 4);

    fs::remove_all(dir);
    fs::remove("cli_test_stderr.log");
}

TEST_CASE("evaluate with pred == ref gives zero MSE and unit Pearson", "[cli][pipeline]") {
    fs::path dir = "cli_selfeval_work";
    fs::remove_all(dir);
    auto cfg_path = write_fast_config(dir);
    auto cfg = load_config(cfg_path.string(), "", {});
    pipeline::cmd_generate(cfg);

    auto stats = pipeline::load_stats(cfg.data.dir);
    auto manifest = pipeline::DatasetManifest::load(cfg.data.dir);
    fs::path pred_dir = dir / "identity_pred";
    fs::create_directories(pred_dir);
    auto ref = flowseq::read((fs::path(cfg.data.dir) / manifest.test_high[0]).string());
    Trajectory pred = ref;
    pred.meta = {{"stats_ref", stats.ref}, {"k", 1}};
    std::string stem = fs::path(manifest.test_high[0]).stem().string();
    flowseq::write(pred, (pred_dir / (stem + "_m0.flowseq")).string());

    RunConfig eval_cfg = cfg;
    eval_cfg.run.out_dir = (dir / "eval").string();
    auto report = pipeline::cmd_evaluate(eval_cfg, pred_dir.string(), cfg.data.dir);
    CHECK(report["metrics"]["mse_total"]["overall_mean"].get<double>() == 0.0);
    for (auto& v : report["metrics"]["pearson"]["mean"]) CHECK(v.get<double>() == 1.0);

    // provenance: a rollout normalized with different stats is rejected
    Trajectory bad = ref;
    bad.meta = {{"stats_ref", "deadbeefdeadbeef"}, {"k", 1}};
    flowseq::write(bad, (pred_dir / (stem + "_m1.flowseq")).string());
    REQUIRE_THROWS_WITH(pipeline::cmd_evaluate(eval_cfg, pred_dir.string(), cfg.data.dir),
                        Catch::Matchers::ContainsSubstring("provenance"));

    fs::remove_all(dir);
}
