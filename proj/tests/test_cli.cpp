// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "unisd/errors.hpp"
#include "unisd/runner.hpp"

using namespace unisd;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// A config small enough to train in well under a second.
json tiny_doc() {
    return json::parse(R"({
        "schema_version": 1,
        "mode": "unisd_star",
        "seed": 3,
        "task": {"kind": "reverse", "n_train": 24, "n_eval": 6},
        "arch": {"d_model": 8, "layers": 1, "heads": 2, "window": 64, "mlp_ratio": 2},
        "base": {"pretrain_steps": 2},
        "trainer": {"steps": 2, "batch_size": 2},
        "agreement": {"K": 2, "strategy": "random"},
        "eval": {"examples": 6}
    })");
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("unisd-test-" + std::to_string(::getpid()) + "-" +
                std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

std::string config_error_message(const json& doc) {
    try {
        parse_config(doc);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(UNISD_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::vector<std::string> lines(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream is(text);
    for (std::string l; std::getline(is, l);) out.push_back(l);
    return out;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::istringstream is(line);
    for (std::string f; std::getline(is, f, ',');) out.push_back(f);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config errors name the offending key") {
    json d = tiny_doc();
    d["distill"]["divergence"] = "hellinger";
    CHECK(config_error_message(d).find("distill.divergence") != std::string::npos);

    d = tiny_doc();
    d["distill"]["kappa"] = "big";
    CHECK(config_error_message(d).find("distill.kappa") != std::string::npos);

    d = tiny_doc();
    d["trainer"]["step"] = 5;
    CHECK(config_error_message(d).find("trainer.step") != std::string::npos);

    d = tiny_doc();
    d["mode"] = "ppo";
    CHECK(config_error_message(d).find("mode") != std::string::npos);

    d = tiny_doc();
    d["arch"]["vocab"] = 32;
    CHECK(config_error_message(d).find("arch.vocab") != std::string::npos);

    CHECK_THROWS_AS(parse_config_text("{not json"), ConfigError);
}

TEST_CASE("mode defaults are applied before explicit keys") {
    json d = tiny_doc();
    ExperimentConfig c = parse_config(d);
    CHECK(c.trainer.distill.use_ema);
    CHECK(c.trainer.distill.agreement.K == 2);
    d["distill"]["use_ema"] = false;
    CHECK_FALSE(parse_config(d).trainer.distill.use_ema);
}

TEST_CASE("config round-trip and hash") {
    const ExperimentConfig c = parse_config(tiny_doc());
    const auto j = config_to_json(c);
    const ExperimentConfig c2 = parse_config(json::parse(j.dump()));
    CHECK(config_to_json(c2).dump() == j.dump());
    CHECK(config_hash(c2) == config_hash(c));
    CHECK(config_hash(c).size() == 16);
    json d = tiny_doc();
    d["seed"] = 4;
    CHECK(config_hash(parse_config(d)) != config_hash(c));
}

TEST_CASE("run directories are complete and deterministic") {
    TempDir tmp;
    const ExperimentConfig c = parse_config(tiny_doc());
    const RunResult a = run_experiment(c, tmp.path, "a");
    const RunResult b = run_experiment(c, tmp.path, "b");
    for (const char* f : {"config.json", "metrics.jsonl", "eval_reports.json", "run_record.json", "data/train.jsonl",
                          "data/eval.jsonl", "checkpoints/student.ckpt", "checkpoints/base.ckpt", "checkpoints/ema.ckpt"}) {
        REQUIRE(fs::exists(a.dir / f));
    }
    CHECK(read_file(a.dir / "metrics.jsonl") == read_file(b.dir / "metrics.jsonl"));
    CHECK(read_file(a.dir / "checkpoints/student.ckpt") == read_file(b.dir / "checkpoints/student.ckpt"));
    CHECK(lines(read_file(a.dir / "metrics.jsonl")).size() == 2);
    CHECK_FALSE(fs::exists(tmp.path / "a.tmp"));
    const json rec = json::parse(read_file(a.dir / "run_record.json"));
    CHECK(rec.at("health") == "ok");
    CHECK(rec.at("config_hash") == config_hash(c));
    CHECK_THROWS_AS(run_experiment(c, tmp.path, "a"), Error);
}

TEST_CASE("sweep counting, indexing and resume") {
    TempDir tmp;
    json spec;
    spec["base_config"] = tiny_doc();
    spec["base_config"]["trainer"]["steps"] = 1;
    spec["base_config"]["base"]["pretrain_steps"] = 0;
    spec["axes"]["distill.kappa"] = {0.5, 1.0};
    spec["axes"]["agreement.agree_gamma"] = {0.0, 0.1, 1.0};
    spec["seeds"] = {0, 1};
    const SweepSpec s = parse_sweep(spec);
    const auto cells = run_sweep(s, tmp.path);
    REQUIRE(cells.size() == 12);
    for (const auto& c : cells) CHECK(c.status == "completed");
    const json index = json::parse(read_file(tmp.path / "sweep_index.json"));
    CHECK(index.at("cells").size() == 12);

    const auto again = run_sweep(s, tmp.path);
    REQUIRE(again.size() == 12);
    for (const auto& c : again) CHECK(c.status == "resumed");

    json bad = spec;
    bad["axes"]["distill.kapa"] = {1};
    CHECK_THROWS_AS(parse_sweep(bad), ConfigError);
    json big = spec;
    big["cap"] = 5;
    CHECK_THROWS_AS(parse_sweep(big), ConfigError);
}

TEST_CASE("reports") {
    TempDir tmp;
    json d = tiny_doc();
    std::vector<fs::path> dirs;
    for (const char* mode : {"unisd_star", "sft", "gkd_like"}) {
        d["mode"] = mode;
        dirs.push_back(run_experiment(parse_config(d), tmp.path, mode).dir);
    }
    const auto rows = lines(emit_report(dirs, ReportFormat::table_csv));
    REQUIRE(rows.size() == 4);
    const auto header = split_csv(rows[0]);
    const auto self = split_csv(rows[1]);
    REQUIRE(self.size() == header.size());
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i].rfind("paired_", 0) == 0) CHECK(std::stod(self[i]) == 0.0);
    }

    const json plot = json::parse(emit_report(dirs, ReportFormat::plotdata_json));
    CHECK(plot.at("series").size() == 3);
    CHECK(plot.contains("accuracy_vs_K"));
    CHECK(plot.at("paired_jsd_histograms").size() == 3);
    CHECK_THROWS_AS(parse_report_format("svg"), ConfigError);
}

TEST_CASE("command-line exit codes") {
    TempDir tmp;
    const fs::path good = tmp.path / "good.json";
    write_file(good, tiny_doc().dump());
    json d = tiny_doc();
    d["agreement"]["statistic"] = "entropy";
    const fs::path bad = tmp.path / "bad.json";
    write_file(bad, d.dump());

    const auto t0 = std::chrono::steady_clock::now();
    CHECK(run_cli("train --config " + good.string() + " --out " + (tmp.path / "runs").string()) == 0);
    CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(60));
    CHECK(std::distance(fs::directory_iterator(tmp.path / "runs"), fs::directory_iterator{}) == 1);

    CHECK(run_cli("train --config " + bad.string() + " --out " + (tmp.path / "runs").string()) == 2);
    CHECK(run_cli("train --config " + (tmp.path / "missing.json").string()) == 2);
    CHECK(run_cli("gen-data --config " + good.string() + " --out " + (tmp.path / "data").string()) == 0);
    CHECK(fs::exists(tmp.path / "data" / "train.jsonl"));
    const fs::path run = fs::directory_iterator(tmp.path / "runs")->path();
    CHECK(run_cli("eval " + run.string()) == 0);
    CHECK(run_cli("eval " + (tmp.path / "nope").string()) == 3);
}

}  // TEST_SUITE
