// SPDX-License-Identifier: Apache-2.0
// unisd: experiment runner for the self-distillation lab.

#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "unisd/acceptance.hpp"
#include "unisd/errors.hpp"
#include "unisd/evalkit.hpp"
#include "unisd/runner.hpp"

namespace fs = std::filesystem;
using namespace unisd;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

fs::path resolve_out(const std::string& out, const char* fallback) {
    if (!out.empty()) return out;
    if (const char* root = std::getenv(kRunRootEnv); root && *root) return fs::path(root);
    return fallback;
}

ExperimentConfig config_with_seed(const std::string& path, const std::optional<std::uint64_t>& seed) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    } catch (const Error&) {
        throw ConfigError("cannot read config file " + path);
    }
    if (seed) doc["seed"] = *seed;
    return parse_config(doc);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"unisd: self-distillation experiment runner"};
    app.require_subcommand(1);

    std::string config_path, out, format = "table_csv", run_dir, learning_config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> run_dirs;
    bool full = false;

    auto* gen = app.add_subcommand("gen-data", "write the train/eval JSONL splits of a config");
    gen->add_option("--config", config_path, "experiment config (JSON)")->required();
    gen->add_option("--out", out, "output directory");
    gen->add_option("--seed", seed, "override the config seed");

    auto* train = app.add_subcommand("train", "train one configuration into a new run directory");
    train->add_option("--config", config_path, "experiment config (JSON)")->required();
    train->add_option("--out", out, "run root (default: $" + std::string(kRunRootEnv) + " or ./runs)");
    train->add_option("--seed", seed, "override the config seed");

    auto* eval = app.add_subcommand("eval", "re-evaluate the final student of a run directory");
    eval->add_option("run", run_dir, "run directory")->required();
    eval->add_option("--seed", seed, "sampling seed for retention and JSD rollouts");

    auto* sweep = app.add_subcommand("sweep", "run a grid of configurations");
    sweep->add_option("--config", config_path, "sweep spec (JSON)")->required();
    sweep->add_option("--out", out, "sweep directory");

    auto* report = app.add_subcommand("report", "tabulate or export completed runs");
    report->add_option("runs", run_dirs, "run directories; the first is the paired reference")->required();
    report->add_option("--format", format, "table_csv or plotdata_json");
    report->add_option("--out", out, "output file (default: stdout)");

    auto* verify = app.add_subcommand("verify", "run the acceptance checks");
    verify->add_flag("--full", full, "include the multi-seed learning runs");
    verify->add_option("--config", learning_config, "learning criteria spec (JSON)");
    verify->add_option("--out", out, "scratch directory for the determinism runs");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            const ExperimentConfig cfg = config_with_seed(config_path, seed);
            const fs::path dir = out.empty() ? fs::path("data") : fs::path(out);
            const auto [tr, ev] = make_datasets(cfg);
            write_file(dir / "train.jsonl", to_jsonl(tr));
            write_file(dir / "eval.jsonl", to_jsonl(ev));
            std::cout << dir.string() << "\n";
        } else if (train->parsed()) {
            const ExperimentConfig cfg = config_with_seed(config_path, seed);
            const RunResult r = run_experiment(cfg, resolve_out(out, "runs"));
            std::cout << r.dir.string() << "\n";
            if (r.record.health == Health::unhealthy) {
                std::cerr << "run finished unhealthy: " << r.record.skipped_steps << " skipped steps\n";
            }
        } else if (eval->parsed()) {
            const fs::path dir = run_dir;
            const ExperimentConfig cfg = parse_config(nlohmann::json::parse(read_file(dir / "config.json")));
            const TaskDataset ev = from_jsonl(read_file(dir / "data" / "eval.jsonl"), Split::eval, cfg.trainer.seed);
            const PolicyParameters student = load_checkpoint((dir / "checkpoints" / "student.ckpt").string());
            const PolicyParameters base = load_checkpoint((dir / "checkpoints" / "base.ckpt").string());
            const std::uint64_t s = seed ? *seed : derive_seed(cfg.trainer.seed, "eval");
            EvalReport rep = evaluate(student, base, ev, cfg.trainer.eval_temperature, s, cfg.trainer.eval_examples,
                                      cfg.trainer.max_completion, cfg.trainer.eval_samples);
            rep.step = cfg.trainer.steps;
            std::cout << to_json(rep).dump(2) << "\n";
        } else if (sweep->parsed()) {
            const SweepSpec spec = parse_sweep(nlohmann::json::parse(read_file(config_path)));
            const fs::path dir = resolve_out(out, "sweep");
            const auto cells = run_sweep(spec, dir);
            long failed = 0;
            for (const auto& c : cells) failed += c.status == "failed";
            std::cout << (dir / "sweep_index.json").string() << "\n";
            if (failed > 0) {
                std::cerr << failed << " of " << cells.size() << " cells failed\n";
                return kExitRuntime;
            }
        } else if (report->parsed()) {
            std::vector<fs::path> dirs(run_dirs.begin(), run_dirs.end());
            const std::string text = emit_report(dirs, parse_report_format(format));
            if (out.empty()) {
                std::cout << text;
            } else {
                write_file(out, text);
            }
        } else if (verify->parsed()) {
            AcceptanceOptions opts;
            opts.learning = full;
            opts.learning_config = learning_config.empty() ? fs::path(UNISD_DEFAULT_LEARNING_CONFIG) : fs::path(learning_config);
            if (!out.empty()) opts.work_dir = out;
            opts.on_result = [](const CriterionResult& r) { std::cout << format_result(r) << std::endl; };
            const auto results = run_acceptance(opts);
            for (const auto& r : results) {
                if (!r.pass) return kExitRuntime;
            }
        }
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}
