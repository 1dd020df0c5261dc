// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "unisd/corpus.hpp"
#include "unisd/trainer.hpp"

namespace unisd {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kRunRootEnv = "UNISD_RUN_ROOT";

struct TaskSpec {
    TaskKind kind = TaskKind::reverse;
    int n_train = 2000;
    int n_eval = 200;
    bool operator==(const TaskSpec&) const = default;
};

struct ExperimentConfig {
    TaskSpec task;
    TrainerConfig trainer;
};

/// Resolves a config document: mode defaults first, then every present key. Unknown
/// keys, wrong types and invalid values raise a ConfigError naming the key.
ExperimentConfig parse_config(const nlohmann::json& doc);
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Fully resolved document; parse_config(config_to_json(c)) reproduces c.
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
std::string config_hash(const ExperimentConfig& cfg);

std::pair<TaskDataset, TaskDataset> make_datasets(const ExperimentConfig& cfg);

struct RunResult {
    std::string run_id;
    std::filesystem::path dir;
    RunRecord record;
};

/// Generates data, trains, evaluates and writes the run directory under `out_root`.
/// The directory is assembled under a temporary name and renamed when complete; a
/// mid-run failure leaves it renamed but marked unhealthy, and rethrows.
RunResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& out_root,
                         const std::string& run_id_override = "");

struct SweepSpec {
    nlohmann::json base_config;
    std::vector<std::pair<std::string, std::vector<nlohmann::json>>> axes;  // "section.key" -> values
    std::vector<std::uint64_t> seeds;
    int cap = 200;
};

SweepSpec parse_sweep(const nlohmann::json& doc);

struct SweepCell {
    int index = 0;
    nlohmann::json overrides;
    std::uint64_t seed = 0;
    std::string config_hash;
    std::string run_id;
    std::string status;  // completed | failed | resumed
    std::string error;
};

/// Cartesian grid x seeds, run sequentially. Cells whose config hash already completed
/// in an existing index are not re-run. Writes sweep_index.json after every cell.
std::vector<SweepCell> run_sweep(const SweepSpec& spec, const std::filesystem::path& out_dir);

enum class ReportFormat { table_csv, plotdata_json };
ReportFormat parse_report_format(std::string_view s);

/// Renders completed runs. Paired columns compare each run to the first one.
std::string emit_report(const std::vector<std::filesystem::path>& run_dirs, ReportFormat format);

nlohmann::ordered_json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const PairedComparison& p);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& contents);

}  // namespace unisd
