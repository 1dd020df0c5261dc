// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace unisd {

struct CriterionResult {
    int id = 0;
    std::string name;
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

struct AcceptanceOptions {
    bool learning = true;                // criteria 7-9 (the multi-seed training runs)
    std::filesystem::path learning_config;  // frozen desk-scale settings
    std::filesystem::path work_dir;      // scratch space for the determinism runs
    std::function<void(const CriterionResult&)> on_result;
};

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts);
std::string format_result(const CriterionResult& r);

}  // namespace unisd
