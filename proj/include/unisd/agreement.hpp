// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <string>
#include <vector>

#include "unisd/corpus.hpp"
#include "unisd/policy.hpp"

namespace unisd {

enum class Granularity { token, sequence };
enum class Statistic { variance, range };

std::string to_string(Granularity g);
std::string to_string(Statistic s);
Granularity parse_granularity(std::string_view s);
Statistic parse_statistic(std::string_view s);

struct AgreementConfig {
    bool enabled = false;
    Granularity granularity = Granularity::token;
    Statistic statistic = Statistic::variance;
    double agree_gamma = 0.1;
    int K = 3;
    ContextStrategy strategy = ContextStrategy::retrieval;
};

void validate(const AgreementConfig& cfg);

/// Per-view teacher log-probabilities of one trajectory: row k holds l_t^k.
struct TeacherViewMatrix {
    Matrix logprobs;  // K x T
    std::vector<double> mask;
    std::vector<std::string> view_ids;

    int views() const { return logprobs.rows; }
    int length() const { return logprobs.cols; }
};

TeacherViewMatrix score_views(const PolicyParameters& teacher, const ContextSet& contexts, const Trajectory& trajectory);

/// Spread of {l_t^k} over views at each position; zero where the mask is 0.
std::vector<double> token_disagreement(const TeacherViewMatrix& views, Statistic statistic);
/// Spread over views of the masked mean log-probability L^k.
double sequence_disagreement(const TeacherViewMatrix& views, Statistic statistic);
/// Population variance or max - min of `values`.
double spread(std::span<const double> values, Statistic statistic);

/// w = exp(-agree_gamma * delta). Token granularity maps delta elementwise (|delta| = T);
/// sequence granularity takes a single delta and broadcasts its weight to T positions.
std::vector<double> weights_from_disagreement(std::span<const double> delta, double agree_gamma, Granularity granularity,
                                              int T);

}  // namespace unisd
