// SPDX-License-Identifier: Apache-2.0
#include "unisd/agreement.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unisd/errors.hpp"

namespace unisd {

std::string to_string(Granularity g) { return g == Granularity::token ? "token" : "sequence"; }
std::string to_string(Statistic s) { return s == Statistic::variance ? "variance" : "range"; }

Granularity parse_granularity(std::string_view s) {
    if (s == "token") return Granularity::token;
    if (s == "sequence") return Granularity::sequence;
    throw ConfigError("unsupported granularity '" + std::string(s) + "'");
}

Statistic parse_statistic(std::string_view s) {
    if (s == "variance") return Statistic::variance;
    if (s == "range") return Statistic::range;
    throw ConfigError("unsupported statistic '" + std::string(s) + "'");
}

void validate(const AgreementConfig& cfg) {
    if (cfg.K < 1) throw ConfigError("agreement.K must be >= 1");
    if (cfg.enabled && cfg.K < 2) throw ConfigError("agreement.K must be >= 2 when agreement is enabled");
    if (!(cfg.agree_gamma >= 0.0) || !std::isfinite(cfg.agree_gamma)) throw ConfigError("agreement.agree_gamma must be >= 0");
}

TeacherViewMatrix score_views(const PolicyParameters& teacher, const ContextSet& contexts, const Trajectory& trajectory) {
    const int K = static_cast<int>(contexts.auxiliaries.size());
    if (K < 1) throw ConfigError("score_views needs at least one auxiliary context");
    TeacherViewMatrix out;
    out.logprobs = Matrix(K, trajectory.length());
    out.mask = trajectory.mask;
    out.view_ids = contexts.view_ids;
    for (int k = 0; k < K; ++k) {
        const auto row = score_tokens(teacher, contexts.auxiliaries[static_cast<std::size_t>(k)], trajectory);
        std::copy(row.begin(), row.end(), out.logprobs.row(k).begin());
    }
    return out;
}

double spread(std::span<const double> values, Statistic statistic) {
    if (values.empty()) return 0.0;
    if (statistic == Statistic::range) {
        const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
        return *hi - *lo;
    }
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    return var / static_cast<double>(values.size());
}

std::vector<double> token_disagreement(const TeacherViewMatrix& views, Statistic statistic) {
    if (views.views() < 2) throw ConfigError("disagreement needs K >= 2 views");
    std::vector<double> delta(static_cast<std::size_t>(views.length()), 0.0);
    std::vector<double> col(static_cast<std::size_t>(views.views()));
    for (int t = 0; t < views.length(); ++t) {
        if (views.mask[static_cast<std::size_t>(t)] == 0.0) continue;
        for (int k = 0; k < views.views(); ++k) col[static_cast<std::size_t>(k)] = views.logprobs(k, t);
        delta[static_cast<std::size_t>(t)] = spread(col, statistic);
    }
    return delta;
}

double sequence_disagreement(const TeacherViewMatrix& views, Statistic statistic) {
    if (views.views() < 2) throw ConfigError("disagreement needs K >= 2 views");
    double msum = 0.0;
    for (double m : views.mask) msum += m;
    if (msum < 1.0) throw ConfigError("sequence disagreement needs at least one unmasked position");
    std::vector<double> means(static_cast<std::size_t>(views.views()));
    for (int k = 0; k < views.views(); ++k) {
        double s = 0.0;
        for (int t = 0; t < views.length(); ++t) s += views.mask[static_cast<std::size_t>(t)] * views.logprobs(k, t);
        means[static_cast<std::size_t>(k)] = s / msum;
    }
    return spread(means, statistic);
}

namespace {
// Strictly positive even when the exponent underflows.
double weight_of(double delta, double gamma) {
    return std::max(std::exp(-gamma * delta), std::numeric_limits<double>::min());
}
}  // namespace

std::vector<double> weights_from_disagreement(std::span<const double> delta, double agree_gamma, Granularity granularity,
                                              int T) {
    if (!(agree_gamma >= 0.0)) throw ConfigError("agree_gamma must be >= 0");
    for (double d : delta) {
        if (!(d >= 0.0)) throw ConfigError("disagreement values must be >= 0");
    }
    if (granularity == Granularity::sequence) {
        if (delta.size() != 1) throw Error(ErrorKind::dimension, "sequence granularity takes one disagreement value");
        return std::vector<double>(static_cast<std::size_t>(T), weight_of(delta[0], agree_gamma));
    }
    if (static_cast<int>(delta.size()) != T) throw Error(ErrorKind::dimension, "token disagreement length differs from T");
    std::vector<double> w(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) w[i] = weight_of(delta[i], agree_gamma);
    return w;
}

}  // namespace unisd
