// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "unisd/corpus.hpp"
#include "unisd/policy.hpp"

namespace unisd {

inline constexpr int kJsdHistogramBins = 10;

struct EvalReport {
    long step = 0;
    double accuracy = 0.0;
    double fit_ppl = 1.0;
    double retention_ppl = 1.0;
    double mean_token_jsd = 0.0;
    std::vector<long> jsd_histogram;  // kJsdHistogramBins equal bins over [0, ln 2]
    long n_examples = 0;
    std::uint64_t seed = 0;
    long retention_excluded = 0;
    bool fit_infinite = false;
    // per-prompt rollout statistics, in eval-split order, for paired comparisons
    std::vector<double> jsd_profile;
    std::vector<double> base_lp_profile;
};

struct PairedComparison {
    double frac_lower_jsd = 0.0;
    double frac_higher_base_lp = 0.0;
    double mean_diff_jsd = 0.0;
    double median_diff_jsd = 0.0;
    long ties_jsd = 0;
    long ties_base_lp = 0;
    long n = 0;
};

/// Greedy exact-match accuracy against the task checker.
double task_accuracy(const PolicyParameters& params, const TaskDataset& dataset, int max_len = 16);

/// exp(-pooled mean log p(gold_t)) over every gold token plus EOS, teacher-forced on the bare prompt.
double fit_perplexity(const PolicyParameters& params, const TaskDataset& dataset);

struct RolloutProfile {
    std::vector<double> mean_jsd;          // per prompt
    std::vector<double> mean_base_lp;      // per prompt
    double pooled_base_lp_sum = 0.0;
    long pooled_tokens = 0;
    long excluded = 0;                      // EOS-only completions
};

/// `samples` adapted rollouts per prompt, scored by both policies; per-prompt values are
/// sample means. Each prompt's sampling seeds depend only on (seed, prompt tokens), so
/// the results do not depend on prompt order.
RolloutProfile rollout_profile(const PolicyParameters& adapted, const PolicyParameters& base,
                               const std::vector<Tokens>& prompts, double temperature, std::uint64_t seed,
                               int max_len = 16, int samples = 1);

double retention_perplexity(const PolicyParameters& base, const PolicyParameters& adapted,
                            const std::vector<Tokens>& prompts, double temperature, std::uint64_t seed,
                            int max_len = 16, int samples = 1);

std::vector<double> token_jsd_profile(const PolicyParameters& adapted, const PolicyParameters& base,
                                      const std::vector<Tokens>& prompts, double temperature, std::uint64_t seed,
                                      int max_len = 16, int samples = 1);

/// Paired a-vs-b statistics with strict inequalities; diffs are a - b.
PairedComparison paired_compare(const std::vector<double>& a_jsd, const std::vector<double>& b_jsd,
                                const std::vector<double>& a_base_lp, const std::vector<double>& b_base_lp);

std::vector<Tokens> rendered_prompts(const TaskDataset& dataset, int limit = -1);

/// All metrics on up to `max_examples` examples of `dataset`.
EvalReport evaluate(const PolicyParameters& adapted, const PolicyParameters& base, const TaskDataset& dataset,
                    double temperature, std::uint64_t seed, int max_examples, int max_len = 16, int samples = 1);

}  // namespace unisd
