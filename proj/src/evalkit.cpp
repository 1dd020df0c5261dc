// SPDX-License-Identifier: Apache-2.0
#include "unisd/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unisd/errors.hpp"
#include "unisd/objectives.hpp"
#include "unisd/rng.hpp"

namespace unisd {

namespace {

std::uint64_t prompt_seed(std::uint64_t seed, const Tokens& prompt) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (Token t : prompt) {
        h ^= static_cast<std::uint64_t>(t);
        h *= 0x100000001b3ULL;
    }
    return derive_seed(seed, "eval-rollout", h);
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Tokens strip_eos(Tokens t) {
    if (!t.empty() && t.back() == tok::eos) t.pop_back();
    return t;
}

}  // namespace

std::vector<Tokens> rendered_prompts(const TaskDataset& dataset, int limit) {
    std::vector<Tokens> out;
    for (const auto& e : dataset.examples) {
        if (limit >= 0 && static_cast<int>(out.size()) >= limit) break;
        out.push_back(render_prompt(e));
    }
    return out;
}

double task_accuracy(const PolicyParameters& params, const TaskDataset& dataset, int max_len) {
    if (dataset.examples.empty()) return 0.0;
    long correct = 0;
    for (const auto& e : dataset.examples) {
        const Trajectory tr = sample_completion(params, render_prompt(e), 0.0, max_len, 0);
        if (check_answer(e.task_kind, e.prompt, strip_eos(tr.completion))) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(dataset.examples.size());
}

double fit_perplexity(const PolicyParameters& params, const TaskDataset& dataset) {
    double sum = 0.0;
    long count = 0;
    for (const auto& e : dataset.examples) {
        if (e.gold.empty()) throw ConfigError("example " + e.id + " has an empty gold completion");
        Trajectory tr;
        tr.prompt = render_prompt(e);
        tr.completion = with_eos(e.gold);
        const auto lp = score_tokens(params, {}, tr);
        for (double v : lp) sum += v;
        count += static_cast<long>(lp.size());
    }
    if (count == 0) return 1.0;
    return std::exp(-sum / static_cast<double>(count));
}

RolloutProfile rollout_profile(const PolicyParameters& adapted, const PolicyParameters& base,
                               const std::vector<Tokens>& prompts, double temperature, std::uint64_t seed, int max_len,
                               int samples) {
    if (adapted.arch.vocab != base.arch.vocab) throw Error(ErrorKind::dimension, "adapted and base vocabularies differ");
    if (samples < 1) throw ConfigError("samples per prompt must be >= 1");
    RolloutProfile out;
    for (const Tokens& p : prompts) {
        const std::uint64_t ps = prompt_seed(seed, p);
        double jsd_mean = 0.0, lp_mean = 0.0;
        for (int k = 0; k < samples; ++k) {
            const std::uint64_t s = k == 0 ? ps : derive_seed(ps, "sample", static_cast<std::uint64_t>(k));
            const Trajectory tr = sample_completion(adapted, p, temperature, max_len, s);
            const ForcedPass a = forced_pass(adapted, {}, tr.prompt, tr.completion);
            const ForcedPass b = forced_pass(base, {}, tr.prompt, tr.completion);
            double jsd = 0.0, lp = 0.0;
            for (int t = 0; t < tr.length(); ++t) {
                jsd += token_divergence_log(a.logprobs.row(t), b.logprobs.row(t), DivergenceKind::weighted_jsd, 0.5);
                lp += b.token_logprobs[static_cast<std::size_t>(t)];
            }
            jsd_mean += jsd / tr.length() / samples;
            lp_mean += lp / tr.length() / samples;
            if (tr.length() == 1 && tr.completion[0] == tok::eos) {
                ++out.excluded;
                continue;
            }
            out.pooled_base_lp_sum += lp;
            out.pooled_tokens += tr.length();
        }
        out.mean_jsd.push_back(jsd_mean);
        out.mean_base_lp.push_back(lp_mean);
    }
    return out;
}

double retention_perplexity(const PolicyParameters& base, const PolicyParameters& adapted,
                            const std::vector<Tokens>& prompts, double temperature, std::uint64_t seed, int max_len,
                            int samples) {
    const RolloutProfile r = rollout_profile(adapted, base, prompts, temperature, seed, max_len, samples);
    if (r.pooled_tokens == 0) return 1.0;
    return std::exp(-r.pooled_base_lp_sum / static_cast<double>(r.pooled_tokens));
}

std::vector<double> token_jsd_profile(const PolicyParameters& adapted, const PolicyParameters& base,
                                      const std::vector<Tokens>& prompts, double temperature, std::uint64_t seed,
                                      int max_len, int samples) {
    return rollout_profile(adapted, base, prompts, temperature, seed, max_len, samples).mean_jsd;
}

PairedComparison paired_compare(const std::vector<double>& a_jsd, const std::vector<double>& b_jsd,
                                const std::vector<double>& a_base_lp, const std::vector<double>& b_base_lp) {
    if (a_jsd.size() != b_jsd.size() || a_base_lp.size() != b_base_lp.size() || a_jsd.size() != a_base_lp.size()) {
        throw Error(ErrorKind::pairing, "paired profiles differ in length");
    }
    PairedComparison pc;
    pc.n = static_cast<long>(a_jsd.size());
    if (pc.n == 0) return pc;
    long lower = 0, higher = 0;
    std::vector<double> diffs(a_jsd.size());
    double dsum = 0.0;
    for (std::size_t i = 0; i < a_jsd.size(); ++i) {
        diffs[i] = a_jsd[i] - b_jsd[i];
        dsum += diffs[i];
        if (a_jsd[i] < b_jsd[i]) {
            ++lower;
        } else if (a_jsd[i] == b_jsd[i]) {
            ++pc.ties_jsd;
        }
        if (a_base_lp[i] > b_base_lp[i]) {
            ++higher;
        } else if (a_base_lp[i] == b_base_lp[i]) {
            ++pc.ties_base_lp;
        }
    }
    const double n = static_cast<double>(pc.n);
    pc.frac_lower_jsd = static_cast<double>(lower) / n;
    pc.frac_higher_base_lp = static_cast<double>(higher) / n;
    pc.mean_diff_jsd = dsum / n;
    pc.median_diff_jsd = median(diffs);
    return pc;
}

EvalReport evaluate(const PolicyParameters& adapted, const PolicyParameters& base, const TaskDataset& dataset,
                    double temperature, std::uint64_t seed, int max_examples, int max_len, int samples) {
    TaskDataset subset;
    subset.split = dataset.split;
    subset.seed = dataset.seed;
    subset.alphabet = dataset.alphabet;
    const std::size_t n = std::min(dataset.examples.size(), static_cast<std::size_t>(std::max(0, max_examples)));
    subset.examples.assign(dataset.examples.begin(), dataset.examples.begin() + static_cast<std::ptrdiff_t>(n));

    EvalReport r;
    r.seed = seed;
    r.n_examples = static_cast<long>(n);
    r.accuracy = task_accuracy(adapted, subset, max_len);
    r.fit_ppl = fit_perplexity(adapted, subset);
    r.fit_infinite = !std::isfinite(r.fit_ppl);
    const RolloutProfile prof = rollout_profile(adapted, base, rendered_prompts(subset), temperature, seed, max_len, samples);
    r.retention_excluded = prof.excluded;
    r.retention_ppl = prof.pooled_tokens == 0 ? 1.0 : std::exp(-prof.pooled_base_lp_sum / static_cast<double>(prof.pooled_tokens));
    r.jsd_profile = prof.mean_jsd;
    r.base_lp_profile = prof.mean_base_lp;
    r.jsd_histogram.assign(kJsdHistogramBins, 0);
    double s = 0.0;
    for (double v : prof.mean_jsd) {
        s += v;
        const int bin = std::clamp(static_cast<int>(v / std::log(2.0) * kJsdHistogramBins), 0, kJsdHistogramBins - 1);
        ++r.jsd_histogram[static_cast<std::size_t>(bin)];
    }
    r.mean_token_jsd = prof.mean_jsd.empty() ? 0.0 : s / static_cast<double>(prof.mean_jsd.size());
    return r;
}

}  // namespace unisd
