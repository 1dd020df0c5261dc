// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "unisd/agreement.hpp"
#include "unisd/autodiff.hpp"
#include "unisd/policy.hpp"

namespace unisd {

enum class DivergenceKind { forward_kl, reverse_kl, weighted_jsd };
std::string to_string(DivergenceKind k);
DivergenceKind parse_divergence(std::string_view s);

struct DistillConfig {
    DivergenceKind divergence = DivergenceKind::weighted_jsd;
    double alpha = 0.5;             // teacher weight inside the weighted JSD
    std::optional<double> kappa;    // per-token clip threshold; absent = no clipping
    double margin_gamma = 1.0;      // contrastive margin (nats)
    double lambda_aux = 0.1;
    double lambda_feat = 0.05;
    bool use_ema = false;
    double beta = 0.99;
    AgreementConfig agreement;
    bool contrast_enabled = false;
    bool feat_enabled = false;
};

void validate(const DistillConfig& cfg);

struct TokenLossBreakdown {
    std::vector<double> per_token_divergence;
    double distill = 0.0;
    double contrastive = 0.0;
    double feature = 0.0;
    double total = 0.0;
};

/// Divergence between two probability vectors on the same vocabulary.
/// weighted_jsd: a*KL(t||M) + (1-a)*KL(s||M), M = (1-a)*s + a*t.
/// forward_kl: KL(t||s). reverse_kl: KL(s||t). 0*log 0 = 0; a KL with mass where the
/// other side has none is +inf.
double token_divergence(std::span<const double> student, std::span<const double> teacher, DivergenceKind kind,
                        double alpha);
/// Same contract on log-probability vectors; this is the path the trainer uses.
double token_divergence_log(std::span<const double> student_lp, std::span<const double> teacher_lp, DivergenceKind kind,
                            double alpha);

double clip_divergence(double d, std::optional<double> kappa);

/// sum(m*w*D) / sum(m*w). Throws a degenerate-weight error when sum(m*w) <= 0.
double reduce_distill_loss(std::span<const double> clipped, std::span<const double> mask, std::span<const double> weights);

/// sum_t m_t * max(0, margin + |l_t - l+_t| - |l_t - l-_t|).
double contrastive_loss(std::span<const double> student_lp, std::span<const double> pos_lp,
                        std::span<const double> neg_lp, std::span<const double> mask, double margin);

/// sum_t m_t * ||f_t - f*_t||^2.
double feature_matching_loss(const FeatureTrace& student, const FeatureTrace& teacher, std::span<const double> mask);

struct LossParts {
    std::vector<double> per_token_divergence;
    double distill = 0.0;
    double contrastive = 0.0;
    double feature = 0.0;
};

/// distill + lambda_aux*contrastive + lambda_feat*feature, with disabled parts zeroed.
TokenLossBreakdown total_loss(const LossParts& parts, const DistillConfig& cfg);

/// Extended-precision reference for token_divergence (long double, compensated sums).
/// Intended for V <= 16.
double oracle_divergence(std::span<const double> student, std::span<const double> teacher, DivergenceKind kind,
                         double alpha);

// ---------------------------------------------------------------- taped losses
// Teacher-side inputs are plain matrices, so no gradient reaches them.
namespace loss {

/// Per-row divergence between student log-softmax rows and constant teacher log-probs; T x 1.
ad::Var token_divergence(ad::Tape& t, ad::Var student_logprobs, const Matrix& teacher_logprobs, DivergenceKind kind,
                         double alpha);
ad::Var clip(ad::Tape& t, ad::Var d, std::optional<double> kappa);
ad::Var reduce_distill(ad::Tape& t, ad::Var clipped, std::span<const double> mask, std::span<const double> weights);
ad::Var contrastive(ad::Tape& t, ad::Var student_token_lp, std::span<const double> pos_lp, std::span<const double> neg_lp,
                    std::span<const double> mask, double margin);
ad::Var feature_matching(ad::Tape& t, ad::Var student_hidden, const Matrix& teacher_hidden, std::span<const double> mask);
/// Negative mean of the picked log-probs over masked positions.
ad::Var cross_entropy(ad::Tape& t, ad::Var logprobs, std::span<const Token> targets, std::span<const double> mask);

}  // namespace loss

}  // namespace unisd
