// SPDX-License-Identifier: Apache-2.0
#include "unisd/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "unisd/errors.hpp"

namespace unisd {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Error distribution_error(const std::string& what) { return Error(ErrorKind::distribution, what); }

void check_distribution(std::span<const double> p, const char* which) {
    if (p.empty()) throw distribution_error(std::string(which) + " distribution is empty");
    double s = 0.0;
    for (double v : p) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw distribution_error(std::string(which) + " has a negative or non-finite entry");
        s += v;
    }
    if (std::abs(s - 1.0) > 1e-6) throw distribution_error(std::string(which) + " does not sum to 1");
}

void check_alpha(DivergenceKind kind, double alpha) {
    if (kind == DivergenceKind::weighted_jsd && !(alpha > 0.0 && alpha < 1.0)) {
        throw ConfigError("weighted_jsd requires alpha strictly inside (0, 1)");
    }
}

double log_mix(double log_a, double a_lp, double log_b, double b_lp) {
    const double x = log_a + a_lp;
    const double y = log_b + b_lp;
    if (x == -kInf && y == -kInf) return -kInf;
    const double m = std::max(x, y);
    return m + std::log(std::exp(x - m) + std::exp(y - m));
}

void check_lengths(std::size_t n, std::span<const double> a, const char* what) {
    if (a.size() != n) throw Error(ErrorKind::dimension, std::string(what) + " length mismatch");
}

// Neumaier-compensated accumulator in long double.
struct CompensatedSum {
    long double sum = 0.0L;
    long double c = 0.0L;
    void add(long double x) {
        const long double t = sum + x;
        if (std::fabs(sum) >= std::fabs(x)) {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    long double value() const { return sum + c; }
};

}  // namespace

std::string to_string(DivergenceKind k) {
    switch (k) {
        case DivergenceKind::forward_kl: return "forward_kl";
        case DivergenceKind::reverse_kl: return "reverse_kl";
        case DivergenceKind::weighted_jsd: return "weighted_jsd";
    }
    return "?";
}

DivergenceKind parse_divergence(std::string_view s) {
    for (auto k : {DivergenceKind::forward_kl, DivergenceKind::reverse_kl, DivergenceKind::weighted_jsd}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unsupported divergence '" + std::string(s) + "'");
}

void validate(const DistillConfig& cfg) {
    check_alpha(cfg.divergence, cfg.alpha);
    if (cfg.kappa && !(*cfg.kappa > 0.0)) throw ConfigError("distill.kappa must be > 0 when present");
    if (!(cfg.margin_gamma >= 0.0)) throw ConfigError("distill.margin_gamma must be >= 0");
    if (!(cfg.lambda_aux >= 0.0)) throw ConfigError("distill.lambda_aux must be >= 0");
    if (!(cfg.lambda_feat >= 0.0)) throw ConfigError("distill.lambda_feat must be >= 0");
    if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0)) throw ConfigError("distill.beta must lie in [0, 1]");
    validate(cfg.agreement);
}

double token_divergence_log(std::span<const double> s, std::span<const double> lq, DivergenceKind kind, double alpha) {
    if (s.size() != lq.size() || s.empty()) throw distribution_error("distributions differ in length");
    check_alpha(kind, alpha);
    double d = 0.0;
    switch (kind) {
        case DivergenceKind::forward_kl:
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (lq[i] == -kInf) continue;
                if (s[i] == -kInf) return kInf;
                d += std::exp(lq[i]) * (lq[i] - s[i]);
            }
            break;
        case DivergenceKind::reverse_kl:
            for (std::size_t i = 0; i < s.size(); ++i) {
                if (s[i] == -kInf) continue;
                if (lq[i] == -kInf) return kInf;
                d += std::exp(s[i]) * (s[i] - lq[i]);
            }
            break;
        case DivergenceKind::weighted_jsd: {
            const double la = std::log(alpha);
            const double l1a = std::log1p(-alpha);
            double kt = 0.0, ks = 0.0;
            for (std::size_t i = 0; i < s.size(); ++i) {
                const double lm = log_mix(l1a, s[i], la, lq[i]);
                if (lq[i] != -kInf) kt += std::exp(lq[i]) * (lq[i] - lm);
                if (s[i] != -kInf) ks += std::exp(s[i]) * (s[i] - lm);
            }
            d = alpha * kt + (1.0 - alpha) * ks;
            break;
        }
    }
    return std::max(0.0, d);
}

double token_divergence(std::span<const double> student, std::span<const double> teacher, DivergenceKind kind,
                        double alpha) {
    check_distribution(student, "student");
    check_distribution(teacher, "teacher");
    if (student.size() != teacher.size()) throw distribution_error("distributions differ in length");
    std::vector<double> s(student.size()), q(teacher.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        s[i] = std::log(student[i]);
        q[i] = std::log(teacher[i]);
    }
    return token_divergence_log(s, q, kind, alpha);
}

double clip_divergence(double d, std::optional<double> kappa) {
    if (!(d >= 0.0)) throw distribution_error("divergence must be >= 0 before clipping");
    return kappa ? std::min(d, *kappa) : d;
}

double reduce_distill_loss(std::span<const double> clipped, std::span<const double> mask, std::span<const double> weights) {
    check_lengths(clipped.size(), mask, "mask");
    check_lengths(clipped.size(), weights, "weights");
    double num = 0.0, den = 0.0;
    for (std::size_t t = 0; t < clipped.size(); ++t) {
        if (weights[t] < 0.0) throw Error(ErrorKind::degenerate_weight, "negative reliability weight");
        const double mw = mask[t] * weights[t];
        if (mw == 0.0) continue;
        num += mw * clipped[t];
        den += mw;
    }
    if (!(den > 0.0)) throw Error(ErrorKind::degenerate_weight, "total reliability weight is zero");
    return num / den;
}

double contrastive_loss(std::span<const double> student_lp, std::span<const double> pos_lp,
                        std::span<const double> neg_lp, std::span<const double> mask, double margin) {
    check_lengths(student_lp.size(), pos_lp, "positive log-probs");
    check_lengths(student_lp.size(), neg_lp, "negative log-probs");
    check_lengths(student_lp.size(), mask, "mask");
    if (!(margin >= 0.0)) throw ConfigError("margin must be >= 0");
    double total = 0.0;
    for (std::size_t t = 0; t < student_lp.size(); ++t) {
        const double dp = std::abs(student_lp[t] - pos_lp[t]);
        const double dn = std::abs(student_lp[t] - neg_lp[t]);
        total += mask[t] * std::max(0.0, margin + dp - dn);
    }
    return total;
}

double feature_matching_loss(const FeatureTrace& student, const FeatureTrace& teacher, std::span<const double> mask) {
    if (!student.features.same_shape(teacher.features)) throw Error(ErrorKind::dimension, "feature traces differ in shape");
    check_lengths(static_cast<std::size_t>(student.features.rows), mask, "mask");
    double total = 0.0;
    for (int t = 0; t < student.features.rows; ++t) {
        double sq = 0.0;
        for (int j = 0; j < student.features.cols; ++j) {
            const double diff = student.features(t, j) - teacher.features(t, j);
            sq += diff * diff;
        }
        total += mask[static_cast<std::size_t>(t)] * sq;
    }
    return total;
}

TokenLossBreakdown total_loss(const LossParts& parts, const DistillConfig& cfg) {
    TokenLossBreakdown b;
    b.per_token_divergence = parts.per_token_divergence;
    b.distill = parts.distill;
    b.contrastive = cfg.contrast_enabled ? parts.contrastive : 0.0;
    b.feature = cfg.feat_enabled ? parts.feature : 0.0;
    for (double v : {b.distill, b.contrastive, b.feature}) {
        if (!std::isfinite(v)) throw NumericError("non-finite loss component");
        if (v < 0.0) throw NumericError("negative loss component");
    }
    b.total = b.distill;
    if (cfg.contrast_enabled) b.total += cfg.lambda_aux * b.contrastive;
    if (cfg.feat_enabled) b.total += cfg.lambda_feat * b.feature;
    return b;
}

double oracle_divergence(std::span<const double> student, std::span<const double> teacher, DivergenceKind kind,
                         double alpha) {
    check_distribution(student, "student");
    check_distribution(teacher, "teacher");
    if (student.size() != teacher.size()) throw distribution_error("distributions differ in length");
    check_alpha(kind, alpha);
    // KL(a || b) = sum a log(a / b) with 0 log 0 = 0.
    const auto kl = [](std::span<const long double> a, std::span<const long double> b) -> long double {
        CompensatedSum acc;
        for (std::size_t i = 0; i < a.size(); ++i) {
            if (a[i] == 0.0L) continue;
            if (b[i] == 0.0L) return std::numeric_limits<long double>::infinity();
            acc.add(a[i] * (std::log(a[i]) - std::log(b[i])));
        }
        return acc.value();
    };
    std::vector<long double> p(student.begin(), student.end());
    std::vector<long double> q(teacher.begin(), teacher.end());
    long double d = 0.0L;
    switch (kind) {
        case DivergenceKind::forward_kl: d = kl(q, p); break;
        case DivergenceKind::reverse_kl: d = kl(p, q); break;
        case DivergenceKind::weighted_jsd: {
            const long double a = alpha;
            std::vector<long double> m(p.size());
            for (std::size_t i = 0; i < p.size(); ++i) m[i] = (1.0L - a) * p[i] + a * q[i];
            d = a * kl(q, m) + (1.0L - a) * kl(p, m);
            break;
        }
    }
    return static_cast<double>(std::max(0.0L, d));
}

namespace loss {

ad::Var token_divergence(ad::Tape& t, ad::Var student_logprobs, const Matrix& teacher, DivergenceKind kind, double alpha) {
    const Matrix& S = t.value(student_logprobs);
    if (!S.same_shape(teacher)) throw Error(ErrorKind::dimension, "student and teacher log-prob matrices differ in shape");
    check_alpha(kind, alpha);
    Matrix D(S.rows, 1);
    for (int r = 0; r < S.rows; ++r) D(r, 0) = token_divergence_log(S.row(r), teacher.row(r), kind, alpha);
    return t.record(std::move(D), t.requires_grad(student_logprobs),
                    [student_logprobs, teacher, kind, alpha](ad::Tape& tp, ad::Var self) {
                        const Matrix& G = tp.grad(self);
                        const Matrix& S = tp.value(student_logprobs);
                        Matrix& GS = tp.grad(student_logprobs);
                        const double la = std::log(alpha);
                        const double l1a = std::log1p(-alpha);
                        for (int r = 0; r < S.rows; ++r) {
                            const double g = G(r, 0);
                            if (g == 0.0) continue;
                            for (int j = 0; j < S.cols; ++j) {
                                const double s = S(r, j);
                                const double lq = teacher(r, j);
                                const double p = std::exp(s);
                                double d = 0.0;
                                switch (kind) {
                                    case DivergenceKind::forward_kl: d = -std::exp(lq); break;
                                    case DivergenceKind::reverse_kl: d = p == 0.0 ? 0.0 : p * (s - lq + 1.0); break;
                                    case DivergenceKind::weighted_jsd:
                                        d = p == 0.0 ? 0.0 : p * (1.0 - alpha) * (s - log_mix(l1a, s, la, lq));
                                        break;
                                }
                                GS(r, j) += g * d;
                            }
                        }
                    });
}

ad::Var clip(ad::Tape& t, ad::Var d, std::optional<double> kappa) {
    if (!kappa) return d;
    const double k = *kappa;
    Matrix C = t.value(d);
    for (double& v : C.data) v = std::min(v, k);
    return t.record(std::move(C), t.requires_grad(d), [d, k](ad::Tape& tp, ad::Var self) {
        const Matrix& G = tp.grad(self);
        const Matrix& X = tp.value(d);
        Matrix& g = tp.grad(d);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            if (X.data[i] < k) g.data[i] += G.data[i];
        }
    });
}

ad::Var reduce_distill(ad::Tape& t, ad::Var clipped, std::span<const double> mask, std::span<const double> weights) {
    const Matrix& D = t.value(clipped);
    const double value = reduce_distill_loss(D.data, mask, weights);
    double den = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) den += mask[i] * weights[i];
    std::vector<double> coeff(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) coeff[i] = mask[i] * weights[i] / den;
    return t.record(Matrix(1, 1, value), t.requires_grad(clipped), [clipped, coeff = std::move(coeff)](ad::Tape& tp, ad::Var self) {
        const double g0 = tp.grad(self).data[0];
        Matrix& g = tp.grad(clipped);
        for (std::size_t i = 0; i < coeff.size(); ++i) g.data[i] += g0 * coeff[i];
    });
}

ad::Var contrastive(ad::Tape& t, ad::Var student_token_lp, std::span<const double> pos_lp, std::span<const double> neg_lp,
                    std::span<const double> mask, double margin) {
    const Matrix& L = t.value(student_token_lp);
    const double value = contrastive_loss(L.data, pos_lp, neg_lp, mask, margin);
    std::vector<double> coeff(L.data.size(), 0.0);
    const auto sign = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
    for (std::size_t i = 0; i < coeff.size(); ++i) {
        const double dp = L.data[i] - pos_lp[i];
        const double dn = L.data[i] - neg_lp[i];
        if (mask[i] != 0.0 && margin + std::abs(dp) - std::abs(dn) > 0.0) coeff[i] = mask[i] * (sign(dp) - sign(dn));
    }
    return t.record(Matrix(1, 1, value), t.requires_grad(student_token_lp),
                    [student_token_lp, coeff = std::move(coeff)](ad::Tape& tp, ad::Var self) {
                        const double g0 = tp.grad(self).data[0];
                        Matrix& g = tp.grad(student_token_lp);
                        for (std::size_t i = 0; i < coeff.size(); ++i) g.data[i] += g0 * coeff[i];
                    });
}

ad::Var feature_matching(ad::Tape& t, ad::Var student_hidden, const Matrix& teacher_hidden, std::span<const double> mask) {
    const Matrix& H = t.value(student_hidden);
    const double value = feature_matching_loss(FeatureTrace{H}, FeatureTrace{teacher_hidden}, mask);
    std::vector<double> m(mask.begin(), mask.end());
    return t.record(Matrix(1, 1, value), t.requires_grad(student_hidden),
                    [student_hidden, teacher_hidden, m = std::move(m)](ad::Tape& tp, ad::Var self) {
                        const double g0 = tp.grad(self).data[0];
                        const Matrix& H = tp.value(student_hidden);
                        Matrix& g = tp.grad(student_hidden);
                        for (int r = 0; r < H.rows; ++r) {
                            const double c = 2.0 * g0 * m[static_cast<std::size_t>(r)];
                            if (c == 0.0) continue;
                            for (int j = 0; j < H.cols; ++j) g(r, j) += c * (H(r, j) - teacher_hidden(r, j));
                        }
                    });
}

ad::Var cross_entropy(ad::Tape& t, ad::Var logprobs, std::span<const Token> targets, std::span<const double> mask) {
    ad::Var picked = ad::pick(t, logprobs, targets);
    check_lengths(targets.size(), mask, "mask");
    double den = 0.0;
    for (double m : mask) den += m;
    if (!(den > 0.0)) throw Error(ErrorKind::degenerate_weight, "cross-entropy mask is empty");
    const Matrix& P = t.value(picked);
    double value = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) value -= mask[i] * P.data[i];
    value /= den;
    std::vector<double> coeff(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) coeff[i] = -mask[i] / den;
    return t.record(Matrix(1, 1, value), t.requires_grad(picked), [picked, coeff = std::move(coeff)](ad::Tape& tp, ad::Var self) {
        const double g0 = tp.grad(self).data[0];
        Matrix& g = tp.grad(picked);
        for (std::size_t i = 0; i < coeff.size(); ++i) g.data[i] += g0 * coeff[i];
    });
}

}  // namespace loss

}  // namespace unisd
