// SPDX-License-Identifier: Apache-2.0
#include "unisd/acceptance.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "unisd/errors.hpp"
#include "unisd/evalkit.hpp"
#include "unisd/objectives.hpp"
#include "unisd/runner.hpp"
#include "unisd/trainer.hpp"

namespace unisd {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 4) {
    std::ostringstream ss;
    ss << std::setprecision(prec) << v;
    return ss.str();
}

std::vector<double> random_simplex(Rng& rng, int V) {
    std::vector<double> p(static_cast<std::size_t>(V));
    double s = 0.0;
    for (double& x : p) {
        x = -std::log(1.0 - uniform01(rng));
        s += x;
    }
    for (double& x : p) x /= s;
    return p;
}

// ---------------------------------------------------------------- 1

CriterionResult oracle_equivalence() {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(1, "acceptance-oracle"));
    double worst = 0.0;
    std::string where;
    for (DivergenceKind kind : {DivergenceKind::forward_kl, DivergenceKind::reverse_kl, DivergenceKind::weighted_jsd}) {
        for (double alpha : {0.1, 0.5, 0.9}) {
            for (int trial = 0; trial < 10000; ++trial) {
                const auto s = random_simplex(rng, 8);
                const auto t = random_simplex(rng, 8);
                const double err = std::abs(token_divergence(s, t, kind, alpha) - oracle_divergence(s, t, kind, alpha));
                if (err > worst) {
                    worst = err;
                    where = to_string(kind) + " alpha=" + num(alpha, 2);
                }
            }
        }
    }
    const double secs = since(t0);
    CriterionResult r{1, "oracle equivalence", worst <= 1e-10 && secs < 30.0, "", secs};
    r.detail = "90000 pairs, V=8, max |err| " + num(worst, 3) + (where.empty() ? "" : " (" + where + ")") + ", tol 1e-10, " +
               num(secs, 3) + "s < 30s";
    return r;
}

// ---------------------------------------------------------------- 2

struct GradFixture {
    PolicyParameters student;
    struct Item {
        Tokens prompt, completion;
        Matrix teacher_lp, teacher_hidden;
        std::vector<double> pos_lp, neg_lp, weights, mask;
        double seq_weight = 1.0;
    };
    std::vector<Item> items;
    std::optional<double> kappa;
    DistillConfig dc;
};

GradFixture make_grad_fixture() {
    ArchConfig arch;
    arch.d_model = 8;
    arch.layers = 1;
    arch.heads = 2;
    arch.window = 24;
    arch.mlp_ratio = 2;
    arch.init_std = 0.4;
    GradFixture fx;
    fx.student = init_policy(arch, 11);
    const PolicyParameters teacher = init_policy(arch, 12);
    Rng rng(derive_seed(2, "acceptance-grad"));
    const Vocab& v = Vocab::standard();
    const std::vector<std::pair<std::string, std::string>> rows = {{"rev: abc", "cba"}, {"rev: dgia", "aigd"}};
    std::vector<double> divs;
    for (const auto& [p, c] : rows) {
        GradFixture::Item it;
        it.prompt = v.encode(p);
        it.prompt.push_back(tok::sep);
        it.completion = with_eos(v.encode(c));
        Tokens demo = v.encode("rev: ab");
        demo.push_back(tok::sep);
        for (Token x : v.encode("ba\n")) demo.push_back(x);
        const ForcedPass tp = forced_pass(teacher, demo, it.prompt, it.completion);
        it.teacher_lp = tp.logprobs;
        it.teacher_hidden = tp.hidden;
        it.pos_lp = tp.token_logprobs;
        it.mask.assign(it.completion.size(), 1.0);
        it.mask.back() = 0.5;
        for (std::size_t t = 0; t < it.completion.size(); ++t) it.weights.push_back(0.3 + 0.7 * uniform01(rng));
        it.seq_weight = 0.5 + uniform01(rng);
        const ForcedPass sp = forced_pass(fx.student, {}, it.prompt, it.completion);
        // hinge anchors on either side of the student's own log-probs: every sign pattern
        // occurs, and no term sits near a kink
        for (std::size_t t = 0; t < it.completion.size(); ++t) {
            const double l = sp.token_logprobs[t];
            const double sp_sign = uniform01(rng) < 0.5 ? 1.0 : -1.0;
            const double sn_sign = uniform01(rng) < 0.5 ? 1.0 : -1.0;
            it.pos_lp[t] = l - sp_sign * (0.2 + 0.3 * uniform01(rng));
            it.neg_lp.push_back(l - sn_sign * (0.2 + 0.3 * uniform01(rng)));
        }
        for (int t = 0; t < sp.logprobs.rows; ++t) {
            divs.push_back(token_divergence_log(sp.logprobs.row(t), it.teacher_lp.row(t), DivergenceKind::weighted_jsd, 0.3));
        }
        fx.items.push_back(std::move(it));
    }
    std::sort(divs.begin(), divs.end());
    // a threshold midway between two observed divergences, so some tokens are clipped
    // and none sits within finite-difference reach of the kink
    const std::size_t mid = divs.size() / 2;
    fx.kappa = 0.5 * (divs[mid - 1] + divs[mid]);
    fx.dc.divergence = DivergenceKind::weighted_jsd;
    fx.dc.alpha = 0.3;
    fx.dc.kappa = fx.kappa;
    fx.dc.margin_gamma = 0.7;
    fx.dc.lambda_aux = 0.3;
    fx.dc.lambda_feat = 0.05;
    fx.dc.contrast_enabled = true;
    fx.dc.feat_enabled = true;
    return fx;
}

enum class GradTarget { clip, contrastive, feature, total };

ad::Var build_loss(ad::Tape& tape, const ModelBinding& m, const GradFixture& fx, GradTarget target) {
    std::vector<ad::Var> per;
    std::vector<double> coeffs;
    double wsum = 0.0;
    for (const auto& it : fx.items) wsum += it.seq_weight;
    for (const auto& it : fx.items) {
        const auto fwd = forward_completion(tape, m, {}, it.prompt, it.completion);
        std::vector<ad::Var> parts;
        std::vector<double> lam;
        if (target == GradTarget::clip || target == GradTarget::total) {
            const ad::Var d = loss::token_divergence(tape, fwd.logprobs, it.teacher_lp, fx.dc.divergence, fx.dc.alpha);
            parts.push_back(loss::reduce_distill(tape, loss::clip(tape, d, fx.dc.kappa), it.mask, it.weights));
            lam.push_back(1.0);
        }
        if (target == GradTarget::contrastive || target == GradTarget::total) {
            const ad::Var lt = ad::pick(tape, fwd.logprobs, it.completion);
            parts.push_back(loss::contrastive(tape, lt, it.pos_lp, it.neg_lp, it.mask, fx.dc.margin_gamma));
            lam.push_back(target == GradTarget::total ? fx.dc.lambda_aux : 1.0);
        }
        if (target == GradTarget::feature || target == GradTarget::total) {
            parts.push_back(loss::feature_matching(tape, fwd.hidden, it.teacher_hidden, it.mask));
            lam.push_back(target == GradTarget::total ? fx.dc.lambda_feat : 1.0);
        }
        per.push_back(ad::lincomb(tape, parts, lam));
        coeffs.push_back(it.seq_weight / wsum);
    }
    return ad::lincomb(tape, per, coeffs);
}

double loss_value(const PolicyParameters& p, const GradFixture& fx, GradTarget target) {
    ad::Tape tape;
    const ModelBinding m = bind(tape, p, false);
    return tape.scalar(build_loss(tape, m, fx, target));
}

// Central differences over every parameter; returns the norm-wise relative error.
double gradient_error(const GradFixture& fx, GradTarget target) {
    const LossGrad lg =
        grad_loss(fx.student, [&](ad::Tape& tape, const ModelBinding& m) { return build_loss(tape, m, fx, target); });
    constexpr double eps = 1e-5;
    PolicyParameters p = fx.student;
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < p.values.size(); ++i) {
        const double x = p.values[i];
        p.values[i] = x + eps;
        const double up = loss_value(p, fx, target);
        p.values[i] = x - eps;
        const double down = loss_value(p, fx, target);
        p.values[i] = x;
        const double fd = (up - down) / (2 * eps);
        diff2 += (fd - lg.grad[i]) * (fd - lg.grad[i]);
        a2 += lg.grad[i] * lg.grad[i];
        n2 += fd * fd;
    }
    const double denom = std::max(std::sqrt(std::max(a2, n2)), 1e-300);
    return std::sqrt(diff2) / denom;
}

CriterionResult gradient_correctness() {
    const auto t0 = Clock::now();
    const GradFixture fx = make_grad_fixture();
    double worst = 0.0;
    std::string parts;
    for (auto [target, name] : {std::pair{GradTarget::clip, "clip"}, std::pair{GradTarget::contrastive, "contrastive"},
                                std::pair{GradTarget::feature, "feature"}, std::pair{GradTarget::total, "total"}}) {
        const double e = gradient_error(fx, target);
        worst = std::max(worst, e);
        parts += std::string(parts.empty() ? "" : ", ") + name + " " + num(e, 3);
    }
    const double secs = since(t0);
    CriterionResult r{2, "gradient correctness", worst <= 1e-4 && secs < 120.0, "", secs};
    r.detail = std::to_string(fx.student.size()) + " params, eps 1e-5, rel err {" + parts + "}, tol 1e-4, " +
               num(secs, 3) + "s < 120s";
    return r;
}

// ---------------------------------------------------------------- 3

CriterionResult divergence_invariants() {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(3, "acceptance-invariants"));
    constexpr int trials = 10000;
    long fail_nonneg = 0, fail_bound = 0, fail_sym = 0, fail_mono = 0, fail_absent = 0;
    for (int i = 0; i < trials; ++i) {
        const int V = 2 + static_cast<int>(uniform_index(rng, 15));
        const auto s = random_simplex(rng, V);
        const auto t = random_simplex(rng, V);
        const double alpha = 0.001 + 0.998 * uniform01(rng);
        for (DivergenceKind k : {DivergenceKind::forward_kl, DivergenceKind::reverse_kl, DivergenceKind::weighted_jsd}) {
            if (!(token_divergence(s, t, k, alpha) >= 0.0)) ++fail_nonneg;
        }
        const double bound = -alpha * std::log(alpha) - (1 - alpha) * std::log(1 - alpha);
        if (!(token_divergence(s, t, DivergenceKind::weighted_jsd, alpha) <= bound + 1e-12)) ++fail_bound;
        if (std::abs(token_divergence(s, t, DivergenceKind::weighted_jsd, 0.5) -
                     token_divergence(t, s, DivergenceKind::weighted_jsd, 0.5)) > 1e-12) {
            ++fail_sym;
        }
    }
    for (int i = 0; i < trials; ++i) {
        const int T = 1 + static_cast<int>(uniform_index(rng, 12));
        std::vector<double> d(static_cast<std::size_t>(T)), m(d.size()), w(d.size());
        for (std::size_t j = 0; j < d.size(); ++j) {
            d[j] = 2.0 * uniform01(rng);
            m[j] = uniform01(rng) < 0.8 ? 1.0 : 0.0;
            w[j] = 0.01 + uniform01(rng);
        }
        m[0] = 1.0;
        const double k1 = 2.0 * uniform01(rng);
        const double k2 = k1 + 2.0 * uniform01(rng);
        std::vector<double> c1(d.size()), c2(d.size()), c0(d.size());
        for (std::size_t j = 0; j < d.size(); ++j) {
            c1[j] = clip_divergence(d[j], k1);
            c2[j] = clip_divergence(d[j], k2);
            c0[j] = clip_divergence(d[j], std::nullopt);
            if (c1[j] > c2[j]) ++fail_mono;
        }
        if (reduce_distill_loss(c1, m, w) > reduce_distill_loss(c2, m, w)) ++fail_mono;
        if (std::abs(reduce_distill_loss(c0, m, w) - reduce_distill_loss(d, m, w)) > 1e-12) ++fail_absent;
    }
    const double secs = since(t0);
    const long fails = fail_nonneg + fail_bound + fail_sym + fail_mono + fail_absent;
    CriterionResult r{3, "divergence invariants", fails == 0, "", secs};
    r.detail = "10000 trials per suite; failures: nonneg " + std::to_string(fail_nonneg) + ", jsd bound " +
               std::to_string(fail_bound) + ", symmetry " + std::to_string(fail_sym) + ", clip monotone " +
               std::to_string(fail_mono) + ", kappa-absent " + std::to_string(fail_absent);
    return r;
}

// ---------------------------------------------------------------- 4

ArchConfig small_arch() {
    ArchConfig a;
    a.d_model = 16;
    a.layers = 1;
    a.heads = 2;
    a.window = 64;
    a.mlp_ratio = 2;
    return a;
}

std::vector<std::vector<BatchItem>> fixed_batches(const TaskDataset& data, const TrainerConfig& cfg, int steps, int bs) {
    std::vector<std::vector<BatchItem>> out;
    for (int s = 0; s < steps; ++s) {
        std::vector<BatchItem> b;
        for (int i = 0; i < bs; ++i) {
            const Example& e = data.examples[static_cast<std::size_t>((s * bs + i) % static_cast<int>(data.examples.size()))];
            b.push_back({&e, contexts_for(e, data, cfg, s)});
        }
        out.push_back(std::move(b));
    }
    return out;
}

// Independent cross-entropy trainer: per-token pick and sum, plain Adam.
std::vector<double> reference_sft(PolicyParameters p, const std::vector<std::vector<BatchItem>>& batches, double lr) {
    std::vector<double> m(p.size(), 0.0), v(p.size(), 0.0), losses;
    long step = 0;
    for (const auto& batch : batches) {
        double total_tokens_check = 0.0;
        for (const auto& it : batch) {
            const ForcedPass fp = forced_pass(p, {}, render_prompt(*it.example), with_eos(it.example->gold));
            double s = 0.0;
            for (double x : fp.token_logprobs) s += x;
            total_tokens_check += -s / static_cast<double>(fp.token_logprobs.size());
        }
        const LossGrad lg = grad_loss(p, [&](ad::Tape& tape, const ModelBinding& model) {
            std::vector<ad::Var> terms;
            std::vector<double> coeffs;
            for (const auto& it : batch) {
                const Tokens target = with_eos(it.example->gold);
                const auto fwd = forward_completion(tape, model, {}, render_prompt(*it.example), target);
                terms.push_back(ad::sum(tape, ad::pick(tape, fwd.logprobs, target)));
                coeffs.push_back(-1.0 / (static_cast<double>(batch.size()) * static_cast<double>(target.size())));
            }
            return ad::lincomb(tape, terms, coeffs);
        });
        if (std::abs(lg.loss - total_tokens_check / static_cast<double>(batch.size())) > 1e-9) {
            throw Error(ErrorKind::numeric, "reference cross-entropy disagrees with its forced-pass check");
        }
        losses.push_back(lg.loss);
        ++step;
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = 0.9 * m[i] + 0.1 * lg.grad[i];
            v[i] = 0.999 * v[i] + 0.001 * lg.grad[i] * lg.grad[i];
            const double mh = m[i] / (1.0 - std::pow(0.9, static_cast<double>(step)));
            const double vh = v[i] / (1.0 - std::pow(0.999, static_cast<double>(step)));
            p.values[i] -= lr * mh / (std::sqrt(vh) + 1e-8);
        }
    }
    return losses;
}

std::vector<double> trainer_losses(const TrainerConfig& cfg, const PolicyParameters& start,
                                   const std::vector<std::vector<BatchItem>>& batches) {
    TrainState st = init_train_state(cfg, start);
    std::vector<double> out;
    for (const auto& b : batches) {
        auto [next, stats] = train_step(std::move(st), b, cfg);
        st = std::move(next);
        out.push_back(stats.skipped ? std::nan("") : stats.loss.total);
    }
    return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
    double w = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = std::abs(a[i] - b[i]);
        w = std::isnan(d) ? std::numeric_limits<double>::infinity() : std::max(w, d);
    }
    return w;
}

CriterionResult config_reductions() {
    const auto t0 = Clock::now();
    const TaskDataset data = generate_task(TaskKind::reverse, 64, 4);
    const PolicyParameters start = init_policy(small_arch(), 4);

    TrainerConfig sft = make_baseline_config(Mode::sft);
    sft.arch = small_arch();
    sft.learning_rate = 1e-3;
    const auto sft_batches = fixed_batches(data, sft, 50, 4);
    const double e_sft = max_abs_diff(trainer_losses(sft, start, sft_batches), reference_sft(start, sft_batches, 1e-3));

    TrainerConfig gkd = make_baseline_config(Mode::gkd_like);
    gkd.arch = small_arch();
    gkd.learning_rate = 1e-3;
    gkd.seed = 4;
    TrainerConfig off = TrainerConfig{};
    off.mode = Mode::unisd;
    off.arch = small_arch();
    off.learning_rate = 1e-3;
    off.seed = 4;
    off.distill.agreement.enabled = false;
    off.distill.kappa.reset();
    off.distill.contrast_enabled = false;
    off.distill.feat_enabled = false;
    off.distill.use_ema = false;
    const auto gkd_batches = fixed_batches(data, gkd, 50, 4);
    const double e_gkd = max_abs_diff(trainer_losses(gkd, start, gkd_batches), trainer_losses(off, start, gkd_batches));

    const double secs = since(t0);
    CriterionResult r{4, "configuration reductions", e_sft <= 1e-10 && e_gkd <= 1e-10, "", secs};
    r.detail = "50 steps each; sft vs reference CE max |dloss| " + num(e_sft, 3) + ", gkd_like vs unisd-all-off " +
               num(e_gkd, 3) + ", tol 1e-10";
    return r;
}

// ---------------------------------------------------------------- 5

double distance(const PolicyParameters& a, const PolicyParameters& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a.values[i] - b.values[i]) * (a.values[i] - b.values[i]);
    return std::sqrt(s);
}

CriterionResult ema_properties() {
    const auto t0 = Clock::now();
    const PolicyParameters s = init_policy(small_arch(), 5);
    const PolicyParameters t = init_policy(small_arch(), 6);
    const bool zero_exact = ema_update(t, s, 0.0).values == s.values;
    const bool one_exact = ema_update(t, s, 1.0).values == t.values;

    TrainerConfig cfg = make_baseline_config(Mode::unisd);
    cfg.arch = small_arch();
    cfg.learning_rate = 0.0;
    cfg.distill.use_ema = true;
    cfg.distill.beta = 0.9;
    const TaskDataset data = generate_task(TaskKind::reverse, 16, 5);
    TrainState st = init_train_state(cfg, s);
    st.ema_teacher = t;
    const auto batches = fixed_batches(data, cfg, 10, 2);
    double worst = 0.0;
    double prev = distance(*st.ema_teacher, st.student);
    for (const auto& b : batches) {
        auto [next, stats] = train_step(std::move(st), b, cfg);
        st = std::move(next);
        const double cur = distance(*st.ema_teacher, st.student);
        worst = std::max(worst, std::abs(cur / prev - cfg.distill.beta));
        prev = cur;
    }
    const bool student_fixed = st.student.values == s.values;
    const double secs = since(t0);
    CriterionResult r{5, "EMA properties", zero_exact && one_exact && student_fixed && worst <= 1e-9, "", secs};
    r.detail = std::string("beta=0 exact ") + (zero_exact ? "yes" : "no") + ", beta=1 exact " + (one_exact ? "yes" : "no") +
               ", lr=0 student fixed " + (student_fixed ? "yes" : "no") + ", max |ratio - beta| over 10 steps " +
               num(worst, 3) + ", tol 1e-9";
    return r;
}

// ---------------------------------------------------------------- 6

CriterionResult agreement_properties() {
    const auto t0 = Clock::now();
    Rng rng(derive_seed(6, "acceptance-agreement"));
    long fail_unit = 0, fail_delta = 0, fail_gamma = 0, fail_off = 0;
    for (int i = 0; i < 10000; ++i) {
        const int K = 2 + static_cast<int>(uniform_index(rng, 6));
        const int T = 1 + static_cast<int>(uniform_index(rng, 10));
        TeacherViewMatrix views;
        views.logprobs = Matrix(K, T);
        views.mask.assign(static_cast<std::size_t>(T), 1.0);
        for (int t = 0; t < T; ++t) {
            const double lp = -5.0 * uniform01(rng);
            for (int k = 0; k < K; ++k) views.logprobs(k, t) = lp;
        }
        const Statistic stat = uniform01(rng) < 0.5 ? Statistic::variance : Statistic::range;
        const double gamma = 10.0 * uniform01(rng);
        for (double w : weights_from_disagreement(token_disagreement(views, stat), gamma, Granularity::token, T)) {
            if (w != 1.0) ++fail_unit;
        }
        const double seq = sequence_disagreement(views, stat);
        for (double w : weights_from_disagreement(std::span<const double>(&seq, 1), gamma, Granularity::sequence, T)) {
            if (w != 1.0) ++fail_unit;
        }

        const double d1 = 5.0 * uniform01(rng);
        const double d2 = d1 + 5.0 * uniform01(rng);
        const double g2 = gamma + 5.0 * uniform01(rng);
        const std::vector<double> deltas{d1, d2};
        const auto w = weights_from_disagreement(deltas, gamma, Granularity::token, 2);
        if (w[0] < w[1] || (d2 > d1 && gamma > 0 && !(w[0] > w[1]))) ++fail_delta;
        const auto wg = weights_from_disagreement(deltas, g2, Granularity::token, 2);
        if (wg[0] > w[0] || wg[1] > w[1]) ++fail_gamma;

        std::vector<double> d(static_cast<std::size_t>(T)), m(d.size()), ones(d.size(), 1.0);
        for (std::size_t j = 0; j < d.size(); ++j) {
            d[j] = uniform01(rng);
            m[j] = uniform01(rng) < 0.7 ? 1.0 : 0.0;
        }
        m[0] = 1.0;
        double num_ = 0.0, den = 0.0;
        for (std::size_t j = 0; j < d.size(); ++j) {
            num_ += m[j] * d[j];
            den += m[j];
        }
        if (std::abs(reduce_distill_loss(d, m, ones) - num_ / den) > 1e-12) ++fail_off;
    }
    const double secs = since(t0);
    const long fails = fail_unit + fail_delta + fail_gamma + fail_off;
    CriterionResult r{6, "agreement properties", fails == 0, "", secs};
    r.detail = "10000 trials; failures: unit weights " + std::to_string(fail_unit) + ", monotone in delta " +
               std::to_string(fail_delta) + ", monotone in gamma " + std::to_string(fail_gamma) + ", off = mask mean " +
               std::to_string(fail_off) + ", tol 1e-12";
    return r;
}

// ---------------------------------------------------------------- 7-9

struct LearningSpec {
    std::vector<std::uint64_t> seeds;
    double accuracy_threshold = 0.9;
    double max_run_seconds = 900.0;
    int required = 4;
    nlohmann::json config;
    nlohmann::json reference_config;
};

LearningSpec load_learning_spec(const fs::path& path) {
    const nlohmann::json doc = nlohmann::json::parse(read_file(path));
    LearningSpec s;
    s.seeds = doc.at("seeds").get<std::vector<std::uint64_t>>();
    s.accuracy_threshold = doc.at("accuracy_threshold").get<double>();
    s.max_run_seconds = doc.at("max_run_seconds").get<double>();
    s.required = doc.at("required_seeds").get<int>();
    s.config = doc.at("config");
    s.reference_config = doc.at("reference_config");
    return s;
}

std::vector<CriterionResult> learning_criteria(const fs::path& spec_path) {
    const auto t0 = Clock::now();
    const LearningSpec spec = load_learning_spec(spec_path);
    int ok7 = 0, ok8 = 0, ok9 = 0;
    double slowest = 0.0;
    std::string d7, d8, d9;
    for (std::uint64_t seed : spec.seeds) {
        nlohmann::json a = spec.config, b = spec.reference_config;
        a["seed"] = seed;
        b["seed"] = seed;
        const ExperimentConfig ca = parse_config(a);
        const ExperimentConfig cb = parse_config(b);
        const auto [train, eval] = make_datasets(ca);
        const PolicyParameters base = build_base_policy(ca.trainer, train);
        const double untrained = task_accuracy(base, eval);

        auto t_run = Clock::now();
        const RunRecord ra = run_training(ca.trainer, train, &eval, &base);
        slowest = std::max(slowest, since(t_run));
        t_run = Clock::now();
        const RunRecord rb = run_training(cb.trainer, train, &eval, &base);
        slowest = std::max(slowest, since(t_run));

        const EvalReport& ea = ra.eval_reports.back();
        const EvalReport& eb = rb.eval_reports.back();
        const PairedComparison pc = paired_compare(ea.jsd_profile, eb.jsd_profile, ea.base_lp_profile, eb.base_lp_profile);
        ok7 += ea.accuracy >= spec.accuracy_threshold && ea.accuracy > untrained;
        ok8 += ea.retention_ppl <= eb.retention_ppl;
        ok9 += pc.frac_lower_jsd > 0.5;
        const std::string tag = (d7.empty() ? "" : "; ") + std::string("s") + std::to_string(seed) + " ";
        d7 += tag + num(ea.accuracy, 3) + " (untrained " + num(untrained, 3) + ")";
        d8 += tag + num(ea.retention_ppl, 4) + " vs " + num(eb.retention_ppl, 4);
        d9 += tag + num(pc.frac_lower_jsd, 3);
    }
    const double secs = since(t0);
    const std::string n = std::to_string(spec.seeds.size());
    std::vector<CriterionResult> out;
    out.push_back({7, "desk-scale learning", ok7 >= spec.required && slowest <= spec.max_run_seconds,
                   "held-out greedy accuracy >= " + num(spec.accuracy_threshold, 3) + " in " + std::to_string(ok7) + "/" +
                       n + " seeds (need " + std::to_string(spec.required) + "): " + d7 + "; slowest run " +
                       num(slowest, 4) + "s <= " + num(spec.max_run_seconds, 4) + "s",
                   secs});
    out.push_back({8, "retention trend", ok8 >= spec.required,
                   "EMA-run retention PPL <= SFT in " + std::to_string(ok8) + "/" + n + " seeds: " + d8, 0.0});
    out.push_back({9, "paired JSD trend", ok9 >= spec.required,
                   "frac_lower_jsd > 0.5 in " + std::to_string(ok9) + "/" + n + " seeds: " + d9, 0.0});
    return out;
}

// ---------------------------------------------------------------- 10

bool same_bytes(const fs::path& a, const fs::path& b) {
    return fs::exists(a) && fs::exists(b) && read_file(a) == read_file(b);
}

CriterionResult determinism(const fs::path& work_dir) {
    const auto t0 = Clock::now();
    nlohmann::json doc = {{"mode", "unisd_star"},
                          {"seed", 7},
                          {"task", {{"kind", "reverse"}, {"n_train", 200}, {"n_eval", 20}}},
                          {"base", {{"pretrain_steps", 5}, {"learning_rate", 3e-4}, {"batch_size", 8}}},
                          {"trainer", {{"steps", 10}, {"batch_size", 8}}},
                          {"eval", {{"every", 5}, {"examples", 20}}},
                          {"checkpoint_every", 5}};
    const ExperimentConfig cfg = parse_config(doc);
    fs::remove_all(work_dir);
    const auto t_run = Clock::now();
    const RunResult a = run_experiment(cfg, work_dir, "first");
    const double smoke = since(t_run);
    const RunResult b = run_experiment(cfg, work_dir, "second");
    std::vector<std::string> files = {"metrics.jsonl", "eval_reports.json", "config.json", "data/train.jsonl",
                                      "data/eval.jsonl"};
    for (const auto& entry : fs::directory_iterator(a.dir / "checkpoints")) {
        files.push_back("checkpoints/" + entry.path().filename().string());
    }
    std::string differing;
    for (const auto& f : files) {
        if (!same_bytes(a.dir / f, b.dir / f)) differing += (differing.empty() ? "" : ", ") + f;
    }
    const double secs = since(t0);
    CriterionResult r{10, "determinism", differing.empty(), "", secs};
    r.detail = std::to_string(files.size()) + " files compared byte-for-byte" +
               (differing.empty() ? std::string(", all identical") : ", differing: " + differing) +
               "; 10-step smoke run " + num(smoke, 3) + "s";
    return r;
}

}  // namespace

std::vector<CriterionResult> run_acceptance(const AcceptanceOptions& opts) {
    std::vector<CriterionResult> out;
    auto emit = [&](CriterionResult r) {
        if (opts.on_result) opts.on_result(r);
        out.push_back(std::move(r));
    };
    auto guarded = [&](int id, const char* name, auto&& fn) {
        try {
            emit(fn());
        } catch (const std::exception& e) {
            emit({id, name, false, std::string("exception: ") + e.what(), 0.0});
        }
    };
    guarded(1, "oracle equivalence", oracle_equivalence);
    guarded(2, "gradient correctness", gradient_correctness);
    guarded(3, "divergence invariants", divergence_invariants);
    guarded(4, "configuration reductions", config_reductions);
    guarded(5, "EMA properties", ema_properties);
    guarded(6, "agreement properties", agreement_properties);
    if (opts.learning) {
        try {
            for (auto& r : learning_criteria(opts.learning_config)) emit(std::move(r));
        } catch (const std::exception& e) {
            for (auto [id, name] : {std::pair{7, "desk-scale learning"}, std::pair{8, "retention trend"},
                                    std::pair{9, "paired JSD trend"}}) {
                emit({id, name, false, std::string("exception: ") + e.what(), 0.0});
            }
        }
    }
    const fs::path work = opts.work_dir.empty() ? fs::temp_directory_path() / "unisd-determinism" : opts.work_dir;
    guarded(10, "determinism", [&] { return determinism(work); });
    return out;
}

std::string format_result(const CriterionResult& r) {
    char head[96];
    std::snprintf(head, sizeof head, "[%s] %2d %-26s", r.pass ? "PASS" : "FAIL", r.id, r.name.c_str());
    return std::string(head) + " " + r.detail;
}

}  // namespace unisd
