// SPDX-License-Identifier: Apache-2.0
#include "unisd/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include <json.hpp>

#include "unisd/agreement.hpp"
#include "unisd/errors.hpp"

namespace unisd {

std::string to_string(Mode m) {
    switch (m) {
        case Mode::unisd: return "unisd";
        case Mode::unisd_star: return "unisd_star";
        case Mode::sft: return "sft";
        case Mode::sdft: return "sdft";
        case Mode::gkd_like: return "gkd_like";
    }
    return "unisd";
}

std::string to_string(OptimizerKind o) { return o == OptimizerKind::adam ? "adam" : "sgd"; }
std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }
std::string to_string(Health h) { return h == Health::ok ? "ok" : "unhealthy"; }

Mode parse_mode(std::string_view s) {
    if (s == "unisd") return Mode::unisd;
    if (s == "unisd_star") return Mode::unisd_star;
    if (s == "sft") return Mode::sft;
    if (s == "sdft") return Mode::sdft;
    if (s == "gkd_like") return Mode::gkd_like;
    throw ConfigError("unsupported mode '" + std::string(s) + "'");
}

LrSchedule parse_lr_schedule(std::string_view s) {
    if (s == "constant") return LrSchedule::constant;
    if (s == "cosine") return LrSchedule::cosine;
    throw ConfigError("unsupported lr_schedule '" + std::string(s) + "'");
}

OptimizerKind parse_optimizer(std::string_view s) {
    if (s == "adam") return OptimizerKind::adam;
    if (s == "sgd") return OptimizerKind::sgd;
    throw ConfigError("unsupported optimizer '" + std::string(s) + "'");
}

void validate(const TrainerConfig& cfg) {
    validate(cfg.distill);
    validate(cfg.arch);
    if (cfg.steps < 0) throw ConfigError("trainer.steps must be >= 0");
    if (cfg.batch_size < 1) throw ConfigError("trainer.batch_size must be >= 1");
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) throw ConfigError("trainer.learning_rate must be >= 0");
    if (!(cfg.temperature >= 0.0) || !std::isfinite(cfg.temperature)) throw ConfigError("trainer.temperature must be >= 0");
    if (cfg.max_completion < 1) throw ConfigError("trainer.max_completion must be >= 1");
    if (cfg.eval_every < 0) throw ConfigError("eval.every must be >= 0");
    if (cfg.eval_examples < 0) throw ConfigError("eval.examples must be >= 0");
    if (cfg.eval_samples < 1) throw ConfigError("eval.samples must be >= 1");
    if (!(cfg.eval_temperature >= 0.0) || !std::isfinite(cfg.eval_temperature)) throw ConfigError("eval.temperature must be >= 0");
    if (cfg.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (cfg.base.pretrain_steps < 0) throw ConfigError("base.pretrain_steps must be >= 0");
    if (cfg.base.batch_size < 1) throw ConfigError("base.batch_size must be >= 1");
    if (!(cfg.base.learning_rate >= 0.0)) throw ConfigError("base.learning_rate must be >= 0");
}

TrainerConfig make_baseline_config(Mode name) {
    TrainerConfig cfg;
    cfg.mode = name;
    DistillConfig& d = cfg.distill;
    switch (name) {
        case Mode::unisd:
        case Mode::gkd_like:
            d.divergence = DivergenceKind::weighted_jsd;
            d.alpha = 0.5;
            break;
        case Mode::sdft:
            d.divergence = DivergenceKind::reverse_kl;
            break;
        case Mode::sft:
            cfg.temperature = 0.0;
            break;
        case Mode::unisd_star:
            d.divergence = DivergenceKind::weighted_jsd;
            d.alpha = 0.5;
            d.kappa = 1.0;
            d.margin_gamma = 1.0;
            d.lambda_aux = 0.1;
            d.lambda_feat = 1e-4;
            d.use_ema = true;
            d.beta = 0.9999;
            d.contrast_enabled = true;
            d.feat_enabled = true;
            d.agreement.enabled = true;
            d.agreement.granularity = Granularity::token;
            d.agreement.statistic = Statistic::variance;
            d.agreement.agree_gamma = 0.1;
            d.agreement.K = 3;
            d.agreement.strategy = ContextStrategy::retrieval;
            break;
    }
    return cfg;
}

TrainState init_train_state(const TrainerConfig& cfg, const PolicyParameters& start) {
    check_invariants(start);
    TrainState s{.student = start,
                 .ema_teacher = std::nullopt,
                 .base_snapshot = start,
                 .optimizer = {},
                 .step = 0,
                 .rollout_rng = Rng(derive_seed(cfg.seed, "rollout")),
                 .data_rng = Rng(derive_seed(cfg.seed, "data")),
                 .context_rng = Rng(derive_seed(cfg.seed, "contexts"))};
    if (cfg.distill.use_ema && cfg.mode != Mode::sft) s.ema_teacher = start;
    s.optimizer.m.assign(start.size(), 0.0);
    s.optimizer.v.assign(start.size(), 0.0);
    return s;
}

ContextSet contexts_for(const Example& example, const TaskDataset& pool, const TrainerConfig& cfg, long step) {
    const AgreementConfig& a = cfg.distill.agreement;
    if (!a.enabled || cfg.mode == Mode::sft) {
        ContextSet cs;
        cs.primary = demonstration(example);
        cs.strategy = a.strategy;
        return cs;
    }
    return build_contexts(example, pool, a.strategy, a.K, derive_seed(cfg.seed, "contexts", static_cast<std::uint64_t>(step)));
}

double scheduled_lr(const TrainerConfig& cfg, long step) {
    if (cfg.lr_schedule == LrSchedule::constant || cfg.steps <= 0) return cfg.learning_rate;
    const double frac = std::clamp(static_cast<double>(step) / cfg.steps, 0.0, 1.0);
    return cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

namespace {

void apply_update(PolicyParameters& p, OptimizerState& opt, const std::vector<double>& g, const TrainerConfig& cfg,
                  long step) {
    const double lr = scheduled_lr(cfg, step);
    if (cfg.optimizer == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < g.size(); ++i) p.values[i] -= lr * g[i];
        ++opt.step;
        return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++opt.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    for (std::size_t i = 0; i < g.size(); ++i) {
        opt.m[i] = b1 * opt.m[i] + (1.0 - b1) * g[i];
        opt.v[i] = b2 * opt.v[i] + (1.0 - b2) * g[i] * g[i];
        const double mh = opt.m[i] / c1;
        const double vh = opt.v[i] / c2;
        p.values[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
}

struct Prepared {
    Trajectory trajectory;
    ForcedPass teacher;
    std::vector<double> token_weights;
    double sequence_weight = 1.0;
    std::vector<double> neg_lp;
    bool has_negative = false;
};

struct Tally {
    double distill = 0.0, contrastive = 0.0, feature = 0.0;
    long clipped = 0, tokens = 0;
};

StepStats finish_skip(StepStats st, const std::string& why) {
    st.skipped = true;
    st.skip_reason = why;
    return st;
}

}  // namespace

std::pair<TrainState, StepStats> train_step(TrainState state, const std::vector<BatchItem>& batch, const TrainerConfig& cfg) {
    if (batch.empty()) throw ConfigError("train_step needs a non-empty batch");
    StepStats st;
    st.step = state.step;
    const DistillConfig& dc = cfg.distill;
    const double B = static_cast<double>(batch.size());

    LossGrad lg;
    try {
        if (cfg.mode == Mode::sft) {
            double len = 0.0;
            for (const auto& item : batch) len += static_cast<double>(item.example->gold.size() + 1);
            st.mean_rollout_length = len / B;
            lg = grad_loss(state.student, [&](ad::Tape& tape, const ModelBinding& model) {
                std::vector<ad::Var> terms;
                std::vector<double> coeffs;
                for (const auto& item : batch) {
                    const Tokens target = with_eos(item.example->gold);
                    const auto fwd = forward_completion(tape, model, {}, render_prompt(*item.example), target);
                    const std::vector<double> mask(target.size(), 1.0);
                    terms.push_back(loss::cross_entropy(tape, fwd.logprobs, target, mask));
                    coeffs.push_back(1.0 / B);
                }
                return ad::lincomb(tape, terms, coeffs);
            });
            st.loss.distill = lg.loss;
            st.loss.total = lg.loss;
        } else {
            const PolicyParameters& teacher = state.ema_teacher ? *state.ema_teacher : state.student;
            std::vector<Prepared> prep(batch.size());
            double wseq_sum = 0.0, wsum = 0.0, wcount = 0.0, len = 0.0;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                const Example& e = *batch[i].example;
                const ContextSet& cs = batch[i].contexts;
                Prepared& p = prep[i];
                const std::uint64_t rs = state.rollout_rng();
                p.trajectory = sample_completion(state.student, render_prompt(e), cfg.temperature, cfg.max_completion, rs);
                const Trajectory& tr = p.trajectory;
                len += tr.length();
                p.teacher = forced_pass(teacher, cs.primary, tr.prompt, tr.completion);
                p.token_weights.assign(static_cast<std::size_t>(tr.length()), 1.0);
                if (dc.agreement.enabled) {
                    const TeacherViewMatrix views = score_views(teacher, cs, tr);
                    if (dc.agreement.granularity == Granularity::token) {
                        const auto delta = token_disagreement(views, dc.agreement.statistic);
                        p.token_weights = weights_from_disagreement(delta, dc.agreement.agree_gamma, Granularity::token, tr.length());
                    } else {
                        const double delta = sequence_disagreement(views, dc.agreement.statistic);
                        p.sequence_weight = weights_from_disagreement(std::span<const double>(&delta, 1),
                                                                      dc.agreement.agree_gamma, Granularity::sequence,
                                                                      tr.length())
                                                .front();
                    }
                }
                for (double w : p.token_weights) wsum += w * p.sequence_weight;
                wcount += tr.length();
                wseq_sum += p.sequence_weight;
                if (dc.contrast_enabled && e.negative) {
                    Example neg = e;
                    neg.gold = *e.negative;
                    p.neg_lp = forced_pass(teacher, demonstration(neg), tr.prompt, tr.completion).token_logprobs;
                    p.has_negative = true;
                }
            }
            st.mean_rollout_length = len / B;
            st.mean_weight = wcount > 0 ? wsum / wcount : 1.0;
            if (!(wseq_sum > 0.0)) {
                ++state.step;
                return {std::move(state), finish_skip(st, "degenerate sequence weights")};
            }

            Tally tally;
            lg = grad_loss(state.student, [&](ad::Tape& tape, const ModelBinding& model) {
                tally = Tally{};
                std::vector<ad::Var> per_example;
                std::vector<double> batch_coeffs;
                for (std::size_t i = 0; i < batch.size(); ++i) {
                    const Prepared& p = prep[i];
                    const Trajectory& tr = p.trajectory;
                    const auto fwd = forward_completion(tape, model, {}, tr.prompt, tr.completion);
                    const ad::Var d = loss::token_divergence(tape, fwd.logprobs, p.teacher.logprobs, dc.divergence, dc.alpha);
                    if (dc.kappa) {
                        for (double v : tape.value(d).data) tally.clipped += v > *dc.kappa ? 1 : 0;
                    }
                    tally.tokens += tr.length();
                    const ad::Var c = loss::clip(tape, d, dc.kappa);
                    const ad::Var ld = loss::reduce_distill(tape, c, tr.mask, p.token_weights);
                    const double wi = p.sequence_weight / wseq_sum;
                    tally.distill += wi * tape.scalar(ld);
                    std::vector<ad::Var> parts{ld};
                    std::vector<double> coeffs{1.0};
                    if (dc.contrast_enabled && p.has_negative) {
                        const ad::Var lt = ad::pick(tape, fwd.logprobs, tr.completion);
                        const ad::Var lc = loss::contrastive(tape, lt, p.teacher.token_logprobs, p.neg_lp, tr.mask, dc.margin_gamma);
                        tally.contrastive += wi * tape.scalar(lc);
                        parts.push_back(lc);
                        coeffs.push_back(dc.lambda_aux);
                    }
                    if (dc.feat_enabled) {
                        const ad::Var lf = loss::feature_matching(tape, fwd.hidden, p.teacher.hidden, tr.mask);
                        tally.feature += wi * tape.scalar(lf);
                        parts.push_back(lf);
                        coeffs.push_back(dc.lambda_feat);
                    }
                    per_example.push_back(parts.size() == 1 ? ld : ad::lincomb(tape, parts, coeffs));
                    batch_coeffs.push_back(wi);
                }
                return ad::lincomb(tape, per_example, batch_coeffs);
            });
            st.loss.distill = tally.distill;
            st.loss.contrastive = tally.contrastive;
            st.loss.feature = tally.feature;
            st.loss.total = lg.loss;
            st.clip_fraction = tally.tokens > 0 ? static_cast<double>(tally.clipped) / static_cast<double>(tally.tokens) : 0.0;
        }
    } catch (const Error& err) {
        if (err.kind() == ErrorKind::degenerate_weight || err.kind() == ErrorKind::numeric) {
            ++state.step;
            return {std::move(state), finish_skip(st, err.what())};
        }
        throw;
    }

    st.objective = lg.loss;
    apply_update(state.student, state.optimizer, lg.grad, cfg, state.step);
    if (state.ema_teacher) *state.ema_teacher = ema_update(*state.ema_teacher, state.student, dc.beta);
    ++state.step;
    return {std::move(state), st};
}

namespace {

// Letters of a reversal prompt in their original order; the base's bare-prompt habit.
Tokens echo_answer(const Example& e) {
    const Vocab& v = Vocab::standard();
    const Token space = v.encode_char(' ');
    auto it = std::find(e.prompt.rbegin(), e.prompt.rend(), space);
    return Tokens(it.base(), e.prompt.end());
}

Tokens bare_habit(const Example& e) {
    if (e.task_kind == TaskKind::reverse) return echo_answer(e);
    if (e.negative) return *e.negative;
    return echo_answer(e);
}

}  // namespace

PolicyParameters build_base_policy(const TrainerConfig& cfg, const TaskDataset& train) {
    PolicyParameters p = init_policy(cfg.arch, derive_seed(cfg.seed, "base_init"));
    if (cfg.base.pretrain_steps == 0) return p;
    Rng rng(derive_seed(cfg.seed, "base_data"));
    OptimizerState opt;
    opt.m.assign(p.size(), 0.0);
    opt.v.assign(p.size(), 0.0);
    TrainerConfig ocfg = cfg;
    ocfg.optimizer = OptimizerKind::adam;
    ocfg.learning_rate = cfg.base.learning_rate;
    ocfg.lr_schedule = LrSchedule::constant;

    struct Sample {
        Tokens condition, prompt, target;
    };
    const std::size_t n = train.examples.size();
    for (int step = 0; step < cfg.base.pretrain_steps; ++step) {
        std::vector<Sample> batch;
        for (int b = 0; b < cfg.base.batch_size; ++b) {
            const Example& e = train.examples[uniform_index(rng, n)];
            Sample s;
            s.prompt = render_prompt(e);
            const std::uint64_t kind = uniform_index(rng, 4);
            if (kind < 2) {
                s.target = with_eos(bare_habit(e));
            } else {
                s.condition = demonstration(kind == 2 ? e : train.examples[uniform_index(rng, n)]);
                s.target = with_eos(e.gold);
            }
            batch.push_back(std::move(s));
        }
        const double B = static_cast<double>(batch.size());
        const LossGrad lg = grad_loss(p, [&](ad::Tape& tape, const ModelBinding& model) {
            std::vector<ad::Var> terms;
            std::vector<double> coeffs;
            for (const auto& s : batch) {
                const auto fwd = forward_completion(tape, model, s.condition, s.prompt, s.target);
                const std::vector<double> mask(s.target.size(), 1.0);
                terms.push_back(loss::cross_entropy(tape, fwd.logprobs, s.target, mask));
                coeffs.push_back(1.0 / B);
            }
            return ad::lincomb(tape, terms, coeffs);
        });
        apply_update(p, opt, lg.grad, ocfg, step);
    }
    return p;
}

RunRecord run_training(const TrainerConfig& cfg, const TaskDataset& train, const TaskDataset* eval,
                       const PolicyParameters* base) {
    validate(cfg);
    if (train.examples.empty()) throw ConfigError("training dataset is empty");
    const PolicyParameters start = base ? *base : build_base_policy(cfg, train);
    if (start.arch != cfg.arch) throw Error(ErrorKind::dimension, "base policy architecture differs from the configured one");

    RunRecord rec;
    rec.config = cfg;
    rec.base_fingerprint_before = fingerprint(start);
    rec.view_teacher = cfg.distill.use_ema ? "ema" : "student_snapshot";
    TrainState state = init_train_state(cfg, start);

    const std::uint64_t eval_seed = derive_seed(cfg.seed, "eval");
    auto run_eval = [&](long step) {
        if (!eval || eval->examples.empty()) return;
        EvalReport r = evaluate(state.student, state.base_snapshot, *eval, cfg.eval_temperature,
                                eval_seed, cfg.eval_examples, cfg.max_completion, cfg.eval_samples);
        r.step = step;
        rec.eval_reports.push_back(std::move(r));
    };
    run_eval(0);

    const std::size_t n = train.examples.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = n;
    const bool cache_contexts = cfg.distill.agreement.enabled && cfg.distill.agreement.strategy == ContextStrategy::retrieval;
    std::vector<std::optional<ContextSet>> cached(cache_contexts ? n : 0);

    for (int s = 0; s < cfg.steps; ++s) {
        std::vector<BatchItem> batch;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor == n) {
                shuffle_in_place(order, state.data_rng);
                cursor = 0;
            }
            const std::size_t idx = order[cursor++];
            const Example& e = train.examples[idx];
            if (cache_contexts) {
                if (!cached[idx]) cached[idx] = contexts_for(e, train, cfg, state.step);
                batch.push_back({&e, *cached[idx]});
            } else {
                batch.push_back({&e, contexts_for(e, train, cfg, state.step)});
            }
        }
        auto [next, stats] = train_step(std::move(state), batch, cfg);
        state = std::move(next);
        if (stats.skipped) ++rec.skipped_steps;
        rec.steps.push_back(std::move(stats));
        if (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 && state.step < cfg.steps) {
            rec.checkpoints.emplace_back(state.step, state.student);
        }
        if (cfg.eval_every > 0 && state.step % cfg.eval_every == 0 && state.step < cfg.steps) run_eval(state.step);
    }
    if (cfg.steps > 0) run_eval(state.step);

    rec.skipped_steps = std::count_if(rec.steps.begin(), rec.steps.end(), [](const StepStats& s) { return s.skipped; });
    rec.health = cfg.steps > 0 && static_cast<double>(rec.skipped_steps) > 0.1 * cfg.steps ? Health::unhealthy : Health::ok;
    rec.base_fingerprint_after = fingerprint(state.base_snapshot);
    rec.student = std::move(state.student);
    rec.ema_teacher = std::move(state.ema_teacher);
    rec.base_snapshot = std::move(state.base_snapshot);
    return rec;
}

std::string metrics_line(const StepStats& s) {
    nlohmann::ordered_json j;
    j["step"] = s.step;
    j["loss"] = {{"distill", s.loss.distill},
                 {"contrastive", s.loss.contrastive},
                 {"feature", s.loss.feature},
                 {"total", s.loss.total}};
    j["objective"] = s.objective;
    j["mean_weight"] = s.mean_weight;
    j["clip_fraction"] = s.clip_fraction;
    j["mean_rollout_length"] = s.mean_rollout_length;
    j["skipped"] = s.skipped;
    if (s.skipped) j["skip_reason"] = s.skip_reason;
    return j.dump();
}

}  // namespace unisd
