// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "unisd/errors.hpp"
#include "unisd/objectives.hpp"
#include "unisd/trainer.hpp"

using namespace unisd;
using namespace unisd::test;

namespace {

TrainerConfig small_config(Mode mode) {
    TrainerConfig c = make_baseline_config(mode);
    c.arch = tiny_arch();
    c.arch.window = 64;
    c.batch_size = 4;
    c.steps = 3;
    c.eval_examples = 4;
    c.seed = 5;
    return c;
}

std::vector<BatchItem> batch_of(const TaskDataset& ds, const TrainerConfig& cfg, int n) {
    std::vector<BatchItem> b;
    for (int i = 0; i < n; ++i) b.push_back({&ds.examples[static_cast<std::size_t>(i)], contexts_for(ds.examples[static_cast<std::size_t>(i)], ds, cfg, 0)});
    return b;
}

// Masked token-mean cross-entropy of gold + EOS on the bare prompt, averaged over the batch.
double reference_sft_loss(const PolicyParameters& p, const std::vector<BatchItem>& batch) {
    long double total = 0;
    for (const auto& item : batch) {
        Tokens target = item.example->gold;
        target.push_back(tok::eos);
        Tokens prompt = item.example->prompt;
        prompt.push_back(tok::sep);
        const ForcedPass fp = forced_pass(p, {}, prompt, target);
        long double s = 0;
        for (std::size_t t = 0; t < target.size(); ++t) s -= fp.logprobs(static_cast<int>(t), target[t]);
        total += s / static_cast<long double>(target.size());
    }
    return static_cast<double>(total / static_cast<long double>(batch.size()));
}

ad::Var sft_tape_loss(ad::Tape& tape, const ModelBinding& m, const std::vector<BatchItem>& batch) {
    std::vector<ad::Var> terms;
    std::vector<double> coeffs;
    for (const auto& item : batch) {
        Tokens target = item.example->gold;
        target.push_back(tok::eos);
        Tokens prompt = item.example->prompt;
        prompt.push_back(tok::sep);
        const auto fwd = forward_completion(tape, m, {}, prompt, target);
        terms.push_back(loss::cross_entropy(tape, fwd.logprobs, target, std::vector<double>(target.size(), 1.0)));
        coeffs.push_back(1.0 / static_cast<double>(batch.size()));
    }
    return ad::lincomb(tape, terms, coeffs);
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("baseline presets") {
    const TrainerConfig sft = make_baseline_config(Mode::sft);
    CHECK(sft.mode == Mode::sft);
    CHECK_FALSE(sft.distill.use_ema);

    const TrainerConfig sdft = make_baseline_config(Mode::sdft);
    CHECK(sdft.distill.divergence == DivergenceKind::reverse_kl);
    CHECK_FALSE(sdft.distill.agreement.enabled);
    CHECK_FALSE(sdft.distill.contrast_enabled);
    CHECK_FALSE(sdft.distill.feat_enabled);
    CHECK_FALSE(sdft.distill.kappa);

    const TrainerConfig gkd = make_baseline_config(Mode::gkd_like);
    CHECK(gkd.distill.divergence == DivergenceKind::weighted_jsd);
    CHECK_FALSE(gkd.distill.agreement.enabled);
    CHECK_FALSE(gkd.distill.use_ema);
    CHECK_FALSE(gkd.distill.kappa);

    const TrainerConfig star = make_baseline_config(Mode::unisd_star);
    CHECK(star.distill.agreement.enabled);
    CHECK(star.distill.use_ema);
    CHECK(star.distill.contrast_enabled);
    CHECK(star.distill.feat_enabled);
    CHECK(star.distill.kappa);
    for (Mode m : {Mode::sft, Mode::sdft, Mode::gkd_like, Mode::unisd_star, Mode::unisd}) {
        CHECK(parse_mode(to_string(m)) == m);
        CHECK_NOTHROW(validate(make_baseline_config(m)));
    }
    CHECK_THROWS_AS(parse_mode("rlhf"), ConfigError);
}

TEST_CASE("cosine schedule endpoints and sgd step size") {
    TrainerConfig c = small_config(Mode::sft);
    c.learning_rate = 0.2;
    c.steps = 10;
    CHECK(scheduled_lr(c, 7) == 0.2);
    c.lr_schedule = LrSchedule::cosine;
    CHECK(scheduled_lr(c, 0) == 0.2);
    CHECK(scheduled_lr(c, 5) == doctest::Approx(0.1).epsilon(1e-14));
    CHECK(std::abs(scheduled_lr(c, 10)) <= 1e-17);
    CHECK(parse_lr_schedule(to_string(LrSchedule::cosine)) == LrSchedule::cosine);
    CHECK_THROWS_AS(parse_lr_schedule("linear"), ConfigError);

    // with sgd the first two updates are -lr * g and -(lr/2) * g'
    const TaskDataset ds = generate_task(TaskKind::reverse, 6, 12);
    c.optimizer = OptimizerKind::sgd;
    c.steps = 2;
    const auto batch = batch_of(ds, c, 4);
    const TrainState s0 = init_train_state(c, init_policy(c.arch, 3));
    const LossGrad g0 = grad_loss(s0.student, [&](ad::Tape& t, const ModelBinding& m) { return sft_tape_loss(t, m, batch); });
    auto [s1, st1] = train_step(s0, batch, c);
    for (std::size_t i = 0; i < g0.grad.size(); i += 97) {
        CHECK(s1.student.values[i] == doctest::Approx(s0.student.values[i] - 0.2 * g0.grad[i]).epsilon(1e-12));
    }
    const LossGrad g1 = grad_loss(s1.student, [&](ad::Tape& t, const ModelBinding& m) { return sft_tape_loss(t, m, batch); });
    auto [s2, st2] = train_step(s1, batch, c);
    for (std::size_t i = 0; i < g1.grad.size(); i += 97) {
        CHECK(s2.student.values[i] == doctest::Approx(s1.student.values[i] - 0.1 * g1.grad[i]).epsilon(1e-12));
    }
}

TEST_CASE("invalid trainer settings are configuration errors") {
    TrainerConfig c = small_config(Mode::unisd);
    c.batch_size = 0;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = small_config(Mode::unisd);
    c.learning_rate = -1;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = small_config(Mode::unisd);
    c.arch.heads = 3;
    CHECK_THROWS_AS(validate(c), ConfigError);
}

TEST_CASE("sft step loss matches the reference cross-entropy") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 6, 2);
    const TrainerConfig cfg = small_config(Mode::sft);
    const TrainState s0 = init_train_state(cfg, init_policy(cfg.arch, 1));
    const auto batch = batch_of(ds, cfg, 4);
    const double ref = reference_sft_loss(s0.student, batch);
    auto [s1, st] = train_step(s0, batch, cfg);
    CHECK(std::abs(st.loss.total - ref) <= 1e-10);
    CHECK(std::abs(st.objective - ref) <= 1e-10);
    CHECK(s1.step == 1);
    CHECK(s1.student.values != s0.student.values);
    CHECK_FALSE(s1.ema_teacher);
}

TEST_CASE("zero learning rate leaves the student and its EMA fixed") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 6, 3);
    TrainerConfig cfg = small_config(Mode::unisd_star);
    cfg.learning_rate = 0.0;
    cfg.distill.agreement.strategy = ContextStrategy::random;
    TrainState s = init_train_state(cfg, init_policy(cfg.arch, 1));
    const auto start = s.student.values;
    for (int i = 0; i < 2; ++i) {
        auto [next, st] = train_step(std::move(s), batch_of(ds, cfg, 4), cfg);
        CHECK_FALSE(st.skipped);
        s = std::move(next);
    }
    CHECK(s.student.values == start);
    REQUIRE(s.ema_teacher);
    CHECK(s.ema_teacher->values == start);
}

TEST_CASE("unisd with every component off is the gkd-like step") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 6, 4);
    TrainerConfig a = small_config(Mode::gkd_like);
    TrainerConfig b = small_config(Mode::unisd);
    b.distill = DistillConfig{};
    b.distill.lambda_feat = 123.0;  // inert while feature matching is off
    const PolicyParameters init = init_policy(a.arch, 2);
    auto [sa, ta] = train_step(init_train_state(a, init), batch_of(ds, a, 4), a);
    auto [sb, tb] = train_step(init_train_state(b, init), batch_of(ds, b, 4), b);
    CHECK(sa.student.values == sb.student.values);
    CHECK(metrics_line(ta) == metrics_line(tb));
}

TEST_CASE("identical seeds give identical runs") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 12, 6);
    TrainerConfig cfg = small_config(Mode::unisd_star);
    const PolicyParameters base = init_policy(cfg.arch, 3);
    const RunRecord r1 = run_training(cfg, ds, &ds, &base);
    const RunRecord r2 = run_training(cfg, ds, &ds, &base);
    REQUIRE(r1.steps.size() == 3);
    for (std::size_t i = 0; i < r1.steps.size(); ++i) CHECK(metrics_line(r1.steps[i]) == metrics_line(r2.steps[i]));
    CHECK(r1.student.values == r2.student.values);
    CHECK(checkpoint_bytes(*r1.ema_teacher) == checkpoint_bytes(*r2.ema_teacher));
    CHECK(r1.base_fingerprint_before == r1.base_fingerprint_after);
    CHECK(r1.base_snapshot.values == base.values);
    CHECK(r1.view_teacher == "ema");
    CHECK(r1.health == Health::ok);

    cfg.seed = 6;
    const RunRecord r3 = run_training(cfg, ds, &ds, &base);
    CHECK(r3.student.values != r1.student.values);
}

TEST_CASE("zero steps returns the initialization and one evaluation") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 8, 7);
    TrainerConfig cfg = small_config(Mode::gkd_like);
    cfg.steps = 0;
    const PolicyParameters base = init_policy(cfg.arch, 4);
    const RunRecord r = run_training(cfg, ds, &ds, &base);
    CHECK(r.steps.empty());
    CHECK(r.student.values == base.values);
    REQUIRE(r.eval_reports.size() == 1);
    CHECK(r.eval_reports[0].step == 0);
    CHECK(r.eval_reports[0].accuracy <= 0.01);
}

TEST_CASE("non-finite losses skip the update and mark the run") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 12, 8);
    TrainerConfig cfg = small_config(Mode::sdft);
    cfg.distill.use_ema = true;
    const PolicyParameters base = init_policy(cfg.arch, 4);
    TrainState s = init_train_state(cfg, base);
    for (double& v : s.ema_teacher->view("head")) v = NAN;
    auto [next, st] = train_step(s, batch_of(ds, cfg, 4), cfg);
    CHECK(st.skipped);
    CHECK_FALSE(st.skip_reason.empty());
    CHECK(next.step == 1);
    CHECK(next.student.values == base.values);
    CHECK(next.optimizer.step == 0);
    CHECK(metrics_line(st).find("skip_reason") != std::string::npos);

    TrainerConfig wild = small_config(Mode::gkd_like);
    wild.optimizer = OptimizerKind::sgd;
    wild.learning_rate = 1e300;
    wild.steps = 4;
    const RunRecord r = run_training(wild, ds, nullptr, &base);
    CHECK(r.skipped_steps >= 1);
    CHECK(r.health == Health::unhealthy);
}

TEST_CASE("periodic checkpoints and evaluations follow the cadence") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 12, 9);
    TrainerConfig cfg = small_config(Mode::sdft);
    cfg.steps = 4;
    cfg.checkpoint_every = 2;
    cfg.eval_every = 2;
    const PolicyParameters base = init_policy(cfg.arch, 5);
    const RunRecord r = run_training(cfg, ds, &ds, &base);
    REQUIRE(r.checkpoints.size() == 1);
    CHECK(r.checkpoints[0].first == 2);
    REQUIRE(r.eval_reports.size() == 3);
    CHECK(r.eval_reports[1].step == 2);
    CHECK(r.eval_reports[2].step == 4);
    CHECK(r.view_teacher == "student_snapshot");
}

TEST_CASE("base construction is deterministic and leaves the bare prompt habit") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 16, 10);
    TrainerConfig cfg = small_config(Mode::sft);
    cfg.base.pretrain_steps = 2;
    const PolicyParameters a = build_base_policy(cfg, ds);
    const PolicyParameters b = build_base_policy(cfg, ds);
    CHECK(a.values == b.values);
    cfg.base.pretrain_steps = 0;
    CHECK(build_base_policy(cfg, ds).values != a.values);
}

TEST_CASE("contexts follow the agreement settings") {
    const TaskDataset ds = generate_task(TaskKind::reverse, 10, 11);
    TrainerConfig cfg = small_config(Mode::gkd_like);
    const ContextSet off = contexts_for(ds.examples[0], ds, cfg, 0);
    CHECK(off.primary == demonstration(ds.examples[0]));
    CHECK(off.auxiliaries.empty());
    cfg = small_config(Mode::unisd_star);
    const ContextSet on = contexts_for(ds.examples[0], ds, cfg, 0);
    CHECK(on.auxiliaries.size() == 3);
}

}  // TEST_SUITE
