// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "unisd/errors.hpp"
#include "unisd/objectives.hpp"
#include "unisd/rng.hpp"

using namespace unisd;

namespace {

constexpr DivergenceKind kAllKinds[] = {DivergenceKind::forward_kl, DivergenceKind::reverse_kl,
                                        DivergenceKind::weighted_jsd};

std::vector<double> random_simplex(Rng& rng, int v) {
    std::vector<double> p(static_cast<std::size_t>(v));
    double s = 0.0;
    for (double& x : p) {
        x = -std::log(std::max(uniform01(rng), 1e-300));
        s += x;
    }
    for (double& x : p) x /= s;
    return p;
}

std::vector<double> logs(const std::vector<double>& p) {
    std::vector<double> out;
    for (double x : p) out.push_back(std::log(x));
    return out;
}

}  // namespace

TEST_SUITE("objectives") {

TEST_CASE("identical distributions have zero divergence") {
    const std::vector<double> p = {0.1, 0.2, 0.7};
    for (DivergenceKind k : kAllKinds) CHECK(token_divergence(p, p, k, 0.5) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("weighted JSD closed form") {
    const long double expect = 0.5L * std::log(4.0L / 3.0L) + 0.5L * (0.5L * std::log(2.0L / 3.0L) + 0.5L * std::log(2.0L));
    const std::vector<double> student = {0.5, 0.5}, teacher = {1.0, 0.0};
    const double got = token_divergence(student, teacher, DivergenceKind::weighted_jsd, 0.5);
    CHECK(std::abs(got - static_cast<double>(expect)) <= 1e-12);
    CHECK(got == doctest::Approx(0.2158).epsilon(1e-3));
    CHECK(std::abs(oracle_divergence(student, teacher, DivergenceKind::weighted_jsd, 0.5) - got) <= 1e-12);
}

TEST_CASE("forward KL closed form") {
    const long double expect = 0.5L * std::log(2.0L) + 0.5L * std::log(2.0L / 3.0L);
    const std::vector<double> student = {0.25, 0.75}, teacher = {0.5, 0.5};
    CHECK(std::abs(token_divergence(student, teacher, DivergenceKind::forward_kl, 0.5) - static_cast<double>(expect)) <= 1e-12);
    CHECK(std::abs(oracle_divergence(student, teacher, DivergenceKind::forward_kl, 0.5) - static_cast<double>(expect)) <= 1e-12);
    CHECK(std::abs(token_divergence(teacher, student, DivergenceKind::reverse_kl, 0.5) - static_cast<double>(expect)) <= 1e-12);
}

TEST_CASE("KL with unmatched support is infinite, JSD stays finite") {
    const std::vector<double> student = {1.0, 0.0}, teacher = {0.5, 0.5};
    CHECK(std::isinf(token_divergence(student, teacher, DivergenceKind::forward_kl, 0.5)));
    CHECK(token_divergence(student, teacher, DivergenceKind::reverse_kl, 0.5) == doctest::Approx(std::log(2.0)));
    CHECK(std::isfinite(token_divergence(student, teacher, DivergenceKind::weighted_jsd, 0.5)));
}

TEST_CASE("malformed distributions are rejected") {
    const std::vector<double> ok = {0.5, 0.5};
    for (const std::vector<double>& bad : {std::vector<double>{-0.1, 1.1}, std::vector<double>{0.3, 0.3}}) {
        try {
            token_divergence(bad, ok, DivergenceKind::weighted_jsd, 0.5);
            FAIL("expected a distribution error");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::distribution);
        }
    }
    CHECK_THROWS_AS(token_divergence(ok, std::vector<double>{1.0}, DivergenceKind::forward_kl, 0.5), Error);
}

TEST_CASE("random pairs agree with the extended-precision oracle") {
    Rng rng(5);
    for (int i = 0; i < 2000; ++i) {
        const int v = 2 + static_cast<int>(uniform_index(rng, 10));
        const auto s = random_simplex(rng, v), t = random_simplex(rng, v);
        const double alpha = uniform01(rng);
        for (DivergenceKind k : kAllKinds) {
            const double d = token_divergence(s, t, k, alpha);
            CHECK(d >= 0.0);
            CHECK(std::abs(d - oracle_divergence(s, t, k, alpha)) <= 1e-10);
            CHECK(std::abs(token_divergence_log(logs(s), logs(t), k, alpha) - d) <= 1e-10);
        }
        CHECK(token_divergence(s, t, DivergenceKind::weighted_jsd, 0.5) <= std::log(2.0) + 1e-12);
    }
}

TEST_CASE("clipping") {
    CHECK(clip_divergence(0.9, 0.5) == 0.5);
    CHECK(clip_divergence(0.3, 0.5) == 0.3);
    for (double d : {0.0, 0.3, 7.5, 1e6}) CHECK(clip_divergence(d, std::nullopt) == d);
}

TEST_CASE("weighted masked reduction") {
    const std::vector<double> d = {1, 3};
    CHECK(reduce_distill_loss(d, std::vector<double>{1, 1}, std::vector<double>{1, 1}) == 2.0);
    CHECK(reduce_distill_loss(d, std::vector<double>{1, 0}, std::vector<double>{1, 1}) == 1.0);
    CHECK(reduce_distill_loss(d, std::vector<double>{1, 1}, std::vector<double>{3, 1}) == 1.5);
    try {
        reduce_distill_loss(d, std::vector<double>{0, 0}, std::vector<double>{1, 1});
        FAIL("expected a degenerate-weight error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::degenerate_weight);
    }
}

TEST_CASE("contrastive hinge") {
    const std::vector<double> m1 = {1};
    CHECK(contrastive_loss(std::vector<double>{-1}, std::vector<double>{-1.5}, std::vector<double>{-3}, m1, 0.5) == 0.0);
    const std::vector<double> s = {-1, -2, -0.5}, pos = {-0.7, -1.0, -4.0}, m = {1, 1, 0};
    CHECK(contrastive_loss(s, pos, pos, m, 0.8) == doctest::Approx(1.6).epsilon(1e-14));
    const std::vector<double> near = {-1, -2, -0.5}, far = {-9, -12, -10};
    CHECK(contrastive_loss(s, near, far, m, 1.0) == 0.0);
}

TEST_CASE("feature matching") {
    FeatureTrace a, b;
    a.features = Matrix(2, 2);
    b.features = Matrix(2, 2);
    a.features(0, 0) = 1.0;
    b.features(0, 1) = 1.0;
    a.features(1, 0) = 5.0;
    CHECK(feature_matching_loss(a, a, std::vector<double>{1, 1}) == 0.0);
    CHECK(feature_matching_loss(a, b, std::vector<double>{1, 0}) == 2.0);
    FeatureTrace c;
    c.features = Matrix(2, 3);
    try {
        feature_matching_loss(a, c, std::vector<double>{1, 1});
        FAIL("expected a dimension error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::dimension);
    }
}

TEST_CASE("total loss combination") {
    DistillConfig cfg;
    LossParts parts;
    parts.distill = 0.4;
    parts.contrastive = 1.0;
    parts.feature = 2.0;
    CHECK(total_loss(parts, cfg).total == 0.4);

    cfg.contrast_enabled = true;
    cfg.feat_enabled = true;
    cfg.lambda_aux = 0.1;
    cfg.lambda_feat = 0.05;
    CHECK(total_loss(parts, cfg).total == doctest::Approx(0.6).epsilon(1e-14));

    DistillConfig off;
    DistillConfig zero = off;
    zero.contrast_enabled = true;
    zero.lambda_aux = 0.0;
    const TokenLossBreakdown z = total_loss(parts, zero);
    CHECK(z.contrastive == 1.0);
    CHECK(std::abs(z.total - total_loss(parts, off).total) <= 1e-12);
}

TEST_CASE("taped divergence rows match the scalar path") {
    Rng rng(17);
    Matrix s(4, 6), t(4, 6);
    for (int r = 0; r < 4; ++r) {
        const auto a = logs(random_simplex(rng, 6)), b = logs(random_simplex(rng, 6));
        std::copy(a.begin(), a.end(), s.row(r).begin());
        std::copy(b.begin(), b.end(), t.row(r).begin());
    }
    for (DivergenceKind k : kAllKinds) {
        ad::Tape tape;
        const ad::Var d = loss::token_divergence(tape, tape.constant(s), t, k, 0.3);
        for (int r = 0; r < 4; ++r) {
            CHECK(std::abs(tape.value(d)(r, 0) - token_divergence_log(s.row(r), t.row(r), k, 0.3)) <= 1e-12);
        }
        const ad::Var c = loss::clip(tape, d, 0.05);
        for (int r = 0; r < 4; ++r) CHECK(tape.value(c)(r, 0) == std::min(tape.value(d)(r, 0), 0.05));
    }
}

TEST_CASE("config validation") {
    DistillConfig c;
    CHECK_NOTHROW(validate(c));
    c.alpha = 1.5;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = DistillConfig{};
    c.kappa = -1.0;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = DistillConfig{};
    c.beta = 2.0;
    CHECK_THROWS_AS(validate(c), ConfigError);
    CHECK(parse_divergence(to_string(DivergenceKind::reverse_kl)) == DivergenceKind::reverse_kl);
    CHECK_THROWS_AS(parse_divergence("cross_entropy"), ConfigError);
}

}  // TEST_SUITE
