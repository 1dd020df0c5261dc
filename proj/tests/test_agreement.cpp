// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "unisd/agreement.hpp"
#include "unisd/errors.hpp"

using namespace unisd;
using namespace unisd::test;

namespace {

TeacherViewMatrix views_of(const std::vector<std::vector<double>>& rows, std::vector<double> mask) {
    TeacherViewMatrix v;
    v.logprobs = Matrix(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
        for (std::size_t t = 0; t < rows[k].size(); ++t) v.logprobs(static_cast<int>(k), static_cast<int>(t)) = rows[k][t];
        v.view_ids.push_back("v" + std::to_string(k));
    }
    v.mask = std::move(mask);
    return v;
}

// Population variance by enumeration of all ordered pairs: Var = sum_{i,j} (x_i - x_j)^2 / (2 n^2).
long double pairwise_variance(const std::vector<double>& x) {
    long double s = 0;
    for (double a : x) {
        for (double b : x) s += (static_cast<long double>(a) - b) * (static_cast<long double>(a) - b);
    }
    return s / (2.0L * x.size() * x.size());
}

}  // namespace

TEST_SUITE("agreement") {

TEST_CASE("identical contexts give identical view rows") {
    const PolicyParameters p = init_policy(tiny_arch(), 3);
    ContextSet cs;
    cs.primary = toks("rev: ab>ba\n");
    cs.auxiliaries = {cs.primary, cs.primary, cs.primary};
    cs.view_ids = {"a", "b", "c"};
    Trajectory tr;
    tr.prompt = toks("rev: cd>");
    tr.completion = toks("dc");
    tr.completion.push_back(tok::eos);
    tr.mask = {1, 1, 1};
    const TeacherViewMatrix v = score_views(p, cs, tr);
    REQUIRE(v.views() == 3);
    REQUIRE(v.length() == 3);
    for (int k = 1; k < 3; ++k) {
        for (int t = 0; t < 3; ++t) CHECK(v.logprobs(k, t) == v.logprobs(0, t));
    }
    for (double d : token_disagreement(v, Statistic::variance)) CHECK(d == 0.0);
    CHECK(sequence_disagreement(v, Statistic::range) == 0.0);
}

TEST_CASE("three-token policy views match the closed-form softmax") {
    const std::vector<std::vector<double>> table = {{0.2, -1.0, 0.4}, {0.9, 0.1, -0.3}, {-0.5, 0.6, 0.0}};
    const PolicyParameters p = bigram_policy(3, 3, table);
    ContextSet cs;
    cs.primary = {0};
    cs.auxiliaries = {{0, 0}, {1}, {2, 2, 0}};
    cs.view_ids = {"x", "y", "z"};
    Trajectory tr;
    tr.prompt = {1, 0};
    tr.completion = {1, 0, 2};
    tr.mask = {1, 1, 1};
    const TeacherViewMatrix v = score_views(p, cs, tr);
    REQUIRE(v.views() == 3);
    Token prev = 0;
    for (int t = 0; t < 3; ++t) {
        const auto ref = bigram_logprobs(table, prev, 3);
        for (int k = 0; k < 3; ++k) {
            CHECK(std::abs(v.logprobs(k, t) - static_cast<double>(ref[static_cast<std::size_t>(tr.completion[t])])) <= 1e-12);
        }
        prev = tr.completion[static_cast<std::size_t>(t)];
    }
}

TEST_CASE("token spread arithmetic") {
    const TeacherViewMatrix v = views_of({{-1.0, -0.5, -2.0}, {-3.0, -0.5, -9.0}}, {1, 1, 0});
    const auto var = token_disagreement(v, Statistic::variance);
    const auto rng = token_disagreement(v, Statistic::range);
    CHECK(var[0] == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(rng[0] == 2.0);
    CHECK(var[1] == 0.0);
    CHECK(var[2] == 0.0);
    CHECK(rng[2] == 0.0);
}

TEST_CASE("sequence spread arithmetic") {
    // masked means of the three rows are -1, -2, -4
    const TeacherViewMatrix v = views_of({{-1.0, -1.0, 5.0}, {-1.0, -3.0, 0.0}, {-6.0, -2.0, -1.0}}, {1, 1, 0});
    CHECK(sequence_disagreement(v, Statistic::range) == doctest::Approx(3.0).epsilon(1e-15));
    const double var = sequence_disagreement(v, Statistic::variance);
    CHECK(std::abs(var - 14.0 / 9.0) <= 1e-12);
    CHECK(std::abs(var - static_cast<double>(pairwise_variance({-1, -2, -4}))) <= 1e-12);

    const TeacherViewMatrix shifted = views_of({{-1.0, -2.0, -0.3}, {-1.7, -2.7, -1.0}}, {1, 1, 1});
    CHECK(sequence_disagreement(shifted, Statistic::range) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("spread matches the enumeration oracle") {
    for (const std::vector<double>& x : {std::vector<double>{-0.3, -1.2, -4.4, -0.01}, std::vector<double>{2, 2, 2},
                                         std::vector<double>{-7.5, 1.25}}) {
        CHECK(std::abs(spread(x, Statistic::variance) - static_cast<double>(pairwise_variance(x))) <= 1e-12);
        CHECK(spread(x, Statistic::range) == *std::max_element(x.begin(), x.end()) - *std::min_element(x.begin(), x.end()));
    }
}

TEST_CASE("fewer than two views is a configuration error") {
    const TeacherViewMatrix v = views_of({{-1.0, -2.0}}, {1, 1});
    CHECK_THROWS_AS(token_disagreement(v, Statistic::variance), ConfigError);
    CHECK_THROWS_AS(sequence_disagreement(v, Statistic::range), ConfigError);
}

TEST_CASE("disagreement to weight mapping") {
    const std::vector<double> zero = {0, 0, 0};
    for (double w : weights_from_disagreement(zero, 0.7, Granularity::token, 3)) CHECK(w == 1.0);
    const std::vector<double> delta = {0.1, 5.0, 40.0};
    for (double w : weights_from_disagreement(delta, 0.0, Granularity::token, 3)) CHECK(w == 1.0);
    const std::vector<double> two = {2.0};
    const auto w = weights_from_disagreement(two, 0.5, Granularity::sequence, 4);
    REQUIRE(w.size() == 4);
    for (double x : w) CHECK(std::abs(x - std::exp(-1.0)) <= 1e-15);
    CHECK(w[0] == doctest::Approx(0.3679).epsilon(1e-4));

    const auto mono = weights_from_disagreement(delta, 0.3, Granularity::token, 3);
    CHECK(mono[0] > mono[1]);
    CHECK(mono[1] > mono[2]);
    const auto sharper = weights_from_disagreement(delta, 0.6, Granularity::token, 3);
    for (int i = 0; i < 3; ++i) CHECK(sharper[static_cast<std::size_t>(i)] < mono[static_cast<std::size_t>(i)]);
}

TEST_CASE("config validation and names") {
    AgreementConfig c;
    CHECK_NOTHROW(validate(c));
    c.enabled = true;
    c.K = 1;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = AgreementConfig{};
    c.agree_gamma = -0.1;
    CHECK_THROWS_AS(validate(c), ConfigError);
    CHECK(parse_granularity(to_string(Granularity::sequence)) == Granularity::sequence);
    CHECK(parse_statistic(to_string(Statistic::range)) == Statistic::range);
    CHECK_THROWS_AS(parse_statistic("median"), ConfigError);
}

}  // TEST_SUITE
