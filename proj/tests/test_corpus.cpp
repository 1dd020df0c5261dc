// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <algorithm>
#include <set>

#include "helpers.hpp"
#include "unisd/corpus.hpp"
#include "unisd/errors.hpp"
#include "unisd/rng.hpp"

using namespace unisd;
using unisd::test::toks;

namespace {

std::string text(const Tokens& t) { return Vocab::standard().decode(t); }

std::set<std::pair<int, int>> bigrams(const Tokens& t) {
    std::set<std::pair<int, int>> s;
    for (std::size_t i = 0; i + 1 < t.size(); ++i) s.insert({t[i], t[i + 1]});
    return s;
}

double jaccard_oracle(const Tokens& a, const Tokens& b) {
    const auto x = bigrams(a), y = bigrams(b);
    std::vector<std::pair<int, int>> inter, uni;
    std::set_intersection(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(inter));
    std::set_union(x.begin(), x.end(), y.begin(), y.end(), std::back_inserter(uni));
    return uni.empty() ? 0.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

Example make_example(const std::string& id, const std::string& prompt, const std::string& gold,
                     TaskKind kind = TaskKind::reverse) {
    return Example{id, toks(prompt), toks(gold), std::nullopt, kind};
}

}  // namespace

TEST_SUITE("corpus") {
    TEST_CASE("reversal examples carry the reversed letters as gold") {
        const TaskDataset d = generate_task(TaskKind::reverse, 50, 7);
        REQUIRE(d.examples.size() == 50);
        for (const auto& e : d.examples) {
            const std::string p = text(e.prompt);
            REQUIRE(p.rfind("rev: ", 0) == 0);
            std::string letters = p.substr(5);
            CHECK(letters.size() >= 3);
            CHECK(letters.size() <= 5);
            std::reverse(letters.begin(), letters.end());
            CHECK(text(e.gold) == letters);
            CHECK(check_answer(e.task_kind, e.prompt, e.gold));
        }
    }

    TEST_CASE("modular arithmetic gold is (a + b) mod m") {
        const TaskDataset d = generate_task(TaskKind::modular_arith, 40, 7);
        for (const auto& e : d.examples) {
            int a = 0, b = 0, m = 0;
            REQUIRE(std::sscanf(text(e.prompt).c_str(), "%d+%d mod %d =", &a, &b, &m) == 3);
            CHECK(text(e.gold) == std::to_string((a + b) % m));
        }
        CHECK(check_answer(TaskKind::modular_arith, toks("17+25 mod 10 ="), toks("2")));
        CHECK_FALSE(check_answer(TaskKind::modular_arith, toks("17+25 mod 10 ="), toks("3")));
    }

    TEST_CASE("every task kind has a checker that accepts gold and rejects the negative") {
        for (TaskKind k : {TaskKind::reverse, TaskKind::modular_arith, TaskKind::expr_eval, TaskKind::tool_format}) {
            const TaskDataset d = generate_task(k, 200, 3);
            for (const auto& e : d.examples) {
                REQUIRE(e.negative.has_value());
                CHECK(check_answer(k, e.prompt, e.gold));
                CHECK_FALSE(check_answer(k, e.prompt, *e.negative));
                CHECK(parses(k, e.prompt, *e.negative));
                CHECK(*e.negative != e.gold);
                CHECK(std::find(e.prompt.begin(), e.prompt.end(), tok::pad) == e.prompt.end());
            }
        }
    }

    TEST_CASE("expression and tool tasks agree with hand-computed answers") {
        CHECK(check_answer(TaskKind::expr_eval, toks("eval: (2+3)*4="), toks("20")));
        CHECK(check_answer(TaskKind::expr_eval, toks("eval: 2+3*4="), toks("14")));
        CHECK(check_answer(TaskKind::expr_eval, toks("eval: 2-9*1="), toks("-7")));
        CHECK(check_answer(TaskKind::tool_format, toks("tool: max a=3 b=11"), toks("max(3,11)")));
        CHECK_FALSE(check_answer(TaskKind::tool_format, toks("tool: max a=3 b=11"), toks("max(11,3)")));
    }

    TEST_CASE("generation is deterministic and byte-identical") {
        const auto a = generate_task(TaskKind::reverse, 100, 7);
        const auto b = generate_task(TaskKind::reverse, 100, 7);
        CHECK(to_jsonl(a) == to_jsonl(b));
        CHECK(to_jsonl(a) != to_jsonl(generate_task(TaskKind::reverse, 100, 8)));
    }

    TEST_CASE("train and eval splits are disjoint by id and prompt") {
        const auto [train, eval] = generate_splits(TaskKind::reverse, 300, 100, 5);
        std::set<std::string> ids;
        std::set<Tokens> prompts;
        for (const auto& e : train.examples) {
            ids.insert(e.id);
            prompts.insert(e.prompt);
        }
        CHECK(ids.size() == 300);
        for (const auto& e : eval.examples) {
            CHECK(ids.count(e.id) == 0);
            CHECK(prompts.count(e.prompt) == 0);
        }
        CHECK(to_jsonl(train) == to_jsonl(generate_task(TaskKind::reverse, 300, 5)));
    }

    TEST_CASE("unsupported task kinds and oversize requests are configuration errors") {
        CHECK_THROWS_AS(parse_task_kind("sorting"), ConfigError);
        CHECK_THROWS_AS(generate_task(TaskKind::reverse, 0, 1), ConfigError);
        CHECK_THROWS_AS(generate_task(TaskKind::reverse, 1000000, 1), ConfigError);
    }

    TEST_CASE("answer_perturb on reversal picks a seeded permutation other than gold") {
        const Example e = make_example("x", "rev: abc", "cba");
        for (std::uint64_t seed : {0ULL, 1ULL, 7ULL, 12345ULL}) {
            std::string g = "cba";
            std::vector<std::string> perms;
            std::sort(g.begin(), g.end());
            do {
                if (g != "cba") perms.push_back(g);
            } while (std::next_permutation(g.begin(), g.end()));
            REQUIRE(perms.size() == 5);
            const std::string expected = perms[splitmix64(seed) % perms.size()];
            const Tokens neg = make_negative(e, Corruption::answer_perturb, seed);
            CHECK(text(neg) == expected);
            CHECK_FALSE(check_answer(TaskKind::reverse, e.prompt, neg));
            CHECK(parses(TaskKind::reverse, e.prompt, neg));
        }
    }

    TEST_CASE("arithmetic answer_perturb yields a different in-range digit") {
        const Example e = make_example("x", "17+25 mod 10 =", "2", TaskKind::modular_arith);
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const std::string n = text(make_negative(e, Corruption::answer_perturb, seed));
            CHECK(n != "2");
            CHECK(n.size() == 1);
        }
    }

    TEST_CASE("corruptions of 1000 examples all parse and all fail the checker") {
        const TaskDataset d = generate_task(TaskKind::reverse, 1000, 11);
        for (Corruption c : {Corruption::answer_perturb, Corruption::step_corrupt, Corruption::lexical_swap}) {
            long parsed = 0, failed = 0;
            for (const auto& e : d.examples) {
                const Tokens n = make_negative(e, c, 99);
                parsed += parses(e.task_kind, e.prompt, n);
                failed += !check_answer(e.task_kind, e.prompt, n);
            }
            CHECK(parsed == 1000);
            CHECK(failed == 1000);
        }
    }

    TEST_CASE("an exhausted answer space is a corruption error") {
        const Example e = make_example("x", "rev: a", "a");
        try {
            make_negative(e, Corruption::answer_perturb, 0);
            FAIL("expected a corruption error");
        } catch (const Error& err) {
            CHECK(err.kind() == ErrorKind::corruption);
        }
    }

    TEST_CASE("retrieval ranks an exact duplicate prompt first and never returns the target") {
        TaskDataset pool;
        pool.examples = {make_example("a", "rev: abcd", "dcba"), make_example("b", "rev: hij", "jih"),
                         make_example("c", "rev: abcd", "dcba"), make_example("d", "rev: abce", "ecba")};
        const ContextSet cs = build_contexts(pool.examples[0], pool, ContextStrategy::retrieval, 2, 0);
        REQUIRE(cs.view_ids.size() == 2);
        CHECK(cs.view_ids[0] == "c");
        CHECK(cs.view_ids[1] == "d");
        CHECK(cs.primary == demonstration(pool.examples[0]));
        for (const auto& id : cs.view_ids) CHECK(id != "a");
    }

    TEST_CASE("retrieval ranking matches brute-force pairwise Jaccard") {
        TaskDataset pool;
        pool.examples = {make_example("p0", "rev: abcde", "edcba"), make_example("p1", "rev: abc", "cba"),
                         make_example("p2", "rev: bcdea", "aedcb"), make_example("p3", "rev: edcba", "abcde"),
                         make_example("p4", "rev: abcdf", "fdcba"), make_example("p5", "rev: cdeab", "baedc")};
        const Example& target = pool.examples[0];
        std::vector<std::pair<double, std::string>> scored;
        for (const auto& e : pool.examples) {
            if (e.id != target.id) scored.push_back({-jaccard_oracle(target.prompt, e.prompt), e.id});
        }
        std::sort(scored.begin(), scored.end());
        const ContextSet cs = build_contexts(target, pool, ContextStrategy::retrieval, 3, 0);
        for (int i = 0; i < 3; ++i) CHECK(cs.view_ids[static_cast<std::size_t>(i)] == scored[static_cast<std::size_t>(i)].second);
        for (const auto& a : pool.examples) {
            for (const auto& b : pool.examples) CHECK(bigram_jaccard(a.prompt, b.prompt) == doctest::Approx(jaccard_oracle(a.prompt, b.prompt)));
        }
    }

    TEST_CASE("retrieval agrees with brute force on a generated pool of 50") {
        const TaskDataset pool = generate_task(TaskKind::reverse, 50, 21);
        for (std::size_t t = 0; t < 5; ++t) {
            const Example& target = pool.examples[t];
            std::vector<std::pair<double, std::string>> scored;
            for (const auto& e : pool.examples) {
                if (e.id != target.id) scored.push_back({-jaccard_oracle(target.prompt, e.prompt), e.id});
            }
            std::sort(scored.begin(), scored.end());
            const ContextSet cs = build_contexts(target, pool, ContextStrategy::retrieval, 4, 0);
            for (int i = 0; i < 4; ++i) CHECK(cs.view_ids[static_cast<std::size_t>(i)] == scored[static_cast<std::size_t>(i)].second);
        }
    }

    TEST_CASE("random contexts are seeded draws without replacement") {
        const TaskDataset pool = generate_task(TaskKind::reverse, 30, 2);
        const ContextSet a = build_contexts(pool.examples[3], pool, ContextStrategy::random, 5, 9);
        const ContextSet b = build_contexts(pool.examples[3], pool, ContextStrategy::random, 5, 9);
        CHECK(a.view_ids == b.view_ids);
        CHECK(a.auxiliaries == b.auxiliaries);
        const std::set<std::string> uniq(a.view_ids.begin(), a.view_ids.end());
        CHECK(uniq.size() == 5);
        CHECK(uniq.count(pool.examples[3].id) == 0);
    }

    TEST_CASE("K beyond the pool or the template set is a configuration error") {
        const TaskDataset pool = generate_task(TaskKind::reverse, 4, 2);
        CHECK_THROWS_AS(build_contexts(pool.examples[0], pool, ContextStrategy::retrieval, 4, 0), ConfigError);
        CHECK_THROWS_AS(build_contexts(pool.examples[0], pool, ContextStrategy::random, 4, 0), ConfigError);
        CHECK_NOTHROW(build_contexts(pool.examples[0], pool, ContextStrategy::random, 3, 0));
        const auto templates = induction_templates(TaskKind::reverse);
        CHECK(templates.size() >= 3);
        CHECK(templates.size() <= 7);
        const ContextSet ind = build_contexts(pool.examples[0], pool, ContextStrategy::induction, 3, 0);
        CHECK(ind.auxiliaries[0] == templates[0]);
        CHECK_THROWS_AS(build_contexts(pool.examples[0], pool, ContextStrategy::induction,
                                       static_cast<int>(templates.size()) + 1, 0),
                        ConfigError);
    }

    TEST_CASE("JSONL round-trips every field") {
        TaskDataset d = generate_task(TaskKind::tool_format, 20, 4);
        d.examples[0].negative.reset();
        const TaskDataset back = from_jsonl(to_jsonl(d), Split::train, 4);
        REQUIRE(back.examples.size() == d.examples.size());
        for (std::size_t i = 0; i < d.examples.size(); ++i) {
            CHECK(back.examples[i].id == d.examples[i].id);
            CHECK(back.examples[i].prompt == d.examples[i].prompt);
            CHECK(back.examples[i].gold == d.examples[i].gold);
            CHECK(back.examples[i].negative == d.examples[i].negative);
            CHECK(back.examples[i].task_kind == d.examples[i].task_kind);
        }
        CHECK(to_jsonl(back) == to_jsonl(d));
    }

    TEST_CASE("rendering helpers") {
        const Example e = make_example("x", "rev: abc", "cba");
        const Tokens demo = demonstration(e);
        CHECK(text(demo) == "rev: abc<SEP>cba\n");
        CHECK(text(render_prompt(e)) == "rev: abc<SEP>");
        CHECK(with_eos(e.gold).back() == tok::eos);
        CHECK(Vocab::standard().size() == 70);
    }
}
