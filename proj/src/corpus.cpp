// SPDX-License-Identifier: Apache-2.0
#include "unisd/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <set>
#include <span>
#include <sstream>

#include <json.hpp>

#include "unisd/errors.hpp"
#include "unisd/rng.hpp"

namespace unisd {

namespace {

constexpr std::string_view kReverseLetters = "abcdefghij";
constexpr int kReverseMinLen = 3;
constexpr int kReverseMaxLen = 5;
constexpr std::array<std::string_view, 5> kToolNames = {"add", "sub", "mul", "max", "min"};

const Vocab& vocab() { return Vocab::standard(); }

std::string text_of(const Tokens& t) {
    std::string s;
    s.reserve(t.size());
    for (Token x : t) {
        if (!vocab().is_char_token(x)) return s + '\x01';
        s += vocab().decode_token(x);
    }
    return s;
}

bool is_integer_text(std::string_view s, bool allow_sign) {
    if (s.empty()) return false;
    std::size_t i = 0;
    if (allow_sign && s[0] == '-') i = 1;
    if (i >= s.size()) return false;
    if (s[i] == '0' && s.size() - i > 1) return false;
    for (; i < s.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
    }
    return !(allow_sign && s == "-0");
}

// ---------------------------------------------------------------- expressions

struct ExprParser {
    std::string_view s;
    std::size_t pos = 0;
    bool ok = true;

    long expr() {
        long v = term();
        while (ok && pos < s.size() && (s[pos] == '+' || s[pos] == '-')) {
            const char op = s[pos++];
            const long r = term();
            v = op == '+' ? v + r : v - r;
        }
        return v;
    }
    long term() {
        long v = factor();
        while (ok && pos < s.size() && s[pos] == '*') {
            ++pos;
            v *= factor();
        }
        return v;
    }
    long factor() {
        if (pos < s.size() && s[pos] == '(') {
            ++pos;
            const long v = expr();
            if (pos >= s.size() || s[pos] != ')') {
                ok = false;
                return 0;
            }
            ++pos;
            return v;
        }
        if (pos >= s.size() || !std::isdigit(static_cast<unsigned char>(s[pos]))) {
            ok = false;
            return 0;
        }
        long v = 0;
        while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) v = v * 10 + (s[pos++] - '0');
        return v;
    }
};

std::optional<long> evaluate_expression(std::string_view body) {
    ExprParser p{body};
    const long v = p.expr();
    if (!p.ok || p.pos != body.size()) return std::nullopt;
    return v;
}

// ---------------------------------------------------------------- prompt parsing

struct ArithPrompt {
    int a, b, m;
};

std::optional<ArithPrompt> parse_arith_prompt(const std::string& p) {
    ArithPrompt out{};
    char tail[8] = {0};
    if (std::sscanf(p.c_str(), "%d+%d mod %d %7s", &out.a, &out.b, &out.m, tail) != 4) return std::nullopt;
    if (std::string(tail) != "=" || out.m < 2) return std::nullopt;
    return out;
}

struct ToolPrompt {
    std::string name;
    int a, b;
};

std::optional<ToolPrompt> parse_tool_prompt(const std::string& p) {
    char name[16] = {0};
    ToolPrompt out{};
    if (std::sscanf(p.c_str(), "tool: %15s a=%d b=%d", name, &out.a, &out.b) != 3) return std::nullopt;
    out.name = name;
    return out;
}

std::string tool_call(const std::string& name, int a, int b) {
    return name + "(" + std::to_string(a) + "," + std::to_string(b) + ")";
}

std::optional<std::string> expected_answer(TaskKind kind, const std::string& prompt) {
    switch (kind) {
        case TaskKind::reverse: {
            if (prompt.rfind("rev: ", 0) != 0) return std::nullopt;
            std::string s = prompt.substr(5);
            std::reverse(s.begin(), s.end());
            return s;
        }
        case TaskKind::modular_arith: {
            const auto ap = parse_arith_prompt(prompt);
            if (!ap) return std::nullopt;
            return std::to_string((ap->a + ap->b) % ap->m);
        }
        case TaskKind::expr_eval: {
            if (prompt.rfind("eval: ", 0) != 0 || prompt.back() != '=') return std::nullopt;
            const auto v = evaluate_expression(std::string_view(prompt).substr(6, prompt.size() - 7));
            if (!v) return std::nullopt;
            return std::to_string(*v);
        }
        case TaskKind::tool_format: {
            const auto tp = parse_tool_prompt(prompt);
            if (!tp) return std::nullopt;
            return tool_call(tp->name, tp->a, tp->b);
        }
    }
    return std::nullopt;
}

// ---------------------------------------------------------------- generators

std::string random_prompt(TaskKind kind, Rng& rng) {
    switch (kind) {
        case TaskKind::reverse: {
            const int len = kReverseMinLen + static_cast<int>(uniform_index(rng, kReverseMaxLen - kReverseMinLen + 1));
            std::string letters(kReverseLetters);
            std::string s;
            for (int i = 0; i < len; ++i) {
                const std::size_t j = uniform_index(rng, letters.size());
                s += letters[j];
                letters.erase(j, 1);
            }
            return "rev: " + s;
        }
        case TaskKind::modular_arith: {
            const int a = static_cast<int>(uniform_index(rng, 100));
            const int b = static_cast<int>(uniform_index(rng, 100));
            const int m = 2 + static_cast<int>(uniform_index(rng, 9));
            return std::to_string(a) + "+" + std::to_string(b) + " mod " + std::to_string(m) + " =";
        }
        case TaskKind::expr_eval: {
            static constexpr char ops[] = {'+', '-', '*'};
            const auto d = [&] { return std::to_string(1 + uniform_index(rng, 9)); };
            const auto op = [&] { return std::string(1, ops[uniform_index(rng, 3)]); };
            const std::string a = d(), o1 = op(), b = d(), o2 = op(), c = d();
            std::string body;
            switch (uniform_index(rng, 3)) {
                case 0: body = a + o1 + b + o2 + c; break;
                case 1: body = "(" + a + o1 + b + ")" + o2 + c; break;
                default: body = a + o1 + "(" + b + o2 + c + ")"; break;
            }
            return "eval: " + body + "=";
        }
        case TaskKind::tool_format: {
            const std::string name(kToolNames[uniform_index(rng, kToolNames.size())]);
            const int a = static_cast<int>(uniform_index(rng, 20));
            const int b = static_cast<int>(uniform_index(rng, 20));
            return "tool: " + name + " a=" + std::to_string(a) + " b=" + std::to_string(b);
        }
    }
    throw ConfigError("unsupported task kind");
}

std::uint64_t prompt_space(TaskKind kind) {
    switch (kind) {
        case TaskKind::reverse: return 10ULL * 9 * 8 * (1 + 7 + 7 * 6);
        case TaskKind::modular_arith: return 100ULL * 100 * 9;
        case TaskKind::expr_eval: return 9ULL * 9 * 9 * 9 * 3;
        case TaskKind::tool_format: return 5ULL * 20 * 20;
    }
    return 0;
}


std::string make_id(TaskKind kind, Split split, int index) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s-%s-%06d", to_string(kind).c_str(), to_string(split).c_str(), index);
    return buf;
}

Example make_example(TaskKind kind, const std::string& prompt_text, std::string id, std::uint64_t negative_seed) {
    Example ex;
    ex.id = std::move(id);
    ex.task_kind = kind;
    ex.prompt = vocab().encode(prompt_text);
    ex.gold = vocab().encode(*expected_answer(kind, prompt_text));
    for (Corruption c : {Corruption::answer_perturb, Corruption::step_corrupt, Corruption::lexical_swap}) {
        try {
            ex.negative = make_negative(ex, c, negative_seed);
            break;
        } catch (const Error&) {
        }
    }
    return ex;
}

std::vector<std::string> unique_prompts(TaskKind kind, std::size_t n, std::uint64_t seed) {
    if (n > prompt_space(kind) / 2) {
        throw ConfigError("requested " + std::to_string(n) + " examples exceeds the prompt space of " + to_string(kind));
    }
    Rng rng(derive_seed(seed, "task:" + to_string(kind)));
    std::set<std::string> seen;
    std::vector<std::string> out;
    out.reserve(n);
    while (out.size() < n) {
        std::string p = random_prompt(kind, rng);
        if (seen.insert(p).second) out.push_back(std::move(p));
    }
    return out;
}

TaskDataset assemble(TaskKind kind, std::span<const std::string> prompts, Split split, std::uint64_t seed,
                     int index_offset) {
    TaskDataset ds;
    ds.split = split;
    ds.seed = seed;
    ds.alphabet = vocab().alphabet();
    ds.examples.reserve(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        const int global = index_offset + static_cast<int>(i);
        ds.examples.push_back(
            make_example(kind, prompts[i], make_id(kind, split, static_cast<int>(i)), derive_seed(seed, "negative", global)));
    }
    return ds;
}

// sorted distinct permutations of `s` without `s` itself
std::vector<std::string> other_permutations(std::string s) {
    const std::string original = s;
    std::sort(s.begin(), s.end());
    std::vector<std::string> out;
    do {
        if (s != original) out.push_back(s);
    } while (std::next_permutation(s.begin(), s.end()));
    return out;
}

[[noreturn]] void corruption_failure(const Example& ex, Corruption c) {
    throw Error(ErrorKind::corruption, to_string(c) + " cannot corrupt " + ex.id + " into a well-formed wrong answer");
}

}  // namespace

std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::reverse: return "reverse";
        case TaskKind::modular_arith: return "modular_arith";
        case TaskKind::expr_eval: return "expr_eval";
        case TaskKind::tool_format: return "tool_format";
    }
    return "?";
}

std::string to_string(Split s) { return s == Split::train ? "train" : "eval"; }

std::string to_string(ContextStrategy s) {
    switch (s) {
        case ContextStrategy::retrieval: return "retrieval";
        case ContextStrategy::random: return "random";
        case ContextStrategy::induction: return "induction";
    }
    return "?";
}

std::string to_string(Corruption c) {
    switch (c) {
        case Corruption::answer_perturb: return "answer_perturb";
        case Corruption::step_corrupt: return "step_corrupt";
        case Corruption::lexical_swap: return "lexical_swap";
    }
    return "?";
}

TaskKind parse_task_kind(std::string_view s) {
    for (TaskKind k : {TaskKind::reverse, TaskKind::modular_arith, TaskKind::expr_eval, TaskKind::tool_format}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unsupported task_kind '" + std::string(s) + "'");
}

ContextStrategy parse_context_strategy(std::string_view s) {
    for (auto k : {ContextStrategy::retrieval, ContextStrategy::random, ContextStrategy::induction}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unsupported context strategy '" + std::string(s) + "'");
}

Corruption parse_corruption(std::string_view s) {
    for (auto k : {Corruption::answer_perturb, Corruption::step_corrupt, Corruption::lexical_swap}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unsupported corruption '" + std::string(s) + "'");
}

TaskDataset generate_task(TaskKind kind, int n, std::uint64_t seed, Split split) {
    if (n < 1) throw ConfigError("generate_task requires n >= 1");
    const auto prompts = unique_prompts(kind, static_cast<std::size_t>(n), seed);
    return assemble(kind, prompts, split, seed, 0);
}

std::pair<TaskDataset, TaskDataset> generate_splits(TaskKind kind, int n_train, int n_eval, std::uint64_t seed) {
    if (n_train < 1 || n_eval < 1) throw ConfigError("generate_splits requires n_train >= 1 and n_eval >= 1");
    const auto prompts = unique_prompts(kind, static_cast<std::size_t>(n_train + n_eval), seed);
    std::span<const std::string> all(prompts);
    return {assemble(kind, all.first(static_cast<std::size_t>(n_train)), Split::train, seed, 0),
            assemble(kind, all.subspan(static_cast<std::size_t>(n_train)), Split::eval, seed, n_train)};
}

bool check_answer(TaskKind kind, const Tokens& prompt, const Tokens& answer) {
    const auto expected = expected_answer(kind, text_of(prompt));
    return expected && *expected == text_of(answer);
}

bool parses(TaskKind kind, const Tokens& prompt, const Tokens& answer) {
    const std::string p = text_of(prompt);
    const std::string a = text_of(answer);
    switch (kind) {
        case TaskKind::reverse: {
            if (p.rfind("rev: ", 0) != 0 || a.size() != p.size() - 5) return false;
            return std::all_of(a.begin(), a.end(), [](char c) { return c >= 'a' && c <= 'z'; });
        }
        case TaskKind::modular_arith: return is_integer_text(a, false);
        case TaskKind::expr_eval: return is_integer_text(a, true);
        case TaskKind::tool_format: {
            const auto open = a.find('(');
            const auto comma = a.find(',');
            if (open == std::string::npos || comma == std::string::npos || a.back() != ')' || comma < open) return false;
            const std::string name = a.substr(0, open);
            if (name.empty() || !std::all_of(name.begin(), name.end(), [](char c) { return c >= 'a' && c <= 'z'; })) {
                return false;
            }
            return is_integer_text(std::string_view(a).substr(open + 1, comma - open - 1), false) &&
                   is_integer_text(std::string_view(a).substr(comma + 1, a.size() - comma - 2), false);
        }
    }
    return false;
}

Tokens make_negative(const Example& example, Corruption corruption, std::uint64_t seed) {
    if (example.gold.empty()) throw Error(ErrorKind::corruption, "example " + example.id + " has an empty gold answer");
    const std::string prompt = text_of(example.prompt);
    const std::string gold = text_of(example.gold);
    const std::uint64_t pick = splitmix64(seed);
    std::string neg;

    switch (example.task_kind) {
        case TaskKind::reverse: {
            if (corruption == Corruption::answer_perturb) {
                if (gold.size() > 8) corruption_failure(example, corruption);
                const auto perms = other_permutations(gold);
                if (perms.empty()) corruption_failure(example, corruption);
                neg = perms[pick % perms.size()];
            } else if (corruption == Corruption::step_corrupt) {
                std::vector<std::size_t> swaps;
                for (std::size_t i = 0; i + 1 < gold.size(); ++i) {
                    if (gold[i] != gold[i + 1]) swaps.push_back(i);
                }
                if (swaps.empty()) corruption_failure(example, corruption);
                neg = gold;
                const std::size_t i = swaps[pick % swaps.size()];
                std::swap(neg[i], neg[i + 1]);
            } else {
                neg = gold;
                const std::size_t pos = pick % gold.size();
                std::string choices;
                for (char c : kReverseLetters) {
                    if (c != gold[pos]) choices += c;
                }
                neg[pos] = choices[splitmix64(pick) % choices.size()];
            }
            break;
        }
        case TaskKind::modular_arith: {
            const auto ap = parse_arith_prompt(prompt);
            if (!ap) corruption_failure(example, corruption);
            const int g = (ap->a + ap->b) % ap->m;
            int v = 0;
            if (corruption == Corruption::answer_perturb) {
                v = (g + 1 + static_cast<int>(pick % static_cast<std::uint64_t>(ap->m - 1))) % ap->m;
            } else if (corruption == Corruption::step_corrupt) {
                v = (ap->a + ap->b + 1) % ap->m;
            } else {
                v = (g + ap->m - 1) % ap->m;
            }
            neg = std::to_string(v);
            break;
        }
        case TaskKind::expr_eval: {
            const long g = std::stol(gold);
            if (corruption == Corruption::answer_perturb) {
                const long delta = 1 + static_cast<long>(pick % 3);
                neg = std::to_string((pick >> 8) % 2 == 0 ? g + delta : g - delta);
            } else if (corruption == Corruption::step_corrupt) {
                std::string body = prompt.substr(6, prompt.size() - 7);
                const auto op = body.find_first_of("+-*");
                body[op] = body[op] == '+' ? '-' : (body[op] == '-' ? '*' : '+');
                const auto v = evaluate_expression(body);
                if (!v || *v == g) corruption_failure(example, corruption);
                neg = std::to_string(*v);
            } else {
                neg = g == 0 ? "1" : std::to_string(-g);
            }
            break;
        }
        case TaskKind::tool_format: {
            const auto tp = parse_tool_prompt(prompt);
            if (!tp) corruption_failure(example, corruption);
            if (corruption == Corruption::answer_perturb) {
                neg = tool_call(tp->name, tp->a + 1 + static_cast<int>(pick % 3), tp->b);
            } else if (corruption == Corruption::step_corrupt) {
                if (tp->a == tp->b) corruption_failure(example, corruption);
                neg = tool_call(tp->name, tp->b, tp->a);
            } else {
                std::vector<std::string> others;
                for (auto n : kToolNames) {
                    if (n != tp->name) others.emplace_back(n);
                }
                neg = tool_call(others[pick % others.size()], tp->a, tp->b);
            }
            break;
        }
    }

    Tokens out = vocab().encode(neg);
    if (!parses(example.task_kind, example.prompt, out) || check_answer(example.task_kind, example.prompt, out)) {
        corruption_failure(example, corruption);
    }
    return out;
}

Tokens demonstration(const Example& example) {
    Tokens out = example.prompt;
    out.push_back(tok::sep);
    out.insert(out.end(), example.gold.begin(), example.gold.end());
    out.push_back(vocab().encode_char('\n'));
    return out;
}

Tokens render_prompt(const Example& example) {
    Tokens out = example.prompt;
    out.push_back(tok::sep);
    return out;
}

Tokens with_eos(const Tokens& answer) {
    Tokens out = answer;
    out.push_back(tok::eos);
    return out;
}

std::vector<Tokens> induction_templates(TaskKind kind) {
    std::vector<std::string> lines;
    switch (kind) {
        case TaskKind::reverse:
            lines = {"write the letters in reverse order.",
                     "reverse the word after rev:",
                     "read the letters from right to left.",
                     "output the last letter first and the first letter last.",
                     "mirror the sequence of letters.",
                     "task: reversal. keep every letter, flip the order.",
                     "spell the given letters backwards."};
            break;
        case TaskKind::modular_arith:
            lines = {"add the two numbers and take the remainder.",
                     "compute the sum modulo the given base.",
                     "give (a+b) mod m as a single number.",
                     "sum, then divide by m and keep the remainder.",
                     "answer with the residue of the sum.",
                     "task: modular addition.",
                     "the result is between 0 and m-1."};
            break;
        case TaskKind::expr_eval:
            lines = {"evaluate the arithmetic expression.",
                     "compute the value; multiplication binds first.",
                     "respect parentheses and give the integer result.",
                     "work out the expression step by step.",
                     "answer with one integer, possibly negative.",
                     "task: expression evaluation.",
                     "apply + - * with usual precedence."};
            break;
        case TaskKind::tool_format:
            lines = {"format the request as a tool call.",
                     "write name(a,b) using the given arguments.",
                     "emit the function call with a then b.",
                     "convert tool: name a=x b=y into name(x,y).",
                     "keep the argument order a, b.",
                     "task: tool call formatting.",
                     "no spaces inside the call."};
            break;
    }
    std::vector<Tokens> out;
    for (const auto& l : lines) out.push_back(vocab().encode(l + "\n"));
    return out;
}

double bigram_jaccard(const Tokens& a, const Tokens& b) {
    const auto bigrams = [](const Tokens& t) {
        std::vector<std::pair<Token, Token>> out;
        for (std::size_t i = 0; i + 1 < t.size(); ++i) out.emplace_back(t[i], t[i + 1]);
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    };
    const auto ba = bigrams(a);
    const auto bb = bigrams(b);
    if (ba.empty() && bb.empty()) return a == b ? 1.0 : 0.0;
    std::size_t inter = 0;
    std::size_t i = 0, j = 0;
    while (i < ba.size() && j < bb.size()) {
        if (ba[i] < bb[j]) {
            ++i;
        } else if (bb[j] < ba[i]) {
            ++j;
        } else {
            ++inter;
            ++i;
            ++j;
        }
    }
    return static_cast<double>(inter) / static_cast<double>(ba.size() + bb.size() - inter);
}

ContextSet build_contexts(const Example& example, const TaskDataset& pool, ContextStrategy strategy, int k,
                          std::uint64_t seed) {
    if (k < 1) throw ConfigError("build_contexts requires K >= 1");
    ContextSet cs;
    cs.strategy = strategy;
    cs.primary = demonstration(example);

    if (strategy == ContextStrategy::induction) {
        const auto templates = induction_templates(example.task_kind);
        if (static_cast<std::size_t>(k) > templates.size()) {
            throw ConfigError("K=" + std::to_string(k) + " exceeds the " + std::to_string(templates.size()) +
                              " induction templates for " + to_string(example.task_kind));
        }
        for (int i = 0; i < k; ++i) {
            cs.auxiliaries.push_back(templates[static_cast<std::size_t>(i)]);
            cs.view_ids.push_back("induction-" + std::to_string(i));
        }
        return cs;
    }

    std::vector<const Example*> candidates;
    candidates.reserve(pool.examples.size());
    for (const auto& e : pool.examples) {
        if (e.id != example.id) candidates.push_back(&e);
    }
    if (static_cast<std::size_t>(k) > candidates.size()) {
        throw ConfigError("K=" + std::to_string(k) + " exceeds the context pool of " +
                          std::to_string(candidates.size()) + " examples");
    }

    std::vector<const Example*> chosen;
    if (strategy == ContextStrategy::retrieval) {
        std::vector<std::pair<double, const Example*>> scored;
        scored.reserve(candidates.size());
        for (const Example* e : candidates) scored.emplace_back(bigram_jaccard(example.prompt, e->prompt), e);
        std::partial_sort(scored.begin(), scored.begin() + k, scored.end(), [](const auto& x, const auto& y) {
            if (x.first != y.first) return x.first > y.first;
            return x.second->id < y.second->id;
        });
        for (int i = 0; i < k; ++i) chosen.push_back(scored[static_cast<std::size_t>(i)].second);
    } else {
        Rng rng(derive_seed(seed, "contexts:" + example.id));
        for (int i = 0; i < k; ++i) {
            const std::size_t j = static_cast<std::size_t>(i) + uniform_index(rng, candidates.size() - static_cast<std::size_t>(i));
            std::swap(candidates[static_cast<std::size_t>(i)], candidates[j]);
            chosen.push_back(candidates[static_cast<std::size_t>(i)]);
        }
    }
    for (const Example* e : chosen) {
        cs.auxiliaries.push_back(demonstration(*e));
        cs.view_ids.push_back(e->id);
    }
    return cs;
}

std::string to_jsonl(const TaskDataset& dataset) {
    std::ostringstream os;
    for (const auto& e : dataset.examples) {
        nlohmann::ordered_json j;
        j["id"] = e.id;
        j["prompt"] = text_of(e.prompt);
        j["gold"] = text_of(e.gold);
        j["negative"] = e.negative ? nlohmann::ordered_json(text_of(*e.negative)) : nlohmann::ordered_json(nullptr);
        j["task_kind"] = to_string(e.task_kind);
        os << j.dump() << '\n';
    }
    return os.str();
}

TaskDataset from_jsonl(std::string_view text, Split split, std::uint64_t seed) {
    TaskDataset ds;
    ds.split = split;
    ds.seed = seed;
    ds.alphabet = vocab().alphabet();
    std::istringstream is{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            Example e;
            e.id = j.at("id").get<std::string>();
            e.prompt = vocab().encode(j.at("prompt").get<std::string>());
            e.gold = vocab().encode(j.at("gold").get<std::string>());
            if (!j.at("negative").is_null()) e.negative = vocab().encode(j.at("negative").get<std::string>());
            e.task_kind = parse_task_kind(j.at("task_kind").get<std::string>());
            ds.examples.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw ConfigError("dataset line " + std::to_string(lineno) + ": " + ex.what());
        }
    }
    return ds;
}

}  // namespace unisd
