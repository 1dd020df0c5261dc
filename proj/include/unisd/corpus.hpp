// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "unisd/tokenizer.hpp"

namespace unisd {

enum class TaskKind { reverse, modular_arith, expr_eval, tool_format };
enum class Split { train, eval };
enum class ContextStrategy { retrieval, random, induction };
enum class Corruption { answer_perturb, step_corrupt, lexical_swap };

std::string to_string(TaskKind k);
std::string to_string(Split s);
std::string to_string(ContextStrategy s);
std::string to_string(Corruption c);
TaskKind parse_task_kind(std::string_view s);
ContextStrategy parse_context_strategy(std::string_view s);
Corruption parse_corruption(std::string_view s);

struct Example {
    std::string id;
    Tokens prompt;
    Tokens gold;
    std::optional<Tokens> negative;
    TaskKind task_kind = TaskKind::reverse;
};

struct TaskDataset {
    std::vector<Example> examples;
    Split split = Split::train;
    std::uint64_t seed = 0;
    std::string alphabet;
};

/// c* plus the K auxiliary conditions. Conditions are raw token runs; the prompt is
/// appended at scoring time.
struct ContextSet {
    Tokens primary;
    std::vector<Tokens> auxiliaries;
    std::vector<std::string> view_ids;
    ContextStrategy strategy = ContextStrategy::random;
};

TaskDataset generate_task(TaskKind kind, int n, std::uint64_t seed, Split split = Split::train);

/// Train and eval datasets drawn from one stream of distinct prompts, so the eval
/// prompts never occur in train. `train` equals generate_task(kind, n_train, seed).
std::pair<TaskDataset, TaskDataset> generate_splits(TaskKind kind, int n_train, int n_eval, std::uint64_t seed);

/// Deterministic task checker: true iff `answer` is the correct output for `prompt`.
bool check_answer(TaskKind kind, const Tokens& prompt, const Tokens& answer);
/// True iff `answer` is well-formed under the task's output format (right or wrong).
bool parses(TaskKind kind, const Tokens& prompt, const Tokens& answer);

Tokens make_negative(const Example& example, Corruption corruption, std::uint64_t seed);

/// prompt + SEP + gold + newline: how an example appears inside a condition.
Tokens demonstration(const Example& example);
/// prompt + SEP: the input the policy completes.
Tokens render_prompt(const Example& example);
/// `answer` with trailing EOS appended; the supervised completion for gold.
Tokens with_eos(const Tokens& answer);

std::vector<Tokens> induction_templates(TaskKind kind);

double bigram_jaccard(const Tokens& a, const Tokens& b);

ContextSet build_contexts(const Example& example, const TaskDataset& pool, ContextStrategy strategy, int k,
                          std::uint64_t seed);

std::string to_jsonl(const TaskDataset& dataset);
TaskDataset from_jsonl(std::string_view text, Split split, std::uint64_t seed);

}  // namespace unisd
