// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "unisd/corpus.hpp"
#include "unisd/evalkit.hpp"
#include "unisd/objectives.hpp"
#include "unisd/policy.hpp"
#include "unisd/rng.hpp"

namespace unisd {

enum class Mode { unisd, unisd_star, sft, sdft, gkd_like };
enum class OptimizerKind { sgd, adam };
enum class LrSchedule { constant, cosine };

std::string to_string(Mode m);
std::string to_string(OptimizerKind o);
std::string to_string(LrSchedule s);
Mode parse_mode(std::string_view s);
OptimizerKind parse_optimizer(std::string_view s);
LrSchedule parse_lr_schedule(std::string_view s);

/// How the frozen base policy pi_0 is produced before adaptation: a short supervised
/// phase in which the task is solved only when a demonstration precedes the prompt,
/// while bare prompts map to a fixed task-unrelated habit (echoing the input for
/// reversal, the stored negative otherwise). Zero steps leaves pi_0 at initialization.
struct BaseConfig {
    int pretrain_steps = 0;
    double learning_rate = 1e-3;
    int batch_size = 16;
};

struct TrainerConfig {
    DistillConfig distill;
    double learning_rate = 3e-4;
    OptimizerKind optimizer = OptimizerKind::adam;
    LrSchedule lr_schedule = LrSchedule::constant;  // cosine: decays to 0 over `steps`
    int steps = 100;
    int batch_size = 16;
    double temperature = 0.7;
    int max_completion = 8;
    Mode mode = Mode::unisd;
    std::uint64_t seed = 0;

    ArchConfig arch;
    BaseConfig base;
    int eval_every = 0;         // 0: evaluate only before and after training
    int eval_examples = 200;    // cap on eval-split examples per evaluation
    double eval_temperature = 0.7;  // retention and JSD rollouts, shared by every mode
    int eval_samples = 1;           // rollouts per prompt for retention and JSD
    int checkpoint_every = 0;   // 0: final checkpoints only
};

void validate(const TrainerConfig& cfg);
// Learning rate for the update made at training step `step` (0-based).
double scheduled_lr(const TrainerConfig& cfg, long step);

/// sft, sdft, gkd_like or unisd_star with its documented defaults.
TrainerConfig make_baseline_config(Mode name);

struct OptimizerState {
    std::vector<double> m;
    std::vector<double> v;
    long step = 0;
};

struct TrainState {
    PolicyParameters student;
    std::optional<PolicyParameters> ema_teacher;
    PolicyParameters base_snapshot;
    OptimizerState optimizer;
    long step = 0;
    Rng rollout_rng;
    Rng data_rng;
    Rng context_rng;
};

TrainState init_train_state(const TrainerConfig& cfg, const PolicyParameters& start);

struct StepStats {
    long step = 0;
    TokenLossBreakdown loss;  // batch means; per_token_divergence left empty
    double objective = 0.0;   // the value that was differentiated
    double mean_weight = 1.0;
    double clip_fraction = 0.0;
    double mean_rollout_length = 0.0;
    bool skipped = false;
    std::string skip_reason;
};

struct BatchItem {
    const Example* example = nullptr;
    ContextSet contexts;
};

/// Contexts for `example` as the trainer builds them at `step`.
ContextSet contexts_for(const Example& example, const TaskDataset& pool, const TrainerConfig& cfg, long step);

/// One rollout / teacher / loss / optimizer / EMA iteration over `batch`.
/// Degenerate weights and non-finite losses skip the update and are reported in StepStats.
std::pair<TrainState, StepStats> train_step(TrainState state, const std::vector<BatchItem>& batch,
                                            const TrainerConfig& cfg);

enum class Health { ok, unhealthy };
std::string to_string(Health h);

struct RunRecord {
    TrainerConfig config;
    std::vector<StepStats> steps;
    std::vector<EvalReport> eval_reports;
    PolicyParameters student;
    std::optional<PolicyParameters> ema_teacher;
    PolicyParameters base_snapshot;
    std::uint64_t base_fingerprint_before = 0;
    std::uint64_t base_fingerprint_after = 0;
    long skipped_steps = 0;
    Health health = Health::ok;
    std::string view_teacher;  // which parameters scored auxiliary views
    std::vector<std::pair<long, PolicyParameters>> checkpoints;  // periodic student snapshots
};

/// Builds pi_0 from a fresh initialization according to cfg.base.
PolicyParameters build_base_policy(const TrainerConfig& cfg, const TaskDataset& train);

/// Runs cfg.steps train steps over seeded shuffled batches. `base` skips the base
/// construction phase when given; `eval` enables periodic evaluation.
RunRecord run_training(const TrainerConfig& cfg, const TaskDataset& train, const TaskDataset* eval = nullptr,
                       const PolicyParameters* base = nullptr);

/// Serialises StepStats as one metrics-stream line (no trailing newline).
std::string metrics_line(const StepStats& s);

}  // namespace unisd
