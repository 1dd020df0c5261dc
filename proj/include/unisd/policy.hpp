// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unisd/autodiff.hpp"
#include "unisd/tensor.hpp"
#include "unisd/tokenizer.hpp"

namespace unisd {

/// Decoder-only transformer shape. The defaults are the reference architecture.
struct ArchConfig {
    int vocab = 70;
    int d_model = 64;
    int layers = 2;
    int heads = 4;
    int window = 128;
    int mlp_ratio = 4;
    double init_std = 0.02;

    bool operator==(const ArchConfig&) const = default;
};

void validate(const ArchConfig& arch);

enum class DType { f32, f64 };
std::string to_string(DType d);
DType parse_dtype(const std::string& s);

struct ParamSlice {
    std::string name;
    std::size_t offset = 0;
    int rows = 0;
    int cols = 0;
    std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
    bool operator==(const ParamSlice&) const = default;
};

/// Flat parameter vector with a named-slice index. Values are held in double;
/// `dtype` is the storage precision of checkpoints.
struct PolicyParameters {
    ArchConfig arch;
    DType dtype = DType::f64;
    std::vector<double> values;
    std::vector<ParamSlice> shape_table;

    const ParamSlice& slice(const std::string& name) const;
    std::span<double> view(const std::string& name);
    std::span<const double> view(const std::string& name) const;
    std::size_t size() const { return values.size(); }
};

/// Shape table for `arch`, laid out contiguously in declaration order.
std::vector<ParamSlice> layout(const ArchConfig& arch);
PolicyParameters init_policy(const ArchConfig& arch, std::uint64_t seed);
/// Throws a parameter error unless the slices partition the vector and all values are finite.
void check_invariants(const PolicyParameters& params);
std::uint64_t fingerprint(const PolicyParameters& params);

struct Trajectory {
    Tokens prompt;
    Tokens completion;
    std::vector<double> mask;
    std::vector<double> sample_logprobs;
    double temperature = 1.0;

    int length() const { return static_cast<int>(completion.size()); }
};

struct FeatureTrace {
    Matrix features;  // T x d
    int d() const { return features.cols; }
};

/// Log-probabilities and final hidden states of one teacher-forced pass over a
/// completion. Rows align with completion positions.
struct ForcedPass {
    Matrix logprobs;  // T x V, full next-token distributions
    Matrix hidden;    // T x d
    std::vector<double> token_logprobs;
};

/// Ancestral sampling from the temperature-scaled softmax; temperature 0 is greedy
/// with lowest-id tie-break. Stops after EOS or `max_len` tokens.
Trajectory sample_completion(const PolicyParameters& params, const Tokens& context, double temperature, int max_len,
                             std::uint64_t seed);

ForcedPass forced_pass(const PolicyParameters& params, const Tokens& condition, const Tokens& prompt,
                       const Tokens& completion);
std::vector<double> score_tokens(const PolicyParameters& params, const Tokens& condition, const Trajectory& trajectory);
FeatureTrace extract_features(const PolicyParameters& params, const Tokens& condition, const Trajectory& trajectory);

/// beta * teacher + (1 - beta) * student.
PolicyParameters ema_update(const PolicyParameters& teacher, const PolicyParameters& student, double beta);

// ---------------------------------------------------------------- differentiable forward

/// One Var per parameter slice, bound on a tape either as trainable leaves or constants.
struct ModelBinding {
    const PolicyParameters* params = nullptr;
    std::vector<ad::Var> slots;  // parallel to shape_table
    ad::Var operator[](std::size_t i) const { return slots[i]; }
};

ModelBinding bind(ad::Tape& tape, const PolicyParameters& params, bool trainable);

struct ForwardVars {
    ad::Var logprobs;  // rows x V
    ad::Var hidden;    // rows x d
};

/// Input layout: BOS + condition + prompt + completion[0..T-1). When the sequence does
/// not fit the window, the condition is truncated from the left.
struct PackedInput {
    Tokens tokens;
    int first_row = 0;  // row whose output predicts completion[0]
    int condition_kept = 0;
};
PackedInput pack_input(const ArchConfig& arch, const Tokens& condition, const Tokens& prompt, const Tokens& completion);

/// Log-softmax outputs and final hidden states for every completion position.
ForwardVars forward_completion(ad::Tape& tape, const ModelBinding& model, const Tokens& condition,
                               const Tokens& prompt, const Tokens& completion);

using LossClosure = std::function<ad::Var(ad::Tape&, const ModelBinding&)>;

struct LossGrad {
    double loss = 0.0;
    std::vector<double> grad;
};

/// Reverse-mode gradient of a scalar loss built on a fresh tape. Anything the closure
/// computes outside the tape (teacher passes, EMA weights) is a constant.
LossGrad grad_loss(const PolicyParameters& params, const LossClosure& loss);

// ---------------------------------------------------------------- checkpoints

std::string checkpoint_bytes(const PolicyParameters& params);
PolicyParameters parse_checkpoint(const std::string& bytes);
void save_checkpoint(const std::string& path, const PolicyParameters& params);
PolicyParameters load_checkpoint(const std::string& path);

}  // namespace unisd
