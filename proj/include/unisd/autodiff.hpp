// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major matrices.
// A Tape records every op with a backward closure; backward() replays them in
// reverse. Parameter leaves scatter their gradient into one flat vector that is
// laid out like PolicyParameters::values.

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "unisd/tensor.hpp"
#include "unisd/tokenizer.hpp"

namespace unisd::ad {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

class Tape {
public:
    using Backward = std::function<void(Tape&, Var self)>;

    explicit Tape(std::size_t num_params = 0) : param_grad_(num_params, 0.0) {}

    Var constant(Matrix value);
    Var scalar_constant(double v) { return constant(Matrix(1, 1, v)); }
    /// Leaf copied from `values`; its gradient accumulates into param_grad()[offset ...].
    Var parameter(std::span<const double> values, int rows, int cols, std::size_t offset);
    /// Records an op output. `backward` is dropped when no input needs a gradient.
    Var record(Matrix value, bool requires_grad, Backward backward);

    const Matrix& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    double scalar(Var v) const { return value(v).data.at(0); }
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].requires_grad; }
    /// Gradient buffer of `v`, zero-initialised on first access.
    Matrix& grad(Var v);

    /// Seeds d(root)/d(root) = 1 and propagates. `root` must be 1x1.
    void backward(Var root);

    const std::vector<double>& param_grad() const { return param_grad_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        bool has_grad = false;
        Backward backward;
        std::ptrdiff_t param_offset = -1;
    };
    std::deque<Node> nodes_;
    std::vector<double> param_grad_;
};

// Row kernels shared by the taped forward and the incremental decoder, so both
// produce identical values for identical inputs.
namespace kernels {
/// out = x @ w, accumulated over the inner index in ascending order.
void matmul_row(std::span<const double> x, const Matrix& w, std::span<double> out);
void rmsnorm_row(std::span<const double> x, std::span<const double> gain, std::span<double> out, double* inv_rms = nullptr);
double gelu(double x);
double gelu_grad(double x);
/// Causal softmax attention of one query against `n_keys` key/value rows spaced `stride` apart.
void attention_row(const double* q, const double* k, const double* v, std::size_t stride, int n_keys, int head_dim,
                   double scale, double* probs, double* out);
}  // namespace kernels

inline constexpr double kRmsEps = 1e-5;

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
/// Adds a 1 x n row to every row of a.
Var add_row(Tape& t, Var a, Var row);
Var scale(Tape& t, Var a, double s);
Var gelu(Tape& t, Var a);
Var rmsnorm(Tape& t, Var a, Var gain);
/// Gathers rows of `table` by token id.
Var embedding(Tape& t, Var table, std::span<const Token> ids);
/// Causal multi-head attention over packed [T x 3d] query/key/value rows; returns T x d.
Var causal_attention(Tape& t, Var qkv, int heads);
Var log_softmax_rows(Tape& t, Var a);
Var slice_rows(Tape& t, Var a, int begin, int count);
/// out(i, 0) = a(i, cols[i]).
Var pick(Tape& t, Var a, std::span<const Token> cols);
Var sum(Tape& t, Var a);
/// Elementwise linear combination of equally-shaped values.
Var lincomb(Tape& t, std::span<const Var> terms, std::span<const double> coeffs);

}  // namespace unisd::ad
