// SPDX-License-Identifier: Apache-2.0
#include "unisd/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>

#include "unisd/errors.hpp"

namespace unisd::ad {

Var Tape::constant(Matrix value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::parameter(std::span<const double> values, int rows, int cols, std::size_t offset) {
    if (values.size() != static_cast<std::size_t>(rows) * cols || offset + values.size() > param_grad_.size()) {
        throw Error(ErrorKind::dimension, "parameter leaf does not fit the gradient buffer");
    }
    Node n;
    n.value = Matrix(rows, cols);
    std::copy(values.begin(), values.end(), n.value.data.begin());
    n.requires_grad = true;
    n.param_offset = static_cast<std::ptrdiff_t>(offset);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Matrix& Tape::grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.has_grad) {
        n.grad = Matrix(n.value.rows, n.value.cols);
        n.has_grad = true;
    }
    return n.grad;
}

void Tape::backward(Var root) {
    if (value(root).size() != 1) throw Error(ErrorKind::dimension, "backward() needs a scalar root");
    if (!requires_grad(root)) return;
    grad(root).data[0] += 1.0;
    for (int i = root.id; i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.has_grad && n.backward) n.backward(*this, Var{i});
    }
    for (Node& n : nodes_) {
        if (n.param_offset < 0 || !n.has_grad) continue;
        double* dst = param_grad_.data() + n.param_offset;
        for (std::size_t j = 0; j < n.grad.data.size(); ++j) dst[j] += n.grad.data[j];
    }
}

namespace kernels {

void matmul_row(std::span<const double> x, const Matrix& w, std::span<double> out) {
    std::fill(out.begin(), out.end(), 0.0);
    const int m = w.cols;
    for (int p = 0; p < w.rows; ++p) {
        const double a = x[static_cast<std::size_t>(p)];
        const double* wr = w.data.data() + static_cast<std::size_t>(p) * m;
        for (int j = 0; j < m; ++j) out[static_cast<std::size_t>(j)] += a * wr[j];
    }
}

void rmsnorm_row(std::span<const double> x, std::span<const double> gain, std::span<double> out, double* inv_rms) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double r = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * r * gain[i];
    if (inv_rms) *inv_rms = r;
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double th = std::tanh(u);
    const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

void attention_row(const double* q, const double* k, const double* v, std::size_t stride, int n_keys, int head_dim,
                   double scale, double* probs, double* out) {
    double mx = -INFINITY;
    for (int j = 0; j < n_keys; ++j) {
        const double* kj = k + static_cast<std::size_t>(j) * stride;
        double s = 0.0;
        for (int c = 0; c < head_dim; ++c) s += q[c] * kj[c];
        probs[j] = s * scale;
        mx = std::max(mx, probs[j]);
    }
    double z = 0.0;
    for (int j = 0; j < n_keys; ++j) {
        probs[j] = std::exp(probs[j] - mx);
        z += probs[j];
    }
    for (int c = 0; c < head_dim; ++c) out[c] = 0.0;
    for (int j = 0; j < n_keys; ++j) {
        probs[j] /= z;
        const double* vj = v + static_cast<std::size_t>(j) * stride;
        for (int c = 0; c < head_dim; ++c) out[c] += probs[j] * vj[c];
    }
}

}  // namespace kernels

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) throw Error(ErrorKind::dimension, std::string(op) + ": shape mismatch");
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
    const Matrix& A = t.value(a);
    const Matrix& B = t.value(b);
    if (A.cols != B.rows) throw Error(ErrorKind::dimension, "matmul: inner dimensions differ");
    Matrix C(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) kernels::matmul_row(A.row(i), B, C.row(i));
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(C), rg, [a, b](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        const Matrix& A = tp.value(a);
        const Matrix& B = tp.value(b);
        if (tp.requires_grad(a)) {
            Matrix& GA = tp.grad(a);
            for (int i = 0; i < A.rows; ++i) {
                for (int p = 0; p < A.cols; ++p) {
                    double s = 0.0;
                    const double* br = B.data.data() + static_cast<std::size_t>(p) * B.cols;
                    const double* gr = G.data.data() + static_cast<std::size_t>(i) * G.cols;
                    for (int j = 0; j < B.cols; ++j) s += gr[j] * br[j];
                    GA(i, p) += s;
                }
            }
        }
        if (tp.requires_grad(b)) {
            Matrix& GB = tp.grad(b);
            for (int i = 0; i < A.rows; ++i) {
                const double* gr = G.data.data() + static_cast<std::size_t>(i) * G.cols;
                for (int p = 0; p < A.cols; ++p) {
                    const double av = A(i, p);
                    double* gbr = GB.data.data() + static_cast<std::size_t>(p) * GB.cols;
                    for (int j = 0; j < B.cols; ++j) gbr[j] += av * gr[j];
                }
            }
        }
    });
}

Var add(Tape& t, Var a, Var b) {
    require_same_shape(t.value(a), t.value(b), "add");
    Matrix C = t.value(a);
    const Matrix& B = t.value(b);
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
    const bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(C), rg, [a, b](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        for (Var v : {a, b}) {
            if (!tp.requires_grad(v)) continue;
            Matrix& g = tp.grad(v);
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += G.data[i];
        }
    });
}

Var add_row(Tape& t, Var a, Var row) {
    const Matrix& R = t.value(row);
    Matrix C = t.value(a);
    if (R.rows != 1 || R.cols != C.cols) throw Error(ErrorKind::dimension, "add_row: bias shape mismatch");
    for (int i = 0; i < C.rows; ++i) {
        for (int j = 0; j < C.cols; ++j) C(i, j) += R(0, j);
    }
    const bool rg = t.requires_grad(a) || t.requires_grad(row);
    return t.record(std::move(C), rg, [a, row](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        if (tp.requires_grad(a)) {
            Matrix& g = tp.grad(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += G.data[i];
        }
        if (tp.requires_grad(row)) {
            Matrix& g = tp.grad(row);
            for (int i = 0; i < G.rows; ++i) {
                for (int j = 0; j < G.cols; ++j) g(0, j) += G(i, j);
            }
        }
    });
}

Var scale(Tape& t, Var a, double s) {
    Matrix C = t.value(a);
    for (double& v : C.data) v *= s;
    return t.record(std::move(C), t.requires_grad(a), [a, s](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        Matrix& g = tp.grad(a);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += s * G.data[i];
    });
}

Var gelu(Tape& t, Var a) {
    Matrix C = t.value(a);
    for (double& v : C.data) v = kernels::gelu(v);
    return t.record(std::move(C), t.requires_grad(a), [a](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        const Matrix& X = tp.value(a);
        Matrix& g = tp.grad(a);
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += G.data[i] * kernels::gelu_grad(X.data[i]);
    });
}

Var rmsnorm(Tape& t, Var a, Var gain) {
    const Matrix& X = t.value(a);
    const Matrix& Gn = t.value(gain);
    if (Gn.rows != 1 || Gn.cols != X.cols) throw Error(ErrorKind::dimension, "rmsnorm: gain shape mismatch");
    Matrix Y(X.rows, X.cols);
    auto inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(X.rows));
    for (int i = 0; i < X.rows; ++i) kernels::rmsnorm_row(X.row(i), Gn.row(0), Y.row(i), &(*inv)[static_cast<std::size_t>(i)]);
    const bool rg = t.requires_grad(a) || t.requires_grad(gain);
    return t.record(std::move(Y), rg, [a, gain, inv](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        const Matrix& X = tp.value(a);
        const Matrix& Gn = tp.value(gain);
        const int d = X.cols;
        for (int i = 0; i < X.rows; ++i) {
            const double r = (*inv)[static_cast<std::size_t>(i)];
            if (tp.requires_grad(gain)) {
                Matrix& gg = tp.grad(gain);
                for (int j = 0; j < d; ++j) gg(0, j) += G(i, j) * X(i, j) * r;
            }
            if (tp.requires_grad(a)) {
                double dot = 0.0;
                for (int j = 0; j < d; ++j) dot += G(i, j) * Gn(0, j) * X(i, j) * r;
                dot /= d;
                Matrix& gx = tp.grad(a);
                for (int j = 0; j < d; ++j) gx(i, j) += r * (G(i, j) * Gn(0, j) - X(i, j) * r * dot);
            }
        }
    });
}

Var embedding(Tape& t, Var table, std::span<const Token> ids) {
    const Matrix& E = t.value(table);
    Matrix out(static_cast<int>(ids.size()), E.cols);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= E.rows) throw Error(ErrorKind::dimension, "embedding: token id out of range");
        auto src = E.row(ids[i]);
        std::copy(src.begin(), src.end(), out.row(static_cast<int>(i)).begin());
    }
    std::vector<Token> idv(ids.begin(), ids.end());
    return t.record(std::move(out), t.requires_grad(table), [table, idv = std::move(idv)](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        Matrix& g = tp.grad(table);
        for (std::size_t i = 0; i < idv.size(); ++i) {
            for (int j = 0; j < G.cols; ++j) g(idv[i], j) += G(static_cast<int>(i), j);
        }
    });
}

Var causal_attention(Tape& t, Var qkv, int heads) {
    const Matrix& X = t.value(qkv);
    if (X.cols % 3 != 0 || (X.cols / 3) % heads != 0) throw Error(ErrorKind::dimension, "causal_attention: bad width");
    const int T = X.rows;
    const int d = X.cols / 3;
    const int hd = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(hd));
    const std::size_t stride = static_cast<std::size_t>(X.cols);
    // probs[h][i][j] for j <= i
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(heads) * T * T, 0.0);
    Matrix out(T, d);
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < T; ++i) {
            const double* q = X.data.data() + i * stride + static_cast<std::size_t>(h * hd);
            const double* k = X.data.data() + static_cast<std::size_t>(d + h * hd);
            const double* v = X.data.data() + static_cast<std::size_t>(2 * d + h * hd);
            double* p = probs->data() + (static_cast<std::size_t>(h) * T + i) * T;
            kernels::attention_row(q, k, v, stride, i + 1, hd, sc, p, out.data.data() + static_cast<std::size_t>(i) * d + h * hd);
        }
    }
    return t.record(std::move(out), t.requires_grad(qkv), [qkv, heads, probs, sc](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        const Matrix& X = tp.value(qkv);
        Matrix& GX = tp.grad(qkv);
        const int T = X.rows;
        const int d = X.cols / 3;
        const int hd = d / heads;
        std::vector<double> dp(static_cast<std::size_t>(T));
        for (int h = 0; h < heads; ++h) {
            const int qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
            for (int i = 0; i < T; ++i) {
                const double* p = probs->data() + (static_cast<std::size_t>(h) * T + i) * T;
                double dot = 0.0;
                for (int j = 0; j <= i; ++j) {
                    double s = 0.0;
                    for (int c = 0; c < hd; ++c) {
                        s += G(i, qo + c) * X(j, vo + c);
                        GX(j, vo + c) += p[j] * G(i, qo + c);
                    }
                    dp[static_cast<std::size_t>(j)] = s;
                    dot += p[j] * s;
                }
                for (int j = 0; j <= i; ++j) {
                    const double ds = p[j] * (dp[static_cast<std::size_t>(j)] - dot) * sc;
                    if (ds == 0.0) continue;
                    for (int c = 0; c < hd; ++c) {
                        GX(i, qo + c) += ds * X(j, ko + c);
                        GX(j, ko + c) += ds * X(i, qo + c);
                    }
                }
            }
        }
    });
}

Var log_softmax_rows(Tape& t, Var a) {
    const Matrix& X = t.value(a);
    Matrix Y(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) {
        auto x = X.row(i);
        const double mx = *std::max_element(x.begin(), x.end());
        double z = 0.0;
        for (double v : x) z += std::exp(v - mx);
        const double lse = mx + std::log(z);
        auto y = Y.row(i);
        for (std::size_t j = 0; j < x.size(); ++j) y[j] = x[j] - lse;
    }
    return t.record(std::move(Y), t.requires_grad(a), [a](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        const Matrix& Y = tp.value(self);
        Matrix& g = tp.grad(a);
        for (int i = 0; i < Y.rows; ++i) {
            double s = 0.0;
            for (int j = 0; j < Y.cols; ++j) s += G(i, j);
            for (int j = 0; j < Y.cols; ++j) g(i, j) += G(i, j) - std::exp(Y(i, j)) * s;
        }
    });
}

Var slice_rows(Tape& t, Var a, int begin, int count) {
    const Matrix& X = t.value(a);
    if (begin < 0 || count < 0 || begin + count > X.rows) throw Error(ErrorKind::dimension, "slice_rows: out of range");
    Matrix Y(count, X.cols);
    std::copy(X.data.begin() + static_cast<std::ptrdiff_t>(begin) * X.cols,
              X.data.begin() + static_cast<std::ptrdiff_t>(begin + count) * X.cols, Y.data.begin());
    return t.record(std::move(Y), t.requires_grad(a), [a, begin](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        Matrix& g = tp.grad(a);
        const std::size_t off = static_cast<std::size_t>(begin) * g.cols;
        for (std::size_t i = 0; i < G.data.size(); ++i) g.data[off + i] += G.data[i];
    });
}

Var pick(Tape& t, Var a, std::span<const Token> cols) {
    const Matrix& X = t.value(a);
    if (static_cast<int>(cols.size()) != X.rows) throw Error(ErrorKind::dimension, "pick: one column per row required");
    Matrix Y(X.rows, 1);
    for (int i = 0; i < X.rows; ++i) Y(i, 0) = X(i, cols[static_cast<std::size_t>(i)]);
    std::vector<Token> cv(cols.begin(), cols.end());
    return t.record(std::move(Y), t.requires_grad(a), [a, cv = std::move(cv)](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        Matrix& g = tp.grad(a);
        for (int i = 0; i < G.rows; ++i) g(i, cv[static_cast<std::size_t>(i)]) += G(i, 0);
    });
}

Var sum(Tape& t, Var a) {
    double s = 0.0;
    for (double v : t.value(a).data) s += v;
    return t.record(Matrix(1, 1, s), t.requires_grad(a), [a](Tape& tp, Var self) {
        const double g0 = tp.grad(self).data[0];
        for (double& v : tp.grad(a).data) v += g0;
    });
}

Var lincomb(Tape& t, std::span<const Var> terms, std::span<const double> coeffs) {
    if (terms.empty() || terms.size() != coeffs.size()) throw Error(ErrorKind::dimension, "lincomb: bad arguments");
    Matrix C(t.value(terms[0]).rows, t.value(terms[0]).cols);
    bool rg = false;
    for (std::size_t k = 0; k < terms.size(); ++k) {
        const Matrix& X = t.value(terms[k]);
        require_same_shape(C, X, "lincomb");
        for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += coeffs[k] * X.data[i];
        rg = rg || t.requires_grad(terms[k]);
    }
    std::vector<Var> tv(terms.begin(), terms.end());
    std::vector<double> cv(coeffs.begin(), coeffs.end());
    return t.record(std::move(C), rg, [tv = std::move(tv), cv = std::move(cv)](Tape& tp, Var self) {
        const Matrix& G = tp.grad(self);
        for (std::size_t k = 0; k < tv.size(); ++k) {
            if (!tp.requires_grad(tv[k]) || cv[k] == 0.0) continue;
            Matrix& g = tp.grad(tv[k]);
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += cv[k] * G.data[i];
        }
    });
}

}  // namespace unisd::ad
