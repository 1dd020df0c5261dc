// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unisd/policy.hpp"
#include "unisd/tokenizer.hpp"

namespace unisd::test {

inline Tokens toks(const std::string& s) { return Vocab::standard().encode(s); }

inline Tokens cat(Tokens a, const Tokens& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

inline ArchConfig tiny_arch() {
    ArchConfig a;
    a.d_model = 8;
    a.layers = 1;
    a.heads = 2;
    a.window = 32;
    a.mlp_ratio = 2;
    a.init_std = 0.3;
    return a;
}

/// Zero blocks and one-hot token embeddings: the next-token logits depend only on the
/// current token, logits(i) = head[i] / sqrt(1/d + eps). `table[i][j]` is head[i][j].
inline PolicyParameters bigram_policy(int vocab, int d, const std::vector<std::vector<double>>& table) {
    ArchConfig a;
    a.vocab = vocab;
    a.d_model = d;
    a.layers = 1;
    a.heads = 1;
    a.window = 32;
    a.mlp_ratio = 1;
    PolicyParameters p = init_policy(a, 0);
    std::fill(p.values.begin(), p.values.end(), 0.0);
    auto emb = p.view("tok_emb");
    for (int i = 0; i < vocab; ++i) emb[static_cast<std::size_t>(i * d + i)] = 1.0;
    for (const auto& s : p.shape_table) {
        if (s.name.find("ln") != std::string::npos) {
            auto g = p.view(s.name);
            std::fill(g.begin(), g.end(), 1.0);
        }
    }
    auto head = p.view("head");  // d x vocab
    for (int i = 0; i < vocab; ++i) {
        for (int j = 0; j < vocab; ++j) head[static_cast<std::size_t>(i * vocab + j)] = table[i][j];
    }
    return p;
}

/// Extended-precision log-softmax of scaled head row `i` of a bigram policy.
inline std::vector<long double> bigram_logprobs(const std::vector<std::vector<double>>& table, int i, int d) {
    const long double scale = 1.0L / std::sqrt(1.0L / d + 1e-5L);
    long double mx = -INFINITY;
    std::vector<long double> z;
    for (double v : table[static_cast<std::size_t>(i)]) {
        z.push_back(scale * v);
        mx = std::max(mx, z.back());
    }
    long double s = 0;
    for (long double v : z) s += std::exp(v - mx);
    for (long double& v : z) v = v - mx - std::log(s);
    return z;
}

}  // namespace unisd::test
