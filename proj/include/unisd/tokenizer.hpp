// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace unisd {

using Token = int;
using Tokens = std::vector<Token>;

namespace tok {
inline constexpr Token pad = 0;
inline constexpr Token bos = 1;
inline constexpr Token eos = 2;
inline constexpr Token sep = 3;
inline constexpr int num_special = 4;
}  // namespace tok

/// Fixed character-level vocabulary: four special tokens followed by a printable
/// ASCII subset (plus newline).
class Vocab {
public:
    static const Vocab& standard();

    int size() const { return static_cast<int>(chars_.size()) + tok::num_special; }
    const std::string& alphabet() const { return chars_; }

    Token encode_char(char c) const;
    char decode_token(Token t) const;
    bool is_char_token(Token t) const { return t >= tok::num_special && t < size(); }

    Tokens encode(std::string_view text) const;
    /// Special tokens render as <BOS>, <EOS>, <PAD>, <SEP>.
    std::string decode(const Tokens& tokens) const;

private:
    explicit Vocab(std::string chars);
    std::string chars_;
    int lookup_[256];
};

}  // namespace unisd
