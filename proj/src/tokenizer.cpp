// SPDX-License-Identifier: Apache-2.0
#include "unisd/tokenizer.hpp"

#include "unisd/errors.hpp"

namespace unisd {

namespace {
constexpr const char* kAlphabet =
    " abcdefghijklmnopqrstuvwxyz0123456789+-*/%=:()[]{},.;_<>|!?#@&^~'\n";
}

const Vocab& Vocab::standard() {
    static const Vocab vocab{kAlphabet};
    return vocab;
}

Vocab::Vocab(std::string chars) : chars_(std::move(chars)) {
    for (int& v : lookup_) v = -1;
    for (std::size_t i = 0; i < chars_.size(); ++i) {
        lookup_[static_cast<unsigned char>(chars_[i])] = static_cast<int>(i) + tok::num_special;
    }
}

Token Vocab::encode_char(char c) const {
    const int t = lookup_[static_cast<unsigned char>(c)];
    if (t < 0) throw ConfigError(std::string("character outside vocabulary: '") + c + "'");
    return t;
}

char Vocab::decode_token(Token t) const {
    if (!is_char_token(t)) throw ConfigError("token " + std::to_string(t) + " is not a character token");
    return chars_[static_cast<std::size_t>(t - tok::num_special)];
}

Tokens Vocab::encode(std::string_view text) const {
    Tokens out;
    out.reserve(text.size());
    for (char c : text) out.push_back(encode_char(c));
    return out;
}

std::string Vocab::decode(const Tokens& tokens) const {
    std::string out;
    for (Token t : tokens) {
        switch (t) {
            case tok::pad: out += "<PAD>"; break;
            case tok::bos: out += "<BOS>"; break;
            case tok::eos: out += "<EOS>"; break;
            case tok::sep: out += "<SEP>"; break;
            default:
                if (is_char_token(t)) {
                    out += decode_token(t);
                } else {
                    out += "<" + std::to_string(t) + ">";
                }
        }
    }
    return out;
}

}  // namespace unisd
