#include "mct/tokenizer.hpp"

#include <cstring>

namespace mct {

Tokenizer::Tokenizer() {
    // order is frozen; changing it invalidates every checkpoint
    alphabet_ = "^$abcdefghijklmnopqrstuvwxyz0123456789 +=:.,?-'()\n";
    std::memset(char_to_id_, -1, sizeof(char_to_id_));
    for (std::size_t i = 0; i < alphabet_.size(); ++i) {
        char_to_id_[static_cast<unsigned char>(alphabet_[i])] = static_cast<int>(i);
    }
    bos_ = char_to_id_[static_cast<unsigned char>('^')];
    eot_ = char_to_id_[static_cast<unsigned char>('$')];
}

const Tokenizer& Tokenizer::instance() {
    static const Tokenizer tok;
    return tok;
}

bool Tokenizer::has_char(char c) const { return char_to_id_[static_cast<unsigned char>(c)] >= 0; }

int Tokenizer::char_to_id(char c) const {
    const int id = char_to_id_[static_cast<unsigned char>(c)];
    if (id < 0) {
        throw ConfigError(std::string("tokenizer: character not in alphabet: '") + c + "'");
    }
    return id;
}

char Tokenizer::id_to_char(int id) const {
    if (id < 0 || id >= vocab_size()) {
        throw ContractError("tokenizer: id out of range: " + std::to_string(id));
    }
    return alphabet_[static_cast<std::size_t>(id)];
}

TokenSeq Tokenizer::tokenize(const std::string& text) const {
    TokenSeq ids;
    ids.reserve(text.size());
    for (char c : text) ids.push_back(char_to_id(c));
    return ids;
}

std::string Tokenizer::detokenize(const TokenSeq& ids) const {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) out.push_back(id_to_char(id));
    return out;
}

}  // namespace mct
