#pragma once

#include <string>

#include "mct/common.hpp"

namespace mct {

// Byte/char tokenizer over a fixed printable alphabet (vocab <= 64).
// Two ids are reserved for sequence plumbing: BOS ('^') anchors every model
// context, EOT ('$') terminates generated CoTs and answers. Both are ordinary
// vocabulary entries with printable glyphs, so detokenize/tokenize round-trips
// exactly on any id sequence.
class Tokenizer {
public:
    Tokenizer();

    static const Tokenizer& instance();

    int vocab_size() const { return static_cast<int>(alphabet_.size()); }
    int bos() const { return bos_; }
    int eot() const { return eot_; }

    // Identifier recorded in manifests; checkpoint consumers compare it.
    static constexpr const char* kSchemeId = "mct-char-v1";

    TokenSeq tokenize(const std::string& text) const;
    std::string detokenize(const TokenSeq& ids) const;

    bool has_char(char c) const;
    char id_to_char(int id) const;
    int char_to_id(char c) const;

    const std::string& alphabet() const { return alphabet_; }

private:
    std::string alphabet_;
    int char_to_id_[256];
    int bos_;
    int eot_;
};

}  // namespace mct
