#include "avad/tokenizer.hpp"

#include "avad/ad/graph.hpp"  // ContractViolation
#include "avad/io/digest.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <set>

namespace avad {

namespace {

const std::array<const char*, 6> kSpecials = {
    Tokenizer::kThink, Tokenizer::kThinkEnd, Tokenizer::kAnswer,
    Tokenizer::kAnswerEnd, Tokenizer::kEos, Tokenizer::kVid,
};

constexpr std::string_view kPunct = ".,:;'?!*{}[]()<>/-\"";

bool is_word_char(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) != 0;
}

bool is_digit(char c) {
    return c >= '0' && c <= '9';
}

/// Split raw text into token strings: specials are atomic, digits and
/// punctuation are single characters, words are maximal alphabetic runs.
std::vector<std::string> split_atoms(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        char c = text[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        bool matched_special = false;
        for (const char* sp : kSpecials) {
            std::string_view s(sp);
            if (text.substr(i, s.size()) == s) {
                out.emplace_back(s);
                i += s.size();
                matched_special = true;
                break;
            }
        }
        if (matched_special) continue;
        if (is_word_char(c)) {
            size_t j = i;
            while (j < text.size() && is_word_char(text[j])) ++j;
            out.emplace_back(text.substr(i, j - i));
            i = j;
            continue;
        }
        // digits and punctuation: one character per token
        out.emplace_back(1, c);
        ++i;
    }
    return out;
}

bool attaches_left(const std::string& tok) {
    // Tokens rendered without a preceding space.
    return tok.size() == 1 && std::string_view(".,:;?!')]}").find(tok[0]) != std::string_view::npos;
}

bool attaches_right(const std::string& tok) {
    // Tokens rendered without a following space.
    return tok.size() == 1 && std::string_view("'([{").find(tok[0]) != std::string_view::npos;
}

}  // namespace

Tokenizer::Tokenizer(const std::vector<std::string>& corpus_texts) {
    auto intern = [this](const std::string& t) {
        auto [it, fresh] = index_.emplace(t, int(tokens_.size()));
        if (fresh) tokens_.push_back(t);
        return it->second;
    };
    for (const char* sp : kSpecials) intern(sp);
    digit_ids_.resize(10);
    for (int d = 0; d < 10; ++d) digit_ids_[size_t(d)] = intern(std::string(1, char('0' + d)));
    for (char c : kPunct) intern(std::string(1, c));

    std::set<std::string> words;
    for (const auto& text : corpus_texts)
        for (auto& atom : split_atoms(text))
            if (!index_.count(atom)) words.insert(atom);
    for (const auto& w : words) intern(w);

    eos_id_ = index_.at(kEos);
    vid_id_ = index_.at(kVid);
    think_id_ = index_.at(kThink);
    answer_id_ = index_.at(kAnswer);
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    for (auto& atom : split_atoms(text)) {
        auto it = index_.find(atom);
        if (it == index_.end())
            throw ad::ContractViolation("tokenizer: token not in vocabulary: '" + atom + "'");
        ids.push_back(it->second);
    }
    return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string out;
    bool suppress_space = true;  // no leading space
    for (int id : ids) {
        const std::string& tok = token(id);
        if (!suppress_space && !attaches_left(tok)) out += ' ';
        out += tok;
        suppress_space = attaches_right(tok);
    }
    return out;
}

int Tokenizer::id(std::string_view token) const {
    auto v = try_id(token);
    if (!v) throw ad::ContractViolation("tokenizer: unknown token: '" + std::string(token) + "'");
    return *v;
}

std::optional<int> Tokenizer::try_id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

const std::string& Tokenizer::token(int id) const {
    if (id < 0 || id >= int(tokens_.size()))
        throw ad::ContractViolation("tokenizer: id out of range");
    return tokens_[size_t(id)];
}

std::uint64_t Tokenizer::vocab_digest() const {
    io::Digest d;
    for (const auto& t : tokens_) {
        d.update(t);
        d.update("\x1f");
    }
    return d.value();
}

}  // namespace avad
