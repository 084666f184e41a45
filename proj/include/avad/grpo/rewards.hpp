#pragma once

#include "avad/tokenizer.hpp"

#include <regex>
#include <string>
#include <vector>

namespace avad::grpo {

/// 1 iff the text is exactly <think>nonempty</think><answer>nonempty</answer>
/// (whitespace allowed between and inside the blocks, nothing else).
inline int format_reward(const std::string& text) {
    static const std::regex pattern(
        R"(\s*<think>\s*[^<>]*\S[^<>]*</think>\s*<answer>\s*[^<>]*\S[^<>]*</answer>\s*)");
    return std::regex_match(text, pattern) ? 1 : 0;
}

/// Parses the first integer inside <answer>...</answer>; 1 iff it equals the
/// video-level label, 0 otherwise (parse failures score 0).
inline int accuracy_reward(const std::string& text, int y) {
    static const std::regex pattern(R"(<answer>([^<]*)</answer>)");
    std::smatch m;
    if (!std::regex_search(text, m, pattern)) return 0;
    static const std::regex number(R"(-?\d+)");
    std::smatch num;
    const std::string inner = m[1].str();
    if (!std::regex_search(inner, num, number)) return 0;
    try {
        return std::stoi(num[0].str()) == y ? 1 : 0;
    } catch (const std::exception&) {
        return 0;
    }
}

/// Decode a sampled token sequence for reward scoring; the trailing <eos>
/// control token is not part of the text.
inline std::string decode_response(const Tokenizer& tok, std::vector<int> tokens) {
    if (!tokens.empty() && tokens.back() == tok.eos_id()) tokens.pop_back();
    return tok.decode(tokens);
}

}  // namespace avad::grpo
