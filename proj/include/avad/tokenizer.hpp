#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace avad {

/// Deterministic closed-vocabulary word-level tokenizer. The vocabulary is
/// derived from the texts handed to the constructor plus digits, punctuation
/// and the special tags; every special tag is a single token. Encoding an
/// out-of-vocabulary word is a contract violation (the corpus is closed by
/// construction).
class Tokenizer {
public:
    static constexpr const char* kThink = "<think>";
    static constexpr const char* kThinkEnd = "</think>";
    static constexpr const char* kAnswer = "<answer>";
    static constexpr const char* kAnswerEnd = "</answer>";
    static constexpr const char* kEos = "<eos>";
    static constexpr const char* kVid = "<vid>";

    explicit Tokenizer(const std::vector<std::string>& corpus_texts);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(const std::vector<int>& ids) const;

    int id(std::string_view token) const;           // throws if unknown
    std::optional<int> try_id(std::string_view token) const;
    const std::string& token(int id) const;

    int vocab_size() const { return int(tokens_.size()); }
    int eos_id() const { return eos_id_; }
    int vid_id() const { return vid_id_; }
    int think_id() const { return think_id_; }
    int answer_id() const { return answer_id_; }
    int digit_id(int d) const { return digit_ids_[size_t(d)]; }

    /// Stable digest of the vocabulary (order-sensitive).
    std::uint64_t vocab_digest() const;

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
    int eos_id_{-1}, vid_id_{-1}, think_id_{-1}, answer_id_{-1};
    std::vector<int> digit_ids_;
};

}  // namespace avad
