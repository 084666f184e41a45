#pragma once

#include "avad/io/digest.hpp"
#include "avad/model/config.hpp"
#include "avad/prompt.hpp"
#include "avad/tokenizer.hpp"

#include <string>
#include <vector>

namespace avad::model {

/// Token ids of the system prompt with the single <vid> placeholder that the
/// forward passes expand into visual tokens. The identifier names the
/// conditioning state in logs.
struct PromptState {
    std::vector<int> raw_ids;  // includes the <vid> placeholder
    int vid_index{0};
    std::string s0;

    int text_tokens() const { return int(raw_ids.size()) - 1; }
};

inline void finalize_config(BackboneConfig& cfg, const Tokenizer& tok, const PromptState& ps) {
    cfg.vocab_size = tok.vocab_size();
    cfg.prompt_tokens = int(ps.raw_ids.size()) - 1 + cfg.visual_tokens();
    cfg.max_seq = cfg.prompt_tokens + cfg.max_response_tokens + 1;
}

inline PromptState make_prompt_state(const Tokenizer& tok, bool compact) {
    PromptState ps;
    ps.raw_ids.push_back(tok.vid_id());
    ps.vid_index = 0;
    const std::string& text = compact ? compact_system_prompt() : canonical_system_prompt();
    for (int id : tok.encode(text)) ps.raw_ids.push_back(id);
    io::Digest d;
    for (int id : ps.raw_ids) d.update_pod(id);
    ps.s0 = "s0-" + d.hex().substr(0, 12);
    return ps;
}

}  // namespace avad::model
