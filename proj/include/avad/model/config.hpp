#pragma once

#include "avad/ad/graph.hpp"

#include <cstdint>

namespace avad::model {

struct BackboneConfig {
    int lm_layers{8};
    int d_model{128};
    int n_heads{4};
    int d_ffn{512};  // 4 * d_model
    int n_vis_layers{2};
    int patch_size{8};
    int frame_h{32};
    int frame_w{32};
    int frame_c{1};
    int k_frames{8};  // conditioning frames per sample
    int max_response_tokens{256};
    bool fused_qkv{true};
    bool compact_prompt{false};

    // filled in when the tokenizer and prompt are known
    int vocab_size{0};
    int prompt_tokens{0};  // expanded prompt length (visual tokens included)
    int max_seq{0};

    int head_dim() const { return d_model / n_heads; }
    int patches_per_frame() const {
        return (frame_h / patch_size) * (frame_w / patch_size);
    }
    int visual_tokens() const { return k_frames * patches_per_frame(); }

    void validate() const {
        if (d_model % n_heads != 0)
            throw ad::ContractViolation("backbone config: d_model must be divisible by n_heads");
        if (frame_h % patch_size != 0 || frame_w % patch_size != 0)
            throw ad::ContractViolation("backbone config: frame size must be divisible by patch size");
        if (lm_layers < 1 || d_model < 1 || n_heads < 1 || k_frames < 1)
            throw ad::ContractViolation("backbone config: dimensions must be positive");
    }
};

}  // namespace avad::model
