#pragma once

#include "avad/ad/params.hpp"
#include "avad/io/digest.hpp"
#include "avad/model/config.hpp"
#include "avad/rng.hpp"

#include <string>
#include <vector>

namespace avad::model {

/// Frozen-backbone parameter ids. The vision blocks reuse the LM block
/// structure (fused-qkv attention plus a gated MLP); only the LM layers are
/// adapter injection targets.
template <class S>
struct Backbone {
    struct Block {
        int ln1_g, ln1_b, qkv, out, ln2_g, ln2_b, gate, up, down;
    };

    BackboneConfig cfg;
    ad::ParamStore<S> params;

    std::vector<Block> lm;
    int tok_embed{-1}, pos_embed{-1}, lnf_g{-1}, lnf_b{-1}, head{-1};

    std::vector<Block> vis;
    int patch_w{-1}, patch_b{-1}, vis_pos{-1}, vis_frame{-1}, vis_lnf_g{-1}, vis_lnf_b{-1};

    const ad::Mat<S>& value(int id) const { return params.value(id); }

    template <class S2>
    Backbone<S2> cast() const {
        Backbone<S2> out;
        out.cfg = cfg;
        out.params = params.template cast<S2>();
        out.lm.resize(lm.size());
        for (size_t i = 0; i < lm.size(); ++i)
            out.lm[i] = {lm[i].ln1_g, lm[i].ln1_b, lm[i].qkv, lm[i].out, lm[i].ln2_g,
                         lm[i].ln2_b, lm[i].gate, lm[i].up,  lm[i].down};
        out.tok_embed = tok_embed;
        out.pos_embed = pos_embed;
        out.lnf_g = lnf_g;
        out.lnf_b = lnf_b;
        out.head = head;
        out.vis.resize(vis.size());
        for (size_t i = 0; i < vis.size(); ++i)
            out.vis[i] = {vis[i].ln1_g, vis[i].ln1_b, vis[i].qkv, vis[i].out, vis[i].ln2_g,
                          vis[i].ln2_b, vis[i].gate, vis[i].up,  vis[i].down};
        out.patch_w = patch_w;
        out.patch_b = patch_b;
        out.vis_pos = vis_pos;
        out.vis_frame = vis_frame;
        out.vis_lnf_g = vis_lnf_g;
        out.vis_lnf_b = vis_lnf_b;
        return out;
    }
};

namespace detail {
template <class S>
typename Backbone<S>::Block make_block(ad::ParamStore<S>& ps, const std::string& prefix, int d,
                                        int f, Rng& rng) {
    auto lin = [&](const std::string& name, int rows, int cols) {
        return ps.add_gaussian(prefix + name, rows, cols, 1.0 / std::sqrt(double(cols)), rng);
    };
    typename Backbone<S>::Block b;
    b.ln1_g = ps.add_ones(prefix + "ln1.g", 1, d);
    b.ln1_b = ps.add_zeros(prefix + "ln1.b", 1, d);
    b.qkv = lin("qkv", 3 * d, d);
    b.out = lin("out", d, d);
    b.ln2_g = ps.add_ones(prefix + "ln2.g", 1, d);
    b.ln2_b = ps.add_zeros(prefix + "ln2.b", 1, d);
    b.gate = lin("gate", f, d);
    b.up = lin("up", f, d);
    b.down = lin("down", d, f);
    return b;
}
}  // namespace detail

template <class S>
Backbone<S> make_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (cfg.vocab_size <= 0 || cfg.max_seq <= 0)
        throw ad::ContractViolation("make_backbone: vocab_size/max_seq not set");
    Backbone<S> bb;
    bb.cfg = cfg;
    auto& ps = bb.params;
    Rng rng = Rng::stream(seed, "backbone.init");

    auto emb = [&](const std::string& name, int rows, int cols) {
        return ps.add_gaussian(name, rows, cols, 0.02, rng);
    };
    bb.tok_embed = emb("tok_embed", cfg.vocab_size, cfg.d_model);
    bb.pos_embed = emb("pos_embed", cfg.max_seq, cfg.d_model);
    for (int l = 0; l < cfg.lm_layers; ++l)
        bb.lm.push_back(detail::make_block(ps, "lm." + std::to_string(l) + ".", cfg.d_model,
                                           cfg.d_ffn, rng));
    bb.lnf_g = ps.add_ones("lnf.g", 1, cfg.d_model);
    bb.lnf_b = ps.add_zeros("lnf.b", 1, cfg.d_model);
    bb.head = ps.add_gaussian("head", cfg.vocab_size, cfg.d_model,
                              1.0 / std::sqrt(double(cfg.d_model)), rng);

    const int patch_dim = cfg.patch_size * cfg.patch_size * cfg.frame_c;
    bb.patch_w = ps.add_gaussian("vis.patch.w", cfg.d_model, patch_dim,
                                 1.0 / std::sqrt(double(patch_dim)), rng);
    bb.patch_b = ps.add_gaussian("vis.patch.b", 1, cfg.d_model, 0.02, rng);
    bb.vis_pos = emb("vis.pos", cfg.patches_per_frame(), cfg.d_model);
    bb.vis_frame = emb("vis.frame", cfg.k_frames, cfg.d_model);
    for (int l = 0; l < cfg.n_vis_layers; ++l)
        bb.vis.push_back(detail::make_block(ps, "vis." + std::to_string(l) + ".", cfg.d_model,
                                            cfg.d_ffn, rng));
    bb.vis_lnf_g = ps.add_ones("vis.lnf.g", 1, cfg.d_model);
    bb.vis_lnf_b = ps.add_zeros("vis.lnf.b", 1, cfg.d_model);
    return bb;
}

/// Content hash over every parameter tensor; the frozen-backbone tests pin
/// this across training stages.
template <class S>
std::uint64_t theta_digest(const Backbone<S>& bb) {
    io::Digest d;
    for (int i = 0; i < bb.params.count(); ++i) {
        const auto& m = bb.params.value(i);
        d.update(bb.params.name(i));
        d.update(m.data(), size_t(m.size()) * sizeof(S));
    }
    return d.value();
}

}  // namespace avad::model
