#pragma once

#include "avad/ad/ops.hpp"
#include "avad/frames.hpp"
#include "avad/lora/lora.hpp"
#include "avad/model/engine.hpp"
#include "avad/model/weights.hpp"

#include <optional>
#include <unordered_map>
#include <vector>

namespace avad::model {

/// Adapter matrices as graph expressions, either parameter leaves (static
/// adaptation) or generator outputs (conditional adaptation).
template <class S>
struct LoraExprSet {
    std::vector<lora::LoraSite> sites;
    std::vector<std::pair<ad::Expr<S>, ad::Expr<S>>> ab;  // (A: r x d_in, B: d_out x r)
    S scale{0};

    int find(int layer, lora::SiteKind kind) const {
        for (size_t i = 0; i < sites.size(); ++i)
            if (sites[i].layer == layer && sites[i].kind == kind) return int(i);
        return -1;
    }

    /// Snapshot current values into a plain delta set for the engine.
    lora::LoraDeltaSet<S> values(const lora::LoraConfig& cfg) const {
        lora::LoraDeltaSet<S> d;
        d.cfg = cfg;
        d.sites = sites;
        for (const auto& [a, b] : ab) d.mats.push_back({a.value(), b.value()});
        return d;
    }
};

/// Bind a numeric delta set as trainable graph leaves (static-adapter mode).
/// Parameter ids are offset so they never collide with other stores; the
/// caller owns the mapping.
template <class S>
LoraExprSet<S> bind_delta_params(ad::Graph<S>& g, const lora::LoraDeltaSet<S>& d,
                                 int param_id_base) {
    LoraExprSet<S> e;
    e.sites = d.sites;
    e.scale = d.scale();
    for (size_t i = 0; i < d.mats.size(); ++i) {
        auto a = g.param(d.mats[i].a, param_id_base + int(2 * i));
        auto b = g.param(d.mats[i].b, param_id_base + int(2 * i) + 1);
        e.ab.emplace_back(a, b);
    }
    return e;
}

/// Tape-recorded forward passes of the backbone. The same block code serves
/// three callers: supervised pretraining (backbone trainable), adaptation
/// training (backbone constant, adapters as expressions) and gradient-check
/// harnesses in 64-bit.
template <class S>
class TapeLm {
public:
    using Expr = ad::Expr<S>;

    TapeLm(ad::Graph<S>& g, const Backbone<S>& bb, bool train_backbone,
           const LoraExprSet<S>* delta)
        : g_(g), bb_(bb), train_(train_backbone), delta_(delta) {}

    struct Prefix {
        std::vector<Expr> k, v;  // per layer, T x d
        Expr last_hidden;        // 1 x d
        Expr last_logits;        // 1 x vocab
        Expr all_logits;         // T x vocab when requested
        bool has_all{false};
        int len{0};
    };

    /// Forward over the expanded prompt (plus optional forced continuation
    /// tokens) with causal masking.
    Prefix prefix(const std::vector<int>& raw_ids, int vid_index, std::optional<Expr> vis,
                  const std::vector<int>& extra_tokens = {}, bool want_all_logits = false) {
        const auto& cfg = bb_.cfg;
        std::vector<int> pre, post;
        for (size_t i = 0; i < raw_ids.size(); ++i) {
            if (vis.has_value() && int(i) == vid_index) continue;
            (int(i) < vid_index && vis.has_value() ? pre : post).push_back(raw_ids[i]);
        }
        for (int t : extra_tokens) post.push_back(t);

        Expr x = embed_with_vis(pre, vis, post);
        const int t = int(x.rows());
        if (t > cfg.max_seq) throw ad::ContractViolation("tape prefix: sequence exceeds max_seq");

        ad::Mat<S> mask = ad::Mat<S>::Zero(t, t);
        for (int i = 0; i < t; ++i)
            for (int j = i + 1; j < t; ++j) mask(i, j) = S(nn::kMaskNeg);

        Prefix p;
        p.len = t;
        for (int l = 0; l < cfg.lm_layers; ++l) {
            Expr k_full, v_full;
            x = block(x, bb_.lm[size_t(l)], l, &mask, nullptr, nullptr, &k_full, &v_full);
            p.k.push_back(k_full);
            p.v.push_back(v_full);
        }
        Expr hidden = ad::layer_norm_rows(x, w(bb_.lnf_g), w(bb_.lnf_b));
        p.last_hidden = ad::slice_rows(hidden, t - 1, 1);
        if (want_all_logits) {
            p.all_logits = ad::matmul_nt(hidden, w(bb_.head));
            p.has_all = true;
            p.last_logits = ad::slice_rows(p.all_logits, t - 1, 1);
        } else {
            p.last_logits = ad::matmul_nt(p.last_hidden, w(bb_.head));
        }
        return p;
    }

    /// Logits rows for fed response tokens attending to the shared prefix;
    /// row i predicts the token after fed[i].
    Expr response_logits(const Prefix& p, const std::vector<int>& fed) {
        const auto& cfg = bb_.cfg;
        const int o = int(fed.size());
        const int start = p.len;
        if (start + o > cfg.max_seq)
            throw ad::ContractViolation("tape response: sequence exceeds max_seq");
        std::vector<int> positions(static_cast<size_t>(o), 0);
        for (int i = 0; i < o; ++i) positions[size_t(i)] = start + i;
        Expr x = ad::add(ad::gather_rows(w(bb_.tok_embed), fed),
                         ad::gather_rows(w(bb_.pos_embed), positions));

        ad::Mat<S> mask = ad::Mat<S>::Zero(o, start + o);
        for (int i = 0; i < o; ++i)
            for (int j = start + i + 1; j < start + o; ++j) mask(i, j) = S(nn::kMaskNeg);

        for (int l = 0; l < cfg.lm_layers; ++l) {
            const Expr* pk = &p.k[size_t(l)];
            const Expr* pv = &p.v[size_t(l)];
            x = block(x, bb_.lm[size_t(l)], l, &mask, pk, pv, nullptr, nullptr);
        }
        Expr hidden = ad::layer_norm_rows(x, w(bb_.lnf_g), w(bb_.lnf_b));
        return ad::matmul_nt(hidden, w(bb_.head));
    }

    /// Trainable vision encoder path (supervised pretraining).
    Expr vision_tokens(const FrameSeq& frames) {
        const auto& cfg = bb_.cfg;
        if (int(frames.size()) != cfg.k_frames)
            throw ad::ContractViolation("vision_tokens: wrong frame count");
        const int ps = cfg.patch_size, pp = cfg.patches_per_frame();
        const int pw = cfg.frame_w / ps;
        const int patch_dim = ps * ps * cfg.frame_c;
        ad::Mat<S> x0(cfg.k_frames * pp, patch_dim);
        for (int k = 0; k < cfg.k_frames; ++k) {
            const Frame& f = frames[size_t(k)];
            if (f.h != cfg.frame_h || f.w != cfg.frame_w || f.c != cfg.frame_c)
                throw ad::ContractViolation("vision_tokens: wrong spatial size");
            for (int p = 0; p < pp; ++p) {
                const int py = (p / pw) * ps, px = (p % pw) * ps;
                int col = 0;
                for (int dy = 0; dy < ps; ++dy)
                    for (int dx = 0; dx < ps; ++dx)
                        for (int ch = 0; ch < cfg.frame_c; ++ch)
                            x0(k * pp + p, col++) = S(f.at(py + dy, px + dx, ch)) / S(255);
            }
        }
        std::vector<int> pos_ids, frame_ids;
        for (int k = 0; k < cfg.k_frames; ++k)
            for (int p = 0; p < pp; ++p) {
                pos_ids.push_back(p);
                frame_ids.push_back(k);
            }
        Expr x = ad::add_row_broadcast(ad::matmul_nt(g_.constant(x0), w(bb_.patch_w)),
                                       w(bb_.patch_b));
        x = ad::add(x, ad::gather_rows(w(bb_.vis_pos), pos_ids));
        x = ad::add(x, ad::gather_rows(w(bb_.vis_frame), frame_ids));
        for (int l = 0; l < cfg.n_vis_layers; ++l)
            x = block(x, bb_.vis[size_t(l)], -1, nullptr, nullptr, nullptr, nullptr, nullptr);
        return ad::layer_norm_rows(x, w(bb_.vis_lnf_g), w(bb_.vis_lnf_b));
    }

    /// Bind (and cache) a backbone weight as a graph expression.
    Expr w(int id) {
        auto it = bound_.find(id);
        if (it != bound_.end()) return it->second;
        Expr e = train_ ? g_.param(bb_.params.value(id), id)
                        : g_.constant(bb_.params.value(id), "theta");
        bound_.emplace(id, e);
        return e;
    }

private:
    Expr embed_with_vis(const std::vector<int>& pre, std::optional<Expr> vis,
                        const std::vector<int>& post) {
        std::vector<Expr> parts;
        if (!pre.empty()) parts.push_back(ad::gather_rows(w(bb_.tok_embed), pre));
        if (vis.has_value()) parts.push_back(*vis);
        if (!post.empty()) parts.push_back(ad::gather_rows(w(bb_.tok_embed), post));
        Expr x = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) x = ad::concat_rows(x, parts[i]);
        std::vector<int> positions(size_t(x.rows()));
        for (size_t i = 0; i < positions.size(); ++i) positions[i] = int(i);
        return ad::add(x, ad::gather_rows(w(bb_.pos_embed), positions));
    }

    /// One transformer block. If prefix K/V expressions are given, the new
    /// tokens attend to [prefix; own] rows. When out_k/out_v are non-null the
    /// full (own) K and V are exported for later prefix reuse.
    Expr block(Expr x, const typename Backbone<S>::Block& blk, int layer, const ad::Mat<S>* mask,
               const Expr* prefix_k, const Expr* prefix_v, Expr* out_k, Expr* out_v) {
        const auto& cfg = bb_.cfg;
        const int d = cfg.d_model, dh = cfg.head_dim();
        Expr xn = ad::layer_norm_rows(x, w(blk.ln1_g), w(blk.ln1_b));
        Expr qkv = proj(xn, blk.qkv, layer, lora::SiteKind::qkv_fused);
        Expr q = ad::slice_cols(qkv, 0, d);
        Expr k = ad::slice_cols(qkv, d, d);
        Expr v = ad::slice_cols(qkv, 2 * d, d);
        if (layer >= 0 && delta_ != nullptr && !cfg.fused_qkv) {
            q = add_lora(q, xn, layer, lora::SiteKind::q);
            k = add_lora(k, xn, layer, lora::SiteKind::k);
            v = add_lora(v, xn, layer, lora::SiteKind::v);
        }
        if (out_k) *out_k = k;
        if (out_v) *out_v = v;
        Expr k_all = prefix_k ? ad::concat_rows(*prefix_k, k) : k;
        Expr v_all = prefix_v ? ad::concat_rows(*prefix_v, v) : v;

        Expr ctx;
        for (int h = 0; h < cfg.n_heads; ++h) {
            Expr qh = ad::slice_cols(q, h * dh, dh);
            Expr kh = ad::slice_cols(k_all, h * dh, dh);
            Expr vh = ad::slice_cols(v_all, h * dh, dh);
            Expr scores = ad::scale(ad::matmul_nt(qh, kh), S(1.0 / std::sqrt(double(dh))));
            if (mask) scores = ad::add_const(scores, *mask);
            Expr ch = ad::matmul(ad::row_softmax(scores), vh);
            ctx = (h == 0) ? ch : ad::concat_cols(ctx, ch);
        }
        x = ad::add(x, proj(ctx, blk.out, layer, lora::SiteKind::out_proj));
        Expr xn2 = ad::layer_norm_rows(x, w(blk.ln2_g), w(blk.ln2_b));
        Expr act = ad::hadamard(ad::silu(proj(xn2, blk.gate, layer, lora::SiteKind::gate)),
                                proj(xn2, blk.up, layer, lora::SiteKind::up));
        return ad::add(x, proj(act, blk.down, layer, lora::SiteKind::down));
    }

    Expr proj(Expr x, int weight_id, int layer, lora::SiteKind kind) {
        Expr y = ad::matmul_nt(x, w(weight_id));
        if (layer >= 0) y = add_lora(y, x, layer, kind);
        return y;
    }

    Expr add_lora(Expr y, Expr x, int layer, lora::SiteKind kind) {
        if (delta_ == nullptr) return y;
        int idx = delta_->find(layer, kind);
        if (idx < 0) return y;
        const auto& [a, b] = delta_->ab[size_t(idx)];
        Expr low = ad::matmul_nt(ad::matmul_nt(x, a), b);
        return ad::add(y, ad::scale(low, delta_->scale));
    }

    ad::Graph<S>& g_;
    const Backbone<S>& bb_;
    bool train_;
    const LoraExprSet<S>* delta_;
    std::unordered_map<int, Expr> bound_;
};

}  // namespace avad::model
