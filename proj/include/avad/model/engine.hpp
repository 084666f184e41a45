#pragma once

#include "avad/frames.hpp"
#include "avad/lora/lora.hpp"
#include "avad/model/weights.hpp"
#include "avad/rng.hpp"

#include <cmath>
#include <optional>
#include <vector>

namespace avad::model {

using ad::ContractViolation;
using ad::Mat;

namespace nn {

constexpr double kLnEps = 1e-5;
constexpr double kMaskNeg = -1e9;

/// Row-wise layer norm; must stay numerically identical to the tape op.
template <class S>
Mat<S> ln_rows(const Mat<S>& x, const Mat<S>& gain, const Mat<S>& bias) {
    Mat<S> out(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S mu = x.row(r).mean();
        S var = (x.row(r).array() - mu).square().mean();
        S is = S(1) / std::sqrt(var + S(kLnEps));
        out.row(r) =
            (((x.row(r).array() - mu) * is) * gain.row(0).array() + bias.row(0).array()).matrix();
    }
    return out;
}

template <class S>
void softmax_rows_inplace(Mat<S>& x) {
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        S m = x.row(r).maxCoeff();
        Mat<S> e = (x.row(r).array() - m).exp().matrix();
        x.row(r) = e / e.sum();
    }
}

template <class S>
Mat<S> log_softmax_row(const Mat<S>& row) {
    S m = row.maxCoeff();
    S lse = std::log((row.array() - m).exp().sum()) + m;
    return (row.array() - lse).matrix();
}

template <class S>
Mat<S> silu(const Mat<S>& x) {
    return (x.array() / (S(1) + (-x.array()).exp())).matrix();
}

}  // namespace nn

/// Frozen vision encoder: patch embedding with per-patch and per-frame
/// positions, then full spatio-temporal attention blocks. Returns the
/// (K * T_v) x d_model token grid. Gradients never flow here at adaptation
/// time; the supervised pretraining stage uses the tape twin instead.
template <class S>
Mat<S> encode_frames(const Backbone<S>& bb, const FrameSeq& frames) {
    const auto& cfg = bb.cfg;
    if (int(frames.size()) != cfg.k_frames)
        throw ContractViolation("encode_frames: expected K=" + std::to_string(cfg.k_frames) +
                                " frames, got " + std::to_string(frames.size()));
    const int ps = cfg.patch_size, pp = cfg.patches_per_frame();
    const int pw = cfg.frame_w / ps;
    const int patch_dim = ps * ps * cfg.frame_c;

    Mat<S> x0(cfg.k_frames * pp, patch_dim);
    for (int k = 0; k < cfg.k_frames; ++k) {
        const Frame& f = frames[size_t(k)];
        if (f.h != cfg.frame_h || f.w != cfg.frame_w || f.c != cfg.frame_c)
            throw ContractViolation("encode_frames: wrong spatial size");
        for (int p = 0; p < pp; ++p) {
            const int py = (p / pw) * ps, px = (p % pw) * ps;
            int col = 0;
            for (int dy = 0; dy < ps; ++dy)
                for (int dx = 0; dx < ps; ++dx)
                    for (int ch = 0; ch < cfg.frame_c; ++ch)
                        x0(k * pp + p, col++) = S(f.at(py + dy, px + dx, ch)) / S(255);
        }
    }

    Mat<S> x = x0 * bb.value(bb.patch_w).transpose();
    x += bb.value(bb.patch_b).replicate(x.rows(), 1);
    for (int k = 0; k < cfg.k_frames; ++k) {
        x.middleRows(k * pp, pp) += bb.value(bb.vis_pos);
        x.middleRows(k * pp, pp) += bb.value(bb.vis_frame).row(k).replicate(pp, 1);
    }

    const int dh = cfg.head_dim();
    for (const auto& blk : bb.vis) {
        Mat<S> xn = nn::ln_rows(x, bb.value(blk.ln1_g), bb.value(blk.ln1_b));
        Mat<S> qkv = xn * bb.value(blk.qkv).transpose();
        Mat<S> ctx(x.rows(), cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            auto q = qkv.middleCols(h * dh, dh);
            auto k = qkv.middleCols(cfg.d_model + h * dh, dh);
            auto v = qkv.middleCols(2 * cfg.d_model + h * dh, dh);
            Mat<S> scores = (q * k.transpose()) / S(std::sqrt(double(dh)));
            nn::softmax_rows_inplace(scores);
            ctx.middleCols(h * dh, dh) = scores * v;
        }
        x += ctx * bb.value(blk.out).transpose();
        Mat<S> xn2 = nn::ln_rows(x, bb.value(blk.ln2_g), bb.value(blk.ln2_b));
        Mat<S> act = nn::silu<S>(xn2 * bb.value(blk.gate).transpose())
                         .cwiseProduct(xn2 * bb.value(blk.up).transpose());
        x += act * bb.value(blk.down).transpose();
    }
    return nn::ln_rows(x, bb.value(bb.vis_lnf_g), bb.value(bb.vis_lnf_b));
}

/// KV-cache language-model engine over the frozen backbone, with optional
/// low-rank residual adaptation. Adapters are applied on the fly and never
/// merged into the frozen weights.
template <class S>
class Engine {
public:
    struct Cache {
        std::vector<Mat<S>> k, v;  // per layer, capacity rows x d_model
        int len{0};
        Mat<S> last_hidden;  // 1 x d, post final norm
        Mat<S> last_logits;  // 1 x vocab
    };

    Engine(const Backbone<S>& bb, const lora::LoraDeltaSet<S>* delta)
        : bb_(bb), delta_(delta) {
        if (delta_ != nullptr) build_site_index();
    }

    /// Process prompt tokens with the <vid> placeholder expanded to `vis`
    /// rows. Returns a cache positioned after the last prompt token. If
    /// `all_logits` is non-null it receives logits for every position.
    Cache prefill(const std::vector<int>& raw_ids, int vid_index, const Mat<S>* vis,
                  Mat<S>* all_logits = nullptr, int capacity_hint = 0) const {
        const auto& cfg = bb_.cfg;
        const int n_vis = vis ? int(vis->rows()) : 0;
        const int t = int(raw_ids.size()) - (vis ? 1 : 0) + n_vis;
        if (t > cfg.max_seq) throw ContractViolation("prefill: sequence exceeds max_seq");

        Mat<S> x(t, cfg.d_model);
        int row = 0;
        for (size_t i = 0; i < raw_ids.size(); ++i) {
            if (vis && int(i) == vid_index) {
                x.middleRows(row, n_vis) = *vis;
                row += n_vis;
            } else {
                x.row(row) = bb_.value(bb_.tok_embed).row(raw_ids[i]);
                ++row;
            }
        }
        x += bb_.value(bb_.pos_embed).topRows(t);

        Cache c;
        const int cap = capacity_hint > 0 ? capacity_hint
                                          : std::min(cfg.max_seq, t + cfg.max_response_tokens + 1);
        c.k.assign(size_t(cfg.lm_layers), Mat<S>::Zero(cap, cfg.d_model));
        c.v.assign(size_t(cfg.lm_layers), Mat<S>::Zero(cap, cfg.d_model));

        const int dh = cfg.head_dim();
        Mat<S> mask = Mat<S>::Zero(t, t);
        for (int i = 0; i < t; ++i)
            for (int j = i + 1; j < t; ++j) mask(i, j) = S(nn::kMaskNeg);

        for (int l = 0; l < cfg.lm_layers; ++l) {
            const auto& blk = bb_.lm[size_t(l)];
            Mat<S> xn = nn::ln_rows(x, bb_.value(blk.ln1_g), bb_.value(blk.ln1_b));
            Mat<S> qkv = project(xn, blk.qkv, l, lora::SiteKind::qkv_fused);
            add_unfused_lora(xn, qkv, l);
            c.k[size_t(l)].topRows(t) = qkv.middleCols(cfg.d_model, cfg.d_model);
            c.v[size_t(l)].topRows(t) = qkv.middleCols(2 * cfg.d_model, cfg.d_model);
            Mat<S> ctx(t, cfg.d_model);
            for (int h = 0; h < cfg.n_heads; ++h) {
                auto q = qkv.middleCols(h * dh, dh);
                auto k = c.k[size_t(l)].block(0, h * dh, t, dh);
                auto v = c.v[size_t(l)].block(0, h * dh, t, dh);
                Mat<S> scores = (q * k.transpose()) / S(std::sqrt(double(dh))) + mask;
                nn::softmax_rows_inplace(scores);
                ctx.middleCols(h * dh, dh) = scores * v;
            }
            x += project(ctx, blk.out, l, lora::SiteKind::out_proj);
            Mat<S> xn2 = nn::ln_rows(x, bb_.value(blk.ln2_g), bb_.value(blk.ln2_b));
            Mat<S> act = nn::silu<S>(project(xn2, blk.gate, l, lora::SiteKind::gate))
                             .cwiseProduct(project(xn2, blk.up, l, lora::SiteKind::up));
            x += project(act, blk.down, l, lora::SiteKind::down);
        }
        c.len = t;
        Mat<S> hidden = nn::ln_rows(x, bb_.value(bb_.lnf_g), bb_.value(bb_.lnf_b));
        c.last_hidden = hidden.row(t - 1);
        c.last_logits = c.last_hidden * bb_.value(bb_.head).transpose();
        if (all_logits) *all_logits = hidden * bb_.value(bb_.head).transpose();
        return c;
    }

    /// Append one token; updates last_hidden / last_logits.
    void step(Cache& c, int token) const {
        const auto& cfg = bb_.cfg;
        if (c.len >= int(c.k[0].rows())) throw ContractViolation("step: cache capacity exceeded");
        if (c.len >= cfg.max_seq) throw ContractViolation("step: sequence exceeds max_seq");
        Mat<S> x = bb_.value(bb_.tok_embed).row(token) + bb_.value(bb_.pos_embed).row(c.len);
        const int dh = cfg.head_dim();
        for (int l = 0; l < cfg.lm_layers; ++l) {
            const auto& blk = bb_.lm[size_t(l)];
            Mat<S> xn = nn::ln_rows(x, bb_.value(blk.ln1_g), bb_.value(blk.ln1_b));
            Mat<S> qkv = project(xn, blk.qkv, l, lora::SiteKind::qkv_fused);
            add_unfused_lora(xn, qkv, l);
            c.k[size_t(l)].row(c.len) = qkv.middleCols(cfg.d_model, cfg.d_model);
            c.v[size_t(l)].row(c.len) = qkv.middleCols(2 * cfg.d_model, cfg.d_model);
            const int n = c.len + 1;
            Mat<S> ctx(1, cfg.d_model);
            for (int h = 0; h < cfg.n_heads; ++h) {
                auto q = qkv.middleCols(h * dh, dh);
                auto k = c.k[size_t(l)].block(0, h * dh, n, dh);
                auto v = c.v[size_t(l)].block(0, h * dh, n, dh);
                Mat<S> scores = (q * k.transpose()) / S(std::sqrt(double(dh)));
                nn::softmax_rows_inplace(scores);
                ctx.middleCols(h * dh, dh) = scores * v;
            }
            x += project(ctx, blk.out, l, lora::SiteKind::out_proj);
            Mat<S> xn2 = nn::ln_rows(x, bb_.value(blk.ln2_g), bb_.value(blk.ln2_b));
            Mat<S> act = nn::silu<S>(project(xn2, blk.gate, l, lora::SiteKind::gate))
                             .cwiseProduct(project(xn2, blk.up, l, lora::SiteKind::up));
            x += project(act, blk.down, l, lora::SiteKind::down);
        }
        ++c.len;
        c.last_hidden = nn::ln_rows(x, bb_.value(bb_.lnf_g), bb_.value(bb_.lnf_b));
        c.last_logits = c.last_hidden * bb_.value(bb_.head).transpose();
    }

    struct GenResult {
        std::vector<int> tokens;
        std::vector<double> logp;  // per emitted token, temperature-scaled policy
        bool hit_eos{false};
    };

    /// Temperature sampling from the adapted policy; temperature 0 decodes
    /// greedily (log-probs then reported under the temperature-1 policy).
    GenResult generate(Cache state, double temperature, int max_len, Rng& rng, int eos_id) const {
        if (temperature < 0) throw ContractViolation("generate: temperature must be >= 0");
        GenResult res;
        for (int i = 0; i < max_len; ++i) {
            int tok;
            double lp;
            pick(state.last_logits, temperature, rng, tok, lp);
            res.tokens.push_back(tok);
            res.logp.push_back(lp);
            if (tok == eos_id) {
                res.hit_eos = true;
                break;
            }
            if (i + 1 < max_len) step(state, tok);
        }
        return res;
    }

    /// Temperature-scaled log-probabilities of a fixed token row sequence
    /// (used for the frozen reference distribution in training).
    Mat<S> score_tokens_full(Cache state, const std::vector<int>& tokens, double temperature) const {
        const S tau = S(temperature > 0 ? temperature : 1.0);
        Mat<S> out(Eigen::Index(tokens.size()), bb_.cfg.vocab_size);
        for (size_t i = 0; i < tokens.size(); ++i) {
            Mat<S> row = state.last_logits / tau;
            out.row(Eigen::Index(i)) = nn::log_softmax_row(row);
            if (i + 1 < tokens.size()) step(state, tokens[i]);
        }
        return out;
    }

    const Backbone<S>& backbone() const { return bb_; }

private:
    void pick(const Mat<S>& logits, double temperature, Rng& rng, int& tok, double& lp) const {
        if (temperature <= 0) {
            Eigen::Index best;
            logits.row(0).maxCoeff(&best);
            tok = int(best);
            Mat<S> logp = nn::log_softmax_row(Mat<S>(logits));
            lp = double(logp(0, tok));
            return;
        }
        Mat<S> scaled = logits / S(temperature);
        Mat<S> logp = nn::log_softmax_row(scaled);
        Mat<S> p = logp.array().exp().matrix();
        double u = rng.uniform();
        double cum = 0.0;
        int chosen = int(p.cols()) - 1;
        for (Eigen::Index i = 0; i < p.cols(); ++i) {
            cum += double(p(0, i));
            if (u < cum) {
                chosen = int(i);
                break;
            }
        }
        tok = chosen;
        lp = double(logp(0, chosen));
    }

    Mat<S> project(const Mat<S>& x, int weight_id, int layer, lora::SiteKind kind) const {
        const lora::LoraPair<S>* pair = nullptr;
        if (delta_ != nullptr) {
            int idx = site_idx(layer, kind);
            if (idx >= 0) pair = &delta_->mats[size_t(idx)];
        }
        return lora::apply_rows(x, bb_.value(weight_id), pair, delta_ ? delta_->scale() : S(0));
    }

    /// For the unfused site variant, add q/k/v adapter outputs into their
    /// column ranges of the fused projection output.
    void add_unfused_lora(const Mat<S>& xn, Mat<S>& qkv, int layer) const {
        if (delta_ == nullptr || bb_.cfg.fused_qkv) return;
        const int d = bb_.cfg.d_model;
        const lora::SiteKind kinds[3] = {lora::SiteKind::q, lora::SiteKind::k, lora::SiteKind::v};
        for (int part = 0; part < 3; ++part) {
            int idx = site_idx(layer, kinds[part]);
            if (idx < 0) continue;
            const auto& pr = delta_->mats[size_t(idx)];
            qkv.middleCols(part * d, d) +=
                delta_->scale() * ((xn * pr.a.transpose()) * pr.b.transpose());
        }
    }

    int site_idx(int layer, lora::SiteKind kind) const {
        auto key = size_t(layer) * 8 + size_t(kind);
        if (key >= site_index_.size()) return -1;
        return site_index_[key];
    }

    void build_site_index() {
        site_index_.assign(size_t(bb_.cfg.lm_layers) * 8, -1);
        for (size_t i = 0; i < delta_->sites.size(); ++i) {
            const auto& s = delta_->sites[i];
            site_index_[size_t(s.layer) * 8 + size_t(s.kind)] = int(i);
        }
    }

    const Backbone<S>& bb_;
    const lora::LoraDeltaSet<S>* delta_;
    std::vector<int> site_index_;
};

/// Last-layer hidden state at the final input position, used as the
/// sequence-level embedding diagnostic.
template <class S>
Mat<S> extract_embedding(const Backbone<S>& bb, const std::vector<int>& raw_ids, int vid_index,
                         const Mat<S>& vis, const lora::LoraDeltaSet<S>* delta) {
    Engine<S> eng(bb, delta);
    auto cache = eng.prefill(raw_ids, vid_index, &vis);
    return cache.last_hidden;
}

}  // namespace avad::model
