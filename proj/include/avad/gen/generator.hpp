#pragma once

#include "avad/ad/ops.hpp"
#include "avad/ad/params.hpp"
#include "avad/lora/lora.hpp"
#include "avad/model/config.hpp"
#include "avad/model/tape.hpp"

#include <string>
#include <vector>

namespace avad::gen {

using ad::ContractViolation;
using ad::Expr;
using ad::Graph;
using ad::Mat;

struct GeneratorConfig {
    int depth{0};         // 0 resolves to ceil(lm_layers / 2)
    int internal_dim{512};
    int n_heads{8};
    int ffn_mult{2};
    int token_width{0};   // 0 resolves to backbone d_model
    bool use_global_latent{true};

    int resolved_depth(int lm_layers) const {
        return depth > 0 ? depth : (lm_layers + 1) / 2;
    }
};

/// Layout of the parameter-token grid: every backbone layer owns s_l tokens,
/// each decoding to an r x w block of some site's A (stored r x d_in) or
/// B (stored transposed, r x d_out). d_in/d_out beyond part boundaries are
/// generated and discarded.
struct TokenPlan {
    struct Entry {
        int layer, slot, site;  // site indexes the backbone site list
        bool is_b;
        int part;               // which w-wide stripe of the matrix
    };
    int n_layers{0};
    int tokens_per_layer{0};
    int rank{0}, width{0};
    std::vector<Entry> entries;         // n_layers * tokens_per_layer, (layer, slot) order
    std::vector<int> a_rows, b_rows;    // token indices per head type

    int total_tokens() const { return n_layers * tokens_per_layer; }
    std::int64_t grid_scalars() const {
        return std::int64_t(total_tokens()) * rank * width;
    }
};

inline TokenPlan build_token_plan(const std::vector<lora::LoraSite>& sites, int rank, int width,
                                  int n_layers) {
    TokenPlan plan;
    plan.n_layers = n_layers;
    plan.rank = rank;
    plan.width = width;
    auto parts = [&](int dim) { return (dim + width - 1) / width; };
    for (int l = 0; l < n_layers; ++l) {
        int slot = 0;
        for (size_t s = 0; s < sites.size(); ++s) {
            if (sites[s].layer != l) continue;
            for (int p = 0; p < parts(sites[s].d_in); ++p)
                plan.entries.push_back({l, slot++, int(s), false, p});
            for (int p = 0; p < parts(sites[s].d_out); ++p)
                plan.entries.push_back({l, slot++, int(s), true, p});
        }
        if (l == 0)
            plan.tokens_per_layer = slot;
        else if (slot != plan.tokens_per_layer)
            throw ContractViolation("token plan: layers disagree on s_l");
    }
    for (size_t t = 0; t < plan.entries.size(); ++t)
        (plan.entries[t].is_b ? plan.b_rows : plan.a_rows).push_back(int(t));
    return plan;
}

/// Hypernetwork weights: learnable parameter-token queries with layer/slot
/// positions, factorized self-attention blocks with cross-attention to the
/// visual conditioning tokens, projection heads for the adapter matrices and
/// the global latent residual.
template <class S>
struct Generator {
    struct Block {
        int ln1_g, ln1_b, q1, k1, v1, o1;  // intra-layer attention
        int ln2_g, ln2_b, q2, k2, v2, o2;  // inter-layer attention
        int ln3_g, ln3_b, q3, k3, v3, o3;  // cross-attention to visual tokens
        int ln4_g, ln4_b, gate, up, down;
    };

    GeneratorConfig cfg;
    lora::LoraConfig lora_cfg;
    std::vector<lora::LoraSite> sites;
    TokenPlan plan;
    int d_model_in{0};
    int expected_vis_rows{0};  // K * T_v of the conditioning encoder

    ad::ParamStore<S> params;
    std::vector<Block> blocks;
    int token_embed{-1}, layer_embed{-1}, slot_embed{-1}, vis_proj{-1};
    int a_fc1{-1}, a_fc2{-1}, b_fc1{-1}, b_fc2{-1};
    int p_global{-1};

    Mat<S> intra_mask, inter_mask;  // additive attention masks over the grid

    std::int64_t param_count() const { return params.scalar_count(); }

    template <class S2>
    Generator<S2> cast() const {
        Generator<S2> o;
        o.cfg = cfg;
        o.lora_cfg = lora_cfg;
        o.sites = sites;
        o.plan = plan;
        o.d_model_in = d_model_in;
        o.expected_vis_rows = expected_vis_rows;
        o.params = params.template cast<S2>();
        o.blocks.resize(blocks.size());
        for (size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            o.blocks[i] = {b.ln1_g, b.ln1_b, b.q1, b.k1, b.v1, b.o1, b.ln2_g, b.ln2_b, b.q2,
                           b.k2,    b.v2,    b.o2, b.ln3_g, b.ln3_b, b.q3, b.k3, b.v3, b.o3,
                           b.ln4_g, b.ln4_b, b.gate, b.up, b.down};
        }
        o.token_embed = token_embed;
        o.layer_embed = layer_embed;
        o.slot_embed = slot_embed;
        o.vis_proj = vis_proj;
        o.a_fc1 = a_fc1;
        o.a_fc2 = a_fc2;
        o.b_fc1 = b_fc1;
        o.b_fc2 = b_fc2;
        o.p_global = p_global;
        o.intra_mask = intra_mask.template cast<S2>();
        o.inter_mask = inter_mask.template cast<S2>();
        return o;
    }
};

template <class S>
Generator<S> make_generator(const model::BackboneConfig& bcfg, GeneratorConfig gcfg,
                            const lora::LoraConfig& lcfg, std::uint64_t seed) {
    Generator<S> gen;
    if (gcfg.token_width <= 0) gcfg.token_width = bcfg.d_model;
    gcfg.depth = gcfg.resolved_depth(bcfg.lm_layers);
    if (gcfg.internal_dim % gcfg.n_heads != 0)
        throw ContractViolation("generator: internal_dim must be divisible by n_heads");
    gen.cfg = gcfg;
    gen.lora_cfg = lcfg;
    gen.sites = lora::enumerate_sites(bcfg);
    gen.plan = build_token_plan(gen.sites, lcfg.rank, gcfg.token_width, bcfg.lm_layers);
    gen.d_model_in = bcfg.d_model;
    gen.expected_vis_rows = bcfg.visual_tokens();
    if (gen.plan.grid_scalars() < lora::delta_param_count(bcfg, lcfg))
        throw ContractViolation("generator: grid smaller than the adapter parameter count");

    auto& ps = gen.params;
    Rng rng = Rng::stream(seed, "generator.init");
    const int id = gcfg.internal_dim;
    const int n_tok = gen.plan.total_tokens();
    auto lin = [&](const std::string& name, int rows, int cols) {
        return ps.add_gaussian(name, rows, cols, 1.0 / std::sqrt(double(cols)), rng);
    };
    gen.token_embed = ps.add_gaussian("gen.token_embed", n_tok, id, 0.02, rng);
    gen.layer_embed = ps.add_gaussian("gen.layer_embed", gen.plan.n_layers, id, 0.02, rng);
    gen.slot_embed = ps.add_gaussian("gen.slot_embed", gen.plan.tokens_per_layer, id, 0.02, rng);
    gen.vis_proj = lin("gen.vis_proj", id, bcfg.d_model);
    for (int b = 0; b < gcfg.depth; ++b) {
        const std::string p = "gen.block" + std::to_string(b) + ".";
        typename Generator<S>::Block blk;
        blk.ln1_g = ps.add_ones(p + "ln1.g", 1, id);
        blk.ln1_b = ps.add_zeros(p + "ln1.b", 1, id);
        blk.q1 = lin(p + "intra.q", id, id);
        blk.k1 = lin(p + "intra.k", id, id);
        blk.v1 = lin(p + "intra.v", id, id);
        blk.o1 = lin(p + "intra.o", id, id);
        blk.ln2_g = ps.add_ones(p + "ln2.g", 1, id);
        blk.ln2_b = ps.add_zeros(p + "ln2.b", 1, id);
        blk.q2 = lin(p + "inter.q", id, id);
        blk.k2 = lin(p + "inter.k", id, id);
        blk.v2 = lin(p + "inter.v", id, id);
        blk.o2 = lin(p + "inter.o", id, id);
        blk.ln3_g = ps.add_ones(p + "ln3.g", 1, id);
        blk.ln3_b = ps.add_zeros(p + "ln3.b", 1, id);
        blk.q3 = lin(p + "cross.q", id, id);
        blk.k3 = lin(p + "cross.k", id, id);
        blk.v3 = lin(p + "cross.v", id, id);
        blk.o3 = lin(p + "cross.o", id, id);
        blk.ln4_g = ps.add_ones(p + "ln4.g", 1, id);
        blk.ln4_b = ps.add_zeros(p + "ln4.b", 1, id);
        blk.gate = lin(p + "gate", gcfg.ffn_mult * id, id);
        blk.up = lin(p + "up", gcfg.ffn_mult * id, id);
        blk.down = lin(p + "down", id, gcfg.ffn_mult * id);
        gen.blocks.push_back(blk);
    }
    const int rw = lcfg.rank * gcfg.token_width;
    gen.a_fc1 = lin("gen.a_head.fc1", id, id);
    gen.a_fc2 = lin("gen.a_head.fc2", rw, id);
    gen.b_fc1 = lin("gen.b_head.fc1", id, id);
    // zero-initialized B head output: generated adapters start as exact
    // zero updates, reproducing the standard low-rank init for the
    // conditional path.
    gen.b_fc2 = ps.add_zeros("gen.b_head.fc2", rw, id);
    gen.p_global = ps.add_zeros("gen.p_global", n_tok, rw);

    const int n = gen.plan.total_tokens();
    gen.intra_mask = Mat<S>::Zero(n, n);
    gen.inter_mask = Mat<S>::Zero(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (gen.plan.entries[size_t(i)].layer != gen.plan.entries[size_t(j)].layer)
                gen.intra_mask(i, j) = S(model::nn::kMaskNeg);
            if (gen.plan.entries[size_t(i)].slot != gen.plan.entries[size_t(j)].slot)
                gen.inter_mask(i, j) = S(model::nn::kMaskNeg);
        }
    return gen;
}

/// Tape-recorded generator forward. Binds weights as parameters when
/// `train` is set, as constants otherwise; there is exactly one forward
/// implementation, so chunk-level reuse is bitwise-equal to regeneration.
template <class S>
class GeneratorTape {
public:
    GeneratorTape(Graph<S>& g, const Generator<S>& gen, bool train)
        : g_(g), gen_(gen), train_(train) {}

    Expr<S> w(int id) {
        auto it = bound_.find(id);
        if (it != bound_.end()) return it->second;
        Expr<S> e = train_ ? g_.param(gen_.params.value(id), id)
                           : g_.constant(gen_.params.value(id), "phi2");
        bound_.emplace(id, e);
        return e;
    }

    /// Multi-head attention; bias-free projections so zeroed inputs yield an
    /// exactly-zero context.
    Expr<S> mha(Expr<S> xq, Expr<S> xkv, int wq, int wk, int wv, int wo, const Mat<S>* mask) {
        const int heads = gen_.cfg.n_heads, dh = gen_.cfg.internal_dim / heads;
        Expr<S> q = ad::matmul_nt(xq, w(wq));
        Expr<S> k = ad::matmul_nt(xkv, w(wk));
        Expr<S> v = ad::matmul_nt(xkv, w(wv));
        Expr<S> ctx;
        for (int h = 0; h < heads; ++h) {
            Expr<S> qh = ad::slice_cols(q, h * dh, dh);
            Expr<S> kh = ad::slice_cols(k, h * dh, dh);
            Expr<S> vh = ad::slice_cols(v, h * dh, dh);
            Expr<S> scores = ad::scale(ad::matmul_nt(qh, kh), S(1.0 / std::sqrt(double(dh))));
            if (mask) scores = ad::add_const(scores, *mask);
            Expr<S> ch = ad::matmul(ad::row_softmax(scores), vh);
            ctx = (h == 0) ? ch : ad::concat_cols(ctx, ch);
        }
        return ad::matmul_nt(ctx, w(wo));
    }

    /// x + attention restricted to tokens of the same backbone layer.
    Expr<S> intra_layer_pass(Expr<S> x, int block) {
        const auto& b = gen_.blocks[size_t(block)];
        Expr<S> xn = ad::layer_norm_rows(x, w(b.ln1_g), w(b.ln1_b));
        return ad::add(x, mha(xn, xn, b.q1, b.k1, b.v1, b.o1, &gen_.intra_mask));
    }

    /// x + attention restricted to tokens sharing a slot index across layers.
    Expr<S> inter_layer_pass(Expr<S> x, int block) {
        const auto& b = gen_.blocks[size_t(block)];
        Expr<S> xn = ad::layer_norm_rows(x, w(b.ln2_g), w(b.ln2_b));
        return ad::add(x, mha(xn, xn, b.q2, b.k2, b.v2, b.o2, &gen_.inter_mask));
    }

    /// x + cross-attention from every parameter token to every visual token.
    Expr<S> cross_attend(Expr<S> x, Expr<S> vis_internal, int block) {
        const auto& b = gen_.blocks[size_t(block)];
        Expr<S> xn = ad::layer_norm_rows(x, w(b.ln3_g), w(b.ln3_b));
        return ad::add(x, mha(xn, vis_internal, b.q3, b.k3, b.v3, b.o3, nullptr));
    }

    Expr<S> mlp_pass(Expr<S> x, int block) {
        const auto& b = gen_.blocks[size_t(block)];
        Expr<S> xn = ad::layer_norm_rows(x, w(b.ln4_g), w(b.ln4_b));
        Expr<S> act = ad::hadamard(ad::silu(ad::matmul_nt(xn, w(b.gate))),
                                   ad::matmul_nt(xn, w(b.up)));
        return ad::add(x, ad::matmul_nt(act, w(b.down)));
    }

    /// Initial token grid: learnable queries plus layer/slot position codes.
    Expr<S> parameter_tokens() {
        std::vector<int> layer_ids, slot_ids;
        for (const auto& e : gen_.plan.entries) {
            layer_ids.push_back(e.layer);
            slot_ids.push_back(e.slot);
        }
        Expr<S> x = w(gen_.token_embed);
        x = ad::add(x, ad::gather_rows(w(gen_.layer_embed), layer_ids));
        x = ad::add(x, ad::gather_rows(w(gen_.slot_embed), slot_ids));
        return x;
    }

    /// Project the visual conditioning tokens into the generator width.
    Expr<S> project_visual(Expr<S> vis) {
        if (vis.cols() != gen_.d_model_in)
            throw ContractViolation("generator: visual token width mismatch");
        return ad::matmul_nt(vis, w(gen_.vis_proj));
    }

    /// Decode tokens through the A/B heads into the grid (total_tokens x r*w),
    /// then add the global latent residual when enabled.
    Expr<S> project_heads(Expr<S> x, bool with_global_latent) {
        Expr<S> a_in = ad::gather_rows(x, gen_.plan.a_rows);
        Expr<S> b_in = ad::gather_rows(x, gen_.plan.b_rows);
        Expr<S> a_out = ad::matmul_nt(ad::silu(ad::matmul_nt(a_in, w(gen_.a_fc1))), w(gen_.a_fc2));
        Expr<S> b_out = ad::matmul_nt(ad::silu(ad::matmul_nt(b_in, w(gen_.b_fc1))), w(gen_.b_fc2));
        Expr<S> stacked = ad::concat_rows(a_out, b_out);
        std::vector<int> perm(gen_.plan.entries.size(), 0);
        int na = int(gen_.plan.a_rows.size());
        for (int i = 0; i < na; ++i) perm[size_t(gen_.plan.a_rows[size_t(i)])] = i;
        for (size_t i = 0; i < gen_.plan.b_rows.size(); ++i)
            perm[size_t(gen_.plan.b_rows[i])] = na + int(i);
        Expr<S> grid = ad::gather_rows(stacked, perm);
        if (with_global_latent) grid = ad::add(grid, w(gen_.p_global));
        return grid;
    }

    /// Slice the decoded grid back into per-site (A, B) expressions.
    /// Flattening and re-slicing is exact whenever token_width divides the
    /// site dims; surplus stripe tails are discarded.
    model::LoraExprSet<S> slice_sites(Expr<S> grid) {
        const int r = gen_.plan.rank, wdt = gen_.plan.width;
        model::LoraExprSet<S> out;
        out.sites = gen_.sites;
        out.scale = S(gen_.lora_cfg.scale());
        std::vector<Expr<S>> a_acc(gen_.sites.size()), bt_acc(gen_.sites.size());
        for (size_t t = 0; t < gen_.plan.entries.size(); ++t) {
            const auto& e = gen_.plan.entries[t];
            Expr<S> blockmat = ad::reshape_rowmajor(ad::slice_rows(grid, Eigen::Index(t), 1), r, wdt);
            auto& slot = e.is_b ? bt_acc[size_t(e.site)] : a_acc[size_t(e.site)];
            slot = slot.valid() ? ad::concat_cols(slot, blockmat) : blockmat;
        }
        for (size_t s = 0; s < gen_.sites.size(); ++s) {
            Expr<S> a = a_acc[s], bt = bt_acc[s];
            if (a.cols() > gen_.sites[s].d_in) a = ad::slice_cols(a, 0, gen_.sites[s].d_in);
            if (bt.cols() > gen_.sites[s].d_out) bt = ad::slice_cols(bt, 0, gen_.sites[s].d_out);
            out.ab.emplace_back(a, ad::transpose(bt));
        }
        return out;
    }

    /// Full conditional forward: visual tokens to a per-site adapter set.
    model::LoraExprSet<S> generate_delta(Expr<S> vis, Expr<S>* out_grid = nullptr) {
        const auto& cfg = gen_.cfg;
        if (gen_.expected_vis_rows > 0 && vis.rows() != gen_.expected_vis_rows)
            throw ContractViolation("generator: conditioning frame count mismatch");
        Expr<S> x = parameter_tokens();
        Expr<S> vis_int = project_visual(vis);
        for (int b = 0; b < cfg.depth; ++b) {
            x = intra_layer_pass(x, b);
            x = inter_layer_pass(x, b);
            x = cross_attend(x, vis_int, b);
            x = mlp_pass(x, b);
        }
        Expr<S> grid = project_heads(x, cfg.use_global_latent);
        if (out_grid) *out_grid = grid;
        return slice_sites(grid);
    }

private:
    Graph<S>& g_;
    const Generator<S>& gen_;
    bool train_;
    std::unordered_map<int, Expr<S>> bound_;
};

/// Convenience: run the generator without gradients and materialize a plain
/// delta set for the inference engine.
template <class S>
lora::LoraDeltaSet<S> generate_delta_values(const Generator<S>& gen, const Mat<S>& vis) {
    Graph<S> g;
    GeneratorTape<S> tape(g, gen, false);
    auto exprs = tape.generate_delta(g.constant(vis));
    return exprs.values(gen.lora_cfg);
}

/// Parameter count and per-site token budget, printed by the describe
/// command and logged at training startup.
template <class S>
std::string describe(const Generator<S>& gen) {
    std::string s;
    s += "generator parameters: " + std::to_string(gen.param_count()) + "\n";
    s += "depth " + std::to_string(gen.cfg.depth) + ", internal_dim " +
         std::to_string(gen.cfg.internal_dim) + ", token_width " +
         std::to_string(gen.cfg.token_width) + ", rank " + std::to_string(gen.lora_cfg.rank) +
         "\n";
    s += "token grid: " + std::to_string(gen.plan.n_layers) + " layers x " +
         std::to_string(gen.plan.tokens_per_layer) + " tokens (s_l), r*w block " +
         std::to_string(gen.plan.rank) + "x" + std::to_string(gen.plan.width) + "\n";
    std::vector<int> a_count(gen.sites.size(), 0), b_count(gen.sites.size(), 0);
    for (const auto& e : gen.plan.entries)
        (e.is_b ? b_count : a_count)[size_t(e.site)]++;
    for (size_t i = 0; i < gen.sites.size(); ++i) {
        if (gen.sites[i].layer != 0) continue;  // identical across layers
        s += "  site " + gen.sites[i].name() + ": A tokens " + std::to_string(a_count[i]) +
             ", B tokens " + std::to_string(b_count[i]) + "\n";
    }
    return s;
}

}  // namespace avad::gen
