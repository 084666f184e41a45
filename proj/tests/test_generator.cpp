#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avad/ad/grad_check.hpp"
#include "avad/gen/generator.hpp"
#include "avad/model/engine.hpp"
#include "test_util.hpp"

using namespace avad;
using namespace avad::testutil;

namespace {

gen::GeneratorConfig small_gen_cfg() {
    gen::GeneratorConfig g;
    g.internal_dim = 32;
    g.n_heads = 4;
    g.ffn_mult = 2;
    return g;
}

struct GenFixture {
    Fixture fx;
    lora::LoraConfig lc;
    gen::Generator<float> gen;
    model::Backbone<float> bb;

    GenFixture()
        : fx(small_config(), true),
          lc{2, 4.0},
          gen(gen::make_generator<float>(fx.cfg, small_gen_cfg(), lc, 77)),
          bb(model::make_backbone<float>(fx.cfg, 7)) {}
};

}  // namespace

TEST_CASE("token plan: default-shaped config packs the grid exactly") {
    model::BackboneConfig cfg;  // 8 layers, d_model 128, five fused sites
    cfg.vocab_size = 100;
    cfg.max_seq = 700;
    lora::LoraConfig lc;  // r=8, alpha=16
    auto sites = lora::enumerate_sites(cfg);
    auto plan = gen::build_token_plan(sites, lc.rank, cfg.d_model, cfg.lm_layers);
    CHECK(plan.n_layers == 8);
    CHECK(plan.tokens_per_layer == 21);  // qkv 1+3, out 1+1, gate 1+4, up 1+4, down 4+1
    CHECK(plan.grid_scalars() == lora::delta_param_count(cfg, lc));
    CHECK(lc.scale() == 2.0);  // alpha 16 / r 8
}

TEST_CASE("delta_param_count: hand value and linearity in rank") {
    model::BackboneConfig cfg;
    cfg.lm_layers = 1;
    cfg.d_model = 128;
    cfg.d_ffn = 512;
    cfg.vocab_size = 10;
    cfg.max_seq = 10;
    lora::LoraConfig lc{8, 16.0};
    // single site check: one 128->128 site contributes 8*(128+128) = 2048
    std::vector<lora::LoraSite> one = {{0, lora::SiteKind::out_proj, 128, 128}};
    std::int64_t n = 0;
    for (const auto& s : one) n += std::int64_t(lc.rank) * (s.d_in + s.d_out);
    CHECK(n == 2048);
    lora::LoraConfig doubled{16, 16.0};
    CHECK(lora::delta_param_count(cfg, doubled) == 2 * lora::delta_param_count(cfg, lc));
}

TEST_CASE("fresh generator yields exact zero updates: adapted == frozen bitwise") {
    GenFixture gf;
    auto frames = random_frames(gf.fx.cfg.k_frames, 32, 32, 4);
    auto vis = model::encode_frames(gf.bb, frames);
    auto delta = gen::generate_delta_values(gf.gen, vis);
    for (const auto& m : delta.mats) CHECK(m.b.cwiseAbs().maxCoeff() == 0.0f);

    model::Engine<float> frozen(gf.bb, nullptr), adapted(gf.bb, &delta);
    ad::Mat<float> lf, la;
    frozen.prefill(gf.fx.prompt.raw_ids, gf.fx.prompt.vid_index, &vis, &lf);
    adapted.prefill(gf.fx.prompt.raw_ids, gf.fx.prompt.vid_index, &vis, &la);
    CHECK((lf.array() == la.array()).all());
}

TEST_CASE("generate_delta is deterministic and shape-checked") {
    GenFixture gf;
    auto vis = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 4));
    auto d1 = gen::generate_delta_values(gf.gen, vis);
    auto d2 = gen::generate_delta_values(gf.gen, vis);
    REQUIRE(d1.mats.size() == d2.mats.size());
    for (size_t i = 0; i < d1.mats.size(); ++i) {
        CHECK((d1.mats[i].a.array() == d2.mats[i].a.array()).all());
        CHECK((d1.mats[i].b.array() == d2.mats[i].b.array()).all());
        CHECK(d1.mats[i].a.rows() == gf.lc.rank);
        CHECK(d1.mats[i].a.cols() == d1.sites[i].d_in);
        CHECK(d1.mats[i].b.rows() == d1.sites[i].d_out);
        CHECK(d1.mats[i].b.cols() == gf.lc.rank);
    }
    ad::Mat<float> bad = vis.topRows(vis.rows() - 1);
    CHECK_THROWS_AS(gen::generate_delta_values(gf.gen, bad), ad::ContractViolation);
}

TEST_CASE("intra-layer pass isolates layer groups") {
    GenFixture gf;
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, false);
    Rng rng = Rng::stream(5, "intra");
    const int n = gf.gen.plan.total_tokens(), id = gf.gen.cfg.internal_dim;
    ad::Mat<float> x0(n, id);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = float(rng.gaussian());
    auto base = tape.intra_layer_pass(g.leaf(x0, false), 0).value();

    // perturb every token of layer 1; other layers' outputs must be bitwise unchanged
    ad::Mat<float> x1 = x0;
    for (int t = 0; t < n; ++t)
        if (gf.gen.plan.entries[size_t(t)].layer == 1) x1.row(t).array() += 0.5f;
    auto moved = tape.intra_layer_pass(g.leaf(x1, false), 0).value();
    for (int t = 0; t < n; ++t) {
        if (gf.gen.plan.entries[size_t(t)].layer == 1) continue;
        CHECK((base.row(t).array() == moved.row(t).array()).all());
    }
}

TEST_CASE("inter-layer pass isolates slot groups (role-swapped mirror)") {
    GenFixture gf;
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, false);
    Rng rng = Rng::stream(6, "inter");
    const int n = gf.gen.plan.total_tokens(), id = gf.gen.cfg.internal_dim;
    ad::Mat<float> x0(n, id);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = float(rng.gaussian());
    auto base = tape.inter_layer_pass(g.leaf(x0, false), 0).value();
    ad::Mat<float> x1 = x0;
    for (int t = 0; t < n; ++t)
        if (gf.gen.plan.entries[size_t(t)].slot == 2) x1.row(t).array() += 0.5f;
    auto moved = tape.inter_layer_pass(g.leaf(x1, false), 0).value();
    for (int t = 0; t < n; ++t) {
        if (gf.gen.plan.entries[size_t(t)].slot == 2) continue;
        CHECK((base.row(t).array() == moved.row(t).array()).all());
    }
}

TEST_CASE("single-layer config: intra mask is all-zero, pass equals full attention") {
    auto cfg = small_config();
    cfg.lm_layers = 1;
    Fixture fx(cfg, true);
    lora::LoraConfig lc{2, 4.0};
    auto gen1 = gen::make_generator<float>(fx.cfg, small_gen_cfg(), lc, 3);
    CHECK(gen1.intra_mask.cwiseAbs().maxCoeff() == 0.0f);

    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gen1, false);
    Rng rng = Rng::stream(8, "single");
    ad::Mat<float> x0(gen1.plan.total_tokens(), gen1.cfg.internal_dim);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = float(rng.gaussian());
    auto via_pass = tape.intra_layer_pass(g.leaf(x0, false), 0).value();
    // same weights, explicit unmasked attention
    auto xn = ad::layer_norm_rows(g.leaf(x0, false), tape.w(gen1.blocks[0].ln1_g),
                                  tape.w(gen1.blocks[0].ln1_b));
    auto full = ad::add(g.leaf(x0, false),
                        tape.mha(xn, xn, gen1.blocks[0].q1, gen1.blocks[0].k1, gen1.blocks[0].v1,
                                 gen1.blocks[0].o1, nullptr));
    CHECK((via_pass - full.value()).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("layer-permutation equivariance on a 3-layer config") {
    auto cfg = small_config();  // 3 LM layers already
    Fixture fx(cfg, true);
    lora::LoraConfig lc{2, 4.0};
    auto gen3 = gen::make_generator<float>(fx.cfg, small_gen_cfg(), lc, 9);
    REQUIRE(gen3.plan.n_layers == 3);
    const int sl = gen3.plan.tokens_per_layer, n = gen3.plan.total_tokens();

    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gen3, false);
    Rng rng = Rng::stream(10, "perm");
    ad::Mat<float> x0(n, gen3.cfg.internal_dim);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = float(rng.gaussian());

    // layer permutation pi = (2, 0, 1): token (l, s) -> (pi(l), s)
    const int pi[3] = {2, 0, 1};
    ad::Mat<float> xp(n, gen3.cfg.internal_dim);
    for (int l = 0; l < 3; ++l) xp.middleRows(pi[l] * sl, sl) = x0.middleRows(l * sl, sl);

    auto y = tape.intra_layer_pass(g.leaf(x0, false), 0).value();
    auto yp = tape.intra_layer_pass(g.leaf(xp, false), 0).value();
    for (int l = 0; l < 3; ++l)
        CHECK((yp.middleRows(pi[l] * sl, sl) - y.middleRows(l * sl, sl)).cwiseAbs().maxCoeff() <
              1e-5f);
}

TEST_CASE("cross-attend: zero visual tokens pass the residual through exactly") {
    GenFixture gf;
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, false);
    Rng rng = Rng::stream(12, "crosszero");
    ad::Mat<float> x0(gf.gen.plan.total_tokens(), gf.gen.cfg.internal_dim);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = float(rng.gaussian());
    ad::Mat<float> vis0 = ad::Mat<float>::Zero(gf.fx.cfg.visual_tokens(), gf.fx.cfg.d_model);
    auto vis_int = tape.project_visual(g.constant(vis0));
    auto y = tape.cross_attend(g.leaf(x0, false), vis_int, 0);
    CHECK((y.value().array() == x0.array()).all());
}

TEST_CASE("cross-attend: duplicating the visual token set leaves output invariant") {
    GenFixture gf;
    auto vis = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 21));
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, false);
    Rng rng = Rng::stream(13, "crossdup");
    ad::Mat<float> x0(gf.gen.plan.total_tokens(), gf.gen.cfg.internal_dim);
    for (Eigen::Index i = 0; i < x0.size(); ++i) x0.data()[i] = float(rng.gaussian());

    auto y1 = tape.cross_attend(g.leaf(x0, false), tape.project_visual(g.constant(vis)), 0);
    ad::Mat<float> vis2(vis.rows() * 2, vis.cols());
    vis2 << vis, vis;
    auto y2 = tape.cross_attend(g.leaf(x0, false), tape.project_visual(g.constant(vis2)), 0);
    CHECK((y1.value() - y2.value()).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("different videos produce different adapters") {
    GenFixture gf;
    // give the B head nonzero weights so deltas are not identically zero
    Rng rng = Rng::stream(14, "bperturb");
    auto& b2 = gf.gen.params.value(gf.gen.b_fc2);
    for (Eigen::Index i = 0; i < b2.size(); ++i) b2.data()[i] = 0.05f * float(rng.gaussian());

    int distinct = 0;
    for (int pair = 0; pair < 10; ++pair) {
        auto va = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 100 + pair));
        auto vb = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 200 + pair));
        auto da = gen::generate_delta_values(gf.gen, va);
        auto db = gen::generate_delta_values(gf.gen, vb);
        double dist = 0;
        for (size_t i = 0; i < da.mats.size(); ++i) {
            dist += double((da.mats[i].a - db.mats[i].a).norm());
            dist += double((da.mats[i].b - db.mats[i].b).norm());
        }
        if (dist > 0) ++distinct;
    }
    CHECK(distinct == 10);
}

TEST_CASE("grid/site bijection: exact-packing config round-trips bitwise") {
    GenFixture gf;
    auto vis = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 4));
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, false);
    ad::Expr<float> grid;
    auto exprs = tape.generate_delta(g.constant(vis), &grid);
    REQUIRE(gf.gen.plan.grid_scalars() ==
            lora::delta_param_count(gf.fx.cfg, gf.lc));  // exact packing here

    // rebuild the grid from the sliced site matrices
    const int r = gf.gen.plan.rank, wd = gf.gen.plan.width;
    ad::Mat<float> rebuilt(grid.rows(), grid.cols());
    for (size_t t = 0; t < gf.gen.plan.entries.size(); ++t) {
        const auto& e = gf.gen.plan.entries[t];
        ad::Mat<float> a = exprs.ab[size_t(e.site)].first.value();
        ad::Mat<float> bt = exprs.ab[size_t(e.site)].second.value().transpose();
        const ad::Mat<float>& src = e.is_b ? bt : a;
        ad::Mat<float> blockmat = src.middleCols(e.part * wd, wd);
        for (int ri = 0; ri < r; ++ri)
            rebuilt.block(Eigen::Index(t), ri * wd, 1, wd) = blockmat.row(ri);
    }
    CHECK((rebuilt.array() == grid.value().array()).all());
}

TEST_CASE("surplus stripes are generated and discarded for non-divisible widths") {
    auto cfg = small_config();
    Fixture fx(cfg, true);
    lora::LoraConfig lc{2, 4.0};
    auto gcfg = small_gen_cfg();
    gcfg.token_width = 24;  // does not divide d_model=32 or d_ffn=128
    auto gen_odd = gen::make_generator<float>(fx.cfg, gcfg, lc, 15);
    CHECK(gen_odd.plan.grid_scalars() > lora::delta_param_count(fx.cfg, lc));
    auto bb = model::make_backbone<float>(fx.cfg, 7);
    auto vis = model::encode_frames(bb, random_frames(fx.cfg.k_frames, 32, 32, 4));
    auto delta = gen::generate_delta_values(gen_odd, vis);
    for (size_t i = 0; i < delta.mats.size(); ++i) {
        CHECK(delta.mats[i].a.cols() == delta.sites[i].d_in);
        CHECK(delta.mats[i].b.rows() == delta.sites[i].d_out);
    }
}

TEST_CASE("global latent additivity: on minus off equals p_global exactly") {
    GenFixture gf;
    // nonzero latent so the check is not vacuous
    Rng rng = Rng::stream(16, "latent");
    auto& pg = gf.gen.params.value(gf.gen.p_global);
    for (Eigen::Index i = 0; i < pg.size(); ++i) pg.data()[i] = 0.1f * float(rng.gaussian());

    auto vis = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 4));
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, false);
    auto x = tape.parameter_tokens();
    auto vis_int = tape.project_visual(g.constant(vis));
    for (int b = 0; b < gf.gen.cfg.depth; ++b) {
        x = tape.intra_layer_pass(x, b);
        x = tape.inter_layer_pass(x, b);
        x = tape.cross_attend(x, vis_int, b);
        x = tape.mlp_pass(x, b);
    }
    auto grid_on = tape.project_heads(x, true);
    auto grid_off = tape.project_heads(x, false);
    ad::Mat<float> expected = grid_off.value() + pg;
    CHECK((grid_on.value().array() == expected.array()).all());
}

TEST_CASE("gradients reach the head weights and the global latent") {
    GenFixture gf;
    auto vis = model::encode_frames(gf.bb, random_frames(gf.fx.cfg.k_frames, 32, 32, 4));
    ad::Graph<float> g;
    gen::GeneratorTape<float> tape(g, gf.gen, true);
    ad::Expr<float> grid;
    auto exprs = tape.generate_delta(g.constant(vis), &grid);
    (void)exprs;
    auto loss = ad::mean_all(ad::hadamard(grid, grid));
    // make the loss depend on B rows too
    g.backward(loss);
    auto grads = g.param_grads();
    CHECK(grads.at(gf.gen.a_fc2).cwiseAbs().maxCoeff() > 0.0f);
    CHECK(grads.at(gf.gen.b_fc1).cwiseAbs().maxCoeff() == 0.0f);  // blocked by zero fc2
    CHECK(grads.at(gf.gen.b_fc2).cwiseAbs().maxCoeff() >= 0.0f);
    CHECK(grads.count(gf.gen.p_global) == 1);
}

TEST_CASE("finite differences pass through the full generator in 64-bit") {
    auto cfg = micro_config();
    Fixture fx(cfg, true);
    lora::LoraConfig lc{2, 4.0};
    auto gcfg = small_gen_cfg();
    gcfg.internal_dim = 16;
    gcfg.n_heads = 2;
    auto gen_d = gen::make_generator<double>(fx.cfg, gcfg, lc, 31);
    auto bb = model::make_backbone<double>(fx.cfg, 7);
    auto vis = model::encode_frames(bb, random_frames(fx.cfg.k_frames, 32, 32, 4));
    // exercise the B path too
    Rng rng = Rng::stream(17, "fd");
    auto& b2 = gen_d.params.value(gen_d.b_fc2);
    for (Eigen::Index i = 0; i < b2.size(); ++i) b2.data()[i] = 0.05 * rng.gaussian();

    auto build = [&](ad::Graph<double>& g, const ad::ParamStore<double>& p) {
        gen::Generator<double> view = gen_d;
        view.params = p;
        gen::GeneratorTape<double> tape(g, view, true);
        ad::Expr<double> grid;
        tape.generate_delta(g.constant(vis), &grid);
        return ad::mean_all(ad::hadamard(grid, grid));
    };
    ad::ParamStore<double> params = gen_d.params;
    auto res = ad::finite_diff_check(build, params, 1e-5, 4);
    CAPTURE(res.worst_param);
    CHECK(res.max_rel_error < 1e-4);
}
