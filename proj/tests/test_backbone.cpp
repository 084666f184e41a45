#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "avad/ad/grad_check.hpp"
#include "avad/model/engine.hpp"
#include "avad/model/tape.hpp"
#include "test_util.hpp"

using namespace avad;
using namespace avad::testutil;

namespace {

template <class S>
lora::LoraDeltaSet<S> fresh_delta(const model::BackboneConfig& cfg, std::uint64_t seed) {
    lora::LoraConfig lc;
    lc.rank = 2;
    lc.alpha = 4;
    return lora::init_static_lora<S>(lora::enumerate_sites(cfg), lc, seed);
}

}  // namespace

TEST_CASE("encode_frames shape: K frames, 32x32, patch 16 -> K*4 x d tokens") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 11);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 5);
    auto vis = model::encode_frames(bb, frames);
    CHECK(vis.rows() == fx.cfg.k_frames * 4);
    CHECK(vis.cols() == fx.cfg.d_model);
    CHECK(vis.allFinite());
}

TEST_CASE("encode_frames: zero frames give a deterministic bias-only grid") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 11);
    FrameSeq zeros(size_t(fx.cfg.k_frames), Frame{32, 32, 1, std::vector<std::uint8_t>(1024, 0)});
    auto a = model::encode_frames(bb, zeros);
    auto b = model::encode_frames(bb, zeros);
    CHECK((a.array() == b.array()).all());
}

TEST_CASE("encode_frames rejects wrong spatial size and wrong K") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 11);
    auto bad = random_frames(fx.cfg.k_frames, 16, 16, 5);
    CHECK_THROWS_AS(model::encode_frames(bb, bad), ad::ContractViolation);
    auto toofew = random_frames(fx.cfg.k_frames - 1, 32, 32, 5);
    CHECK_THROWS_AS(model::encode_frames(bb, toofew), ad::ContractViolation);
}

TEST_CASE("identical seeds and frames give identical visual tokens") {
    Fixture fx(small_config(), true);
    auto bb1 = model::make_backbone<float>(fx.cfg, 42);
    auto bb2 = model::make_backbone<float>(fx.cfg, 42);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 9);
    auto a = model::encode_frames(bb1, frames);
    auto b = model::encode_frames(bb2, frames);
    CHECK((a.array() == b.array()).all());
}

TEST_CASE("zero-update equivalence: fresh adapter matches frozen engine bitwise") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 7);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 3);
    auto vis = model::encode_frames(bb, frames);
    auto delta = fresh_delta<float>(fx.cfg, 99);

    model::Engine<float> frozen(bb, nullptr);
    model::Engine<float> adapted(bb, &delta);
    ad::Mat<float> logits_f, logits_a;
    frozen.prefill(fx.prompt.raw_ids, fx.prompt.vid_index, &vis, &logits_f);
    adapted.prefill(fx.prompt.raw_ids, fx.prompt.vid_index, &vis, &logits_a);
    REQUIRE(logits_f.rows() == logits_a.rows());
    CHECK((logits_f.array() == logits_a.array()).all());
}

TEST_CASE("causality: perturbing a future token leaves earlier logits unchanged") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 7);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 3);
    auto vis = model::encode_frames(bb, frames);
    model::Engine<float> eng(bb, nullptr);

    std::vector<int> ids = fx.prompt.raw_ids;
    Rng rng = Rng::stream(31, "test.causality");
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> mod = ids;
        // only perturb text tokens (index >= 1; index 0 is the placeholder)
        size_t pos = 1 + rng.uniform_int(mod.size() - 1);
        mod[pos] = int(rng.uniform_int(fx.tok.vocab_size()));
        ad::Mat<float> base_logits, mod_logits;
        eng.prefill(ids, fx.prompt.vid_index, &vis, &base_logits);
        eng.prefill(mod, fx.prompt.vid_index, &vis, &mod_logits);
        // positions strictly before the perturbed one are unchanged
        int expanded_pos = int(pos) - 1 + int(vis.rows());
        CHECK((base_logits.topRows(expanded_pos).array() ==
               mod_logits.topRows(expanded_pos).array())
                  .all());
    }
}

TEST_CASE("adapter continuity: logit difference shrinks with the update norm") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 7);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 3);
    auto vis = model::encode_frames(bb, frames);

    auto run_with_bnorm = [&](float eps) {
        auto delta = fresh_delta<float>(fx.cfg, 5);
        Rng rng = Rng::stream(17, "test.continuity");
        for (auto& m : delta.mats)
            for (Eigen::Index i = 0; i < m.b.size(); ++i)
                m.b.data()[i] = eps * float(rng.gaussian());
        model::Engine<float> eng(bb, &delta);
        auto c = eng.prefill(fx.prompt.raw_ids, fx.prompt.vid_index, &vis);
        return ad::Mat<float>(c.last_logits);
    };
    model::Engine<float> frozen(bb, nullptr);
    auto base = frozen.prefill(fx.prompt.raw_ids, fx.prompt.vid_index, &vis).last_logits;
    float d2 = (run_with_bnorm(1e-2f) - base).norm();
    float d4 = (run_with_bnorm(1e-4f) - base).norm();
    CHECK(d4 < d2);
    CHECK(d4 < 1e-2f);
    CHECK(d2 < 1.0f);
}

TEST_CASE("tape forward matches engine forward within 1e-6 in 64-bit") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<double>(fx.cfg, 7);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 3);
    auto vis = model::encode_frames(bb, frames);

    model::Engine<double> eng(bb, nullptr);
    ad::Mat<double> engine_logits;
    eng.prefill(fx.prompt.raw_ids, fx.prompt.vid_index, &vis, &engine_logits);

    ad::Graph<double> g;
    model::TapeLm<double> tape(g, bb, false, nullptr);
    auto pre = tape.prefix(fx.prompt.raw_ids, fx.prompt.vid_index, g.constant(vis), {}, true);
    CHECK((pre.all_logits.value() - engine_logits).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("tape response branch matches a single full forward") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<double>(fx.cfg, 7);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 3);
    auto vis = model::encode_frames(bb, frames);
    std::vector<int> resp = {fx.tok.think_id(), fx.tok.id("steady"), fx.tok.id("motion")};

    // full forward over prompt + resp
    ad::Graph<double> g1;
    model::TapeLm<double> tape1(g1, bb, false, nullptr);
    auto full = tape1.prefix(fx.prompt.raw_ids, fx.prompt.vid_index, g1.constant(vis), resp, true);

    // prefix + response branch
    ad::Graph<double> g2;
    model::TapeLm<double> tape2(g2, bb, false, nullptr);
    auto pre = tape2.prefix(fx.prompt.raw_ids, fx.prompt.vid_index, g2.constant(vis));
    auto resp_logits = tape2.response_logits(pre, resp);

    const int p = pre.len;
    auto expect = full.all_logits.value().middleRows(p, int(resp.size()));
    CHECK((resp_logits.value() - expect).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("generate: temperature 0 is deterministic, sampled logp matches rescoring") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<double>(fx.cfg, 21);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 13);
    auto vis = model::encode_frames(bb, frames);
    model::Engine<double> eng(bb, nullptr);
    auto cache = eng.prefill(fx.prompt.raw_ids, fx.prompt.vid_index, &vis);

    Rng r1 = Rng::stream(1, "gen");
    auto a = eng.generate(cache, 0.0, 8, r1, fx.tok.eos_id());
    Rng r2 = Rng::stream(2, "gen");
    auto b = eng.generate(cache, 0.0, 8, r2, fx.tok.eos_id());
    CHECK(a.tokens == b.tokens);

    Rng r3 = Rng::stream(3, "gen");
    auto s = eng.generate(cache, 1.0, 8, r3, fx.tok.eos_id());
    REQUIRE(!s.tokens.empty());

    // re-score with the tape forward; log-probs must match within 1e-6
    ad::Graph<double> g;
    model::TapeLm<double> tape(g, bb, false, nullptr);
    auto pre = tape.prefix(fx.prompt.raw_ids, fx.prompt.vid_index, g.constant(vis));
    ad::Expr<double> logits;
    if (s.tokens.size() > 1) {
        std::vector<int> fed(s.tokens.begin(), s.tokens.end() - 1);
        logits = ad::concat_rows(pre.last_logits, tape.response_logits(pre, fed));
    } else {
        logits = pre.last_logits;
    }
    auto logp = ad::row_log_softmax(logits);
    for (size_t i = 0; i < s.tokens.size(); ++i) {
        CHECK(std::abs(logp.value()(Eigen::Index(i), s.tokens[i]) - s.logp[i]) < 1e-6);
    }
}

TEST_CASE("extract_embedding: length d, frozen == zero-update adapter") {
    Fixture fx(small_config(), true);
    auto bb = model::make_backbone<float>(fx.cfg, 7);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 3);
    auto vis = model::encode_frames(bb, frames);
    auto e1 = model::extract_embedding<float>(bb, fx.prompt.raw_ids, fx.prompt.vid_index, vis,
                                              nullptr);
    auto delta = fresh_delta<float>(fx.cfg, 2);
    auto e2 = model::extract_embedding<float>(bb, fx.prompt.raw_ids, fx.prompt.vid_index, vis,
                                              &delta);
    CHECK(e1.cols() == fx.cfg.d_model);
    CHECK((e1.array() == e2.array()).all());
}

TEST_CASE("gradient soundness: SFT loss path through vision and LM blocks") {
    Fixture fx(micro_config(), true);
    auto bb = model::make_backbone<double>(fx.cfg, 3);
    auto frames = random_frames(fx.cfg.k_frames, 32, 32, 8);
    std::vector<int> resp = fx.tok.encode("<think> steady motion </think> <answer> 0 </answer>");
    resp.push_back(fx.tok.eos_id());

    auto build = [&](ad::Graph<double>& g, const ad::ParamStore<double>& p) {
        // rebind the perturbed store into a scratch backbone view
        model::Backbone<double> view = bb;
        view.params = p;
        model::TapeLm<double> tape(g, view, true, nullptr);
        auto vis = tape.vision_tokens(frames);
        std::vector<int> fed(resp.begin(), resp.end() - 1);
        auto pre = tape.prefix(fx.prompt.raw_ids, fx.prompt.vid_index, vis, fed, true);
        const int p0 = pre.len - int(fed.size()) - 1;
        auto pred = ad::slice_rows(pre.all_logits, p0, int(resp.size()));
        return ad::cross_entropy_mean(pred, resp);
    };
    ad::ParamStore<double> params = bb.params;
    auto res = ad::finite_diff_check(build, params, 1e-5, 6);
    CAPTURE(res.worst_param);
    CAPTURE(res.analytic);
    CAPTURE(res.numeric);
    CHECK(res.max_rel_error < 1e-4);
}
