#pragma once

#include "avad/ad/graph.hpp"
#include "avad/model/config.hpp"
#include "avad/rng.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace avad::lora {

using ad::ContractViolation;
using ad::Mat;

/// Projection kinds receiving low-rank residual updates. The fused qkv site
/// mirrors backbones with a single attention in-projection; the unfused
/// variant targets q, k, v separately and is selected by config.
enum class SiteKind { qkv_fused, q, k, v, out_proj, gate, up, down };

inline const char* site_kind_name(SiteKind k) {
    switch (k) {
        case SiteKind::qkv_fused: return "qkv";
        case SiteKind::q: return "q";
        case SiteKind::k: return "k";
        case SiteKind::v: return "v";
        case SiteKind::out_proj: return "out";
        case SiteKind::gate: return "gate";
        case SiteKind::up: return "up";
        case SiteKind::down: return "down";
    }
    return "?";
}

struct LoraSite {
    int layer{0};
    SiteKind kind{SiteKind::qkv_fused};
    int d_in{0};
    int d_out{0};

    std::string name() const {
        return "layer" + std::to_string(layer) + "." + site_kind_name(kind);
    }
};

struct LoraConfig {
    int rank{8};
    double alpha{16.0};

    double scale() const { return alpha / double(rank); }
};

/// The stable, config-derived list of injection sites: per LM layer the
/// attention in/out projections and the gating MLP projections.
inline std::vector<LoraSite> enumerate_sites(const model::BackboneConfig& cfg) {
    std::vector<LoraSite> sites;
    const int d = cfg.d_model, f = cfg.d_ffn;
    for (int l = 0; l < cfg.lm_layers; ++l) {
        if (cfg.fused_qkv) {
            sites.push_back({l, SiteKind::qkv_fused, d, 3 * d});
        } else {
            sites.push_back({l, SiteKind::q, d, d});
            sites.push_back({l, SiteKind::k, d, d});
            sites.push_back({l, SiteKind::v, d, d});
        }
        sites.push_back({l, SiteKind::out_proj, d, d});
        sites.push_back({l, SiteKind::gate, d, f});
        sites.push_back({l, SiteKind::up, d, f});
        sites.push_back({l, SiteKind::down, f, d});
    }
    return sites;
}

inline std::int64_t delta_param_count(const model::BackboneConfig& cfg, const LoraConfig& lc) {
    std::int64_t n = 0;
    for (const auto& s : enumerate_sites(cfg)) n += std::int64_t(lc.rank) * (s.d_in + s.d_out);
    return n;
}

/// One site's low-rank pair: a is rank x d_in, b is d_out x rank.
template <class S>
struct LoraPair {
    Mat<S> a, b;
};

template <class S>
struct LoraDeltaSet {
    LoraConfig cfg;
    std::vector<LoraSite> sites;
    std::vector<LoraPair<S>> mats;  // aligned with sites

    S scale() const { return S(cfg.scale()); }

    int find(int layer, SiteKind kind) const {
        for (size_t i = 0; i < sites.size(); ++i)
            if (sites[i].layer == layer && sites[i].kind == kind) return int(i);
        return -1;
    }

    template <class S2>
    LoraDeltaSet<S2> cast() const {
        LoraDeltaSet<S2> out;
        out.cfg = cfg;
        out.sites = sites;
        out.mats.reserve(mats.size());
        for (const auto& m : mats)
            out.mats.push_back({m.a.template cast<S2>(), m.b.template cast<S2>()});
        return out;
    }
};

/// Fresh static adapter: b exactly zero, a ~ N(0, 1/sqrt(d_in)), so the
/// adapted forward reproduces the frozen forward until training moves b.
template <class S>
LoraDeltaSet<S> init_static_lora(const std::vector<LoraSite>& sites, const LoraConfig& lc,
                                 std::uint64_t seed) {
    LoraDeltaSet<S> d;
    d.cfg = lc;
    d.sites = sites;
    d.mats.reserve(sites.size());
    for (size_t i = 0; i < sites.size(); ++i) {
        const auto& s = sites[i];
        Rng rng = Rng::stream(seed, "lora.init", i);
        const double std_dev = 1.0 / std::sqrt(double(s.d_in));
        Mat<S> a(lc.rank, s.d_in);
        for (Eigen::Index c = 0; c < a.cols(); ++c)
            for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, c) = S(rng.gaussian() * std_dev);
        d.mats.push_back({std::move(a), Mat<S>::Zero(s.d_out, lc.rank)});
    }
    return d;
}

/// y = W x + scale * B (A x) for a column vector x.
template <class S>
Mat<S> apply_forward(const Mat<S>& x, const Mat<S>& w_frozen, const LoraPair<S>& pair, S scale) {
    if (x.cols() != 1 || w_frozen.cols() != x.rows())
        throw ContractViolation("apply_forward: shape mismatch");
    if (pair.a.cols() != x.rows() || pair.b.rows() != w_frozen.rows() ||
        pair.a.rows() != pair.b.cols())
        throw ContractViolation("apply_forward: adapter shape mismatch");
    return w_frozen * x + scale * (pair.b * (pair.a * x));
}

/// Row-activation form used by the forward passes: X (n x d_in) against a
/// weight stored as (d_out x d_in); returns X W^T + scale (X A^T) B^T.
template <class S>
Mat<S> apply_rows(const Mat<S>& x, const Mat<S>& w_frozen, const LoraPair<S>* pair, S scale) {
    Mat<S> y = x * w_frozen.transpose();
    if (pair != nullptr) y += scale * ((x * pair->a.transpose()) * pair->b.transpose());
    return y;
}

}  // namespace avad::lora
