#pragma once

#include "avad/ad/ops.hpp"

#include <cmath>
#include <vector>

namespace avad::grpo {

using ad::ContractViolation;
using ad::Expr;
using ad::Graph;
using ad::Mat;

/// Defaults follow the reference implementation settings: one epoch,
/// lr 1e-6 with linear decay, clip norm 1, beta=0.1, epsilon=0.2,
/// AdamW(0.9, 0.999, 1e-8), no gradient accumulation.
struct GrpoConfig {
    int group_size{8};
    double epsilon_clip{0.2};
    double beta_kl{0.1};
    double lr{1e-6};
    bool linear_lr_decay{true};
    double grad_clip_norm{1.0};
    double adam_beta1{0.9};
    double adam_beta2{0.999};
    double adam_eps{1e-8};
    double weight_decay{0.0};
    int grad_accumulation{1};
    double temperature{1.0};
    int epochs{1};
};

/// One sampled response with its rewards and per-token log-probabilities.
struct Rollout {
    std::vector<int> tokens;       // a_0..a_O (includes <eos> when emitted)
    std::vector<double> logp_old;  // sampling-time policy snapshot
    std::string text;
    int format_reward{0};
    int accuracy_reward{0};
    double total_reward{0};
    double advantage{0};
};

/// Group-wise advantage normalization: (R - mean) / (popstd + 1e-4).
inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
    const size_t g = rewards.size();
    if (g < 2) throw ContractViolation("group_advantages: need G >= 2");
    double mean = 0;
    for (double r : rewards) mean += r;
    mean /= double(g);
    double var = 0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    var /= double(g);
    const double denom = std::sqrt(var) + 1e-4;
    std::vector<double> adv(g);
    for (size_t i = 0; i < g; ++i) adv[i] = (rewards[i] - mean) / denom;
    return adv;
}

/// Per-rollout clipped surrogate objective (to be maximized):
///   (1/O) sum_i min(ratio_i * A, clip(ratio_i, 1-eps, 1+eps) * A).
/// `logp_new` is the O x 1 tape expression, `logp_old` the detached
/// sampling-time values.
template <class S>
Expr<S> clipped_objective(Expr<S> logp_new, const Mat<S>& logp_old, double advantage,
                          double epsilon_clip) {
    auto& g = *logp_new.g;
    Expr<S> ratio = ad::exp_elem(ad::sub(logp_new, g.constant(logp_old, "logp_old")));
    Expr<S> unclipped = ad::scale(ratio, S(advantage));
    Expr<S> clipped =
        ad::scale(ad::clamp(ratio, S(1.0 - epsilon_clip), S(1.0 + epsilon_clip)), S(advantage));
    return ad::mean_all(ad::min_elem(unclipped, clipped));
}

/// Exact per-position KL(adapted || reference) from full-vocabulary
/// log-probability rows, averaged over positions.
template <class S>
Expr<S> kl_to_reference(Expr<S> logp_new_full, const Mat<S>& logp_ref_full) {
    auto& g = *logp_new_full.g;
    Expr<S> diff = ad::sub(logp_new_full, g.constant(logp_ref_full, "logp_ref"));
    Expr<S> per_pos = ad::row_sum(ad::hadamard(ad::exp_elem(logp_new_full), diff));
    return ad::mean_all(per_pos);
}

/// Plain-number KL between two categorical log-probability rows (oracle and
/// logging helper).
inline double categorical_kl(const std::vector<double>& p, const std::vector<double>& q) {
    double kl = 0;
    for (size_t i = 0; i < p.size(); ++i)
        if (p[i] > 0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
    return kl;
}

}  // namespace avad::grpo
