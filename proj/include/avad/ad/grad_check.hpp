#pragma once

#include "avad/ad/graph.hpp"
#include "avad/ad/params.hpp"

#include <functional>
#include <map>

namespace avad::ad {

/// Central-difference gradient oracle. `f` must be a deterministic scalar
/// function of the store (it is re-evaluated with perturbed entries), run in
/// 64-bit mode. Returns the max over checked entries of
///   |analytic - numeric| / (|analytic| + eps_abs),  eps_abs = 1e-8.
/// `max_entries_per_param` > 0 probes a deterministic stride-spaced subset of
/// each tensor instead of every entry.
struct FiniteDiffResult {
    double max_rel_error{0.0};
    int worst_param{-1};
    Eigen::Index worst_entry{-1};
    double analytic{0.0};
    double numeric{0.0};
};

inline FiniteDiffResult finite_diff_check(
    const std::function<double(const ParamStore<double>&)>& f, ParamStore<double>& params,
    const std::map<int, Mat<double>>& analytic_grads, double h,
    Eigen::Index max_entries_per_param = 0) {
    if (h <= 0.0) throw ContractViolation("finite_diff_check: h must be positive");
    constexpr double eps_abs = 1e-8;
    FiniteDiffResult res;
    for (const auto& [id, grad] : analytic_grads) {
        Mat<double>& p = params.value(id);
        const Eigen::Index n = p.size();
        Eigen::Index stride = 1;
        if (max_entries_per_param > 0 && n > max_entries_per_param)
            stride = (n + max_entries_per_param - 1) / max_entries_per_param;
        for (Eigen::Index k = 0; k < n; k += stride) {
            double* slot = p.data() + k;
            const double orig = *slot;
            *slot = orig + h;
            const double fp = f(params);
            *slot = orig - h;
            const double fm = f(params);
            *slot = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double analytic = grad.data()[k];
            const double rel = std::abs(analytic - numeric) / (std::abs(analytic) + eps_abs);
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = id;
                res.worst_entry = k;
                res.analytic = analytic;
                res.numeric = numeric;
            }
        }
    }
    return res;
}

/// Convenience wrapper: builds the graph once for analytic gradients, then
/// runs the central-difference sweep against the same closure.
inline FiniteDiffResult finite_diff_check(
    const std::function<Expr<double>(Graph<double>&, const ParamStore<double>&)>& build,
    ParamStore<double>& params, double h, Eigen::Index max_entries_per_param = 0) {
    Graph<double> g;
    Expr<double> loss = build(g, params);
    g.backward(loss);
    std::map<int, Mat<double>> grads = g.param_grads();
    auto f = [&build](const ParamStore<double>& p) {
        Graph<double> g2(false);
        return build(g2, p).value()(0, 0);
    };
    return finite_diff_check(f, params, grads, h, max_entries_per_param);
}

}  // namespace avad::ad
