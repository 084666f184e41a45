#pragma once

#include "avad/ad/graph.hpp"

#include <memory>
#include <vector>

namespace avad::ad {

// Expression-friendly free functions over Graph handles. Each op computes its
// value eagerly and registers the reverse rule. Shape violations throw
// ContractViolation at recording time.

namespace detail {
template <class S>
Graph<S>& same_graph(Expr<S> a, Expr<S> b, const char* op) {
    if (a.g != b.g) throw ContractViolation(std::string(op) + ": operands from different graphs");
    return *a.g;
}
template <class S>
void need(bool cond, const char* op, const char* what) {
    if (!cond) throw ContractViolation(std::string(op) + ": " + what);
}
}  // namespace detail

template <class S>
Expr<S> matmul(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "matmul");
    detail::need<S>(a.cols() == b.rows(), "matmul", "inner dims mismatch");
    Expr<S> out = g.make(a.value() * b.value(), g.node(a.idx).requires_grad || g.node(b.idx).requires_grad,
                         -1, "matmul");
    int ai = a.idx, bi = b.idx;
    g.node(out.idx).backprop = [ai, bi](Graph<S>& gr, int self) {
        const auto& gd = gr.node(self).grad;
        gr.accum(ai, gd * gr.node(bi).value.transpose());
        gr.accum(bi, gr.node(ai).value.transpose() * gd);
    };
    return out;
}

/// a * b^T
template <class S>
Expr<S> matmul_nt(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "matmul_nt");
    detail::need<S>(a.cols() == b.cols(), "matmul_nt", "inner dims mismatch");
    Expr<S> out = g.make(a.value() * b.value().transpose(),
                         g.node(a.idx).requires_grad || g.node(b.idx).requires_grad, -1, "matmul_nt");
    int ai = a.idx, bi = b.idx;
    g.node(out.idx).backprop = [ai, bi](Graph<S>& gr, int self) {
        const auto& gd = gr.node(self).grad;
        gr.accum(ai, gd * gr.node(bi).value);
        gr.accum(bi, gd.transpose() * gr.node(ai).value);
    };
    return out;
}

template <class S>
Expr<S> add(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "add");
    detail::need<S>(a.rows() == b.rows() && a.cols() == b.cols(), "add", "shape mismatch");
    Expr<S> out = g.make(a.value() + b.value(),
                         g.node(a.idx).requires_grad || g.node(b.idx).requires_grad, -1, "add");
    int ai = a.idx, bi = b.idx;
    g.node(out.idx).backprop = [ai, bi](Graph<S>& gr, int self) {
        gr.accum(ai, gr.node(self).grad);
        gr.accum(bi, gr.node(self).grad);
    };
    return out;
}

template <class S>
Expr<S> sub(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "sub");
    detail::need<S>(a.rows() == b.rows() && a.cols() == b.cols(), "sub", "shape mismatch");
    Expr<S> out = g.make(a.value() - b.value(),
                         g.node(a.idx).requires_grad || g.node(b.idx).requires_grad, -1, "sub");
    int ai = a.idx, bi = b.idx;
    g.node(out.idx).backprop = [ai, bi](Graph<S>& gr, int self) {
        gr.accum(ai, gr.node(self).grad);
        gr.accum(bi, -gr.node(self).grad);
    };
    return out;
}

template <class S>
Expr<S> hadamard(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "hadamard");
    detail::need<S>(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard", "shape mismatch");
    Expr<S> out = g.make(a.value().cwiseProduct(b.value()),
                         g.node(a.idx).requires_grad || g.node(b.idx).requires_grad, -1, "hadamard");
    int ai = a.idx, bi = b.idx;
    g.node(out.idx).backprop = [ai, bi](Graph<S>& gr, int self) {
        const auto& gd = gr.node(self).grad;
        gr.accum(ai, gd.cwiseProduct(gr.node(bi).value));
        gr.accum(bi, gd.cwiseProduct(gr.node(ai).value));
    };
    return out;
}

template <class S>
Expr<S> scale(Expr<S> a, S c) {
    auto& g = *a.g;
    Expr<S> out = g.make(a.value() * c, g.node(a.idx).requires_grad, -1, "scale");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai, c](Graph<S>& gr, int self) {
        gr.accum(ai, gr.node(self).grad * c);
    };
    return out;
}

template <class S>
Expr<S> add_const(Expr<S> a, const Mat<S>& c) {
    auto& g = *a.g;
    detail::need<S>(a.rows() == c.rows() && a.cols() == c.cols(), "add_const", "shape mismatch");
    Expr<S> out = g.make(a.value() + c, g.node(a.idx).requires_grad, -1, "add_const");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) { gr.accum(ai, gr.node(self).grad); };
    return out;
}

template <class S>
Expr<S> add_scalar(Expr<S> a, S c) {
    auto& g = *a.g;
    Expr<S> out = g.make((a.value().array() + c).matrix(), g.node(a.idx).requires_grad, -1, "add_scalar");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) { gr.accum(ai, gr.node(self).grad); };
    return out;
}

/// X (n x d) + broadcast row bias (1 x d).
template <class S>
Expr<S> add_row_broadcast(Expr<S> x, Expr<S> bias) {
    auto& g = detail::same_graph(x, bias, "add_row_broadcast");
    detail::need<S>(bias.rows() == 1 && bias.cols() == x.cols(), "add_row_broadcast", "bias must be 1 x d");
    Mat<S> v = x.value() + bias.value().replicate(x.rows(), 1);
    Expr<S> out = g.make(std::move(v), g.node(x.idx).requires_grad || g.node(bias.idx).requires_grad,
                         -1, "add_row_broadcast");
    int xi = x.idx, bi = bias.idx;
    g.node(out.idx).backprop = [xi, bi](Graph<S>& gr, int self) {
        const auto& gd = gr.node(self).grad;
        gr.accum(xi, gd);
        gr.accum(bi, gd.colwise().sum());
    };
    return out;
}

template <class S>
Expr<S> relu(Expr<S> a) {
    auto& g = *a.g;
    Expr<S> out = g.make(a.value().cwiseMax(S(0)), g.node(a.idx).requires_grad, -1, "relu");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        Mat<S> mask = (gr.node(ai).value.array() > S(0)).template cast<S>();
        gr.accum(ai, gr.node(self).grad.cwiseProduct(mask));
    };
    return out;
}

template <class S>
Expr<S> silu(Expr<S> a) {
    auto& g = *a.g;
    Mat<S> sig = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
    Expr<S> out = g.make(a.value().cwiseProduct(sig), g.node(a.idx).requires_grad, -1, "silu");
    int ai = a.idx;
    auto sig_keep = std::make_shared<Mat<S>>(std::move(sig));
    g.node(out.idx).backprop = [ai, sig_keep](Graph<S>& gr, int self) {
        const auto& x = gr.node(ai).value.array();
        const auto& s = sig_keep->array();
        Mat<S> d = (s * (S(1) + x * (S(1) - s))).matrix();
        gr.accum(ai, gr.node(self).grad.cwiseProduct(d));
    };
    return out;
}

template <class S>
Expr<S> exp_elem(Expr<S> a) {
    auto& g = *a.g;
    Expr<S> out = g.make(a.value().array().exp().matrix(), g.node(a.idx).requires_grad, -1, "exp");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        gr.accum(ai, gr.node(self).grad.cwiseProduct(gr.node(self).value));
    };
    return out;
}

/// Row-wise softmax with max-subtraction for stability.
template <class S>
Expr<S> row_softmax(Expr<S> a) {
    auto& g = *a.g;
    Mat<S> v = a.value();
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        auto row = v.row(r).array();
        S m = row.maxCoeff();
        Mat<S> e = (row - m).exp().matrix();
        v.row(r) = e / e.sum();
    }
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad, -1, "row_softmax");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        const Mat<S>& y = gr.node(self).value;
        const Mat<S>& gd = gr.node(self).grad;
        Mat<S> dot = (gd.cwiseProduct(y)).rowwise().sum();  // n x 1
        Mat<S> dx = y.cwiseProduct(gd - dot.replicate(1, y.cols()));
        gr.accum(ai, dx);
    };
    return out;
}

/// Row-wise log-softmax.
template <class S>
Expr<S> row_log_softmax(Expr<S> a) {
    auto& g = *a.g;
    Mat<S> v = a.value();
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        auto row = v.row(r).array();
        S m = row.maxCoeff();
        S lse = std::log((row - m).exp().sum()) + m;
        v.row(r) = (row - lse).matrix();
    }
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad, -1, "row_log_softmax");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        const Mat<S>& logp = gr.node(self).value;
        const Mat<S>& gd = gr.node(self).grad;
        Mat<S> p = logp.array().exp().matrix();
        Mat<S> rs = gd.rowwise().sum();  // n x 1
        gr.accum(ai, gd - p.cwiseProduct(rs.replicate(1, p.cols())));
    };
    return out;
}

/// Row-wise layer norm with learned gain/bias (both 1 x d).
template <class S>
Expr<S> layer_norm_rows(Expr<S> x, Expr<S> gain, Expr<S> bias, S eps = S(1e-5)) {
    auto& g = detail::same_graph(x, gain, "layer_norm");
    detail::need<S>(gain.rows() == 1 && gain.cols() == x.cols(), "layer_norm", "gain must be 1 x d");
    detail::need<S>(bias.rows() == 1 && bias.cols() == x.cols(), "layer_norm", "bias must be 1 x d");
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat<S> xhat(n, d);
    Mat<S> inv_sigma(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
        S mu = x.value().row(r).mean();
        S var = (x.value().row(r).array() - mu).square().mean();
        S is = S(1) / std::sqrt(var + eps);
        inv_sigma(r, 0) = is;
        xhat.row(r) = ((x.value().row(r).array() - mu) * is).matrix();
    }
    Mat<S> v = xhat;
    for (Eigen::Index r = 0; r < n; ++r)
        v.row(r) = v.row(r).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    bool rg = x.g->node(x.idx).requires_grad || g.node(gain.idx).requires_grad ||
              g.node(bias.idx).requires_grad;
    Expr<S> out = g.make(std::move(v), rg, -1, "layer_norm");
    int xi = x.idx, gi = gain.idx, bi = bias.idx;
    auto keep_xhat = std::make_shared<Mat<S>>(std::move(xhat));
    auto keep_is = std::make_shared<Mat<S>>(std::move(inv_sigma));
    g.node(out.idx).backprop = [xi, gi, bi, keep_xhat, keep_is](Graph<S>& gr, int self) {
        const Mat<S>& gd = gr.node(self).grad;
        const Mat<S>& xh = *keep_xhat;
        const Eigen::Index d2 = xh.cols();
        gr.accum(gi, gd.cwiseProduct(xh).colwise().sum());
        gr.accum(bi, gd.colwise().sum());
        // dxhat = gd * gain; dx = (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat)) / sigma
        Mat<S> dxhat = gd;
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r)
            dxhat.row(r) = dxhat.row(r).cwiseProduct(gr.node(gi).value.row(0));
        Mat<S> m1 = dxhat.rowwise().mean();
        Mat<S> m2 = dxhat.cwiseProduct(xh).rowwise().mean();
        Mat<S> dx(dxhat.rows(), d2);
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r)
            dx.row(r) = ((dxhat.row(r).array() - m1(r, 0) - xh.row(r).array() * m2(r, 0)) *
                         (*keep_is)(r, 0))
                            .matrix();
        gr.accum(xi, dx);
    };
    return out;
}

/// Rows of an embedding table selected by id; gradient scatter-adds.
template <class S>
Expr<S> gather_rows(Expr<S> table, std::vector<int> ids) {
    auto& g = *table.g;
    Mat<S> v(Eigen::Index(ids.size()), table.cols());
    for (size_t i = 0; i < ids.size(); ++i) {
        detail::need<S>(ids[i] >= 0 && ids[i] < table.rows(), "gather_rows", "id out of range");
        v.row(Eigen::Index(i)) = table.value().row(ids[i]);
    }
    Expr<S> out = g.make(std::move(v), g.node(table.idx).requires_grad, -1, "gather_rows");
    int ti = table.idx;
    auto keep = std::make_shared<std::vector<int>>(std::move(ids));
    g.node(out.idx).backprop = [ti, keep](Graph<S>& gr, int self) {
        const Mat<S>& gd = gr.node(self).grad;
        Mat<S> dt = Mat<S>::Zero(gr.node(ti).value.rows(), gr.node(ti).value.cols());
        for (size_t i = 0; i < keep->size(); ++i) dt.row((*keep)[i]) += gd.row(Eigen::Index(i));
        gr.accum(ti, dt);
    };
    return out;
}

template <class S>
Expr<S> concat_rows(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "concat_rows");
    detail::need<S>(a.cols() == b.cols(), "concat_rows", "col mismatch");
    Mat<S> v(a.rows() + b.rows(), a.cols());
    v.topRows(a.rows()) = a.value();
    v.bottomRows(b.rows()) = b.value();
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad || g.node(b.idx).requires_grad,
                         -1, "concat_rows");
    int ai = a.idx, bi = b.idx;
    Eigen::Index na = a.rows();
    g.node(out.idx).backprop = [ai, bi, na](Graph<S>& gr, int self) {
        const Mat<S>& gd = gr.node(self).grad;
        gr.accum(ai, gd.topRows(na));
        gr.accum(bi, gd.bottomRows(gd.rows() - na));
    };
    return out;
}

template <class S>
Expr<S> concat_cols(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "concat_cols");
    detail::need<S>(a.rows() == b.rows(), "concat_cols", "row mismatch");
    Mat<S> v(a.rows(), a.cols() + b.cols());
    v.leftCols(a.cols()) = a.value();
    v.rightCols(b.cols()) = b.value();
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad || g.node(b.idx).requires_grad,
                         -1, "concat_cols");
    int ai = a.idx, bi = b.idx;
    Eigen::Index ca = a.cols();
    g.node(out.idx).backprop = [ai, bi, ca](Graph<S>& gr, int self) {
        const Mat<S>& gd = gr.node(self).grad;
        gr.accum(ai, gd.leftCols(ca));
        gr.accum(bi, gd.rightCols(gd.cols() - ca));
    };
    return out;
}

template <class S>
Expr<S> slice_cols(Expr<S> a, Eigen::Index c0, Eigen::Index n) {
    auto& g = *a.g;
    detail::need<S>(c0 >= 0 && c0 + n <= a.cols(), "slice_cols", "range out of bounds");
    Expr<S> out = g.make(a.value().middleCols(c0, n), g.node(a.idx).requires_grad, -1, "slice_cols");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai, c0, n](Graph<S>& gr, int self) {
        Mat<S> da = Mat<S>::Zero(gr.node(ai).value.rows(), gr.node(ai).value.cols());
        da.middleCols(c0, n) = gr.node(self).grad;
        gr.accum(ai, da);
    };
    return out;
}

template <class S>
Expr<S> slice_rows(Expr<S> a, Eigen::Index r0, Eigen::Index n) {
    auto& g = *a.g;
    detail::need<S>(r0 >= 0 && r0 + n <= a.rows(), "slice_rows", "range out of bounds");
    Expr<S> out = g.make(a.value().middleRows(r0, n), g.node(a.idx).requires_grad, -1, "slice_rows");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai, r0, n](Graph<S>& gr, int self) {
        Mat<S> da = Mat<S>::Zero(gr.node(ai).value.rows(), gr.node(ai).value.cols());
        da.middleRows(r0, n) = gr.node(self).grad;
        gr.accum(ai, da);
    };
    return out;
}

template <class S>
Expr<S> transpose(Expr<S> a) {
    auto& g = *a.g;
    Expr<S> out = g.make(a.value().transpose(), g.node(a.idx).requires_grad, -1, "transpose");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        gr.accum(ai, gr.node(self).grad.transpose());
    };
    return out;
}

template <class S>
Expr<S> sum_all(Expr<S> a) {
    auto& g = *a.g;
    Mat<S> v(1, 1);
    v(0, 0) = a.value().sum();
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad, -1, "sum_all");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        S s = gr.node(self).grad(0, 0);
        gr.accum(ai, Mat<S>::Constant(gr.node(ai).value.rows(), gr.node(ai).value.cols(), s));
    };
    return out;
}

template <class S>
Expr<S> mean_all(Expr<S> a) {
    S inv = S(1) / S(a.value().size());
    return scale(sum_all(a), inv);
}

/// Row sums, n x d -> n x 1.
template <class S>
Expr<S> row_sum(Expr<S> a) {
    auto& g = *a.g;
    Expr<S> out = g.make(a.value().rowwise().sum(), g.node(a.idx).requires_grad, -1, "row_sum");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        const Mat<S>& gd = gr.node(self).grad;
        gr.accum(ai, gd.replicate(1, gr.node(ai).value.cols()));
    };
    return out;
}

/// v_i = a(i, cols[i]); n x m -> n x 1.
template <class S>
Expr<S> gather_entry_per_row(Expr<S> a, std::vector<int> cols) {
    auto& g = *a.g;
    detail::need<S>(Eigen::Index(cols.size()) == a.rows(), "gather_entry_per_row", "one col per row");
    Mat<S> v(a.rows(), 1);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        detail::need<S>(cols[size_t(r)] >= 0 && cols[size_t(r)] < a.cols(), "gather_entry_per_row",
                        "col out of range");
        v(r, 0) = a.value()(r, cols[size_t(r)]);
    }
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad, -1, "gather_entry");
    int ai = a.idx;
    auto keep = std::make_shared<std::vector<int>>(std::move(cols));
    g.node(out.idx).backprop = [ai, keep](Graph<S>& gr, int self) {
        Mat<S> da = Mat<S>::Zero(gr.node(ai).value.rows(), gr.node(ai).value.cols());
        for (Eigen::Index r = 0; r < da.rows(); ++r)
            da(r, (*keep)[size_t(r)]) = gr.node(self).grad(r, 0);
        gr.accum(ai, da);
    };
    return out;
}

/// Elementwise min; ties route the gradient to the first argument.
template <class S>
Expr<S> min_elem(Expr<S> a, Expr<S> b) {
    auto& g = detail::same_graph(a, b, "min_elem");
    detail::need<S>(a.rows() == b.rows() && a.cols() == b.cols(), "min_elem", "shape mismatch");
    Expr<S> out = g.make(a.value().cwiseMin(b.value()),
                         g.node(a.idx).requires_grad || g.node(b.idx).requires_grad, -1, "min_elem");
    int ai = a.idx, bi = b.idx;
    g.node(out.idx).backprop = [ai, bi](Graph<S>& gr, int self) {
        Mat<S> amask = (gr.node(ai).value.array() <= gr.node(bi).value.array()).template cast<S>();
        const Mat<S>& gd = gr.node(self).grad;
        gr.accum(ai, gd.cwiseProduct(amask));
        gr.accum(bi, gd.cwiseProduct((Mat<S>::Ones(gd.rows(), gd.cols()) - amask).eval()));
    };
    return out;
}

/// Clamp to [lo, hi]; zero gradient on the clipped set.
template <class S>
Expr<S> clamp(Expr<S> a, S lo, S hi) {
    auto& g = *a.g;
    Expr<S> out =
        g.make(a.value().cwiseMax(lo).cwiseMin(hi), g.node(a.idx).requires_grad, -1, "clamp");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai, lo, hi](Graph<S>& gr, int self) {
        Mat<S> mask = ((gr.node(ai).value.array() > lo) && (gr.node(ai).value.array() < hi))
                          .template cast<S>();
        gr.accum(ai, gr.node(self).grad.cwiseProduct(mask));
    };
    return out;
}

template <class S>
Expr<S> neg(Expr<S> a) {
    return scale(a, S(-1));
}

/// Row-major reinterpretation to a new shape (element count preserved).
template <class S>
Expr<S> reshape_rowmajor(Expr<S> a, Eigen::Index rows, Eigen::Index cols) {
    auto& g = *a.g;
    detail::need<S>(rows * cols == a.rows() * a.cols(), "reshape", "element count mismatch");
    Mat<S> v(rows, cols);
    const Eigen::Index ac = a.cols();
    for (Eigen::Index i = 0; i < rows * cols; ++i)
        v(i / cols, i % cols) = a.value()(i / ac, i % ac);
    Expr<S> out = g.make(std::move(v), g.node(a.idx).requires_grad, -1, "reshape");
    int ai = a.idx;
    g.node(out.idx).backprop = [ai](Graph<S>& gr, int self) {
        const Mat<S>& gd = gr.node(self).grad;
        const Eigen::Index oc = gr.node(ai).value.cols();
        Mat<S> da(gr.node(ai).value.rows(), oc);
        const Eigen::Index n = gd.rows() * gd.cols();
        for (Eigen::Index i = 0; i < n; ++i)
            da(i / oc, i % oc) = gd(i / gd.cols(), i % gd.cols());
        gr.accum(ai, da);
    };
    return out;
}

/// Mean cross-entropy of logits rows against integer targets; composition of
/// log-softmax and per-row gathers, optionally label smoothed.
template <class S>
Expr<S> cross_entropy_mean(Expr<S> logits, const std::vector<int>& targets, S label_smooth = S(0)) {
    detail::need<S>(Eigen::Index(targets.size()) == logits.rows(), "cross_entropy",
                    "one target per row");
    Expr<S> logp = row_log_softmax(logits);
    Expr<S> picked = gather_entry_per_row(logp, targets);
    Expr<S> nll = neg(mean_all(picked));
    if (label_smooth <= S(0)) return nll;
    // Smoothed: (1-e)*nll - e * mean over rows of mean logp.
    Expr<S> uniform = neg(mean_all(logp));
    return add(scale(nll, S(1) - label_smooth), scale(uniform, label_smooth));
}

}  // namespace avad::ad
