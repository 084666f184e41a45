#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace avad::ad {

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

struct ContractViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

template <class S>
class Graph;

/// Handle to a graph node; cheap to copy.
template <class S>
struct Expr {
    Graph<S>* g{nullptr};
    int idx{-1};

    const Mat<S>& value() const { return g->node(idx).value; }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool valid() const { return g != nullptr && idx >= 0; }
};

/// Reverse-mode tape over dense matrices, templated on scalar so the same
/// networks run in 32-bit for training and 64-bit for gradient checks.
/// Values are computed eagerly as ops are recorded; backward() replays the
/// tape in reverse creation order, which is a topological order by
/// construction. Single-threaded per instance; independent graphs may live on
/// separate threads.
template <class S>
class Graph {
public:
    using M = Mat<S>;
    using Expr = ad::Expr<S>;

    struct Node {
        M value;
        M grad;  // empty until touched by backward
        bool requires_grad{false};
        int param_id{-1};
        const char* op{"leaf"};
        std::function<void(Graph&, int)> backprop;
    };

    explicit Graph(bool check_finite =
#ifdef NDEBUG
                       false
#else
                       true
#endif
                   )
        : check_finite_(check_finite) {}

    Expr constant(M v, const char* op = "const") {
        return make(std::move(v), false, -1, op);
    }

    /// Leaf bound to an external parameter; its gradient is retrievable by id.
    Expr param(const M& v, int param_id, const char* op = "param") {
        Expr e = make(v, true, param_id, op);
        return e;
    }

    Expr leaf(M v, bool requires_grad, const char* op = "leaf") {
        return make(std::move(v), requires_grad, -1, op);
    }

    Expr make(M v, bool requires_grad, int param_id, const char* op) {
        if (check_finite_ && !v.allFinite()) {
            throw NumericFailure(std::string("non-finite values produced by op '") + op +
                                 "' at node " + std::to_string(nodes_.size()) + trace());
        }
        nodes_.push_back(Node{std::move(v), M(), requires_grad, param_id, op, nullptr});
        return Expr{this, int(nodes_.size()) - 1};
    }

    Node& node(int i) { return nodes_[size_t(i)]; }
    const Node& node(int i) const { return nodes_[size_t(i)]; }
    int size() const { return int(nodes_.size()); }

    /// Accumulate upstream gradient into node i (no-op for non-grad nodes).
    void accum(int i, const M& g) {
        Node& n = nodes_[size_t(i)];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = M::Zero(n.value.rows(), n.value.cols());
        }
        n.grad += g;
    }

    /// Reverse pass from a scalar loss. Every parameter leaf reachable from
    /// the loss receives a gradient; unreachable parameters are reported as
    /// zero by param_grads().
    void backward(Expr loss) {
        if (loss.g != this) throw ContractViolation("backward: loss from another graph");
        const Node& ln = node(loss.idx);
        if (ln.value.rows() != 1 || ln.value.cols() != 1)
            throw ContractViolation("backward: loss must be a 1x1 scalar");
        if (!std::isfinite(double(ln.value(0, 0))))
            throw NumericFailure("backward: NaN/Inf loss" + trace());
        nodes_[size_t(loss.idx)].grad = M::Ones(1, 1);
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[size_t(i)];
            if (!n.requires_grad || n.grad.size() == 0 || !n.backprop) continue;
            n.backprop(*this, i);
        }
    }

    /// Gradients of all param leaves, keyed by param id. Parameters that were
    /// registered but never reached by backward get zero gradients.
    std::map<int, M> param_grads() const {
        std::map<int, M> out;
        for (const Node& n : nodes_) {
            if (n.param_id < 0) continue;
            M g = n.grad.size() ? n.grad : M::Zero(n.value.rows(), n.value.cols());
            auto [it, fresh] = out.emplace(n.param_id, std::move(g));
            if (!fresh) it->second += n.grad.size() ? n.grad : M::Zero(n.value.rows(), n.value.cols());
        }
        return out;
    }

    const M& grad_of(Expr e) const {
        static const M empty;
        const Node& n = node(e.idx);
        return n.grad.size() ? n.grad : empty;
    }

    bool check_finite() const { return check_finite_; }
    void set_check_finite(bool b) { check_finite_ = b; }

    /// Short trace of the most recent ops, appended to numeric failures.
    std::string trace() const {
        std::string s = " [op-trace:";
        int from = std::max(0, int(nodes_.size()) - 8);
        for (int i = from; i < int(nodes_.size()); ++i) {
            s += " ";
            s += nodes_[size_t(i)].op;
        }
        s += "]";
        return s;
    }

private:
    std::vector<Node> nodes_;
    bool check_finite_;
};

}  // namespace avad::ad
