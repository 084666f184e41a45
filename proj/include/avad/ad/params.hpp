#pragma once

#include "avad/ad/graph.hpp"
#include "avad/rng.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace avad::ad {

/// Named trainable tensors with stable integer ids. Networks register their
/// weights here; graphs bind leaves by id so backward() can hand gradients
/// back to the optimizer or the checkpoint writer.
template <class S>
class ParamStore {
public:
    using M = Mat<S>;

    int add(std::string name, M value) {
        names_.push_back(std::move(name));
        values_.push_back(std::move(value));
        return int(values_.size()) - 1;
    }

    int add_gaussian(std::string name, Eigen::Index rows, Eigen::Index cols, double std_dev,
                     Rng& rng) {
        M m(rows, cols);
        for (Eigen::Index c = 0; c < cols; ++c)
            for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = S(rng.gaussian() * std_dev);
        return add(std::move(name), std::move(m));
    }

    int add_zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
        return add(std::move(name), M::Zero(rows, cols));
    }

    int add_ones(std::string name, Eigen::Index rows, Eigen::Index cols) {
        return add(std::move(name), M::Ones(rows, cols));
    }

    M& value(int id) { return values_[size_t(id)]; }
    const M& value(int id) const { return values_[size_t(id)]; }
    const std::string& name(int id) const { return names_[size_t(id)]; }
    int count() const { return int(values_.size()); }

    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const M& m : values_) n += m.size();
        return n;
    }

    /// Bind parameter id as a graph leaf (value copied into the graph).
    Expr<S> bind(Graph<S>& g, int id) const { return g.param(values_[size_t(id)], id); }

    template <class S2>
    ParamStore<S2> cast() const {
        ParamStore<S2> out;
        for (int i = 0; i < count(); ++i)
            out.add(names_[size_t(i)], values_[size_t(i)].template cast<S2>());
        return out;
    }

private:
    std::vector<std::string> names_;
    std::vector<M> values_;
};

/// AdamW with decoupled weight decay, global-norm gradient clipping and
/// linear learning-rate decay over a fixed horizon.
template <class S>
class AdamW {
public:
    struct Config {
        double lr{1e-6};
        double beta1{0.9};
        double beta2{0.999};
        double eps{1e-8};
        double weight_decay{0.0};
        double grad_clip_norm{1.0};
        std::int64_t decay_steps{0};  // 0 disables the linear schedule
    };

    explicit AdamW(Config cfg) : cfg_(cfg) {}

    double current_lr() const {
        if (cfg_.decay_steps <= 0) return cfg_.lr;
        double frac = 1.0 - double(step_) / double(cfg_.decay_steps);
        return cfg_.lr * std::max(0.0, frac);
    }

    /// Applies one update. `grads` maps param id -> gradient; ids absent from
    /// the map are left untouched. Returns the pre-clip global gradient norm.
    double step(ParamStore<S>& params, const std::map<int, Mat<S>>& grads) {
        double sq = 0.0;
        for (const auto& [id, g] : grads) sq += double(g.squaredNorm());
        const double norm = std::sqrt(sq);
        double scale = 1.0;
        if (cfg_.grad_clip_norm > 0.0 && norm > cfg_.grad_clip_norm)
            scale = cfg_.grad_clip_norm / norm;

        const double lr = current_lr();
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (const auto& [id, g_raw] : grads) {
            Mat<S> g = g_raw * S(scale);
            auto& m = moment1_[id];
            auto& v = moment2_[id];
            if (m.size() == 0) {
                m = Mat<S>::Zero(g.rows(), g.cols());
                v = Mat<S>::Zero(g.rows(), g.cols());
            }
            m = S(cfg_.beta1) * m + S(1.0 - cfg_.beta1) * g;
            v = (S(cfg_.beta2) * v.array() + S(1.0 - cfg_.beta2) * g.array().square()).matrix();
            Mat<S> mhat = m / S(bc1);
            Mat<S> vhat = v / S(bc2);
            Mat<S>& p = params.value(id);
            if (cfg_.weight_decay > 0.0) p -= S(lr * cfg_.weight_decay) * p;
            p -= (S(lr) * mhat.array() / (vhat.array().sqrt() + S(cfg_.eps))).matrix();
        }
        return norm;
    }

    std::int64_t steps_taken() const { return step_; }

private:
    Config cfg_;
    std::int64_t step_{0};
    std::map<int, Mat<S>> moment1_, moment2_;
};

}  // namespace avad::ad
