#pragma once

#include "avad/gen/generator.hpp"
#include "avad/grpo/grpo.hpp"
#include "avad/grpo/rewards.hpp"
#include "avad/model/engine.hpp"
#include "avad/model/prompt_state.hpp"
#include "avad/model/tape.hpp"
#include "avad/pipeline/temporal.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace avad::grpo {

enum class AdaptMode { frozen, static_lora, copra };

inline const char* adapt_mode_name(AdaptMode m) {
    switch (m) {
        case AdaptMode::frozen: return "frozen";
        case AdaptMode::static_lora: return "static_lora";
        case AdaptMode::copra: return "copra";
    }
    return "?";
}

inline AdaptMode adapt_mode_from_name(const std::string& s) {
    if (s == "frozen") return AdaptMode::frozen;
    if (s == "static_lora") return AdaptMode::static_lora;
    if (s == "copra") return AdaptMode::copra;
    throw ContractViolation("unknown adaptation mode: " + s);
}

struct LabeledVideo {
    std::string id;
    FrameSeq frames;
    double fps{10.0};
    int y{0};
};

/// Shared adapter trained directly (the static-adaptation baseline); the
/// conditional path generates its adapters instead.
template <class S>
struct StaticAdapter {
    lora::LoraConfig lc;
    std::vector<lora::LoraSite> sites;
    ad::ParamStore<S> params;  // a/b per site, ids 2i / 2i+1

    static StaticAdapter make(const std::vector<lora::LoraSite>& sites, const lora::LoraConfig& lc,
                              std::uint64_t seed) {
        StaticAdapter sa;
        sa.lc = lc;
        sa.sites = sites;
        auto init = lora::init_static_lora<S>(sites, lc, seed);
        for (size_t i = 0; i < sites.size(); ++i) {
            sa.params.add(sites[i].name() + ".a", init.mats[i].a);
            sa.params.add(sites[i].name() + ".b", init.mats[i].b);
        }
        return sa;
    }

    lora::LoraDeltaSet<S> snapshot() const {
        lora::LoraDeltaSet<S> d;
        d.cfg = lc;
        d.sites = sites;
        for (size_t i = 0; i < sites.size(); ++i)
            d.mats.push_back({params.value(int(2 * i)), params.value(int(2 * i) + 1)});
        return d;
    }

    model::LoraExprSet<S> bind(ad::Graph<S>& g) const {
        model::LoraExprSet<S> e;
        e.sites = sites;
        e.scale = S(lc.scale());
        for (size_t i = 0; i < sites.size(); ++i)
            e.ab.emplace_back(g.param(params.value(int(2 * i)), int(2 * i)),
                              g.param(params.value(int(2 * i) + 1), int(2 * i) + 1));
        return e;
    }
};

struct StepRecord {
    int step{0};
    std::string video_id;
    double reward_mean{0};
    double format_rate{0};
    double accuracy_rate{0};
    double loss{0};
    double surrogate{0};
    double kl{0};
    double lr{0};
    double grad_norm{0};
    int rollout_tokens{0};
};

/// End-to-end policy optimization of the adapter parameters against the
/// frozen backbone: group sampling from the adapted policy, binary rewards,
/// group-normalized advantages, clipped surrogate plus exact KL to the
/// frozen reference, one optimizer family for every adaptation mode.
template <class S>
class GrpoTrainer {
public:
    GrpoTrainer(const GrpoConfig& cfg, const model::Backbone<S>& bb, const Tokenizer& tok,
                const model::PromptState& prompt, AdaptMode mode, gen::Generator<S>* generator,
                StaticAdapter<S>* static_adapter, std::uint64_t seed, std::int64_t total_steps)
        : cfg_(cfg),
          bb_(bb),
          tok_(tok),
          prompt_(prompt),
          mode_(mode),
          gen_(generator),
          static_(static_adapter),
          seed_(seed),
          opt_(make_opt(cfg, total_steps)) {
        if (mode_ == AdaptMode::copra && gen_ == nullptr)
            throw ContractViolation("trainer: conditional mode needs a generator");
        if (mode_ == AdaptMode::static_lora && static_ == nullptr)
            throw ContractViolation("trainer: static mode needs an adapter");
    }

    /// Sample a group of rollouts from the adapted policy for one video.
    std::vector<Rollout> sample_group(const ad::Mat<S>& vis,
                                      const lora::LoraDeltaSet<S>* delta_vals, int y, int step) {
        model::Engine<S> engine(bb_, delta_vals);
        auto cache = engine.prefill(prompt_.raw_ids, prompt_.vid_index, &vis);
        std::vector<Rollout> group;
        for (int g = 0; g < cfg_.group_size; ++g) {
            Rng rng = Rng::stream(seed_, "grpo.rollout", std::uint64_t(step), std::uint64_t(g));
            auto res = engine.generate(cache, cfg_.temperature, bb_.cfg.max_response_tokens, rng,
                                       tok_.eos_id());
            Rollout r;
            r.tokens = std::move(res.tokens);
            r.logp_old = std::move(res.logp);
            r.text = decode_response(tok_, r.tokens);
            r.format_reward = grpo::format_reward(r.text);
            r.accuracy_reward = grpo::accuracy_reward(r.text, y);
            r.total_reward = double(r.format_reward + r.accuracy_reward);
            group.push_back(std::move(r));
        }
        std::vector<double> rewards;
        for (const auto& r : group) rewards.push_back(r.total_reward);
        auto adv = group_advantages(rewards);
        for (size_t i = 0; i < group.size(); ++i) group[i].advantage = adv[i];
        return group;
    }

    /// Build the total loss for a sampled group on a fresh tape. Exposed so
    /// the gradient-check harness can drive the exact training path. By
    /// default the old log-probs are detached from the current policy
    /// (single inner iteration, ratios start at 1); a harness can pin them
    /// via `inout_logp_old` — empty means capture, non-empty means reuse.
    ad::Expr<S> build_loss(ad::Graph<S>& graph, const ad::Mat<S>& vis,
                           const std::vector<Rollout>& group,
                           const model::LoraExprSet<S>* delta_exprs, double* out_surrogate,
                           double* out_kl,
                           std::vector<ad::Mat<S>>* inout_logp_old = nullptr) {
        model::TapeLm<S> adapted(graph, bb_, false, delta_exprs);
        model::TapeLm<S> reference(graph, bb_, false, nullptr);
        auto pre = adapted.prefix(prompt_.raw_ids, prompt_.vid_index,
                                  graph.constant(vis, "vis"));
        auto pre_ref = reference.prefix(prompt_.raw_ids, prompt_.vid_index,
                                        graph.constant(vis, "vis"));
        const S inv_tau = S(1.0 / (cfg_.temperature > 0 ? cfg_.temperature : 1.0));

        const bool reuse_old = inout_logp_old != nullptr && !inout_logp_old->empty();
        ad::Expr<S> surr_sum, kl_sum;
        for (size_t gi = 0; gi < group.size(); ++gi) {
            const auto& r = group[gi];
            std::vector<int> fed(r.tokens.begin(), r.tokens.end() - 1);
            ad::Expr<S> logits = pre.last_logits;
            ad::Expr<S> ref_logits = pre_ref.last_logits;
            if (!fed.empty()) {
                logits = ad::concat_rows(logits, adapted.response_logits(pre, fed));
                ref_logits = ad::concat_rows(ref_logits, reference.response_logits(pre_ref, fed));
            }
            ad::Expr<S> logp_full = ad::row_log_softmax(ad::scale(logits, inv_tau));
            ad::Expr<S> logp_taken = ad::gather_entry_per_row(logp_full, r.tokens);
            ad::Mat<S> logp_old =
                reuse_old ? (*inout_logp_old)[gi] : ad::Mat<S>(logp_taken.value());
            if (inout_logp_old != nullptr && !reuse_old) inout_logp_old->push_back(logp_old);
            ad::Expr<S> obj = clipped_objective(logp_taken, logp_old, r.advantage,
                                                cfg_.epsilon_clip);
            ad::Mat<S> ref_full =
                ad::row_log_softmax(ad::scale(ref_logits, inv_tau)).value();
            ad::Expr<S> kl = kl_to_reference(logp_full, ref_full);
            surr_sum = surr_sum.valid() ? ad::add(surr_sum, obj) : obj;
            kl_sum = kl_sum.valid() ? ad::add(kl_sum, kl) : kl;
        }
        const S inv_g = S(1.0 / double(group.size()));
        ad::Expr<S> surrogate = ad::scale(surr_sum, -inv_g);
        ad::Expr<S> kl_mean = ad::scale(kl_sum, inv_g);
        if (out_surrogate) *out_surrogate = double(surrogate.value()(0, 0));
        if (out_kl) *out_kl = double(kl_mean.value()(0, 0));
        return ad::add(surrogate, ad::scale(kl_mean, S(cfg_.beta_kl)));
    }

    /// One sample: condition, sample G rollouts, score, optimize.
    StepRecord train_sample(const LabeledVideo& video, int step) {
        const int n = int(video.frames.size());
        auto idx = pipeline::uniform_indices_0based(n, bb_.cfg.k_frames);
        FrameSeq cond;
        for (int i : idx) cond.push_back(video.frames[size_t(i)]);
        ad::Mat<S> vis = model::encode_frames(bb_, cond);

        ad::Graph<S> graph;
        std::optional<model::LoraExprSet<S>> delta_exprs;
        std::optional<gen::GeneratorTape<S>> gen_tape;
        if (mode_ == AdaptMode::copra) {
            gen_tape.emplace(graph, *gen_, true);
            delta_exprs = gen_tape->generate_delta(graph.constant(vis, "vis"));
        } else if (mode_ == AdaptMode::static_lora) {
            delta_exprs = static_->bind(graph);
        }

        std::optional<lora::LoraDeltaSet<S>> delta_vals;
        if (delta_exprs) delta_vals = delta_exprs->values(lora_cfg());
        auto group = sample_group(vis, delta_vals ? &*delta_vals : nullptr, video.y, step);

        StepRecord rec;
        rec.step = step;
        rec.video_id = video.id;
        for (const auto& r : group) {
            rec.reward_mean += r.total_reward / double(group.size());
            rec.format_rate += double(r.format_reward) / double(group.size());
            rec.accuracy_rate += double(r.accuracy_reward) / double(group.size());
            rec.rollout_tokens += int(r.tokens.size());
        }

        try {
            auto loss = build_loss(graph, vis, group, delta_exprs ? &*delta_exprs : nullptr,
                                   &rec.surrogate, &rec.kl);
            rec.loss = double(loss.value()(0, 0));
            graph.backward(loss);
        } catch (const ad::NumericFailure& e) {
            throw ad::NumericFailure("train_sample aborted on video '" + video.id +
                                     "': " + e.what());
        }

        auto grads = graph.param_grads();
        for (auto& [id, g] : grads) {
            auto [it, fresh] = pending_.emplace(id, g);
            if (!fresh) it->second += g;
        }
        ++pending_count_;
        rec.lr = opt_.current_lr();
        if (pending_count_ >= cfg_.grad_accumulation) {
            if (cfg_.grad_accumulation > 1)
                for (auto& [id, g] : pending_) g /= S(pending_count_);
            rec.grad_norm = opt_.step(trainable(), pending_);
            pending_.clear();
            pending_count_ = 0;
        }
        return rec;
    }

    ad::ParamStore<S>& trainable() {
        if (mode_ == AdaptMode::copra) return gen_->params;
        if (mode_ == AdaptMode::static_lora) return static_->params;
        throw ContractViolation("trainer: frozen mode trains nothing");
    }

    lora::LoraConfig lora_cfg() const {
        if (mode_ == AdaptMode::copra) return gen_->lora_cfg;
        if (mode_ == AdaptMode::static_lora) return static_->lc;
        return {};
    }

    const GrpoConfig& config() const { return cfg_; }
    std::int64_t optimizer_steps() const { return opt_.steps_taken(); }

private:
    static ad::AdamW<S> make_opt(const GrpoConfig& cfg, std::int64_t total_steps) {
        typename ad::AdamW<S>::Config oc;
        oc.lr = cfg.lr;
        oc.beta1 = cfg.adam_beta1;
        oc.beta2 = cfg.adam_beta2;
        oc.eps = cfg.adam_eps;
        oc.weight_decay = cfg.weight_decay;
        oc.grad_clip_norm = cfg.grad_clip_norm;
        oc.decay_steps = cfg.linear_lr_decay ? total_steps : 0;
        return ad::AdamW<S>(oc);
    }

    GrpoConfig cfg_;
    const model::Backbone<S>& bb_;
    const Tokenizer& tok_;
    const model::PromptState& prompt_;
    AdaptMode mode_;
    gen::Generator<S>* gen_;
    StaticAdapter<S>* static_;
    std::uint64_t seed_;
    ad::AdamW<S> opt_;
    std::map<int, ad::Mat<S>> pending_;
    int pending_count_{0};
};

}  // namespace avad::grpo
