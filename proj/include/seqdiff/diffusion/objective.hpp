#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "seqdiff/core/ops.hpp"
#include "seqdiff/data/batch.hpp"
#include "seqdiff/diffusion/schedule.hpp"

namespace seqdiff {

/// KL weight of one position at step t (s = t - 1): the absorbing KL between
/// the true posterior and the model's reverse kernel reduces to
/// weight * -log p(x0 = x). Unmasked positions contribute nothing.
inline double absorbing_kl_weight(const ScheduleSpec& spec, bool masked, int t, Index i) {
    if (!masked) return 0.0;
    return posterior(spec, true, t - 1, t, i).p_token;
}

/// The prior term KL[q(z_T | x) || p(z_T)] is zero because every position is
/// masked at T; this checks that property instead of computing the term.
inline void assert_prior_term_vanishes(const ScheduleSpec& spec, Index length) {
    for (Index i = 0; i < length; ++i) {
        if (mask_prob(spec, spec.T, i) != 1.0) throw ContractError("schedule does not end fully masked");
    }
}

/// T * sum_i w_i * -log p(x_i) / real_tokens over packed rows.
template <typename Scalar>
Tensor<Scalar> vb_loss(const Tensor<Scalar>& logits, const std::vector<Index>& targets,
                       const std::vector<double>& kl_weights, int T, Index real_tokens) {
    if (real_tokens <= 0) return Tensor<Scalar>::scalar(Scalar(0));
    std::vector<double> w(kl_weights.size());
    const double scale = static_cast<double>(T) / static_cast<double>(real_tokens);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = kl_weights[i] * scale;
    return weighted_nll(logits, targets, w);
}

/// Mean over rows of 1 - cos(C_s, C_t). C_t is cut from the graph unless
/// `detach_target` is false.
template <typename Scalar>
Tensor<Scalar> similarity_loss(const Tensor<Scalar>& c_s, const Tensor<Scalar>& c_t, bool detach_target = true,
                               bool* degenerate = nullptr) {
    auto target = detach_target ? c_t.detach() : c_t;
    auto cos = cosine_rows(c_s, target, degenerate);
    return add_scalar(-mean(cos), Scalar(1));
}

struct LossOptions {
    ScheduleKind kind = ScheduleKind::uniform;
    int T = 50;
    bool disable_similarity_loss = false;
    bool no_detach_target = false;
    double cls_weight = 1.0;
};

template <typename Scalar>
struct LossTerms {
    Tensor<Scalar> total;   // L_vb + L_cls + CE
    Tensor<Scalar> length;  // length-predictor cross-entropy, trained jointly
    double vb = 0.0;
    double cls = 0.0;
    double ce = 0.0;
    double length_value = 0.0;
    Index masked = 0;
    bool ce_empty = false;
    bool cls_degenerate = false;
    std::vector<int> t;
};

/// Target semantics computed outside the loss, e.g. to hold them fixed while
/// finite-differencing.
template <typename Scalar>
struct FrozenSemantics {
    std::vector<std::vector<double>> scores;
    Matrix<Scalar> cls;
};

/// Training objective for one batch. One t ~ Uniform{1..T} is drawn per
/// sequence; all randomness comes from `seed`.
///
/// Model requirements: encode_source, target_semantics, prepare_memory,
/// denoise_logits, length_loss (see Seq2SeqModel).
template <typename Model, typename Scalar = typename Model::Scalar>
LossTerms<Scalar> total_loss(const Model& model, const Batch& batch, const LossOptions& opt, std::uint64_t seed,
                             const FrozenSemantics<Scalar>* frozen = nullptr) {
    LossTerms<Scalar> terms;
    const auto sources = batch.sources();
    const auto targets = batch.targets();
    const Index B = batch.size();
    auto enc = model.encode_source(sources);

    const bool semantic = opt.kind == ScheduleKind::semantic;
    const bool use_cls = semantic && !opt.disable_similarity_loss;
    std::vector<std::vector<double>> scores(static_cast<std::size_t>(B));
    Tensor<Scalar> c_t;
    if (semantic) {
        if (frozen) {
            scores = frozen->scores;
            c_t = Tensor<Scalar>(frozen->cls);
        } else {
            auto sem = model.target_semantics(targets);
            scores = std::move(sem.scores);
            c_t = sem.cls;
        }
    }

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick_t(1, opt.T);
    std::vector<Index> z, x0, lengths;
    std::vector<double> weights;
    std::vector<bool> masked;
    Index real = 0;
    for (Index b = 0; b < B; ++b) {
        const auto& tgt = targets[static_cast<std::size_t>(b)];
        const int t = pick_t(rng);
        terms.t.push_back(t);
        lengths.push_back(static_cast<Index>(tgt.size()));
        if (tgt.empty()) continue;
        ScheduleSpec spec = semantic ? ScheduleSpec::semantic(opt.T, scores[static_cast<std::size_t>(b)])
                                     : ScheduleSpec::uniform(opt.T);
        auto state = forward_noise(tgt, {}, t, spec, rng);
        for (Index i = 0; i < static_cast<Index>(tgt.size()); ++i) {
            const bool m = state.masked(i);
            z.push_back(state.tokens[static_cast<std::size_t>(i)]);
            x0.push_back(tgt[static_cast<std::size_t>(i)]);
            masked.push_back(m);
            weights.push_back(absorbing_kl_weight(spec, m, t, i));
            terms.masked += m ? 1 : 0;
        }
        real += static_cast<Index>(tgt.size());
    }

    Tensor<Scalar> l_vb = Tensor<Scalar>::scalar(Scalar(0));
    Tensor<Scalar> ce = Tensor<Scalar>::scalar(Scalar(0));
    if (real > 0) {
        auto memory = model.prepare_memory(enc, lengths);
        auto logits = model.denoise_logits(z, Segments::from_lengths(lengths), memory, terms.t);
        l_vb = vb_loss(logits, x0, weights, opt.T, real);
        ce = cross_entropy_logits(logits, x0, masked, &terms.ce_empty);
    } else {
        terms.ce_empty = true;
    }

    Tensor<Scalar> l_cls = Tensor<Scalar>::scalar(Scalar(0));
    if (use_cls) {
        l_cls = similarity_loss(enc.cls, c_t, !opt.no_detach_target, &terms.cls_degenerate) *
                static_cast<Scalar>(opt.cls_weight);
    }

    terms.total = l_vb + l_cls + ce;
    terms.length = model.length_loss(enc, lengths);
    terms.vb = static_cast<double>(l_vb.item());
    terms.cls = static_cast<double>(l_cls.item());
    terms.ce = static_cast<double>(ce.item());
    terms.length_value = static_cast<double>(terms.length.item());
    return terms;
}

}  // namespace seqdiff
