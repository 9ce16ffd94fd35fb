#pragma once

#include <cmath>
#include <vector>

#include "seqdiff/core/layers.hpp"

namespace seqdiff {

/// Linear warmup from `warmup_start` to `base` over `warmup_steps`, then constant.
struct LrSchedule {
    double base = 5e-5;
    double warmup_start = 5e-8;
    long warmup_steps = 10000;

    double at(long step) const {
        if (step >= warmup_steps || warmup_steps <= 0) return base;
        const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
        return warmup_start + (base - warmup_start) * frac;
    }
};

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
    LrSchedule lr;
};

template <typename Scalar>
struct OptimState {
    std::vector<Matrix<Scalar>> first_moment;
    std::vector<Matrix<Scalar>> second_moment;
    long step = 0;

    explicit OptimState(const ParameterStore<Scalar>& params) {
        for (const auto& p : params.all()) {
            first_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
            second_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
        }
    }
};

/// One decoupled-weight-decay Adam update. Every gradient is checked before
/// any parameter moves; a non-finite gradient aborts the step.
/// Returns the learning rate that was applied.
template <typename Scalar>
double adamw_step(ParameterStore<Scalar>& params, OptimState<Scalar>& state, const AdamWConfig& cfg) {
    const auto& all = params.all();
    if (state.first_moment.size() != all.size()) throw ContractError("adamw_step: optimizer state does not match parameters");
    double norm_sq = 0.0;
    for (const auto& p : all) {
        if (!p.has_grad()) continue;
        if (!p.node()->grad.allFinite()) throw NumericError("adamw_step: non-finite gradient in " + p.name());
        norm_sq += static_cast<double>(p.node()->grad.squaredNorm());
    }
    double scale = 1.0;
    if (cfg.clip_norm > 0.0) {
        const double norm = std::sqrt(norm_sq);
        if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
    }

    const double lr = cfg.lr.at(state.step);
    const long t = state.step + 1;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < all.size(); ++i) {
        Tensor<Scalar> p = all[i];
        Matrix<Scalar> g = p.has_grad() ? Matrix<Scalar>(p.node()->grad * static_cast<Scalar>(scale))
                                        : Matrix<Scalar>::Zero(p.rows(), p.cols());
        auto& m = state.first_moment[i];
        auto& v = state.second_moment[i];
        m = static_cast<Scalar>(cfg.beta1) * m + static_cast<Scalar>(1.0 - cfg.beta1) * g;
        v = static_cast<Scalar>(cfg.beta2) * v + static_cast<Scalar>(1.0 - cfg.beta2) * g.cwiseProduct(g);
        auto& w = p.value();
        if (cfg.weight_decay != 0.0) w *= static_cast<Scalar>(1.0 - lr * cfg.weight_decay);
        const Scalar step_size = static_cast<Scalar>(lr / c1);
        const Scalar inv_c2 = static_cast<Scalar>(1.0 / c2);
        const Scalar eps = static_cast<Scalar>(cfg.eps);
        w.array() -= step_size * m.array() / ((v.array() * inv_c2).sqrt() + eps);
    }
    ++state.step;
    return lr;
}

}  // namespace seqdiff
