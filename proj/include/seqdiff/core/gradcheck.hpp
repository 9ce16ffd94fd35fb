#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "seqdiff/core/tensor.hpp"

namespace seqdiff {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_parameter;
    Index worst_coordinate = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    Index coordinates_checked = 0;
};

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences on up to `samples_per_param` random coordinates of each tensor
/// in `params`. Error per coordinate: |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
/// `f` must be deterministic.
template <typename Scalar>
GradCheckReport grad_check(const std::vector<Tensor<Scalar>>& params, const std::function<Tensor<Scalar>()>& f,
                           double eps, Index samples_per_param = 8, std::uint64_t seed = 0) {
    for (auto p : params) p.zero_grad();
    {
        Tensor<Scalar> loss = f();
        backward(loss);
    }
    std::vector<Matrix<Scalar>> analytic;
    for (const auto& p : params) analytic.push_back(p.grad());

    std::mt19937_64 rng(seed);
    GradCheckReport report;
    NoGradGuard no_grad;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<Scalar> p = params[pi];
        const Index n = p.size();
        std::vector<Index> coords(static_cast<std::size_t>(n));
        for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
        if (samples_per_param > 0 && n > samples_per_param) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(static_cast<std::size_t>(samples_per_param));
        }
        for (Index c : coords) {
            Scalar& slot = p.value().data()[c];
            const Scalar saved = slot;
            const Scalar h = static_cast<Scalar>(eps);
            slot = saved + h;
            const Scalar plus = f().item();
            slot = saved - h;
            const Scalar minus = f().item();
            slot = saved;
            const double fd = static_cast<double>((plus - minus) / (Scalar(2) * h));
            const double ad = static_cast<double>(analytic[pi].data()[c]);
            const double err = std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
            ++report.coordinates_checked;
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_parameter = p.name();
                report.worst_coordinate = c;
                report.worst_analytic = ad;
                report.worst_numeric = fd;
            }
        }
    }
    return report;
}

}  // namespace seqdiff
