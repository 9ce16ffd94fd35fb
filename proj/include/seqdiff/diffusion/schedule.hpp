#pragma once

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "seqdiff/core/errors.hpp"
#include "seqdiff/core/tensor.hpp"
#include "seqdiff/data/tokens.hpp"

namespace seqdiff {

enum class ScheduleKind { uniform, semantic };

inline const char* to_string(ScheduleKind k) { return k == ScheduleKind::uniform ? "uniform" : "semantic"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
    if (s == "uniform") return ScheduleKind::uniform;
    if (s == "semantic") return ScheduleKind::semantic;
    throw ConfigError("schedule", "expected uniform or semantic, got '" + s + "'");
}

/// Forward-noise law over one sequence. `salience` holds a_i per position and
/// is only read by the semantic kind.
struct ScheduleSpec {
    ScheduleKind kind = ScheduleKind::uniform;
    int T = 50;
    std::vector<double> salience;

    static ScheduleSpec uniform(int T) { return {ScheduleKind::uniform, T, {}}; }
    static ScheduleSpec semantic(int T, std::vector<double> a) { return {ScheduleKind::semantic, T, std::move(a)}; }
};

/// Marginal probability that a position with salience `a` is masked at step t.
/// Uniform: t/T. Semantic: clamp(t/T - (1 - t/T) a, 0, 1).
inline double mask_prob(ScheduleKind kind, int T, int t, double a = 0.0) {
    if (T <= 0) throw ContractError("mask_prob: T must be positive");
    if (t < 0 || t > T) throw ContractError("mask_prob: t=" + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    const double r = static_cast<double>(t) / static_cast<double>(T);
    if (kind == ScheduleKind::uniform) return r;
    if (!(a >= 0.0 && a <= 1.0)) throw ContractError("mask_prob: salience " + std::to_string(a) + " outside [0, 1]");
    return std::clamp(r - (1.0 - r) * a, 0.0, 1.0);
}

inline double mask_prob(const ScheduleSpec& spec, int t, Index i) {
    if (spec.kind == ScheduleKind::uniform) return mask_prob(spec.kind, spec.T, t);
    if (i < 0 || i >= static_cast<Index>(spec.salience.size())) {
        throw ContractError("mask_prob: position " + std::to_string(i) + " has no salience");
    }
    return mask_prob(spec.kind, spec.T, t, spec.salience[static_cast<std::size_t>(i)]);
}

/// Per-step absorption probability from consecutive marginals.
inline double step_beta(double p_prev, double p_t) {
    if (p_prev > p_t) {
        throw MonotonicityError("marginal mask probability decreased from " + std::to_string(p_prev) + " to " +
                                std::to_string(p_t));
    }
    if (p_prev >= 1.0) return 1.0;
    return (p_t - p_prev) / (1.0 - p_prev);
}

inline double step_beta(const ScheduleSpec& spec, int t, Index i) {
    if (t < 1 || t > spec.T) throw ContractError("step_beta: t must lie in [1, T]");
    return step_beta(mask_prob(spec, t - 1, i), mask_prob(spec, t, i));
}

/// One-step absorbing transition over `vocab_size` tokens plus [MASK], which
/// occupies the last row/column. Row r is the distribution of z_t given
/// z_{t-1} = r.
inline Matrix<double> transition_matrix(double p_prev, double p_t, Index vocab_size) {
    const double beta = step_beta(p_prev, p_t);
    const Index m = vocab_size;
    Matrix<double> Q = Matrix<double>::Zero(vocab_size + 1, vocab_size + 1);
    for (Index r = 0; r < vocab_size; ++r) {
        Q(r, r) = 1.0 - beta;
        Q(r, m) = beta;
    }
    Q(m, m) = 1.0;
    return Q;
}

inline Matrix<double> transition_matrix(const ScheduleSpec& spec, int t, Index i, Index vocab_size) {
    if (t < 1 || t > spec.T) throw ContractError("transition_matrix: t must lie in [1, T]");
    return transition_matrix(mask_prob(spec, t - 1, i), mask_prob(spec, t, i), vocab_size);
}

/// Distribution of z_s for one position given z_t and x, s < t, with keep
/// probabilities k = 1 - P.
struct Posterior {
    double p_token;  // z_s = x (or z_t when unmasked)
    double p_mask;
};

inline Posterior posterior_from_keep(bool z_t_masked, double k_s, double k_t) {
    if (!z_t_masked) return {1.0, 0.0};
    if (k_t >= 1.0) throw ContractError("posterior: [MASK] observed where masking is impossible (k_t = 1)");
    return {(k_s - k_t) / (1.0 - k_t), (1.0 - k_s) / (1.0 - k_t)};
}

inline Posterior posterior(const ScheduleSpec& spec, bool z_t_masked, int s, int t, Index i) {
    if (!(s < t)) throw ContractError("posterior: requires s < t");
    return posterior_from_keep(z_t_masked, 1.0 - mask_prob(spec, s, i), 1.0 - mask_prob(spec, t, i));
}

/// Partially masked latent z_t of one sequence.
struct MaskedState {
    std::vector<Index> tokens;
    std::vector<bool> pad;
    int t = 0;

    bool masked(Index i) const { return tokens[static_cast<std::size_t>(i)] == token::kMask; }
    Index masked_count() const {
        return static_cast<Index>(std::count(tokens.begin(), tokens.end(), token::kMask));
    }
};

/// Masks each non-pad position independently with probability mask_prob(t, i).
/// Pad flags may be empty (no padding).
template <typename Rng>
MaskedState forward_noise(const std::vector<Index>& x, const std::vector<bool>& pad, int t, const ScheduleSpec& spec,
                          Rng& rng) {
    if (t < 0 || t > spec.T) throw ContractError("forward_noise: t=" + std::to_string(t) + " outside [0, T]");
    if (!pad.empty() && pad.size() != x.size()) throw DimensionError("forward_noise: pad flags do not match tokens");
    MaskedState z{x, pad.empty() ? std::vector<bool>(x.size(), false) : pad, t};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (x[i] == token::kMask) throw ContractError("forward_noise: clean sequence contains [MASK]");
        if (z.pad[i]) continue;
        const double p = mask_prob(spec, t, static_cast<Index>(i));
        // draw even at p in {0, 1} so the stream position does not depend on t
        const double r = u(rng);
        if (r < p) z.tokens[i] = token::kMask;
    }
    return z;
}

}  // namespace seqdiff
