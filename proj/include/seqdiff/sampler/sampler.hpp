#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <vector>

#include "seqdiff/core/errors.hpp"
#include "seqdiff/core/ops.hpp"
#include "seqdiff/data/tokens.hpp"

namespace seqdiff {

/// round(num / den) for nonnegative integers, halves rounded up.
inline long round_ratio(long num, long den) { return (2 * num + den) / (2 * den); }

/// t_j = round(T (S - j) / S) for j = 0..S. Strictly decreasing from T to 0.
inline std::vector<int> make_time_grid(int T, int S) {
    if (T < 1) throw ContractError("make_time_grid: T must be positive");
    if (S < 1 || S > T) {
        throw ContractError("make_time_grid: steps " + std::to_string(S) + " outside [1, " + std::to_string(T) + "]");
    }
    std::vector<int> grid;
    for (int j = 0; j <= S; ++j) {
        const int t = static_cast<int>(round_ratio(static_cast<long>(T) * (S - j), S));
        if (grid.empty() || grid.back() != t) grid.push_back(t);
    }
    return grid;
}

/// Number of positions still masked at step t on a canvas of length L.
inline Index masked_count(Index L, int t, int T) { return static_cast<Index>(round_ratio(long(L) * t, T)); }

/// Returns the `n_keep_masked` positions of `masked` that stay masked: those
/// with the lowest confidence. On ties the lower position unmasks first.
/// `confidence` is indexed by position.
inline std::vector<Index> remask_select(const std::vector<double>& confidence, const std::vector<Index>& masked,
                                        Index n_keep_masked) {
    if (n_keep_masked < 0 || n_keep_masked > static_cast<Index>(masked.size())) {
        throw ContractError("remask_select: cannot keep " + std::to_string(n_keep_masked) + " of " +
                            std::to_string(masked.size()) + " masked positions");
    }
    std::vector<Index> order = masked;
    std::sort(order.begin(), order.end(), [&](Index a, Index b) {
        const double ca = confidence[static_cast<std::size_t>(a)], cb = confidence[static_cast<std::size_t>(b)];
        if (ca != cb) return ca < cb;
        return a > b;
    });
    order.resize(static_cast<std::size_t>(n_keep_masked));
    std::sort(order.begin(), order.end());
    return order;
}

enum class LengthSource { reference, predicted };

struct SamplePlan {
    int steps = 10;
    LengthSource length = LengthSource::reference;
    std::uint64_t seed = 0;
    double temperature = 0.0;  // 0 selects greedy argmax
    bool trace = false;
};

struct TraceStep {
    int t = 0;  // step the canvas below is at
    std::vector<Index> canvas;
};

struct SampleResult {
    std::vector<Index> tokens;
    std::vector<Index> masked_counts;  // one per grid point, from L down to 0
    std::vector<TraceStep> trace;
    bool empty_length = false;
};

namespace detail {

// Token choice and its confidence for one row of logits; reserved ids are
// never produced.
template <typename Scalar>
std::pair<Index, double> pick_token(const Eigen::Ref<const RowVector<Scalar>>& logits, double temperature,
                                    std::mt19937_64& rng) {
    const Index V = logits.cols();
    std::vector<double> p(static_cast<std::size_t>(V), 0.0);
    double m = -std::numeric_limits<double>::infinity();
    for (Index v = token::kReserved; v < V; ++v) m = std::max(m, static_cast<double>(logits(v)));
    double z = 0.0;
    for (Index v = token::kReserved; v < V; ++v) {
        p[static_cast<std::size_t>(v)] = std::exp(static_cast<double>(logits(v)) - m);
        z += p[static_cast<std::size_t>(v)];
    }
    Index best = token::kReserved;
    for (Index v = token::kReserved; v < V; ++v) {
        p[static_cast<std::size_t>(v)] /= z;
        if (p[static_cast<std::size_t>(v)] > p[static_cast<std::size_t>(best)]) best = v;
    }
    if (temperature <= 0.0) return {best, p[static_cast<std::size_t>(best)]};

    std::vector<double> w(p.size(), 0.0);
    for (Index v = token::kReserved; v < V; ++v) {
        w[static_cast<std::size_t>(v)] = std::exp((static_cast<double>(logits(v)) - m) / temperature);
    }
    std::discrete_distribution<Index> draw(w.begin(), w.end());
    const Index v = draw(rng);
    return {v, p[static_cast<std::size_t>(v)]};
}

}  // namespace detail

/// Reverse process for a batch of sources ([CLS] ... [EOS]) with one encoder
/// call. `reference_lengths` is used when plan.length is reference.
template <typename Model>
std::vector<SampleResult> sample_batch(const Model& model, const std::vector<std::vector<Index>>& sources,
                                       const SamplePlan& plan, const std::vector<Index>& reference_lengths = {}) {
    using Scalar = typename Model::Scalar;
    NoGradGuard no_grad;
    const int T = model.config().T;
    const auto grid = make_time_grid(T, plan.steps);
    const std::size_t B = sources.size();
    std::vector<SampleResult> out(B);
    if (B == 0) return out;

    auto enc = model.encode_source(sources);
    std::vector<Index> lengths(B);
    if (plan.length == LengthSource::reference) {
        if (reference_lengths.size() != B) throw ContractError("sample: one reference length per source required");
        for (std::size_t b = 0; b < B; ++b) lengths[b] = std::min(reference_lengths[b], model.config().max_target_len);
    } else {
        const auto dist = model.predict_length(enc);
        for (std::size_t b = 0; b < B; ++b) {
            lengths[b] = 1 + static_cast<Index>(std::max_element(dist[b].begin(), dist[b].end()) - dist[b].begin());
        }
    }

    std::vector<std::vector<Index>> z(B);
    for (std::size_t b = 0; b < B; ++b) {
        z[b].assign(static_cast<std::size_t>(lengths[b]), token::kMask);
        out[b].empty_length = lengths[b] == 0;
        out[b].masked_counts.push_back(lengths[b]);
        if (plan.trace) out[b].trace.push_back({grid.front(), z[b]});
    }
    auto memory = model.prepare_memory(enc, lengths);
    const auto seg = Segments::from_lengths(lengths);
    std::mt19937_64 rng(plan.seed);

    for (std::size_t j = 0; j + 1 < grid.size(); ++j) {
        std::vector<Index> packed;
        for (const auto& row : z) packed.insert(packed.end(), row.begin(), row.end());
        if (packed.empty()) break;
        const auto logits = model.denoise_logits(packed, seg, memory, std::vector<int>(B, grid[j])).value();
        for (std::size_t b = 0; b < B; ++b) {
            const Index L = lengths[b];
            std::vector<Index> masked;
            std::vector<double> confidence(static_cast<std::size_t>(L), 0.0);
            std::vector<Index> proposal(static_cast<std::size_t>(L), token::kMask);
            for (Index i = 0; i < L; ++i) {
                if (z[b][static_cast<std::size_t>(i)] != token::kMask) continue;
                masked.push_back(i);
                auto [tok, conf] = detail::pick_token<Scalar>(logits.row(seg.begin(static_cast<Index>(b)) + i),
                                                              plan.temperature, rng);
                proposal[static_cast<std::size_t>(i)] = tok;
                confidence[static_cast<std::size_t>(i)] = conf;
            }
            const Index keep = std::min<Index>(masked_count(L, grid[j + 1], T), static_cast<Index>(masked.size()));
            const auto stay = remask_select(confidence, masked, keep);
            for (Index i : masked) {
                if (!std::binary_search(stay.begin(), stay.end(), i)) {
                    z[b][static_cast<std::size_t>(i)] = proposal[static_cast<std::size_t>(i)];
                }
            }
            out[b].masked_counts.push_back(keep);
            if (plan.trace) out[b].trace.push_back({grid[j + 1], z[b]});
        }
    }
    for (std::size_t b = 0; b < B; ++b) out[b].tokens = z[b];
    return out;
}

template <typename Model>
SampleResult sample_sequence(const Model& model, const std::vector<Index>& source, const SamplePlan& plan,
                             std::optional<Index> reference_length = std::nullopt) {
    std::vector<Index> refs;
    if (reference_length) refs.push_back(*reference_length);
    return sample_batch(model, {source}, plan, refs).front();
}

}  // namespace seqdiff
