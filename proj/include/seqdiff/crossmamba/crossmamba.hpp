#pragma once

#include <random>
#include <string>
#include <vector>

#include "seqdiff/core/layers.hpp"
#include "seqdiff/core/ops.hpp"
#include "seqdiff/ssm/ssm.hpp"

namespace seqdiff {

/// Stride (and width) of the encoder compression conv: ceil(max_source / max_target), at least 1.
inline Index compression_stride(Index max_source_len, Index max_target_len) {
    if (max_source_len <= 0 || max_target_len <= 0) throw ContractError("compression_stride: lengths must be positive");
    return std::max<Index>(1, (max_source_len + max_target_len - 1) / max_target_len);
}

/// Non-causal strided Conv1d shrinking encoder states towards the target length.
template <typename Scalar>
struct Compressor {
    Tensor<Scalar> weight;  // [stride*D x D]
    Tensor<Scalar> bias;    // [1 x D]
    Index stride = 1;

    Compressor() = default;
    Compressor(ParameterStore<Scalar>& store, const std::string& name, Index width, Index stride_, std::mt19937_64& rng)
        : stride(stride_) {
        if (stride_ <= 0) throw ConfigError("stride", "compression stride must be >= 1");
        weight = store.add(name + ".weight",
                           uniform_init<Scalar>(stride * width, width, 1.0 / std::sqrt(double(stride * width)), rng));
        bias = store.add(name + ".bias", Matrix<Scalar>::Zero(1, width));
    }

    std::pair<Tensor<Scalar>, Segments> operator()(const Tensor<Scalar>& e, const Segments& seg) const {
        return conv1d(e, seg, weight, bias, stride, stride, false);
    }
};

/// Fits each compressed segment to its target length: shorter segments are
/// right-padded with zero rows, longer ones keep their last `L` rows.
template <typename Scalar>
Tensor<Scalar> fit_to_lengths(const Tensor<Scalar>& compressed, const Segments& seg,
                              const std::vector<Index>& target_lengths) {
    if (static_cast<Index>(target_lengths.size()) != seg.count()) {
        throw ContractError("align_encoder_states: " + std::to_string(target_lengths.size()) + " target lengths for " +
                            std::to_string(seg.count()) + " sources");
    }
    std::vector<Index> index;
    for (Index b = 0; b < seg.count(); ++b) {
        const Index L = target_lengths[static_cast<std::size_t>(b)];
        if (L <= 0) throw ContractError("align_encoder_states: target length must be >= 1");
        const Index n = seg.length(b);
        const Index first = n > L ? n - L : 0;
        for (Index i = 0; i < L; ++i) index.push_back(first + i < n ? seg.begin(b) + first + i : -1);
    }
    return gather_rows(compressed, index);
}

/// Encoder states [M x D] -> aligned states [L x D] per sequence.
template <typename Scalar>
Tensor<Scalar> align_encoder_states(const Tensor<Scalar>& e, const Segments& e_seg,
                                    const std::vector<Index>& target_lengths, const Compressor<Scalar>& conv) {
    for (Index b = 0; b < e_seg.count(); ++b) {
        if (e_seg.length(b) < 1) throw ContractError("align_encoder_states: empty encoder sequence");
    }
    auto [compressed, seg] = conv(e, e_seg);
    return fit_to_lengths(compressed, seg, target_lengths);
}

/// Projections s_B', s_C', s_delta' reading aligned encoder states.
template <typename Scalar>
struct CrossParams {
    Linear<Scalar> to_b;
    Linear<Scalar> to_c;
    Linear<Scalar> to_delta;

    CrossParams() = default;
    CrossParams(ParameterStore<Scalar>& store, const std::string& name, Index encoder_width, Index state,
                std::mt19937_64& rng)
        : to_b(store, name + ".to_b", encoder_width, state, rng),
          to_c(store, name + ".to_c", encoder_width, state, rng),
          to_delta(store, name + ".to_delta", encoder_width, 1, rng) {}
};

/// h^c_i = exp(delta_c A) h^c_{i-1} + B~_c x_i, y^c_i = C_c h^c_i with
/// B_c, C_c, delta_c taken from the aligned encoder states. The chain h^c is
/// independent of the self branch.
template <typename Scalar>
Tensor<Scalar> cross_scan(const Tensor<Scalar>& x, const Tensor<Scalar>& e_aligned, const CrossParams<Scalar>& params,
                          const Tensor<Scalar>& A, const Segments& seg,
                          ScanAlgorithm algo = ScanAlgorithm::sequential) {
    if (x.rows() != e_aligned.rows()) {
        throw ContractError("cross_scan: decoder length " + std::to_string(x.rows()) + " vs aligned encoder length " +
                            std::to_string(e_aligned.rows()));
    }
    auto B = params.to_b(e_aligned);
    auto C = params.to_c(e_aligned);
    auto delta = softplus(broadcast_cols(params.to_delta(e_aligned), x.cols()));
    return selective_scan(x, delta, A, B, C, seg, algo);
}

/// Per-position concatenation [y, y^c] projected back to the model width.
template <typename Scalar>
Tensor<Scalar> fuse_branches(const Tensor<Scalar>& y, const Tensor<Scalar>& yc, const Linear<Scalar>& fusion) {
    if (y.rows() != yc.rows() || y.cols() != yc.cols()) {
        throw ContractError("fuse_branches: " + y.shape_string() + " vs " + yc.shape_string());
    }
    if (fusion.in_features() != 2 * y.cols()) {
        throw ContractError("fuse_branches: fusion expects " + std::to_string(fusion.in_features()) +
                            " inputs, branches give " + std::to_string(2 * y.cols()));
    }
    return fusion(concat_cols(y, yc));
}

/// Bidirectional self branch plus bidirectional cross branch over aligned
/// encoder states, fused and added to the input.
template <typename Scalar>
class CrossMambaBlock {
public:
    CrossMambaBlock() = default;
    CrossMambaBlock(ParameterStore<Scalar>& store, const std::string& name, Index width, Index state, Index expand,
                    std::mt19937_64& rng)
        : self_(store, name + ".self", width, state, expand, Direction::bidirectional, rng),
          cross_in_(store, name + ".cross_in", width, expand * width, rng),
          cross_forward_(store, name + ".cross_fwd", width, state, rng),
          cross_backward_(store, name + ".cross_bwd", width, state, rng),
          cross_out_(store, name + ".cross_out", 2 * expand * width, width, rng),
          fusion_(store, name + ".fusion", 2 * width, width, rng) {}

    /// Cross branch alone: [rows x D] normalized input -> [rows x D].
    Tensor<Scalar> cross_branch(const Tensor<Scalar>& xn, const Tensor<Scalar>& e_aligned, const Segments& seg,
                                ScanAlgorithm algo) const {
        auto u = cross_in_(xn);
        auto fwd = cross_scan(u, e_aligned, cross_forward_, self_.ssm_forward().A(), seg, algo);
        auto bwd = reverse_segments(cross_scan(reverse_segments(u, seg), reverse_segments(e_aligned, seg),
                                               cross_backward_, self_.ssm_backward().A(), seg, algo),
                                    seg);
        return cross_out_(concat_cols(fwd, bwd));
    }

    Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Tensor<Scalar>& e_aligned, const Segments& seg,
                              ScanAlgorithm algo = ScanAlgorithm::sequential) const {
        auto xn = self_.norm()(x);
        return x + fuse_branches(self_.mixer(xn, seg, algo), cross_branch(xn, e_aligned, seg, algo), fusion_);
    }

    const MambaBlock<Scalar>& self_branch() const { return self_; }
    const Linear<Scalar>& fusion() const { return fusion_; }

private:
    MambaBlock<Scalar> self_;
    Linear<Scalar> cross_in_;
    CrossParams<Scalar> cross_forward_;
    CrossParams<Scalar> cross_backward_;
    Linear<Scalar> cross_out_;
    Linear<Scalar> fusion_;
};

}  // namespace seqdiff
