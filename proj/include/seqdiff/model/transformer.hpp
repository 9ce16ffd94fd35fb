#pragma once

#include <random>
#include <string>

#include "seqdiff/core/layers.hpp"
#include "seqdiff/core/ops.hpp"

namespace seqdiff {

template <typename Scalar>
struct AttentionBlock {
    Linear<Scalar> q, k, v, o;
    Index heads = 1;

    AttentionBlock() = default;
    AttentionBlock(ParameterStore<Scalar>& store, const std::string& name, Index width, Index heads_,
                   std::mt19937_64& rng)
        : q(store, name + ".q", width, width, rng),
          k(store, name + ".k", width, width, rng),
          v(store, name + ".v", width, width, rng),
          o(store, name + ".o", width, width, rng),
          heads(heads_) {}

    Tensor<Scalar> operator()(const Tensor<Scalar>& xq, const Tensor<Scalar>& xkv, const Segments& q_seg,
                              const Segments& kv_seg, AttentionMaps<Scalar>* maps = nullptr) const {
        return o(multi_head_attention(q(xq), k(xkv), v(xkv), heads, q_seg, kv_seg, maps));
    }
};

template <typename Scalar>
struct FeedForward {
    Linear<Scalar> up, down;

    FeedForward() = default;
    FeedForward(ParameterStore<Scalar>& store, const std::string& name, Index width, Index hidden,
                std::mt19937_64& rng)
        : up(store, name + ".up", width, hidden, rng), down(store, name + ".down", hidden, width, rng) {}

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return down(silu(up(x))); }
};

/// Pre-norm encoder layer: self-attention then feed-forward, both residual.
template <typename Scalar>
struct EncoderLayer {
    LayerNorm<Scalar> ln_attn, ln_ffn;
    AttentionBlock<Scalar> attn;
    FeedForward<Scalar> ffn;

    EncoderLayer() = default;
    EncoderLayer(ParameterStore<Scalar>& store, const std::string& name, Index width, Index heads, Index hidden,
                 std::mt19937_64& rng)
        : ln_attn(store, name + ".ln_attn", width),
          ln_ffn(store, name + ".ln_ffn", width),
          attn(store, name + ".attn", width, heads, rng),
          ffn(store, name + ".ffn", width, hidden, rng) {}

    Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Segments& seg,
                              AttentionMaps<Scalar>* maps = nullptr) const {
        auto xn = ln_attn(x);
        auto h = x + attn(xn, xn, seg, seg, maps);
        return h + ffn(ln_ffn(h));
    }
};

/// Pre-norm decoder layer: non-causal self-attention, cross-attention to the
/// encoder memory, feed-forward.
template <typename Scalar>
struct DecoderLayer {
    LayerNorm<Scalar> ln_self, ln_cross, ln_ffn;
    AttentionBlock<Scalar> self_attn, cross_attn;
    FeedForward<Scalar> ffn;

    DecoderLayer() = default;
    DecoderLayer(ParameterStore<Scalar>& store, const std::string& name, Index width, Index heads, Index hidden,
                 std::mt19937_64& rng)
        : ln_self(store, name + ".ln_self", width),
          ln_cross(store, name + ".ln_cross", width),
          ln_ffn(store, name + ".ln_ffn", width),
          self_attn(store, name + ".self_attn", width, heads, rng),
          cross_attn(store, name + ".cross_attn", width, heads, rng),
          ffn(store, name + ".ffn", width, hidden, rng) {}

    Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Segments& seg, const Tensor<Scalar>& memory,
                              const Segments& memory_seg) const {
        auto xn = ln_self(x);
        auto h = x + self_attn(xn, xn, seg, seg);
        h = h + cross_attn(ln_cross(h), memory, seg, memory_seg);
        return h + ffn(ln_ffn(h));
    }
};

}  // namespace seqdiff
