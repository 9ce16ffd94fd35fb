#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "seqdiff/core/layers.hpp"
#include "seqdiff/crossmamba/crossmamba.hpp"
#include "seqdiff/model/transformer.hpp"
#include "seqdiff/ssm/ssm.hpp"

namespace seqdiff {

enum class Backbone { transformer, mamba };

inline const char* to_string(Backbone b) { return b == Backbone::transformer ? "transformer" : "mamba"; }

inline Backbone parse_backbone(const std::string& s) {
    if (s == "transformer") return Backbone::transformer;
    if (s == "mamba") return Backbone::mamba;
    throw ConfigError("backbone", "expected transformer or mamba, got '" + s + "'");
}

inline const char* to_string(ScanAlgorithm a) { return a == ScanAlgorithm::sequential ? "sequential" : "parallel"; }

inline ScanAlgorithm parse_scan(const std::string& s) {
    if (s == "sequential") return ScanAlgorithm::sequential;
    if (s == "parallel") return ScanAlgorithm::parallel;
    throw ConfigError("scan", "expected sequential or parallel, got '" + s + "'");
}

struct ModelConfig {
    Backbone backbone = Backbone::transformer;
    Index encoder_layers = 8;
    Index decoder_layers = 8;
    Index width = 256;
    Index heads = 4;
    Index ffn_hidden = 0;  // 0 selects 4 * width
    Index state = 16;
    Index expand = 2;
    Index vocab_size = 0;
    Index max_source_len = 64;  // including [CLS] and [EOS]
    Index max_target_len = 16;  // decoder canvas
    int T = 50;
    ScanAlgorithm scan = ScanAlgorithm::sequential;

    Index hidden() const { return ffn_hidden > 0 ? ffn_hidden : 4 * width; }

    /// Throws ConfigError naming the first offending field.
    void validate() const;
};

template <typename Scalar>
struct EncoderOutput {
    Tensor<Scalar> states;  // [sum M x D]
    Segments seg;
    Tensor<Scalar> cls;  // [B x D], row b is the [CLS] state of sequence b
};

template <typename Scalar>
struct TargetSemantics {
    std::vector<std::vector<double>> scores;  // per target token, in [0, 1]
    Tensor<Scalar> cls;                       // [B x D]
    Index layer = 0;                          // encoder layer the scores were read from
};

template <typename Scalar>
struct DecoderMemory {
    Tensor<Scalar> states;  // encoder states (transformer) or aligned states (mamba)
    Segments seg;
};

/// Encoder-decoder denoiser over packed sequences.
template <typename ScalarT>
class Seq2SeqModel {
public:
    using Scalar = ScalarT;

    Seq2SeqModel(const ModelConfig& config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    ParameterStore<Scalar>& params() { return params_; }
    const ParameterStore<Scalar>& params() const { return params_; }

    /// Each source must start with [CLS]. Over-long sources keep [CLS], drop
    /// their earliest tokens, and count a truncation warning.
    EncoderOutput<Scalar> encode_source(const std::vector<std::vector<Index>>& sources) const;

    /// Runs [CLS] target [EOS] through the encoder and reads the final layer's
    /// head-averaged [CLS] attention row, max-rescaled over target tokens.
    TargetSemantics<Scalar> target_semantics(const std::vector<std::vector<Index>>& targets) const;

    DecoderMemory<Scalar> prepare_memory(const EncoderOutput<Scalar>& enc,
                                         const std::vector<Index>& target_lengths) const;

    /// Parameter-free sinusoidal code of the diffusion step.
    RowVector<Scalar> time_embedding(int t) const;

    /// x0 logits [sum L x V] for packed noisy canvases; t holds one step per sequence.
    Tensor<Scalar> denoise_logits(const std::vector<Index>& z, const Segments& seg, const DecoderMemory<Scalar>& memory,
                                  const std::vector<int>& t) const;

    /// Length logits [B x max_target_len]; class c stands for length c + 1.
    Tensor<Scalar> length_logits(const EncoderOutput<Scalar>& enc) const;
    /// Mean cross-entropy against lengths in [1, max_target_len]; other lengths are ignored.
    Tensor<Scalar> length_loss(const EncoderOutput<Scalar>& enc, const std::vector<Index>& lengths) const;
    /// Per-sequence distribution over lengths 1..max_target_len.
    std::vector<std::vector<double>> predict_length(const EncoderOutput<Scalar>& enc) const;

    long encoder_calls() const { return encoder_calls_->load(); }
    long truncation_warnings() const { return truncations_->load(); }

private:
    Tensor<Scalar> embed(const std::vector<Index>& ids, const Segments& seg) const;
    Tensor<Scalar> run_encoder(const std::vector<std::vector<Index>>& seqs, Segments& seg,
                               AttentionMaps<Scalar>* last_maps) const;

    ModelConfig config_;
    ParameterStore<Scalar> params_;
    Embedding<Scalar> embedding_;
    Matrix<Scalar> positions_;

    std::vector<EncoderLayer<Scalar>> enc_layers_;
    std::vector<DecoderLayer<Scalar>> dec_layers_;
    std::vector<MambaBlock<Scalar>> enc_blocks_;
    std::vector<CrossMambaBlock<Scalar>> dec_blocks_;
    Compressor<Scalar> compressor_;

    LayerNorm<Scalar> enc_norm_;
    LayerNorm<Scalar> dec_norm_;
    Linear<Scalar> output_;
    Linear<Scalar> length_head_;

    std::shared_ptr<std::atomic<long>> encoder_calls_ = std::make_shared<std::atomic<long>>(0);
    std::shared_ptr<std::atomic<long>> truncations_ = std::make_shared<std::atomic<long>>(0);
};

extern template class Seq2SeqModel<float>;
extern template class Seq2SeqModel<double>;
extern template class Seq2SeqModel<long double>;

}  // namespace seqdiff
