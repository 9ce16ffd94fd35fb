#include "seqdiff/model/model.hpp"

#include <algorithm>

#include "seqdiff/data/tokens.hpp"

namespace seqdiff {

void ModelConfig::validate() const {
    auto positive = [](Index v, const char* field) {
        if (v <= 0) throw ConfigError(field, "must be positive, got " + std::to_string(v));
    };
    positive(encoder_layers, "encoder_layers");
    positive(decoder_layers, "decoder_layers");
    positive(width, "width");
    positive(heads, "heads");
    positive(state, "state");
    positive(expand, "expand");
    positive(max_source_len, "max_source_len");
    positive(max_target_len, "max_target_len");
    if (ffn_hidden < 0) throw ConfigError("ffn_hidden", "must be nonnegative");
    if (T <= 0) throw ConfigError("T", "must be positive, got " + std::to_string(T));
    if (vocab_size <= token::kReserved) {
        throw ConfigError("vocab_size", "must exceed the " + std::to_string(token::kReserved) + " reserved ids");
    }
    if (backbone == Backbone::transformer && width % heads != 0) {
        throw ConfigError("heads", std::to_string(heads) + " does not divide width " + std::to_string(width));
    }
    if (max_source_len < 2) throw ConfigError("max_source_len", "must leave room for [CLS] and [EOS]");
}

template <typename Scalar>
Seq2SeqModel<Scalar>::Seq2SeqModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    std::mt19937_64 rng(seed);
    const Index D = config_.width;
    embedding_ = Embedding<Scalar>(params_, "embed", config_.vocab_size, D, rng);

    const Index positions = std::max(config_.max_source_len, config_.max_target_len + 2);
    positions_.resize(positions, D);
    for (Index p = 0; p < positions; ++p) positions_.row(p) = sinusoid<Scalar>(static_cast<double>(p), D);

    if (config_.backbone == Backbone::transformer) {
        for (Index l = 0; l < config_.encoder_layers; ++l) {
            enc_layers_.emplace_back(params_, "enc." + std::to_string(l), D, config_.heads, config_.hidden(), rng);
        }
        for (Index l = 0; l < config_.decoder_layers; ++l) {
            dec_layers_.emplace_back(params_, "dec." + std::to_string(l), D, config_.heads, config_.hidden(), rng);
        }
    } else {
        for (Index l = 0; l < config_.encoder_layers; ++l) {
            enc_blocks_.emplace_back(params_, "enc." + std::to_string(l), D, config_.state, config_.expand,
                                     Direction::bidirectional, rng);
        }
        compressor_ = Compressor<Scalar>(params_, "align",
                                         D, compression_stride(config_.max_source_len, config_.max_target_len), rng);
        for (Index l = 0; l < config_.decoder_layers; ++l) {
            dec_blocks_.emplace_back(params_, "dec." + std::to_string(l), D, config_.state, config_.expand, rng);
        }
    }
    enc_norm_ = LayerNorm<Scalar>(params_, "enc.norm", D);
    dec_norm_ = LayerNorm<Scalar>(params_, "dec.norm", D);
    output_ = Linear<Scalar>(params_, "output", D, config_.vocab_size, rng);
    length_head_ = Linear<Scalar>(params_, "length", D, config_.max_target_len, rng);
}

template <typename Scalar>
Tensor<Scalar> Seq2SeqModel<Scalar>::embed(const std::vector<Index>& ids, const Segments& seg) const {
    for (Index id : ids) {
        if (id < 0 || id >= config_.vocab_size) {
            throw DimensionError("token id " + std::to_string(id) + " outside vocabulary of " +
                                 std::to_string(config_.vocab_size));
        }
    }
    Matrix<Scalar> pos(seg.total(), config_.width);
    for (Index b = 0; b < seg.count(); ++b) {
        if (seg.length(b) > positions_.rows()) {
            throw ContractError("sequence of length " + std::to_string(seg.length(b)) + " exceeds " +
                                std::to_string(positions_.rows()) + " positions");
        }
        pos.middleRows(seg.begin(b), seg.length(b)) = positions_.topRows(seg.length(b));
    }
    return embedding_(ids) + Tensor<Scalar>(std::move(pos));
}

template <typename Scalar>
Tensor<Scalar> Seq2SeqModel<Scalar>::run_encoder(const std::vector<std::vector<Index>>& seqs, Segments& seg,
                                                 AttentionMaps<Scalar>* last_maps) const {
    std::vector<Index> ids, lengths;
    for (const auto& s : seqs) {
        ids.insert(ids.end(), s.begin(), s.end());
        lengths.push_back(static_cast<Index>(s.size()));
    }
    seg = Segments::from_lengths(lengths);
    auto x = embed(ids, seg);
    if (config_.backbone == Backbone::transformer) {
        for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
            x = enc_layers_[l](x, seg, l + 1 == enc_layers_.size() ? last_maps : nullptr);
        }
    } else {
        for (const auto& block : enc_blocks_) x = block(x, seg, config_.scan);
    }
    return enc_norm_(x);
}

template <typename Scalar>
EncoderOutput<Scalar> Seq2SeqModel<Scalar>::encode_source(const std::vector<std::vector<Index>>& sources) const {
    std::vector<std::vector<Index>> seqs;
    seqs.reserve(sources.size());
    for (const auto& s : sources) {
        if (s.empty() || s.front() != token::kCls) throw ContractError("encode_source: source must start with [CLS]");
        if (static_cast<Index>(s.size()) > config_.max_source_len) {
            ++*truncations_;
            std::vector<Index> cut{token::kCls};
            cut.insert(cut.end(), s.end() - (config_.max_source_len - 1), s.end());
            seqs.push_back(std::move(cut));
        } else {
            seqs.push_back(s);
        }
    }
    ++*encoder_calls_;
    EncoderOutput<Scalar> out;
    out.states = run_encoder(seqs, out.seg, nullptr);
    std::vector<Index> cls_rows;
    for (Index b = 0; b < out.seg.count(); ++b) cls_rows.push_back(out.seg.begin(b));
    out.cls = gather_rows(out.states, cls_rows);
    return out;
}

template <typename Scalar>
TargetSemantics<Scalar> Seq2SeqModel<Scalar>::target_semantics(const std::vector<std::vector<Index>>& targets) const {
    if (config_.backbone != Backbone::transformer) {
        throw UnsupportedError(
            "target semantics need encoder attention rows; the mamba encoder has no attention mechanism");
    }
    std::vector<std::vector<Index>> seqs;
    for (const auto& t : targets) {
        if (static_cast<Index>(t.size()) > config_.max_target_len) {
            throw ContractError("target_semantics: target longer than max_target_len");
        }
        std::vector<Index> s{token::kCls};
        s.insert(s.end(), t.begin(), t.end());
        s.push_back(token::kEos);
        seqs.push_back(std::move(s));
    }
    AttentionMaps<Scalar> maps;
    Segments seg;
    auto states = run_encoder(seqs, seg, &maps);

    TargetSemantics<Scalar> out;
    out.layer = config_.encoder_layers - 1;
    std::vector<Index> cls_rows;
    for (Index b = 0; b < seg.count(); ++b) {
        cls_rows.push_back(seg.begin(b));
        const auto& tgt = targets[static_cast<std::size_t>(b)];
        const auto& row = maps[static_cast<std::size_t>(b)];
        std::vector<double> a(tgt.size(), 0.0);
        double peak = 0.0;
        for (std::size_t i = 0; i < tgt.size(); ++i) {
            if (token::is_special(tgt[i])) continue;
            a[i] = static_cast<double>(row(0, static_cast<Index>(i) + 1));
            peak = std::max(peak, a[i]);
        }
        if (peak > 0.0) {
            for (auto& v : a) v = std::clamp(v / peak, 0.0, 1.0);
        }
        out.scores.push_back(std::move(a));
    }
    out.cls = gather_rows(states, cls_rows);
    return out;
}

template <typename Scalar>
DecoderMemory<Scalar> Seq2SeqModel<Scalar>::prepare_memory(const EncoderOutput<Scalar>& enc,
                                                           const std::vector<Index>& target_lengths) const {
    if (static_cast<Index>(target_lengths.size()) != enc.seg.count()) {
        throw ContractError("prepare_memory: " + std::to_string(target_lengths.size()) + " target lengths for " +
                            std::to_string(enc.seg.count()) + " sources");
    }
    if (config_.backbone == Backbone::transformer) return {enc.states, enc.seg};

    // Empty canvases get no aligned rows.
    std::vector<Index> fitted;
    for (Index L : target_lengths) fitted.push_back(std::max<Index>(L, 1));
    auto aligned = align_encoder_states(enc.states, enc.seg, fitted, compressor_);
    auto seg = Segments::from_lengths(target_lengths);
    if (std::find(target_lengths.begin(), target_lengths.end(), 0) != target_lengths.end()) {
        std::vector<Index> keep;
        Index offset = 0;
        for (Index L : target_lengths) {
            for (Index i = 0; i < L; ++i) keep.push_back(offset + i);
            offset += std::max<Index>(L, 1);
        }
        aligned = gather_rows(aligned, keep);
    }
    return {aligned, seg};
}

template <typename Scalar>
RowVector<Scalar> Seq2SeqModel<Scalar>::time_embedding(int t) const {
    if (t < 0 || t > config_.T) throw ContractError("time_embedding: t outside [0, T]");
    return sinusoid<Scalar>(static_cast<double>(t), config_.width);
}

template <typename Scalar>
Tensor<Scalar> Seq2SeqModel<Scalar>::denoise_logits(const std::vector<Index>& z, const Segments& seg,
                                                    const DecoderMemory<Scalar>& memory,
                                                    const std::vector<int>& t) const {
    if (static_cast<Index>(z.size()) != seg.total()) throw DimensionError("denoise_logits: tokens do not match segments");
    if (static_cast<Index>(t.size()) != seg.count()) throw DimensionError("denoise_logits: one step per sequence required");
    if (memory.seg.count() != seg.count()) throw ContractError("denoise_logits: memory holds a different batch");
    Matrix<Scalar> time(seg.total(), config_.width);
    for (Index b = 0; b < seg.count(); ++b) {
        if (seg.length(b) > config_.max_target_len) {
            throw ContractError("denoise_logits: length " + std::to_string(seg.length(b)) + " exceeds max_target_len " +
                                std::to_string(config_.max_target_len));
        }
        time.middleRows(seg.begin(b), seg.length(b)).rowwise() = time_embedding(t[static_cast<std::size_t>(b)]);
    }
    auto x = embed(z, seg) + Tensor<Scalar>(std::move(time));
    if (config_.backbone == Backbone::transformer) {
        for (const auto& layer : dec_layers_) x = layer(x, seg, memory.states, memory.seg);
    } else {
        if (memory.states.rows() != seg.total()) throw ContractError("denoise_logits: aligned memory length mismatch");
        for (const auto& block : dec_blocks_) x = block(x, memory.states, seg, config_.scan);
    }
    return output_(dec_norm_(x));
}

template <typename Scalar>
Tensor<Scalar> Seq2SeqModel<Scalar>::length_logits(const EncoderOutput<Scalar>& enc) const {
    return length_head_(segment_mean(enc.states, enc.seg));
}

template <typename Scalar>
Tensor<Scalar> Seq2SeqModel<Scalar>::length_loss(const EncoderOutput<Scalar>& enc,
                                                 const std::vector<Index>& lengths) const {
    std::vector<Index> cls;
    std::vector<bool> use;
    for (Index L : lengths) {
        const bool ok = L >= 1 && L <= config_.max_target_len;
        cls.push_back(ok ? L - 1 : 0);
        use.push_back(ok);
    }
    return cross_entropy_logits(length_logits(enc), cls, use);
}

template <typename Scalar>
std::vector<std::vector<double>> Seq2SeqModel<Scalar>::predict_length(const EncoderOutput<Scalar>& enc) const {
    NoGradGuard guard;
    auto p = softmax(length_logits(enc)).value();
    std::vector<std::vector<double>> out;
    for (Index b = 0; b < p.rows(); ++b) {
        std::vector<double> row(static_cast<std::size_t>(p.cols()));
        for (Index c = 0; c < p.cols(); ++c) row[static_cast<std::size_t>(c)] = static_cast<double>(p(b, c));
        out.push_back(std::move(row));
    }
    return out;
}

template class Seq2SeqModel<float>;
template class Seq2SeqModel<double>;
template class Seq2SeqModel<long double>;

}  // namespace seqdiff
