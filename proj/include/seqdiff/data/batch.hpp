#pragma once

#include <vector>

#include "seqdiff/core/tensor.hpp"
#include "seqdiff/data/tokens.hpp"

namespace seqdiff {

/// One tokenized pair. `source` is [CLS] tokens... [EOS]; `target` holds the
/// target tokens only, which is the decoder canvas.
struct Example {
    std::vector<Index> source;
    std::vector<Index> target;
};

/// Right-padded batch. Row b of `source` / `target` is padded with [PAD] to the
/// longest row of the batch; the matching pad flags are set on padding.
struct Batch {
    std::vector<std::vector<Index>> source;
    std::vector<std::vector<bool>> source_pad;
    std::vector<std::vector<Index>> target;
    std::vector<std::vector<bool>> target_pad;

    Index size() const { return static_cast<Index>(source.size()); }

    static std::vector<Index> strip(const std::vector<Index>& ids, const std::vector<bool>& pad) {
        std::vector<Index> out;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!pad[i]) out.push_back(ids[i]);
        }
        return out;
    }

    std::vector<std::vector<Index>> sources() const {
        std::vector<std::vector<Index>> out;
        for (std::size_t b = 0; b < source.size(); ++b) out.push_back(strip(source[b], source_pad[b]));
        return out;
    }

    std::vector<std::vector<Index>> targets() const {
        std::vector<std::vector<Index>> out;
        for (std::size_t b = 0; b < target.size(); ++b) out.push_back(strip(target[b], target_pad[b]));
        return out;
    }
};

}  // namespace seqdiff
