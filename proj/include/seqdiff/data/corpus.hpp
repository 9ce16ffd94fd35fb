#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "seqdiff/data/batch.hpp"
#include "seqdiff/data/vocab.hpp"

namespace seqdiff {

struct Pair {
    std::string source;
    std::string target;
};

struct LineError {
    Index line = 0;  // 1-based
    std::string message;
};

struct LoadResult {
    std::vector<Pair> pairs;
    std::vector<LineError> errors;  // malformed lines, skipped
};

/// Reads {"source": str, "target": str} objects, one per line. Blank lines are
/// ignored; malformed lines are skipped and reported. Throws DataError when
/// the file cannot be read.
LoadResult load_jsonl(const std::string& path);
LoadResult parse_jsonl(const std::string& text);

/// Byte offset of the first invalid UTF-8 sequence, if any.
std::optional<std::size_t> invalid_utf8_offset(const std::string& bytes);

struct Limits {
    Index max_source_len = 64;  // including [CLS] and [EOS]
    Index max_target_len = 16;
};

/// Source: [CLS] + tokens + [EOS], dropping the earliest tokens when too
/// long. Target: tokens, dropping the latest when too long.
Example make_example(const Vocab& vocab, const Pair& pair, const Limits& limits);

/// Right-padded batches. A seed shuffles the example order first.
std::vector<Batch> batchify(const std::vector<Example>& examples, Index batch_size,
                            std::optional<std::uint64_t> shuffle_seed = std::nullopt);

enum class SynthTask { salient, copy };

struct SynthSpec {
    SynthTask task = SynthTask::salient;
    Index min_records = 4;  // copy task: source length range in tokens
    Index max_records = 10;
    Index min_salient = 1;
    Index max_salient = 4;
    Index keys = 20;
    Index values = 60;
};

/// Salient extraction: the source lists "key : value" records in random
/// order, some prefixed by the word "salient"; the target is the values of the
/// salient records in source order. Copy: target equals source.
std::vector<Pair> synth_task_generate(Index n, std::uint64_t seed, const SynthSpec& spec);

/// Exact answer of the salient-extraction task for a source text.
std::string synth_salient_answer(const std::string& source);

}  // namespace seqdiff
