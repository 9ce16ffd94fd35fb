#include "seqdiff/data/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

std::optional<std::size_t> invalid_utf8_offset(const std::string& bytes) {
    const auto* s = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t n = bytes.size();
    std::size_t i = 0;
    while (i < n) {
        const unsigned char c = s[i];
        std::size_t extra = 0;
        std::uint32_t cp = 0;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c & 0xE0) == 0xC0) {
            extra = 1;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            extra = 2;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            extra = 3;
            cp = c & 0x07;
        } else {
            return i;
        }
        if (i + extra >= n) return i;
        for (std::size_t k = 1; k <= extra; ++k) {
            if ((s[i + k] & 0xC0) != 0x80) return i;
            cp = (cp << 6) | (s[i + k] & 0x3F);
        }
        static constexpr std::uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
        if (cp < kMin[extra] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return i;
        i += extra + 1;
    }
    return std::nullopt;
}

LoadResult parse_jsonl(const std::string& text) {
    LoadResult result;
    std::istringstream in(text);
    std::string line;
    Index number = 0;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        ++number;
        const std::size_t line_start = offset;
        offset += line.size() + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        if (auto bad = invalid_utf8_offset(line)) {
            result.errors.push_back({number, "invalid UTF-8 at byte " + std::to_string(line_start + *bad)});
            continue;
        }
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            result.errors.push_back({number, std::string("malformed JSON: ") + e.what()});
            continue;
        }
        if (!obj.is_object()) {
            result.errors.push_back({number, "expected a JSON object"});
            continue;
        }
        bool ok = true;
        for (const char* field : {"source", "target"}) {
            auto it = obj.find(field);
            if (it == obj.end() || !it->is_string()) {
                result.errors.push_back({number, std::string("missing string field \"") + field + "\""});
                ok = false;
                break;
            }
        }
        if (ok) result.pairs.push_back({obj["source"].get<std::string>(), obj["target"].get<std::string>()});
    }
    return result;
}

LoadResult load_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_jsonl(buf.str());
}

Example make_example(const Vocab& vocab, const Pair& pair, const Limits& limits) {
    if (limits.max_source_len < 2 || limits.max_target_len < 1) throw ContractError("make_example: limits too small");
    auto src = vocab.encode(pair.source);
    const auto room = static_cast<std::size_t>(limits.max_source_len - 2);
    if (src.size() > room) src.erase(src.begin(), src.end() - static_cast<std::ptrdiff_t>(room));
    Example ex;
    ex.source.push_back(token::kCls);
    ex.source.insert(ex.source.end(), src.begin(), src.end());
    ex.source.push_back(token::kEos);
    ex.target = vocab.encode(pair.target);
    if (static_cast<Index>(ex.target.size()) > limits.max_target_len) {
        ex.target.resize(static_cast<std::size_t>(limits.max_target_len));
    }
    return ex;
}

std::vector<Batch> batchify(const std::vector<Example>& examples, Index batch_size,
                            std::optional<std::uint64_t> shuffle_seed) {
    if (batch_size < 1) throw ContractError("batchify: batch size must be positive");
    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_seed) {
        std::mt19937_64 rng(*shuffle_seed);
        std::shuffle(order.begin(), order.end(), rng);
    }
    auto pad_into = [](const std::vector<Index>& row, std::size_t width, std::vector<std::vector<Index>>& ids,
                       std::vector<std::vector<bool>>& flags) {
        auto padded = row;
        std::vector<bool> f(row.size(), false);
        padded.resize(width, token::kPad);
        f.resize(width, true);
        ids.push_back(std::move(padded));
        flags.push_back(std::move(f));
    };
    std::vector<Batch> batches;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        std::size_t src_w = 0, tgt_w = 0;
        for (std::size_t k = start; k < end; ++k) {
            src_w = std::max(src_w, examples[order[k]].source.size());
            tgt_w = std::max(tgt_w, examples[order[k]].target.size());
        }
        Batch b;
        for (std::size_t k = start; k < end; ++k) {
            pad_into(examples[order[k]].source, src_w, b.source, b.source_pad);
            pad_into(examples[order[k]].target, tgt_w, b.target, b.target_pad);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

namespace {

Index uniform_index(std::mt19937_64& rng, Index lo, Index hi) {
    return std::uniform_int_distribution<Index>(lo, hi)(rng);
}

}  // namespace

std::vector<Pair> synth_task_generate(Index n, std::uint64_t seed, const SynthSpec& spec) {
    if (n < 0) throw ContractError("synth: negative example count");
    if (spec.min_records < 0 || spec.min_records > spec.max_records) throw ContractError("synth: bad record range");
    if (spec.values < 1) throw ContractError("synth: needs at least one value");
    if (spec.task == SynthTask::salient) {
        if (spec.min_salient < 0 || spec.min_salient > spec.max_salient) throw ContractError("synth: bad salient range");
        if (spec.max_salient > spec.min_records) {
            throw ContractError("synth: " + std::to_string(spec.max_salient) + " salient items exceed " +
                                std::to_string(spec.min_records) + " records");
        }
        if (spec.keys < spec.max_records) throw ContractError("synth: fewer keys than records");
    }
    std::mt19937_64 rng(seed);
    std::vector<Pair> out;
    out.reserve(static_cast<std::size_t>(n));
    for (Index e = 0; e < n; ++e) {
        const Index r = uniform_index(rng, spec.min_records, spec.max_records);
        Pair p;
        if (spec.task == SynthTask::copy) {
            for (Index i = 0; i < r; ++i) {
                if (i) p.source += ' ';
                p.source += "v" + std::to_string(uniform_index(rng, 0, spec.values - 1));
            }
            p.target = p.source;
            out.push_back(std::move(p));
            continue;
        }
        const Index k = uniform_index(rng, spec.min_salient, spec.max_salient);
        std::vector<Index> keys(static_cast<std::size_t>(spec.keys));
        std::iota(keys.begin(), keys.end(), 0);
        std::shuffle(keys.begin(), keys.end(), rng);
        std::vector<char> salient(static_cast<std::size_t>(r), 0);
        std::fill(salient.begin(), salient.begin() + k, 1);
        std::shuffle(salient.begin(), salient.end(), rng);
        for (Index i = 0; i < r; ++i) {
            const std::string value = "v" + std::to_string(uniform_index(rng, 0, spec.values - 1));
            if (i) p.source += ' ';
            if (salient[static_cast<std::size_t>(i)]) {
                p.source += "salient ";
                if (!p.target.empty()) p.target += ' ';
                p.target += value;
            }
            p.source += "k" + std::to_string(keys[static_cast<std::size_t>(i)]) + " : " + value;
        }
        out.push_back(std::move(p));
    }
    return out;
}

std::string synth_salient_answer(const std::string& source) {
    const auto words = tokenize(source);
    std::string out;
    for (std::size_t i = 0; i + 3 < words.size(); ++i) {
        if (words[i] == "salient" && words[i + 2] == ":") {
            if (!out.empty()) out += ' ';
            out += words[i + 3];
        }
    }
    return out;
}

}  // namespace seqdiff
