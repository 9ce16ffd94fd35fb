#include "seqdiff/data/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) out.push_back(std::move(word));
        word.clear();
    };
    for (unsigned char c : text) {
        if (std::isspace(c)) {
            flush();
        } else if (c < 0x80 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            word.push_back(static_cast<char>(c < 0x80 ? std::tolower(c) : c));
        }
    }
    flush();
    return out;
}

Vocab::Vocab() { add("[UNK]"); }

void Vocab::add(const std::string& word) {
    if (index_.count(word)) throw DataError("vocab: duplicate token '" + word + "'");
    index_.emplace(word, size());
    words_.push_back(word);
}

Vocab Vocab::build(const std::vector<std::string>& corpus, Index min_count) {
    std::map<std::string, Index> counts;
    for (const auto& text : corpus) {
        for (auto& w : tokenize(text)) ++counts[w];
    }
    if (counts.empty()) throw DataError("build_vocab: empty corpus");
    std::vector<std::pair<std::string, Index>> kept;
    for (auto& [w, n] : counts) {
        if (n >= min_count) kept.emplace_back(w, n);
    }
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    for (const auto& [w, n] : kept) {
        if (w != "[UNK]") v.add(w);
    }
    return v;
}

Vocab Vocab::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("vocab: cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "[UNK]") throw DataError("vocab: " + path + " must start with [UNK]");
    Vocab v;
    while (std::getline(in, line)) {
        if (line.empty()) throw DataError("vocab: empty line in " + path);
        v.add(line);
    }
    return v;
}

Vocab Vocab::from_words(const std::vector<std::string>& words) {
    if (words.empty() || words.front() != "[UNK]") throw DataError("vocab: word list must start with [UNK]");
    Vocab v;
    for (std::size_t i = 1; i < words.size(); ++i) {
        if (words[i].empty()) throw DataError("vocab: empty token");
        v.add(words[i]);
    }
    return v;
}

void Vocab::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("vocab: cannot write " + path);
    for (const auto& w : words_) out << w << '\n';
    if (!out) throw DataError("vocab: write failed for " + path);
}

Index Vocab::id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? token::kUnk : it->second;
}

std::string Vocab::word(Index id) const {
    switch (id) {
        case token::kPad: return "[PAD]";
        case token::kMask: return "[M]";
        case token::kCls: return "[CLS]";
        case token::kBos: return "[BOS]";
        case token::kEos: return "[EOS]";
        default: break;
    }
    if (id < 0 || id >= size()) throw DataError("vocab: id " + std::to_string(id) + " out of range");
    return words_[static_cast<std::size_t>(id - token::kReserved)];
}

std::vector<Index> Vocab::encode(const std::string& text) const {
    std::vector<Index> ids;
    for (const auto& w : tokenize(text)) ids.push_back(id(w));
    return ids;
}

std::string Vocab::decode(const std::vector<Index>& ids) const {
    std::string out;
    for (Index id : ids) {
        if (token::is_special(id) && id != token::kMask) continue;
        if (!out.empty()) out.push_back(' ');
        out += word(id);
    }
    return out;
}

}  // namespace seqdiff
