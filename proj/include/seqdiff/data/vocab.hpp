#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "seqdiff/core/tensor.hpp"
#include "seqdiff/data/tokens.hpp"

namespace seqdiff {

/// Lowercased words; every ASCII punctuation character is its own token.
std::vector<std::string> tokenize(const std::string& text);

/// Word-level vocabulary. Ids below token::kReserved are reserved; id
/// token::kUnk is "[UNK]" and is the first entry of the vocab file.
class Vocab {
public:
    Vocab();

    /// Tokens seen at least `min_count` times, most frequent first (ties by
    /// spelling). Throws DataError on an empty corpus.
    static Vocab build(const std::vector<std::string>& corpus, Index min_count = 1);

    /// One token per line; line k holds id token::kReserved + k.
    static Vocab load(const std::string& path);
    /// Inverse of words(); the list must start with "[UNK]".
    static Vocab from_words(const std::vector<std::string>& words);
    void save(const std::string& path) const;

    Index size() const { return token::kReserved + static_cast<Index>(words_.size()); }
    Index id(const std::string& word) const;
    bool contains(const std::string& word) const { return index_.count(word) != 0; }
    /// Display form of an id; [MASK] renders as "[M]".
    std::string word(Index id) const;

    std::vector<Index> encode(const std::string& text) const;
    /// Joins non-special tokens with single spaces; [MASK] shows as "[M]".
    std::string decode(const std::vector<Index>& ids) const;

    const std::vector<std::string>& words() const { return words_; }
    bool operator==(const Vocab& other) const { return words_ == other.words_; }

private:
    void add(const std::string& word);

    std::vector<std::string> words_;  // words_[k] has id kReserved + k
    std::unordered_map<std::string, Index> index_;
};

}  // namespace seqdiff
