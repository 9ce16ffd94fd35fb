#pragma once

#include <string>
#include <vector>

namespace seqdiff {

/// Lowercased whitespace tokens.
std::vector<std::string> metric_tokens(const std::string& text);

/// ROUGE-N F1 in percent over clipped n-gram counts.
double rouge_n(const std::string& hyp, const std::string& ref, int n);
/// ROUGE-L F1 in percent from the longest common subsequence.
double rouge_l(const std::string& hyp, const std::string& ref);

/// BLEU in percent: clipped n-gram precisions up to max_n, add-one smoothing
/// for n >= 2, brevity penalty.
double bleu(const std::string& hyp, const std::string& ref, int max_n = 4);
/// Corpus BLEU with the counts summed over all pairs.
double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs, int max_n = 4);

struct EntropyStats {
    double mean_bits = 0.0;
    double max_bits = 0.0;  // log2 of the mean real-token count
    std::vector<double> per_example;
    long skipped = 0;  // examples with all-zero mask probability at t_ref
};

/// Entropy of p_i = P_tref(i) / sum_j P_tref(j) under the semantic schedule,
/// per target. `t_fraction` is t_ref / T.
double schedule_entropy(const std::vector<double>& salience, double t_fraction = 0.5);
EntropyStats schedule_entropy(const std::vector<std::vector<double>>& salience, double t_fraction = 0.5);

}  // namespace seqdiff
