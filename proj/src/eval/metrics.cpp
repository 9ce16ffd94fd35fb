#include "seqdiff/eval/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <sstream>

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

namespace {

using Counts = std::map<std::vector<std::string>, long>;

Counts ngrams(const std::vector<std::string>& w, int n) {
    Counts c;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= w.size(); ++i) {
        ++c[std::vector<std::string>(w.begin() + static_cast<std::ptrdiff_t>(i),
                                     w.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    }
    return c;
}

long total(const Counts& c) {
    long n = 0;
    for (const auto& [_, k] : c) n += k;
    return n;
}

long clipped_overlap(const Counts& hyp, const Counts& ref) {
    long m = 0;
    for (const auto& [g, k] : hyp) {
        auto it = ref.find(g);
        if (it != ref.end()) m += std::min(k, it->second);
    }
    return m;
}

double f1(long match, long hyp_total, long ref_total) {
    if (hyp_total == 0 && ref_total == 0) return 100.0;
    if (hyp_total == 0 || ref_total == 0 || match == 0) return 0.0;
    const double p = double(match) / double(hyp_total);
    const double r = double(match) / double(ref_total);
    return 100.0 * 2.0 * p * r / (p + r);
}

std::size_t lcs(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

std::vector<std::string> metric_tokens(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) {
        for (auto& c : w) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        out.push_back(w);
    }
    return out;
}

double rouge_n(const std::string& hyp, const std::string& ref, int n) {
    if (n < 1) throw ContractError("rouge_n: n must be positive");
    const auto h = ngrams(metric_tokens(hyp), n);
    const auto r = ngrams(metric_tokens(ref), n);
    return f1(clipped_overlap(h, r), total(h), total(r));
}

double rouge_l(const std::string& hyp, const std::string& ref) {
    const auto h = metric_tokens(hyp);
    const auto r = metric_tokens(ref);
    return f1(static_cast<long>(lcs(h, r)), static_cast<long>(h.size()), static_cast<long>(r.size()));
}

double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs, int max_n) {
    if (hyps.size() != refs.size()) throw ContractError("bleu: hypothesis and reference counts differ");
    if (max_n < 1) throw ContractError("bleu: max_n must be positive");
    std::vector<long> match(static_cast<std::size_t>(max_n), 0), count(static_cast<std::size_t>(max_n), 0);
    long hyp_len = 0, ref_len = 0;
    for (std::size_t k = 0; k < hyps.size(); ++k) {
        const auto h = metric_tokens(hyps[k]);
        const auto r = metric_tokens(refs[k]);
        hyp_len += static_cast<long>(h.size());
        ref_len += static_cast<long>(r.size());
        for (int n = 1; n <= max_n; ++n) {
            const auto hc = ngrams(h, n);
            match[static_cast<std::size_t>(n - 1)] += clipped_overlap(hc, ngrams(r, n));
            count[static_cast<std::size_t>(n - 1)] += total(hc);
        }
    }
    if (hyp_len == 0 || match[0] == 0) return 0.0;
    double log_sum = std::log(double(match[0]) / double(count[0]));
    for (int n = 2; n <= max_n; ++n) {
        const auto i = static_cast<std::size_t>(n - 1);
        log_sum += std::log(double(match[i] + 1) / double(count[i] + 1));
    }
    const double bp = hyp_len >= ref_len ? 1.0 : std::exp(1.0 - double(ref_len) / double(hyp_len));
    return 100.0 * bp * std::exp(log_sum / max_n);
}

double bleu(const std::string& hyp, const std::string& ref, int max_n) { return corpus_bleu({hyp}, {ref}, max_n); }

double schedule_entropy(const std::vector<double>& salience, double t_fraction) {
    if (!(t_fraction >= 0.0 && t_fraction <= 1.0)) throw ContractError("schedule_entropy: t_ref outside [0, T]");
    std::vector<double> p;
    double z = 0.0;
    for (double a : salience) {
        if (!(a >= 0.0 && a <= 1.0)) throw ContractError("schedule_entropy: salience outside [0, 1]");
        p.push_back(std::clamp(t_fraction - (1.0 - t_fraction) * a, 0.0, 1.0));
        z += p.back();
    }
    if (z <= 0.0) return std::nan("");
    double e = 0.0;
    for (double v : p) {
        if (v > 0.0) e -= (v / z) * std::log2(v / z);
    }
    return e;
}

EntropyStats schedule_entropy(const std::vector<std::vector<double>>& salience, double t_fraction) {
    EntropyStats s;
    double tokens = 0.0;
    for (const auto& a : salience) {
        const double e = schedule_entropy(a, t_fraction);
        if (std::isnan(e)) {
            ++s.skipped;
            continue;
        }
        s.per_example.push_back(e);
        s.mean_bits += e;
        tokens += static_cast<double>(a.size());
    }
    if (!s.per_example.empty()) {
        const double n = static_cast<double>(s.per_example.size());
        s.mean_bits /= n;
        s.max_bits = std::log2(tokens / n);
    }
    return s;
}

}  // namespace seqdiff
