#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "seqdiff/core/errors.hpp"
#include "seqdiff/data/tokens.hpp"
#include "seqdiff/sampler/sampler.hpp"

namespace seqdiff {

struct TimingOptions {
    Index runs = 20;                    // timed samples; the median is reported
    Index warmup = 2;
    double min_sample_seconds = 2e-3;   // shorter workloads are repeated inside one sample
};

struct Timing {
    double seconds = 0.0;  // median per call
    Index runs = 0;
    Index repetitions = 1;  // calls per timed sample
};

/// Median wall time of `f` over opts.runs warm samples.
template <typename F>
Timing time_median(F&& f, const TimingOptions& opts = {}) {
    using clock = std::chrono::steady_clock;
    auto elapsed = [](clock::time_point a, clock::time_point b) { return std::chrono::duration<double>(b - a).count(); };
    for (Index i = 0; i < std::max<Index>(opts.warmup, 1); ++i) f();
    auto t0 = clock::now();
    f();
    const double once = elapsed(t0, clock::now());
    Timing t;
    if (once < opts.min_sample_seconds) {
        t.repetitions = static_cast<Index>(std::ceil(opts.min_sample_seconds / std::max(once, 1e-9)));
    }
    std::vector<double> samples;
    for (Index r = 0; r < std::max<Index>(opts.runs, 1); ++r) {
        t0 = clock::now();
        for (Index k = 0; k < t.repetitions; ++k) f();
        samples.push_back(elapsed(t0, clock::now()) / static_cast<double>(t.repetitions));
    }
    std::sort(samples.begin(), samples.end());
    const std::size_t n = samples.size();
    t.seconds = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
    t.runs = static_cast<Index>(n);
    return t;
}

/// Least-squares slope of log y against log x.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need two or more points");
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= double(x.size());
    my /= double(y.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

/// Source of M = L tokens for a canvas of length L.
inline std::vector<Index> bench_source(Index L, Index vocab_size) {
    std::vector<Index> src{token::kCls};
    for (Index i = 0; i + 2 < L; ++i) src.push_back(token::kReserved + i % (vocab_size - token::kReserved));
    src.push_back(token::kEos);
    return src;
}

/// Time of one denoising call on an all-[MASK] canvas of length L.
template <typename Model>
Timing time_denoise_step(const Model& model, Index L, const TimingOptions& opts = {}) {
    NoGradGuard no_grad;
    const auto src = bench_source(std::max<Index>(L, 2), model.config().vocab_size);
    auto enc = model.encode_source({src});
    auto memory = model.prepare_memory(enc, {L});
    const std::vector<Index> z(static_cast<std::size_t>(L), token::kMask);
    const auto seg = Segments::single(L);
    const std::vector<int> t{model.config().T};
    return time_median([&] { (void)model.denoise_logits(z, seg, memory, t); }, opts);
}

/// Time of a full S-step sample (encoder included) at length L.
template <typename Model>
Timing time_sample(const Model& model, Index L, int steps, const TimingOptions& opts = {}) {
    const auto src = bench_source(std::max<Index>(L, 2), model.config().vocab_size);
    SamplePlan plan;
    plan.steps = steps;
    return time_median([&] { (void)sample_batch(model, {src}, plan, {L}); }, opts);
}

struct BenchRow {
    std::string label;
    Index L = 0;
    int steps = 0;
    Timing timing;
    double multiplier = 1.0;  // time of the first model / time of this one
};

struct BenchReport {
    std::vector<BenchRow> rows;                       // sampling time per (model, L, S)
    std::map<std::string, std::vector<double>> step_seconds;  // per model, per L
    std::map<std::string, double> exponents;          // log-log slope of step time vs L
    std::map<std::string, std::map<Index, double>> step_ratios;  // time(S max) / time(S min) per L
    std::vector<Index> lengths;
    std::vector<int> steps;

    void write_csv(std::ostream& out) const;
};

template <typename Model>
struct BenchModel {
    std::string label;
    const Model* model = nullptr;
};

/// Times every (model, L, S) cell and the per-step scaling of each model.
template <typename Model>
BenchReport speed_bench(const std::vector<BenchModel<Model>>& models, const std::vector<Index>& lengths,
                        const std::vector<int>& steps, const TimingOptions& opts = {}) {
    if (models.empty() || lengths.empty() || steps.empty()) throw ContractError("speed_bench: empty grid");
    BenchReport report;
    report.lengths = lengths;
    report.steps = steps;
    std::map<std::pair<Index, int>, double> reference;
    for (const auto& m : models) {
        std::vector<double> xs;
        for (Index L : lengths) {
            report.step_seconds[m.label].push_back(time_denoise_step(*m.model, L, opts).seconds);
            xs.push_back(static_cast<double>(L));
            std::map<int, double> by_steps;
            for (int S : steps) {
                BenchRow row{m.label, L, S, time_sample(*m.model, L, S, opts), 1.0};
                auto key = std::make_pair(L, S);
                if (!reference.count(key)) reference[key] = row.timing.seconds;
                row.multiplier = reference[key] / row.timing.seconds;
                by_steps[S] = row.timing.seconds;
                report.rows.push_back(row);
            }
            if (by_steps.size() > 1) {
                report.step_ratios[m.label][L] = by_steps.rbegin()->second / by_steps.begin()->second;
            }
        }
        if (xs.size() > 1) report.exponents[m.label] = loglog_slope(xs, report.step_seconds[m.label]);
    }
    return report;
}

inline void BenchReport::write_csv(std::ostream& out) const {
    out << "model,L,S,median_seconds,runs,repetitions,multiplier\n";
    for (const auto& r : rows) {
        out << r.label << ',' << r.L << ',' << r.steps << ',' << r.timing.seconds << ',' << r.timing.runs << ','
            << r.timing.repetitions << ',' << r.multiplier << '\n';
    }
    for (const auto& [label, secs] : step_seconds) {
        for (std::size_t i = 0; i < secs.size() && i < lengths.size(); ++i) {
            out << "# step_seconds," << label << ',' << lengths[i] << ',' << secs[i] << '\n';
        }
    }
    for (const auto& [label, ratios] : step_ratios) {
        for (const auto& [L, ratio] : ratios) out << "# step_ratio," << label << ',' << L << ',' << ratio << '\n';
    }
    for (const auto& [label, e] : exponents) out << "# exponent," << label << ',' << e << '\n';
}

}  // namespace seqdiff
