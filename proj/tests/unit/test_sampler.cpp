#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "seqdiff/model/model.hpp"
#include "seqdiff/sampler/sampler.hpp"

using namespace seqdiff;

namespace {

ModelConfig tiny(Backbone backbone) {
    ModelConfig c;
    c.backbone = backbone;
    c.encoder_layers = 1;
    c.decoder_layers = 1;
    c.width = 8;
    c.heads = 2;
    c.state = 4;
    c.vocab_size = 30;
    c.max_source_len = 16;
    c.max_target_len = 12;
    c.T = 50;
    return c;
}

// Scores token 10 + i at position i with a confidence that grows with i.
struct LadderModel {
    using Scalar = double;
    struct Enc {};
    struct Mem {};
    ModelConfig cfg = tiny(Backbone::transformer);
    mutable int denoise_calls = 0;

    const ModelConfig& config() const { return cfg; }
    Enc encode_source(const std::vector<std::vector<Index>>&) const { return {}; }
    Mem prepare_memory(const Enc&, const std::vector<Index>&) const { return {}; }
    std::vector<std::vector<double>> predict_length(const Enc&) const {
        std::vector<double> d(static_cast<std::size_t>(cfg.max_target_len), 0.0);
        d[3] = 1.0;
        return {d};
    }
    Tensor<double> denoise_logits(const std::vector<Index>& z, const Segments& seg, const Mem&,
                                  const std::vector<int>&) const {
        ++denoise_calls;
        Matrix<double> logits = Matrix<double>::Zero(static_cast<Index>(z.size()), cfg.vocab_size);
        for (Index b = 0; b < seg.count(); ++b) {
            for (Index i = 0; i < seg.length(b); ++i) logits(seg.begin(b) + i, 10 + i) = 1.0 + 0.5 * double(i);
            // reserved ids would win if they were allowed
            for (Index i = 0; i < seg.length(b); ++i) logits(seg.begin(b) + i, token::kEos) = 100.0;
        }
        return Tensor<double>(logits);
    }
};

}  // namespace

TEST_CASE("time grid examples") {
    CHECK(make_time_grid(50, 10) == std::vector<int>{50, 45, 40, 35, 30, 25, 20, 15, 10, 5, 0});
    CHECK(make_time_grid(50, 1) == std::vector<int>{50, 0});
    auto full = make_time_grid(7, 7);
    CHECK(full == std::vector<int>{7, 6, 5, 4, 3, 2, 1, 0});
    CHECK(make_time_grid(50, 3) == std::vector<int>{50, 33, 17, 0});
    CHECK_THROWS_AS(make_time_grid(10, 11), ContractError);
    CHECK_THROWS_AS(make_time_grid(10, 0), ContractError);
    for (int T = 1; T <= 60; ++T) {
        for (int S = 1; S <= T; ++S) {
            auto g = make_time_grid(T, S);
            CHECK(g.front() == T);
            CHECK(g.back() == 0);
            CHECK(g.size() == static_cast<std::size_t>(S + 1));
            for (std::size_t j = 1; j < g.size(); ++j) CHECK(g[j] < g[j - 1]);
        }
    }
}

TEST_CASE("remask selection") {
    std::vector<double> conf{0.9, 0.2, 0.6};
    CHECK(remask_select(conf, {0, 1, 2}, 1) == std::vector<Index>{1});
    CHECK(remask_select(conf, {0, 1, 2}, 0).empty());
    CHECK(remask_select(conf, {0, 1, 2}, 3) == std::vector<Index>{0, 1, 2});
    CHECK(remask_select(conf, {0, 2}, 1) == std::vector<Index>{2});
    // ties: the lower index unmasks first
    CHECK(remask_select({0.5, 0.5, 0.5, 0.5}, {0, 1, 2, 3}, 2) == std::vector<Index>{2, 3});
    CHECK_THROWS_AS(remask_select(conf, {0, 1}, 3), ContractError);
}

TEST_CASE("masked count trajectory follows the uniform rule") {
    LadderModel model;
    SamplePlan plan;
    plan.steps = 10;
    plan.trace = true;
    auto r = sample_sequence(model, {2, 7, 4}, plan, Index(10));
    CHECK(r.masked_counts == std::vector<Index>{10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0});
    REQUIRE(r.trace.size() == 11);
    // confidence grows with position, so the last positions commit first
    for (std::size_t j = 1; j < r.trace.size(); ++j) {
        Index masked = 0;
        for (Index i = 0; i < 10; ++i) {
            const bool now = r.trace[j].canvas[static_cast<std::size_t>(i)] == token::kMask;
            const bool before = r.trace[j - 1].canvas[static_cast<std::size_t>(i)] == token::kMask;
            if (!before) CHECK(!now);  // never re-masked
            masked += now;
        }
        CHECK(masked == r.masked_counts[j]);
        for (Index i = 0; i < masked; ++i) CHECK(r.trace[j].canvas[static_cast<std::size_t>(i)] == token::kMask);
    }
    for (Index i = 0; i < 10; ++i) CHECK(r.tokens[static_cast<std::size_t>(i)] == 10 + i);
    CHECK(model.denoise_calls == 10);
}

TEST_CASE("single step fills every position at once") {
    LadderModel model;
    SamplePlan plan;
    plan.steps = 1;
    auto r = sample_sequence(model, {2, 7, 4}, plan, Index(5));
    CHECK(r.tokens == std::vector<Index>{10, 11, 12, 13, 14});
    CHECK(r.masked_counts == std::vector<Index>{5, 0});
    CHECK(model.denoise_calls == 1);
}

TEST_CASE("predicted length and empty canvases") {
    LadderModel model;
    SamplePlan plan;
    plan.length = LengthSource::predicted;
    auto r = sample_sequence(model, {2, 7, 4}, plan);
    CHECK(r.tokens.size() == 4);

    plan.length = LengthSource::reference;
    auto e = sample_sequence(model, {2, 7, 4}, plan, Index(0));
    CHECK(e.tokens.empty());
    CHECK(e.empty_length);
}

TEST_CASE("real model sampling") {
    for (auto bb : {Backbone::transformer, Backbone::mamba}) {
        Seq2SeqModel<float> m(tiny(bb), 8);
        SamplePlan plan;
        plan.steps = 5;
        const std::vector<std::vector<Index>> src{{2, 7, 8, 9, 4}, {2, 11, 4}, {2, 12, 13, 4}};
        auto a = sample_batch(m, src, plan, {6, 0, 3});
        CHECK(m.encoder_calls() == 1);
        auto b = sample_batch(m, src, plan, {6, 0, 3});
        REQUIRE(a.size() == 3);
        CHECK(a[0].tokens.size() == 6);
        CHECK(a[1].tokens.empty());
        CHECK(a[2].tokens.size() == 3);
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(a[i].tokens == b[i].tokens);
            for (Index tok : a[i].tokens) CHECK(tok >= token::kReserved);
        }
        // a batch of one matches the batched result for the same source
        auto single = sample_sequence(m, src[0], plan, Index(6));
        CHECK(single.tokens == a[0].tokens);

        plan.temperature = 1.0;
        plan.seed = 3;
        auto x = sample_batch(m, src, plan, {6, 0, 3});
        auto y = sample_batch(m, src, plan, {6, 0, 3});
        CHECK(x[0].tokens == y[0].tokens);
    }
}
