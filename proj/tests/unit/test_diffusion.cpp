#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <random>

#include "seqdiff/core.hpp"
#include "seqdiff/diffusion/objective.hpp"
#include "seqdiff/diffusion/schedule.hpp"

using namespace seqdiff;

namespace {

// Chain product e_x Q_1 ... Q_t for one position, [MASK] in the last column.
Matrix<double> chain(const ScheduleSpec& spec, int t, Index i, Index V) {
    Matrix<double> P = Matrix<double>::Identity(V + 1, V + 1);
    for (int s = 1; s <= t; ++s) P = P * transition_matrix(spec, s, i, V);
    return P;
}

Batch make_batch(const std::vector<std::vector<Index>>& src, const std::vector<std::vector<Index>>& tgt) {
    Batch b;
    auto pad_all = [](const std::vector<std::vector<Index>>& rows, std::vector<std::vector<Index>>& out,
                      std::vector<std::vector<bool>>& flags) {
        std::size_t width = 0;
        for (const auto& r : rows) width = std::max(width, r.size());
        for (const auto& r : rows) {
            auto padded = r;
            std::vector<bool> f(r.size(), false);
            padded.resize(width, token::kPad);
            f.resize(width, true);
            out.push_back(padded);
            flags.push_back(f);
        }
    };
    pad_all(src, b.source, b.source_pad);
    pad_all(tgt, b.target, b.target_pad);
    return b;
}

// Reverse model that always knows the clean target.
struct OracleModel {
    using Scalar = double;
    struct Enc {
        Tensor<double> cls;
    };
    struct Sem {
        std::vector<std::vector<double>> scores;
        Tensor<double> cls;
    };
    struct Mem {};

    std::vector<Index> truth;  // packed targets in batch order
    Index vocab = 8;
    double margin = 1e4;
    Matrix<double> cls_source = Matrix<double>::Ones(2, 3);
    Matrix<double> cls_target = Matrix<double>::Ones(2, 3);
    double uniform_salience = 0.5;

    Enc encode_source(const std::vector<std::vector<Index>>&) const { return {Tensor<double>(cls_source)}; }
    Sem target_semantics(const std::vector<std::vector<Index>>& targets) const {
        Sem s;
        for (const auto& t : targets) s.scores.emplace_back(t.size(), uniform_salience);
        s.cls = Tensor<double>(cls_target);
        return s;
    }
    Mem prepare_memory(const Enc&, const std::vector<Index>&) const { return {}; }
    Tensor<double> denoise_logits(const std::vector<Index>& z, const Segments&, const Mem&,
                                  const std::vector<int>&) const {
        Matrix<double> logits = Matrix<double>::Zero(static_cast<Index>(z.size()), vocab);
        for (std::size_t i = 0; i < z.size(); ++i) logits(static_cast<Index>(i), truth[i]) = margin;
        return Tensor<double>(logits, true);
    }
    Tensor<double> length_loss(const Enc&, const std::vector<Index>&) const { return Tensor<double>::scalar(0.0); }
};

}  // namespace

TEST_CASE("mask probability examples") {
    for (double a : {0.0, 0.3, 1.0}) {
        CHECK(mask_prob(ScheduleKind::semantic, 10, 0, a) == 0.0);
        CHECK(mask_prob(ScheduleKind::semantic, 10, 10, a) == 1.0);
    }
    CHECK(mask_prob(ScheduleKind::semantic, 10, 2, 0.5) == 0.0);
    CHECK(mask_prob(ScheduleKind::semantic, 10, 5, 0.5) == doctest::Approx(0.25));
    CHECK(mask_prob(ScheduleKind::uniform, 50, 25) == doctest::Approx(0.5));
    CHECK_THROWS_AS(mask_prob(ScheduleKind::semantic, 10, 5, 1.5), ContractError);
    CHECK_THROWS_AS(mask_prob(ScheduleKind::semantic, 10, 5, -0.1), ContractError);
    CHECK_THROWS_AS(mask_prob(ScheduleKind::uniform, 10, 11), ContractError);
}

TEST_CASE("mask probability is monotone and salient tokens wait") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        const double a = u(rng);
        const int T = 1 + trial % 60;
        for (int t = 1; t <= T; ++t) {
            CHECK(mask_prob(ScheduleKind::semantic, T, t, a) >= mask_prob(ScheduleKind::semantic, T, t - 1, a));
        }
    }
    for (int T : {8, 10, 50}) {
        for (int t = 0; 2 * t <= T; ++t) CHECK(mask_prob(ScheduleKind::semantic, T, t, 1.0) == 0.0);
    }
}

TEST_CASE("forward noise endpoints and padding") {
    std::mt19937_64 rng(2);
    std::vector<Index> x{7, 8, 9, 10, 0, 0};
    std::vector<bool> pad{false, false, false, false, true, true};
    auto spec = ScheduleSpec::uniform(10);
    auto z0 = forward_noise(x, pad, 0, spec, rng);
    CHECK(z0.tokens == x);
    auto zT = forward_noise(x, pad, 10, spec, rng);
    for (std::size_t i = 0; i < 4; ++i) CHECK(zT.tokens[i] == token::kMask);
    CHECK(zT.tokens[4] == token::kPad);
    CHECK(zT.tokens[5] == token::kPad);
    CHECK(zT.masked_count() == 4);

    CHECK_THROWS_AS(forward_noise(x, pad, 11, spec, rng), ContractError);
    CHECK_THROWS_AS(forward_noise(std::vector<Index>{7, token::kMask}, {}, 3, spec, rng), ContractError);
}

TEST_CASE("forward noise is seeded") {
    std::vector<Index> x(20, 9);
    auto spec = ScheduleSpec::uniform(10);
    std::mt19937_64 a(5), b(5);
    CHECK(forward_noise(x, {}, 4, spec, a).tokens == forward_noise(x, {}, 4, spec, b).tokens);
}

TEST_CASE("empirical mask rate at T/2") {
    std::mt19937_64 rng(3);
    auto spec = ScheduleSpec::uniform(50);
    std::vector<Index> x{9};
    int hits = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) hits += forward_noise(x, {}, 25, spec, rng).masked(0) ? 1 : 0;
    CHECK(std::abs(hits / double(n) - 0.5) < 0.01);
}

TEST_CASE("transition matrix examples") {
    auto spec = ScheduleSpec::uniform(2);
    auto Q1 = transition_matrix(spec, 1, 0, 4);
    auto Q2 = transition_matrix(spec, 2, 0, 4);
    for (const auto* Q : {&Q1, &Q2}) {
        for (Index r = 0; r < 5; ++r) CHECK(Q->row(r).sum() == doctest::Approx(1.0));
        CHECK((*Q)(4, 4) == 1.0);
        CHECK((*Q).row(4).head(4).isZero());
    }
    CHECK(Q1(0, 4) == doctest::Approx(0.5));
    CHECK(Q2(0, 4) == doctest::Approx(1.0));
    auto P1 = Q1;
    auto P2 = Q1 * Q2;
    CHECK(P1(2, 4) == doctest::Approx(0.5));
    CHECK(P2(2, 4) == doctest::Approx(1.0));

    CHECK_THROWS_AS(transition_matrix(0.6, 0.4, 4), MonotonicityError);
    CHECK(step_beta(1.0, 1.0) == 1.0);
}

TEST_CASE("chain product reproduces the semantic marginals") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> a(6);
    for (auto& v : a) v = u(rng);
    auto spec = ScheduleSpec::semantic(8, a);
    for (Index i = 0; i < 6; ++i) {
        for (int t = 0; t <= 8; ++t) {
            CHECK(chain(spec, t, i, 5)(1, 5) == doctest::Approx(mask_prob(spec, t, i)).epsilon(1e-12));
        }
    }
}

TEST_CASE("empirical marginals match the chain product") {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> a(6);
    for (auto& v : a) v = u(rng);
    const std::vector<Index> x{5, 6, 7, 8, 9, 5};
    for (const auto& spec : {ScheduleSpec::uniform(8), ScheduleSpec::semantic(8, a)}) {
        for (int t : {1, 3, 6}) {
            const int n = 20000;
            std::vector<int> count(6, 0);
            for (int s = 0; s < n; ++s) {
                auto z = forward_noise(x, {}, t, spec, rng);
                for (Index i = 0; i < 6; ++i) count[static_cast<std::size_t>(i)] += z.masked(i) ? 1 : 0;
            }
            for (Index i = 0; i < 6; ++i) {
                const double p = chain(spec, t, i, 5)(0, 5);
                // total variation over {x, [MASK]} equals |difference| of the mask mass
                CHECK(std::abs(count[static_cast<std::size_t>(i)] / double(n) - p) < 0.02);
            }
        }
    }
}

TEST_CASE("posterior examples") {
    auto p = posterior_from_keep(true, 0.8, 0.5);
    CHECK(p.p_token == doctest::Approx(0.6));
    CHECK(p.p_mask == doctest::Approx(0.4));
    auto q = posterior_from_keep(true, 1.0, 0.3);
    CHECK(q.p_token == doctest::Approx(1.0));
    CHECK(q.p_mask == doctest::Approx(0.0));
    auto r = posterior_from_keep(true, 0.4, 0.4);
    CHECK(r.p_token == doctest::Approx(0.0));
    CHECK(r.p_mask == doctest::Approx(1.0));
    CHECK(posterior_from_keep(false, 0.4, 0.2).p_token == 1.0);
    CHECK_THROWS_AS(posterior_from_keep(true, 1.0, 1.0), ContractError);

    auto spec = ScheduleSpec::uniform(10);
    auto s = posterior(spec, true, 3, 5, 0);
    CHECK(s.p_token == doctest::Approx(0.4));
    CHECK_THROWS_AS(posterior(spec, true, 5, 5, 0), ContractError);
}

TEST_CASE("posterior agrees with Bayes on the chain") {
    // q(z_s = x | z_t = M, x) = q(z_s = x) q(z_t = M | z_s = x) / q(z_t = M)
    std::vector<double> a{0.0, 0.2, 0.9};
    auto spec = ScheduleSpec::semantic(8, a);
    for (Index i = 0; i < 3; ++i) {
        for (int t = 1; t <= 8; ++t) {
            for (int s = 0; s < t; ++s) {
                const double pt = mask_prob(spec, t, i);
                if (pt == 0.0) continue;
                Matrix<double> step = Matrix<double>::Identity(2, 2);
                for (int r = s + 1; r <= t; ++r) step = step * transition_matrix(spec, r, i, 1);
                const double bayes = (1.0 - mask_prob(spec, s, i)) * step(0, 1) / pt;
                CHECK(posterior(spec, true, s, t, i).p_token == doctest::Approx(bayes).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("expected first-mask time grows with salience") {
    // enumerate every mask/keep trajectory over T = 8 steps
    const int T = 8;
    auto expected_first = [&](double a) {
        auto spec = ScheduleSpec::semantic(T, {a});
        double e = 0.0;
        for (int bits = 0; bits < (1 << T); ++bits) {
            double p = 1.0;
            bool absorbed = false;
            int first = -1;
            for (int t = 1; t <= T; ++t) {
                const bool m = (bits >> (t - 1)) & 1;
                const double beta = step_beta(spec, t, 0);
                if (absorbed) {
                    p *= m ? 1.0 : 0.0;
                } else {
                    p *= m ? beta : 1.0 - beta;
                    if (m) {
                        absorbed = true;
                        first = t;
                    }
                }
            }
            if (p > 0) e += p * first;
        }
        return e;
    };
    double prev = expected_first(0.0);
    for (int k = 1; k <= 20; ++k) {
        const double cur = expected_first(k / 20.0);
        CHECK(cur >= prev - 1e-12);
        prev = cur;
    }
    CHECK(expected_first(1.0) > T / 2.0);
}

TEST_CASE("vb loss examples") {
    const Index V = 7;
    // uniform model, fully masked single position, T = 1
    auto spec = ScheduleSpec::uniform(1);
    const double w = absorbing_kl_weight(spec, true, 1, 0);
    CHECK(w == 1.0);
    Tensor<double> logits(Matrix<double>::Zero(1, V));
    CHECK(vb_loss(logits, {3}, {w}, 1, 1).item() == doctest::Approx(std::log(double(V))));

    Matrix<double> sharp = Matrix<double>::Constant(2, V, -1e4);
    sharp(0, 3) = 1e4;
    sharp(1, 5) = 1e4;
    auto spec10 = ScheduleSpec::uniform(10);
    std::vector<double> ws{absorbing_kl_weight(spec10, true, 4, 0), absorbing_kl_weight(spec10, true, 4, 1)};
    CHECK(vb_loss(Tensor<double>(sharp), {3, 5}, ws, 10, 2).item() == doctest::Approx(0.0));
    CHECK(absorbing_kl_weight(spec10, false, 4, 0) == 0.0);

    std::mt19937_64 rng(8);
    std::normal_distribution<double> g;
    Matrix<double> rnd(4, V);
    for (Index i = 0; i < rnd.size(); ++i) rnd.data()[i] = g(rng);
    CHECK(vb_loss(Tensor<double>(rnd), {0, 1, 2, 3}, {0.3, 0.0, 1.0, 0.5}, 10, 4).item() >= 0.0);

    Matrix<double> bad = rnd;
    bad(1, 1) = NAN;
    CHECK_THROWS_AS(vb_loss(Tensor<double>(bad), {0, 1, 2, 3}, {0.3, 0.0, 1.0, 0.5}, 10, 4), NumericError);
    CHECK_NOTHROW(assert_prior_term_vanishes(ScheduleSpec::semantic(8, {0.0, 1.0}), 2));
}

TEST_CASE("uniform schedule reweighting is one over t") {
    auto spec = ScheduleSpec::uniform(50);
    for (int t = 1; t <= 50; ++t) CHECK(absorbing_kl_weight(spec, true, t, 0) == doctest::Approx(1.0 / t));
}

TEST_CASE("similarity loss examples") {
    Tensor<double> c(Matrix<double>::Constant(1, 3, 2.0));
    Matrix<double> e1 = Matrix<double>::Zero(1, 3), e2 = Matrix<double>::Zero(1, 3);
    e1(0, 0) = 1;
    e2(0, 1) = 1;
    CHECK(similarity_loss(c, c).item() == doctest::Approx(0.0));
    CHECK(similarity_loss(Tensor<double>(e1), Tensor<double>(e2)).item() == doctest::Approx(1.0));
    CHECK(similarity_loss(c, -c).item() == doctest::Approx(2.0));
    bool degenerate = false;
    CHECK(similarity_loss(c, Tensor<double>(Matrix<double>::Zero(1, 3)), true, &degenerate).item() == 1.0);
    CHECK(degenerate);
}

TEST_CASE("similarity loss detach contract") {
    std::mt19937_64 rng(9);
    ParameterStore<double> store;
    Linear<double> source_branch(store, "src", 3, 4, rng), target_branch(store, "tgt", 3, 4, rng);
    Tensor<double> x(Matrix<double>::Random(2, 3));
    backward(similarity_loss(source_branch(x), target_branch(x)));
    CHECK(target_branch.weight.grad().isZero(0.0));
    CHECK(target_branch.bias.grad().isZero(0.0));
    CHECK(source_branch.weight.grad().cwiseAbs().maxCoeff() > 0.0);

    store.zero_grad();
    backward(similarity_loss(source_branch(x), target_branch(x), false));
    CHECK(target_branch.weight.grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("total loss with an oracle model") {
    OracleModel model;
    auto batch = make_batch({{2, 6, 7, 4}, {2, 5, 4}}, {{6, 7, 5}, {7}});
    model.truth = {6, 7, 5, 7};
    for (auto kind : {ScheduleKind::uniform, ScheduleKind::semantic}) {
        LossOptions opt;
        opt.kind = kind;
        opt.T = 10;
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto terms = total_loss(model, batch, opt, seed);
            CHECK(terms.vb >= 0.0);
            CHECK(terms.ce >= 0.0);
            CHECK(terms.cls >= 0.0);
            CHECK(terms.total.item() == doctest::Approx(0.0));
        }
    }
}

TEST_CASE("total loss term gating") {
    OracleModel model;
    model.margin = 1.0;
    model.cls_target(0, 0) = -3.0;
    auto batch = make_batch({{2, 6, 4}, {2, 5, 4}}, {{6, 7, 5, 6}, {7, 6}});
    model.truth = {6, 7, 5, 6, 7, 6};
    LossOptions opt;
    opt.T = 10;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        opt.kind = ScheduleKind::uniform;
        auto u = total_loss(model, batch, opt, seed);
        CHECK(u.cls == 0.0);
        CHECK(u.total.item() == u.vb + u.ce);

        opt.kind = ScheduleKind::semantic;
        auto s = total_loss(model, batch, opt, seed);
        CHECK(s.cls > 0.0);
        opt.disable_similarity_loss = true;
        CHECK(total_loss(model, batch, opt, seed).cls == 0.0);
        opt.disable_similarity_loss = false;
    }
    auto again = total_loss(model, batch, opt, 3);
    CHECK(again.t == total_loss(model, batch, opt, 3).t);
}
