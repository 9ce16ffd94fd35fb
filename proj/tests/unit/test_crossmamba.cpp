#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "seqdiff/core.hpp"
#include "seqdiff/crossmamba/crossmamba.hpp"

using namespace seqdiff;

namespace {

Matrix<double> random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix<double> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

double softplus_ref(double v) { return std::log1p(std::exp(v)); }

}  // namespace

TEST_CASE("compression stride") {
    CHECK(compression_stride(64, 16) == 4);
    CHECK(compression_stride(65, 16) == 5);
    CHECK(compression_stride(10, 16) == 1);
    CHECK_THROWS_AS(compression_stride(0, 4), ContractError);
}

TEST_CASE("alignment with stride 1 and M = L is the identity") {
    std::mt19937_64 rng(1);
    ParameterStore<double> store;
    Compressor<double> conv(store, "comp", 3, 1, rng);
    conv.weight.value() = Matrix<double>::Identity(3, 3);
    Tensor<double> e(random_matrix(5, 3, rng));
    auto out = align_encoder_states(e, Segments::single(5), {5}, conv);
    CHECK(out.value() == e.value());
}

TEST_CASE("alignment pads short and trims long sequences") {
    Matrix<double> rows(12, 2);
    for (Index i = 0; i < 12; ++i) rows.row(i).setConstant(double(i + 1));
    Tensor<double> packed(rows);
    // segment 0 has N' = 4 rows, segment 1 has N' = 8 rows
    auto seg = Segments::from_lengths({4, 8});
    auto out = fit_to_lengths(packed, seg, {6, 6}).value();
    REQUIRE(out.rows() == 12);
    for (Index i = 0; i < 4; ++i) CHECK(out(i, 0) == double(i + 1));
    CHECK(out.row(4).isZero());
    CHECK(out.row(5).isZero());
    // rows 3..8 of the second segment (1-based) are its global rows 7..12
    for (Index i = 0; i < 6; ++i) CHECK(out(6 + i, 0) == double(4 + 3 + i));

    CHECK_THROWS_AS(fit_to_lengths(packed, seg, {6, 0}), ContractError);
    CHECK_THROWS_AS(fit_to_lengths(packed, seg, {6}), ContractError);
}

TEST_CASE("aligned length is exactly L for every (M, L)") {
    std::mt19937_64 rng(2);
    for (Index stride : {1, 2, 3, 5}) {
        ParameterStore<float> store;
        Compressor<float> conv(store, "c", 4, stride, rng);
        for (Index M = 1; M <= 12; ++M) {
            for (Index L = 1; L <= 9; ++L) {
                Tensor<float> e(random_matrix(M, 4, rng).cast<float>());
                auto out = align_encoder_states(e, Segments::single(M), {L}, conv);
                CHECK(out.rows() == L);
                CHECK(out.cols() == 4);
            }
        }
    }
}

TEST_CASE("cross scan is zero without encoder signal") {
    std::mt19937_64 rng(3);
    ParameterStore<double> store;
    CrossParams<double> p(store, "cp", 4, 3, rng);
    Tensor<double> x(random_matrix(6, 5, rng));
    Tensor<double> e(Matrix<double>::Zero(6, 4));
    Tensor<double> A(-Matrix<double>::Ones(5, 3));
    auto y = cross_scan(x, e, p, A, Segments::single(6));
    CHECK(y.value().isZero());
    CHECK_THROWS_AS(cross_scan(x, Tensor<double>(Matrix<double>::Zero(5, 4)), p, A, Segments::single(6)),
                    ContractError);
}

TEST_CASE("cross scan single step") {
    std::mt19937_64 rng(4);
    ParameterStore<double> store;
    CrossParams<double> p(store, "cp", 2, 1, rng);
    Tensor<double> x(random_matrix(1, 1, rng));
    Tensor<double> e(random_matrix(1, 2, rng));
    Tensor<double> A(Matrix<double>::Constant(1, 1, -1.5));
    const double Bc = (e.value() * p.to_b.weight.value())(0, 0);
    const double Cc = (e.value() * p.to_c.weight.value())(0, 0);
    const double dt = softplus_ref((e.value() * p.to_delta.weight.value())(0, 0));
    const double bbar = (std::exp(-1.5 * dt) - 1.0) / -1.5 * Bc;
    auto y = cross_scan(x, e, p, A, Segments::single(1));
    CHECK(y.item() == doctest::Approx(Cc * bbar * x.item()).epsilon(1e-12));
}

TEST_CASE("cross scan matches a hand-rolled recurrence") {
    std::mt19937_64 rng(5);
    const Index L = 7, D = 3, Denc = 4, N = 2;
    ParameterStore<double> store;
    CrossParams<double> p(store, "cp", Denc, N, rng);
    for (auto& t : store.all()) {
        Tensor<double> h = t;
        h.value() = random_matrix(t.rows(), t.cols(), rng, 0.5);
    }
    Matrix<double> x = random_matrix(L, D, rng);
    Matrix<double> e = random_matrix(L, Denc, rng);
    Matrix<double> A(D, N);
    A << -1, -2, -0.5, -3, -1.2, -0.7;
    auto y = cross_scan(Tensor<double>(x), Tensor<double>(e), p, Tensor<double>(A), Segments::single(L));

    const Matrix<double> wb = p.to_b.weight.value(), bb = p.to_b.bias.value();
    const Matrix<double> wc = p.to_c.weight.value(), bc = p.to_c.bias.value();
    const Matrix<double> wd = p.to_delta.weight.value(), bd = p.to_delta.bias.value();
    Matrix<double> h = Matrix<double>::Zero(D, N);
    for (Index i = 0; i < L; ++i) {
        double dt = bd(0, 0);
        for (Index k = 0; k < Denc; ++k) dt += e(i, k) * wd(k, 0);
        dt = softplus_ref(dt);
        for (Index d = 0; d < D; ++d) {
            double out = 0;
            for (Index n = 0; n < N; ++n) {
                double Bn = bb(0, n), Cn = bc(0, n);
                for (Index k = 0; k < Denc; ++k) {
                    Bn += e(i, k) * wb(k, n);
                    Cn += e(i, k) * wc(k, n);
                }
                const double abar = std::exp(dt * A(d, n));
                const double bbar = (abar - 1.0) / A(d, n) * Bn;
                h(d, n) = abar * h(d, n) + bbar * x(i, d);
                out += Cn * h(d, n);
            }
            CHECK(y.value()(i, d) == doctest::Approx(out).epsilon(1e-10));
        }
    }
}

TEST_CASE("fuse branches selects and averages") {
    std::mt19937_64 rng(6);
    ParameterStore<double> store;
    Linear<double> fusion(store, "fusion", 6, 3, rng);
    Tensor<double> y(random_matrix(4, 3, rng));
    Tensor<double> yc(random_matrix(4, 3, rng));
    Matrix<double> I = Matrix<double>::Identity(3, 3);
    Matrix<double>& W = store.get("fusion.weight").value();

    W << I, Matrix<double>::Zero(3, 3);
    CHECK(fuse_branches(y, yc, fusion).value() == y.value());
    W << Matrix<double>::Zero(3, 3), I;
    CHECK(fuse_branches(y, yc, fusion).value() == yc.value());
    W << 0.5 * I, 0.5 * I;
    CHECK((fuse_branches(y, yc, fusion).value() - 0.5 * (y.value() + yc.value())).cwiseAbs().maxCoeff() < 1e-15);

    CHECK_THROWS_AS(fuse_branches(y, Tensor<double>(random_matrix(3, 3, rng)), fusion), ContractError);
}

TEST_CASE("cross-free fusion reduces to the bidirectional self block") {
    std::mt19937_64 rng(7);
    ParameterStore<double> store;
    const Index D = 4;
    CrossMambaBlock<double> block(store, "cm", D, 3, 2, rng);
    Matrix<double>& W = store.get("cm.fusion.weight").value();
    W << Matrix<double>::Identity(D, D), Matrix<double>::Zero(D, D);
    auto seg = Segments::from_lengths({5, 3});
    Tensor<double> x(random_matrix(8, D, rng));
    Tensor<double> e(random_matrix(8, D, rng));
    auto out = block(x, e, seg).value();
    auto self_only = block.self_branch()(x, seg).value();
    CHECK((out - self_only).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("conditioning is live and shapes hold") {
    std::mt19937_64 rng(8);
    ParameterStore<float> store;
    const Index D = 6;
    CrossMambaBlock<float> block(store, "cm", D, 4, 2, rng);
    Compressor<float> conv(store, "comp", D, 2, rng);
    for (Index M : {1, 4, 9}) {
        for (Index L : {1, 3, 7}) {
            Tensor<float> x(random_matrix(L, D, rng).cast<float>());
            Tensor<float> e1(random_matrix(M, D, rng).cast<float>());
            Tensor<float> e2(random_matrix(M, D, rng).cast<float>());
            auto a1 = align_encoder_states(e1, Segments::single(M), {L}, conv);
            auto a2 = align_encoder_states(e2, Segments::single(M), {L}, conv);
            auto y1 = block(x, a1, Segments::single(L));
            auto y2 = block(x, a2, Segments::single(L));
            CHECK(y1.rows() == L);
            CHECK(y1.cols() == D);
            // with M < L the tail is zero-padded, but the kept prefix always differs
            CHECK((y1.value() - y2.value()).cwiseAbs().maxCoeff() > 1e-6f);
        }
    }
}

TEST_CASE("encoder parameters receive gradient through the cross branch") {
    std::mt19937_64 rng(9);
    ParameterStore<float> store;
    const Index D = 4;
    Linear<float> encoder(store, "enc", D, D, rng);
    Compressor<float> conv(store, "comp", D, 2, rng);
    CrossMambaBlock<float> block(store, "cm", D, 3, 2, rng);
    Tensor<float> src(random_matrix(10, D, rng).cast<float>());
    Tensor<float> x(random_matrix(5, D, rng).cast<float>());
    auto aligned = align_encoder_states(encoder(src), Segments::single(10), {5}, conv);
    backward(sum(block(x, aligned, Segments::single(5)) * block(x, aligned, Segments::single(5))));
    CHECK(encoder.weight.grad().cwiseAbs().maxCoeff() > 0.0f);
    CHECK(conv.weight.grad().cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("crossmamba block gradients") {
    std::mt19937_64 rng(10);
    ParameterStore<double> store;
    const Index D = 4;
    Compressor<double> conv(store, "comp", D, 2, rng);
    CrossMambaBlock<double> block(store, "cm", D, 2, 2, rng);
    auto e = store.add("e", random_matrix(9, D, rng));
    Tensor<double> x(random_matrix(7, D, rng));
    Tensor<double> probe(random_matrix(7, D, rng));
    auto e_seg = Segments::from_lengths({6, 3});
    auto seg = Segments::from_lengths({3, 4});
    auto report = grad_check<double>(store.all(), [&] {
        auto aligned = align_encoder_states(e, e_seg, {3, 4}, conv);
        return sum(block(x, aligned, seg) * probe);
    }, 1e-5, 4, 1);
    INFO(report.worst_parameter, " ad=", report.worst_analytic, " fd=", report.worst_numeric);
    CHECK(report.max_rel_error < 1e-3);
}
