#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "seqdiff/core.hpp"
#include "seqdiff/ssm/ssm.hpp"

using namespace seqdiff;

namespace {

Matrix<double> random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    Matrix<double> m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

struct ScanCase {
    Matrix<double> x, B, C, delta, A;
};

ScanCase random_case(Index L, Index D, Index N, std::mt19937_64& rng) {
    ScanCase c;
    c.x = random_matrix(L, D, rng);
    c.B = random_matrix(L, N, rng);
    c.C = random_matrix(L, N, rng);
    std::uniform_real_distribution<double> dt(0.001, 0.5);
    c.delta.resize(L, D);
    for (Index i = 0; i < c.delta.size(); ++i) c.delta.data()[i] = dt(rng);
    c.A.resize(D, N);
    for (Index d = 0; d < D; ++d)
        for (Index n = 0; n < N; ++n) c.A(d, n) = -double(n + 1);
    return c;
}

// Independent recurrence written directly from the scalar definitions.
Matrix<double> naive_scan(const ScanCase& c) {
    const Index L = c.x.rows(), D = c.x.cols(), N = c.A.cols();
    Matrix<double> h = Matrix<double>::Zero(D, N);
    Matrix<double> y(L, D);
    for (Index i = 0; i < L; ++i) {
        for (Index d = 0; d < D; ++d) {
            double acc = 0;
            for (Index n = 0; n < N; ++n) {
                const double z = c.delta(i, d) * c.A(d, n);
                const double abar = std::exp(z);
                const double bbar = (std::exp(z) - 1.0) / c.A(d, n) * c.B(i, n);
                h(d, n) = abar * h(d, n) + bbar * c.x(i, d);
                acc += c.C(i, n) * h(d, n);
            }
            y(i, d) = acc;
        }
    }
    return y;
}

}  // namespace

TEST_CASE("zoh closed form") {
    auto r = zoh_discretize<double>(-1.0, 1.0, 0.1);
    CHECK(std::abs(r.a_bar - std::exp(-0.1)) < 1e-12);
    CHECK(std::abs(r.b_bar - (1.0 - std::exp(-0.1))) < 1e-12);
    CHECK(r.a_bar == doctest::Approx(0.904837).epsilon(1e-6));
    CHECK(r.b_bar == doctest::Approx(0.095163).epsilon(1e-5));

    auto f = zoh_discretize<float>(-1.0f, 1.0f, 0.1f);
    CHECK(std::abs(f.a_bar - 0.904837418f) < 1e-6f);
    CHECK(std::abs(f.b_bar - 0.095162582f) < 1e-6f);

    CHECK_THROWS_AS(zoh_discretize<double>(-1.0, 1.0, 0.0), ContractError);
    CHECK_THROWS_AS(zoh_discretize<double>(-1.0, 1.0, -0.5), ContractError);
}

TEST_CASE("zoh small-step limit and stability") {
    for (double dt : {1e-3, 1e-5, 1e-7, 1e-9}) {
        auto r = zoh_discretize<double>(-2.0, 3.0, dt);
        CHECK(std::abs(r.b_bar / (dt * 3.0) - 1.0) < 3.0 * dt);
    }
    std::mt19937_64 rng(0);
    std::uniform_real_distribution<double> a(-50.0, -1e-3), d(1e-4, 5.0);
    for (int i = 0; i < 1000; ++i) {
        auto r = zoh_discretize<double>(a(rng), 1.0, d(rng));
        CHECK(r.a_bar > 0.0);
        CHECK(r.a_bar < 1.0);
    }
}

TEST_CASE("zoh series guard is continuous at the threshold") {
    // z = delta * A crosses -1e-4
    const double A = -1.0;
    const double below = zoh_discretize<double>(A, 1.0, 1e-4 * (1 - 1e-9)).b_bar;
    const double above = zoh_discretize<double>(A, 1.0, 1e-4 * (1 + 1e-9)).b_bar;
    CHECK(std::abs(above - below) < 1e-7);
    const float fb = zoh_discretize<float>(-1.0f, 1.0f, std::nextafter(1e-4f, 0.0f)).b_bar;
    const float fa = zoh_discretize<float>(-1.0f, 1.0f, std::nextafter(1e-4f, 1.0f)).b_bar;
    CHECK(std::abs(fa - fb) < 1e-7f);
}

TEST_CASE("zoh matches the exact ODE solution with constant input") {
    // h' = a h + b u on [0, dt], h(0) = h0; exact h(dt) = e^{a dt} h0 + (e^{a dt} - 1)/a * b u
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> a(-5.0, -0.01), dt(0.001, 2.0), v(-2.0, 2.0);
    for (int i = 0; i < 200; ++i) {
        const double av = a(rng), dv = dt(rng), bv = v(rng), h0 = v(rng), u = v(rng);
        auto r = zoh_discretize<double>(av, bv, dv);
        // integrate with a fine RK4 as the independent reference
        double h = h0;
        const int steps = 2000;
        const double step = dv / steps;
        for (int s = 0; s < steps; ++s) {
            auto f = [&](double y) { return av * y + bv * u; };
            const double k1 = f(h), k2 = f(h + 0.5 * step * k1), k3 = f(h + 0.5 * step * k2), k4 = f(h + step * k3);
            h += step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        CHECK(std::abs(r.a_bar * h0 + r.b_bar * u - h) < 1e-6);
    }
}

TEST_CASE("s6 projection examples") {
    std::mt19937_64 rng(1);
    ParameterStore<float> store;
    SsmParams<float> p(store, "s6", 5, 5, 3, rng);
    Tensor<float> zero(Matrix<float>::Zero(4, 5));
    auto proj = s6_project(zero, p);
    CHECK(proj.B.value().isZero());
    CHECK(proj.C.value().isZero());
    REQUIRE(proj.delta.rows() == 4);
    REQUIRE(proj.delta.cols() == 5);
    for (Index i = 0; i < proj.delta.size(); ++i) CHECK(proj.delta.value().data()[i] == doctest::Approx(std::log(2.0)));

    Matrix<float> xv = random_matrix(4, 5, rng, 10.0).cast<float>();
    auto p1 = s6_project(Tensor<float>(xv), p);
    auto p2 = s6_project(Tensor<float>(Matrix<float>(2.0f * xv)), p);
    CHECK((p2.B.value() - 2.0f * p1.B.value()).cwiseAbs().maxCoeff() < 1e-4f);
    CHECK((p2.C.value() - 2.0f * p1.C.value()).cwiseAbs().maxCoeff() < 1e-4f);
    CHECK((p1.delta.value().array() > 0.0f).all());

    // A = -(1..N) per channel
    auto A = p.A().value();
    for (Index d = 0; d < 5; ++d)
        for (Index n = 0; n < 3; ++n) CHECK(A(d, n) == doctest::Approx(-(n + 1.0)));
}

TEST_CASE("scan hand recurrence") {
    // a_bar = 0.5, b_bar = 1 from delta = 1, A = ln 0.5, B = A / (0.5 - 1)
    const double A = std::log(0.5);
    Matrix<double> a(1, 1), x(2, 1), B(2, 1), C(2, 1), dt(2, 1);
    a << A;
    x << 1, 1;
    B << A / -0.5, A / -0.5;
    C << 1, 1;
    dt << 1, 1;
    Matrix<double> states;
    auto y = scan_sequential(x, B, C, dt, a, Segments::single(2), &states);
    CHECK(y(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y(1, 0) == doctest::Approx(1.5).epsilon(1e-12));
    CHECK(states(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(states(1, 0) == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("scan degenerate cases") {
    std::mt19937_64 rng(2);
    auto c = random_case(1, 3, 4, rng);
    auto y = scan_sequential(c.x, c.B, c.C, c.delta, c.A);
    for (Index d = 0; d < 3; ++d) {
        double expect = 0;
        for (Index n = 0; n < 4; ++n) {
            auto r = zoh_discretize<double>(c.A(d, n), c.B(0, n), c.delta(0, d));
            expect += c.C(0, n) * r.b_bar * c.x(0, d);
        }
        CHECK(y(0, d) == doctest::Approx(expect).epsilon(1e-12));
    }

    auto z = random_case(9, 3, 4, rng);
    z.x.setZero();
    CHECK(scan_sequential(z.x, z.B, z.C, z.delta, z.A).isZero());
    CHECK(scan_parallel(z.x, z.B, z.C, z.delta, z.A).isZero());
}

TEST_CASE("scan matches naive recurrence") {
    std::mt19937_64 rng(3);
    for (Index L : {1, 5, 33}) {
        auto c = random_case(L, 3, 4, rng);
        auto ref = naive_scan(c);
        CHECK((scan_sequential(c.x, c.B, c.C, c.delta, c.A) - ref).cwiseAbs().maxCoeff() < 1e-10);
        CHECK((scan_parallel(c.x, c.B, c.C, c.delta, c.A) - ref).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("parallel scan equals sequential") {
    std::mt19937_64 rng(5);
    for (Index L : {1, 2, 3, 7, 64, 257}) {
        auto c = random_case(L, 4, 3, rng);
        Matrix<float> x = c.x.cast<float>(), B = c.B.cast<float>(), C = c.C.cast<float>(),
                      dt = c.delta.cast<float>(), A = c.A.cast<float>();
        auto seq = scan_sequential(x, B, C, dt, A);
        auto par = scan_parallel(x, B, C, dt, A);
        CHECK((seq - par).cwiseAbs().maxCoeff() <= 1e-4f);
    }
    auto one = random_case(1, 4, 3, rng);
    Matrix<float> x = one.x.cast<float>(), B = one.B.cast<float>(), C = one.C.cast<float>(),
                  dt = one.delta.cast<float>(), A = one.A.cast<float>();
    CHECK(scan_sequential(x, B, C, dt, A) == scan_parallel(x, B, C, dt, A));
}

TEST_CASE("parallel scan respects segment boundaries") {
    std::mt19937_64 rng(6);
    auto c = random_case(12, 2, 3, rng);
    auto seg = Segments::from_lengths({5, 0, 7});
    auto seq = scan_sequential(c.x, c.B, c.C, c.delta, c.A, seg);
    auto par = scan_parallel(c.x, c.B, c.C, c.delta, c.A, seg);
    CHECK((seq - par).cwiseAbs().maxCoeff() < 1e-12);
    auto tail = scan_sequential<double>(c.x.bottomRows(7), c.B.bottomRows(7), c.C.bottomRows(7),
                                        c.delta.bottomRows(7), c.A);
    CHECK((seq.bottomRows(7) - tail).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("unit transitions reduce to a prefix sum") {
    std::mt19937_64 rng(7);
    auto c = random_case(10, 2, 1, rng);
    c.A.setZero();
    c.C.setOnes();
    auto y = scan_parallel(c.x, c.B, c.C, c.delta, c.A);
    Matrix<double> running = Matrix<double>::Zero(1, 2);
    for (Index i = 0; i < 10; ++i) {
        for (Index d = 0; d < 2; ++d) running(0, d) += c.delta(i, d) * c.B(i, 0) * c.x(i, d);
        CHECK((y.row(i) - running).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("non-finite state reports the position") {
    std::mt19937_64 rng(8);
    auto c = random_case(6, 2, 2, rng);
    c.x(4, 1) = NAN;
    try {
        scan_sequential(c.x, c.B, c.C, c.delta, c.A);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("position 4") != std::string::npos);
    }
    CHECK_THROWS_AS(scan_parallel(c.x, c.B, c.C, c.delta, c.A), NumericError);
}

TEST_CASE("states stay bounded over long sequences") {
    std::mt19937_64 rng(9);
    const Index L = 100000;
    std::uniform_real_distribution<float> u(-1.0f, 1.0f), d(0.01f, 1.0f);
    Matrix<float> x(L, 2), B(L, 4), C(L, 4), dt(L, 2), A(2, 4);
    for (Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
    for (Index i = 0; i < B.size(); ++i) B.data()[i] = u(rng);
    for (Index i = 0; i < C.size(); ++i) C.data()[i] = u(rng);
    for (Index i = 0; i < dt.size(); ++i) dt.data()[i] = d(rng);
    for (Index n = 0; n < 4; ++n) A.col(n).setConstant(-float(n + 1));
    Matrix<float> states;
    auto y = scan_sequential(x, B, C, dt, A, Segments::single(L), &states);
    CHECK(y.allFinite());
    // |h| <= |B x| / (1 - a_bar) summed geometrically stays below 1 / |A|
    CHECK(states.cwiseAbs().maxCoeff() <= 1.0f + 1e-4f);
}

TEST_CASE("selective scan gradients") {
    std::mt19937_64 rng(10);
    for (auto algo : {ScanAlgorithm::sequential, ScanAlgorithm::parallel}) {
        auto c = random_case(7, 3, 2, rng);
        auto x = Tensor<double>::parameter(c.x, "x");
        auto B = Tensor<double>::parameter(c.B, "B");
        auto C = Tensor<double>::parameter(c.C, "C");
        auto dt = Tensor<double>::parameter(c.delta, "delta");
        auto a_log = Tensor<double>::parameter(random_matrix(3, 2, rng, 0.5), "a_log");
        Tensor<double> probe(random_matrix(7, 3, rng));
        auto seg = Segments::from_lengths({3, 4});
        auto report = grad_check<double>({x, B, C, dt, a_log}, [&] {
            return sum(selective_scan(x, dt, -exp(a_log), B, C, seg, algo) * probe);
        }, 1e-6, 0);
        CHECK(report.max_rel_error < 1e-6);
    }
}

TEST_CASE("selective scan gradient near the series threshold") {
    // tiny steps exercise the expansion branches of phi and its derivative
    std::mt19937_64 rng(11);
    auto c = random_case(4, 2, 2, rng);
    c.delta.setConstant(2e-5);
    auto A = Tensor<double>::parameter(c.A, "A");
    auto dt = Tensor<double>::parameter(c.delta, "delta");
    Tensor<double> x(c.x), B(c.B), C(c.C);
    auto f = [&] { return sum(selective_scan(x, dt, A, B, C, Segments::single(4))); };
    // step sizes scaled to each input's magnitude
    CHECK(grad_check<double>({dt}, f, 1e-10, 0).max_rel_error < 1e-5);
    CHECK(grad_check<double>({A}, f, 1e-4, 0).max_rel_error < 1e-5);
}

TEST_CASE("mamba block examples") {
    std::mt19937_64 rng(12);
    for (auto dir : {Direction::forward, Direction::bidirectional}) {
        ParameterStore<float> store;
        MambaBlock<float> block(store, "blk", 6, 4, 2, dir, rng);
        for (Index L : {1, 5, 13}) {
            Tensor<float> x(random_matrix(L, 6, rng).cast<float>());
            CHECK(block(x, Segments::single(L)).rows() == L);
            CHECK(block(x, Segments::single(L)).cols() == 6);
        }
        store.get("blk.out_proj.weight").value().setZero();
        Tensor<float> x(random_matrix(9, 6, rng).cast<float>());
        CHECK((block(x, Segments::single(9)).value() - x.value()).cwiseAbs().maxCoeff() < 1e-6f);
    }
}

TEST_CASE("bidirectional block is reversal-equivariant with tied parameters") {
    std::mt19937_64 rng(13);
    ParameterStore<double> store;
    const Index D = 4, E = 8;
    MambaBlock<double> block(store, "blk", D, 3, 2, Direction::bidirectional, rng);
    for (const char* part : {".to_b.weight", ".to_b.bias", ".to_c.weight", ".to_c.bias", ".to_delta.weight",
                             ".to_delta.bias", ".a_log"}) {
        store.get(std::string("blk.ssm_bwd") + part).value() = store.get(std::string("blk.ssm_fwd") + part).value();
    }
    auto& w = store.get("blk.out_proj.weight").value();
    w.bottomRows(E) = w.topRows(E);
    auto& k = store.get("blk.conv.weight").value();
    k.row(2) = k.row(0);
    k.row(3).setZero();

    const Index L = 11;
    Matrix<double> xv = random_matrix(L, D, rng);
    Matrix<double> rev = xv.colwise().reverse();
    auto y = block(Tensor<double>(xv), Segments::single(L)).value();
    auto yr = block(Tensor<double>(rev), Segments::single(L)).value();
    Matrix<double> y_back = yr.colwise().reverse();
    CHECK((y - y_back).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("mamba block gradients") {
    std::mt19937_64 rng(14);
    for (auto dir : {Direction::forward, Direction::bidirectional}) {
        ParameterStore<double> store;
        MambaBlock<double> block(store, "blk", 4, 3, 2, dir, rng);
        Tensor<double> x(random_matrix(7, 4, rng));
        Tensor<double> probe(random_matrix(7, 4, rng));
        auto seg = Segments::from_lengths({3, 4});
        auto report = grad_check<double>(store.all(), [&] { return sum(block(x, seg) * probe); }, 1e-5, 6, 3);
        INFO(report.worst_parameter, " ad=", report.worst_analytic, " fd=", report.worst_numeric);
        CHECK(report.max_rel_error < 1e-4);
    }
}
