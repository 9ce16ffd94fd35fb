#pragma once

#include <cmath>
#include <memory>
#include <random>
#include <string>

#include "seqdiff/core/layers.hpp"
#include "seqdiff/core/ops.hpp"

namespace seqdiff {

/// |Δ·A| below which the ZOH input coefficient uses its series expansion.
inline constexpr double kZohSeriesThreshold = 1e-4;

namespace detail {

// (e^z - 1) / z
template <typename Scalar>
Scalar zoh_phi(Scalar z) {
    if (std::abs(z) < Scalar(kZohSeriesThreshold)) return Scalar(1) + z / Scalar(2);
    return std::expm1(z) / z;
}

// d/dz (e^z - 1) / z = (z e^z - e^z + 1) / z^2
template <typename Scalar>
Scalar zoh_dphi(Scalar z) {
    if (std::abs(z) < Scalar(1e-2)) return Scalar(0.5) + z / Scalar(3) + z * z / Scalar(8);
    return (z * std::exp(z) - std::expm1(z)) / (z * z);
}

}  // namespace detail

template <typename Scalar>
struct Discretized {
    Scalar a_bar;
    Scalar b_bar;
};

/// Zero-order-hold discretization of h' = a h + b x over a step of length
/// `delta`: a_bar = exp(delta a), b_bar = (delta a)^-1 (exp(delta a) - 1) delta b.
template <typename Scalar>
Discretized<Scalar> zoh_discretize(Scalar a, Scalar b, Scalar delta) {
    if (!(delta > Scalar(0))) throw ContractError("zoh_discretize: step must be positive");
    const Scalar z = delta * a;
    return {std::exp(z), delta * b * detail::zoh_phi(z)};
}

enum class ScanAlgorithm { sequential, parallel };

namespace detail {

// Per-token transition: a_bar (D x N) and the input term b_bar * x (D x N).
template <typename Scalar>
void zoh_token(const Matrix<Scalar>& A, const Scalar* delta_row, const Scalar* b_row, const Scalar* x_row,
               Matrix<Scalar>& a_bar, Matrix<Scalar>& input) {
    const Index d = A.rows();
    const Index n = A.cols();
    for (Index c = 0; c < d; ++c) {
        const Scalar dt = delta_row[c];
        for (Index s = 0; s < n; ++s) {
            const Scalar z = dt * A(c, s);
            a_bar(c, s) = std::exp(z);
            input(c, s) = dt * zoh_phi(z) * b_row[s] * x_row[c];
        }
    }
}

template <typename Scalar>
void check_scan_shapes(const Matrix<Scalar>& x, const Matrix<Scalar>& B, const Matrix<Scalar>& C,
                       const Matrix<Scalar>& delta, const Matrix<Scalar>& A) {
    const Index L = x.rows();
    const Index d = x.cols();
    const Index n = A.cols();
    if (A.rows() != d || B.rows() != L || C.rows() != L || B.cols() != n || C.cols() != n ||
        delta.rows() != L || delta.cols() != d) {
        throw DimensionError("selective scan: x " + shape_of(L, d) + " B " + shape_of(B.rows(), B.cols()) + " C " +
                             shape_of(C.rows(), C.cols()) + " delta " + shape_of(delta.rows(), delta.cols()) +
                             " A " + shape_of(A.rows(), A.cols()));
    }
}

template <typename Scalar>
void check_finite_row(const Matrix<Scalar>& y, Index row) {
    if (!y.row(row).allFinite()) throw NumericError("selective scan: non-finite state at position " + std::to_string(row));
}

}  // namespace detail

/// Reference recurrence h_i = a_bar_i h_{i-1} + b_bar_i x_i, y_i = h_i C_i^T,
/// restarted at every segment. When `states` is given it receives h_i for all
/// tokens as a [(rows * D) x N] stack.
template <typename Scalar>
Matrix<Scalar> scan_sequential(const Matrix<Scalar>& x, const Matrix<Scalar>& B, const Matrix<Scalar>& C,
                               const Matrix<Scalar>& delta, const Matrix<Scalar>& A, const Segments& seg,
                               Matrix<Scalar>* states = nullptr) {
    detail::check_scan_shapes(x, B, C, delta, A);
    const Index d = A.rows();
    const Index n = A.cols();
    Matrix<Scalar> y = Matrix<Scalar>::Zero(x.rows(), d);
    if (states) states->resize(x.rows() * d, n);
    Matrix<Scalar> h(d, n), a_bar(d, n), input(d, n);
    for (Index b = 0; b < seg.count(); ++b) {
        h.setZero();
        for (Index i = seg.begin(b); i < seg.begin(b) + seg.length(b); ++i) {
            detail::zoh_token(A, delta.row(i).data(), B.row(i).data(), x.row(i).data(), a_bar, input);
            h = a_bar.cwiseProduct(h) + input;
            y.row(i) = (h * C.row(i).transpose()).transpose();
            detail::check_finite_row(y, i);
            if (states) states->middleRows(i * d, d) = h;
        }
    }
    return y;
}

template <typename Scalar>
Matrix<Scalar> scan_sequential(const Matrix<Scalar>& x, const Matrix<Scalar>& B, const Matrix<Scalar>& C,
                               const Matrix<Scalar>& delta, const Matrix<Scalar>& A) {
    return scan_sequential(x, B, C, delta, A, Segments::single(x.rows()));
}

/// Same recurrence evaluated as a work-efficient (up-sweep / down-sweep)
/// associative scan over the pairs (a_bar_i, b_bar_i x_i) with composition
/// (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).
template <typename Scalar>
Matrix<Scalar> scan_parallel(const Matrix<Scalar>& x, const Matrix<Scalar>& B, const Matrix<Scalar>& C,
                             const Matrix<Scalar>& delta, const Matrix<Scalar>& A, const Segments& seg,
                             Matrix<Scalar>* states = nullptr) {
    detail::check_scan_shapes(x, B, C, delta, A);
    const Index d = A.rows();
    const Index n = A.cols();
    Matrix<Scalar> y = Matrix<Scalar>::Zero(x.rows(), d);
    if (states) states->resize(x.rows() * d, n);
    Matrix<Scalar> a_bar(d, n), input(d, n);
    for (Index b = 0; b < seg.count(); ++b) {
        const Index start = seg.begin(b);
        const Index len = seg.length(b);
        if (len == 0) continue;
        Index width = 1;
        while (width < len) width *= 2;
        // Padding elements are the identity (1, 0).
        Matrix<Scalar> mul = Matrix<Scalar>::Ones(width * d, n);
        Matrix<Scalar> add = Matrix<Scalar>::Zero(width * d, n);
        for (Index i = 0; i < len; ++i) {
            detail::zoh_token(A, delta.row(start + i).data(), B.row(start + i).data(), x.row(start + i).data(), a_bar,
                              input);
            mul.middleRows(i * d, d) = a_bar;
            add.middleRows(i * d, d) = input;
        }
        const Matrix<Scalar> own_mul = mul.topRows(len * d);
        const Matrix<Scalar> own_add = add.topRows(len * d);

        for (Index stride = 1; stride < width; stride *= 2) {
            for (Index i = 2 * stride - 1; i < width; i += 2 * stride) {
                const Index l = (i - stride) * d;
                const Index r = i * d;
                add.middleRows(r, d) += mul.middleRows(r, d).cwiseProduct(add.middleRows(l, d));
                mul.middleRows(r, d) = mul.middleRows(r, d).cwiseProduct(mul.middleRows(l, d));
            }
        }
        mul.middleRows((width - 1) * d, d).setOnes();
        add.middleRows((width - 1) * d, d).setZero();
        Matrix<Scalar> tmp_mul(d, n), tmp_add(d, n);
        for (Index stride = width / 2; stride >= 1; stride /= 2) {
            for (Index i = 2 * stride - 1; i < width; i += 2 * stride) {
                const Index l = (i - stride) * d;
                const Index r = i * d;
                tmp_mul = mul.middleRows(l, d);
                tmp_add = add.middleRows(l, d);
                mul.middleRows(l, d) = mul.middleRows(r, d);
                add.middleRows(l, d) = add.middleRows(r, d);
                // right <- (left subtree total) o (prefix before the node)
                add.middleRows(r, d) = tmp_mul.cwiseProduct(add.middleRows(r, d)) + tmp_add;
                mul.middleRows(r, d) = tmp_mul.cwiseProduct(mul.middleRows(r, d));
            }
        }
        // Exclusive prefixes applied to h_0 = 0 leave only their additive part.
        Matrix<Scalar> h(d, n);
        for (Index i = 0; i < len; ++i) {
            h = own_mul.middleRows(i * d, d).cwiseProduct(add.middleRows(i * d, d)) + own_add.middleRows(i * d, d);
            y.row(start + i) = (h * C.row(start + i).transpose()).transpose();
            detail::check_finite_row(y, start + i);
            if (states) states->middleRows((start + i) * d, d) = h;
        }
    }
    return y;
}

template <typename Scalar>
Matrix<Scalar> scan_parallel(const Matrix<Scalar>& x, const Matrix<Scalar>& B, const Matrix<Scalar>& C,
                             const Matrix<Scalar>& delta, const Matrix<Scalar>& A) {
    return scan_parallel(x, B, C, delta, A, Segments::single(x.rows()));
}

/// Differentiable selective scan. Shapes: x, delta [rows x D]; A [D x N];
/// B, C [rows x N]. The backward pass runs the adjoint recurrence in reverse.
template <typename Scalar>
Tensor<Scalar> selective_scan(const Tensor<Scalar>& x, const Tensor<Scalar>& delta, const Tensor<Scalar>& A,
                              const Tensor<Scalar>& B, const Tensor<Scalar>& C, const Segments& seg,
                              ScanAlgorithm algorithm = ScanAlgorithm::sequential) {
    const bool keep = grad_enabled() &&
                      (x.requires_grad() || delta.requires_grad() || A.requires_grad() || B.requires_grad() ||
                       C.requires_grad());
    auto states = std::make_shared<Matrix<Scalar>>();
    Matrix<Scalar>* sink = keep ? states.get() : nullptr;
    Matrix<Scalar> y = algorithm == ScanAlgorithm::sequential
                           ? scan_sequential(x.value(), B.value(), C.value(), delta.value(), A.value(), seg, sink)
                           : scan_parallel(x.value(), B.value(), C.value(), delta.value(), A.value(), seg, sink);
    return make_result<Scalar>(std::move(y), {x, delta, A, B, C}, [x, delta, A, B, C, seg, states](const Matrix<Scalar>& g) {
        const Matrix<Scalar>& a = A.value();
        const Index d = a.rows();
        const Index n = a.cols();
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(x.rows(), d);
        Matrix<Scalar> ddelta = Matrix<Scalar>::Zero(x.rows(), d);
        Matrix<Scalar> dA = Matrix<Scalar>::Zero(d, n);
        Matrix<Scalar> dB = Matrix<Scalar>::Zero(x.rows(), n);
        Matrix<Scalar> dC = Matrix<Scalar>::Zero(x.rows(), n);
        Matrix<Scalar> dh(d, n);
        for (Index b = 0; b < seg.count(); ++b) {
            dh.setZero();
            const Index first = seg.begin(b);
            for (Index i = first + seg.length(b) - 1; i >= first; --i) {
                const auto h = states->middleRows(i * d, d);
                dh.noalias() += g.row(i).transpose() * C.value().row(i);
                dC.row(i).noalias() = g.row(i) * h;
                for (Index c = 0; c < d; ++c) {
                    const Scalar dt = delta.value()(i, c);
                    const Scalar xv = x.value()(i, c);
                    Scalar dx_acc = 0;
                    Scalar ddt_acc = 0;
                    for (Index s = 0; s < n; ++s) {
                        const Scalar ac = a(c, s);
                        const Scalar z = dt * ac;
                        const Scalar ez = std::exp(z);
                        const Scalar phi = detail::zoh_phi(z);
                        const Scalar bv = B.value()(i, s);
                        const Scalar h_prev = i > first ? (*states)((i - 1) * d + c, s) : Scalar(0);
                        const Scalar gh = dh(c, s);
                        const Scalar d_abar = gh * h_prev;
                        const Scalar d_bbar = gh * xv;
                        dx_acc += gh * dt * phi * bv;
                        ddt_acc += d_abar * ac * ez + d_bbar * bv * ez;
                        dA(c, s) += d_abar * dt * ez + d_bbar * bv * dt * dt * detail::zoh_dphi(z);
                        dB(i, s) += d_bbar * dt * phi;
                        dh(c, s) = gh * ez;
                    }
                    dx(i, c) = dx_acc;
                    ddelta(i, c) = ddt_acc;
                }
            }
        }
        if (x.requires_grad()) x.node()->accumulate(dx);
        if (delta.requires_grad()) delta.node()->accumulate(ddelta);
        if (A.requires_grad()) A.node()->accumulate(dA);
        if (B.requires_grad()) B.node()->accumulate(dB);
        if (C.requires_grad()) C.node()->accumulate(dC);
    });
}

// ---------------------------------------------------------------------------
// S6 parameters and projections

/// Input-dependent SSM parameters over `channels` channels with `state` states each.
/// A = -exp(a_log) keeps every evolution entry negative.
template <typename Scalar>
struct SsmParams {
    Tensor<Scalar> a_log;  // [channels x state]
    Linear<Scalar> to_b;   // source -> state
    Linear<Scalar> to_c;   // source -> state
    Linear<Scalar> to_delta;  // source -> 1, broadcast over channels

    SsmParams() = default;
    SsmParams(ParameterStore<Scalar>& store, const std::string& name, Index source_width, Index channels, Index state,
              std::mt19937_64& rng)
        : to_b(store, name + ".to_b", source_width, state, rng),
          to_c(store, name + ".to_c", source_width, state, rng),
          to_delta(store, name + ".to_delta", source_width, 1, rng) {
        Matrix<Scalar> init(channels, state);
        for (Index c = 0; c < channels; ++c) {
            for (Index s = 0; s < state; ++s) init(c, s) = static_cast<Scalar>(std::log(static_cast<double>(s + 1)));
        }
        a_log = store.add(name + ".a_log", std::move(init));
    }

    Index channels() const { return a_log.rows(); }
    Index state() const { return a_log.cols(); }

    Tensor<Scalar> A() const { return -exp(a_log); }
};

template <typename Scalar>
struct S6Projection {
    Tensor<Scalar> B;      // [rows x N]
    Tensor<Scalar> C;      // [rows x N]
    Tensor<Scalar> delta;  // [rows x D], strictly positive
};

/// B = Linear_N(src), C = Linear_N(src), delta = softplus(Broadcast_D(Linear_1(src))).
template <typename Scalar>
S6Projection<Scalar> s6_project(const Tensor<Scalar>& source, const SsmParams<Scalar>& params) {
    return {params.to_b(source), params.to_c(source),
            softplus(broadcast_cols(params.to_delta(source), params.channels()))};
}

// ---------------------------------------------------------------------------
// Mamba block

enum class Direction { forward, bidirectional };

/// Pre-norm Mamba block: expansion, depthwise conv, SiLU, selective scan,
/// SiLU gate from a parallel branch, output projection and residual.
/// The bidirectional variant scans the sequence and its reversal with separate
/// S6 parameters and projects the concatenated features back to the model width.
template <typename Scalar>
class MambaBlock {
public:
    static constexpr Index kConvWidth = 4;

    MambaBlock() = default;
    MambaBlock(ParameterStore<Scalar>& store, const std::string& name, Index width, Index state, Index expand,
               Direction direction, std::mt19937_64& rng)
        : direction_(direction),
          norm_(store, name + ".norm", width),
          in_proj_(store, name + ".in_proj", width, expand * width, rng),
          gate_proj_(store, name + ".gate_proj", width, expand * width, rng) {
        const Index inner = expand * width;
        conv_weight_ = store.add(name + ".conv.weight",
                                 uniform_init<Scalar>(kConvWidth, inner, 1.0 / std::sqrt(double(kConvWidth)), rng));
        conv_bias_ = store.add(name + ".conv.bias", Matrix<Scalar>::Zero(1, inner));
        ssm_forward_ = SsmParams<Scalar>(store, name + ".ssm_fwd", inner, inner, state, rng);
        if (direction == Direction::bidirectional) {
            ssm_backward_ = SsmParams<Scalar>(store, name + ".ssm_bwd", inner, inner, state, rng);
        }
        const Index merged = direction == Direction::bidirectional ? 2 * inner : inner;
        out_proj_ = Linear<Scalar>(store, name + ".out_proj", merged, width, rng);
    }

    /// Block without norm and residual: [rows x D] -> [rows x D].
    Tensor<Scalar> mixer(const Tensor<Scalar>& xn, const Segments& seg, ScanAlgorithm algo) const {
        const bool causal = direction_ == Direction::forward;
        auto u = silu(depthwise_conv1d(in_proj_(xn), seg, conv_weight_, conv_bias_, causal));
        auto gate = silu(gate_proj_(xn));
        auto fwd = scan(u, seg, ssm_forward_, algo) * gate;
        if (direction_ == Direction::forward) return out_proj_(fwd);
        auto bwd = reverse_segments(scan(reverse_segments(u, seg), seg, ssm_backward_, algo), seg) * gate;
        return out_proj_(concat_cols(fwd, bwd));
    }

    Tensor<Scalar> operator()(const Tensor<Scalar>& x, const Segments& seg,
                              ScanAlgorithm algo = ScanAlgorithm::sequential) const {
        return x + mixer(norm_(x), seg, algo);
    }

    Direction direction() const { return direction_; }
    const LayerNorm<Scalar>& norm() const { return norm_; }
    const SsmParams<Scalar>& ssm_forward() const { return ssm_forward_; }
    const SsmParams<Scalar>& ssm_backward() const { return ssm_backward_; }
    const Linear<Scalar>& out_proj() const { return out_proj_; }
    const Tensor<Scalar>& conv_weight() const { return conv_weight_; }

private:
    static Tensor<Scalar> scan(const Tensor<Scalar>& u, const Segments& seg, const SsmParams<Scalar>& p,
                               ScanAlgorithm algo) {
        auto proj = s6_project(u, p);
        return selective_scan(u, proj.delta, p.A(), proj.B, proj.C, seg, algo);
    }

    Direction direction_ = Direction::forward;
    LayerNorm<Scalar> norm_;
    Linear<Scalar> in_proj_;
    Linear<Scalar> gate_proj_;
    Tensor<Scalar> conv_weight_;
    Tensor<Scalar> conv_bias_;
    SsmParams<Scalar> ssm_forward_;
    SsmParams<Scalar> ssm_backward_;
    Linear<Scalar> out_proj_;
};

}  // namespace seqdiff
