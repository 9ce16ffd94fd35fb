#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "seqdiff/core/tensor.hpp"

namespace seqdiff {

/// Row ranges of a packed batch: sequence b occupies rows [offsets[b], offsets[b+1]).
struct Segments {
    std::vector<Index> offsets{0};

    static Segments from_lengths(const std::vector<Index>& lengths) {
        Segments s;
        s.offsets.reserve(lengths.size() + 1);
        for (Index len : lengths) s.offsets.push_back(s.offsets.back() + len);
        return s;
    }
    static Segments single(Index length) { return from_lengths({length}); }

    Index count() const { return static_cast<Index>(offsets.size()) - 1; }
    Index begin(Index b) const { return offsets[static_cast<std::size_t>(b)]; }
    Index length(Index b) const { return offsets[static_cast<std::size_t>(b) + 1] - begin(b); }
    Index total() const { return offsets.back(); }
    std::vector<Index> lengths() const {
        std::vector<Index> out;
        for (Index b = 0; b < count(); ++b) out.push_back(length(b));
        return out;
    }
};

namespace detail {

inline std::string shape_of(Index r, Index c) {
    return "[" + std::to_string(r) + "x" + std::to_string(c) + "]";
}

template <typename Scalar>
void require_same_shape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                             b.shape_string());
    }
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
    return x >= 0 ? Scalar(1) / (Scalar(1) + std::exp(-x)) : std::exp(x) / (Scalar(1) + std::exp(x));
}

template <typename Scalar>
Scalar softplus(Scalar x) {
    return x > Scalar(20) ? x : std::log1p(std::exp(x));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + a.shape_string() + " x " +
                             b.shape_string());
    }
    Matrix<Scalar> out = a.value() * b.value();
    return make_result<Scalar>(std::move(out), {a, b}, [a, b](const Matrix<Scalar>& g) {
        if (a.requires_grad()) a.node()->accumulate(g * b.value().transpose());
        if (b.requires_grad()) b.node()->accumulate(a.value().transpose() * g);
    });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
    Matrix<Scalar> out = a.value().transpose();
    return make_result<Scalar>(std::move(out), {a}, [a](const Matrix<Scalar>& g) {
        a.node()->accumulate(g.transpose());
    });
}

/// x * W + b with b broadcast over rows.
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
        throw DimensionError("affine: " + x.shape_string() + " x " + w.shape_string() + " + " +
                             b.shape_string());
    }
    Matrix<Scalar> out = x.value() * w.value();
    out.rowwise() += b.value().row(0);
    return make_result<Scalar>(std::move(out), {x, w, b}, [x, w, b](const Matrix<Scalar>& g) {
        if (x.requires_grad()) x.node()->accumulate(g * w.value().transpose());
        if (w.requires_grad()) w.node()->accumulate(x.value().transpose() * g);
        if (b.requires_grad()) b.node()->accumulate(g.colwise().sum());
    });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::require_same_shape("add", a, b);
    Matrix<Scalar> out = a.value() + b.value();
    return make_result<Scalar>(std::move(out), {a, b}, [a, b](const Matrix<Scalar>& g) {
        if (a.requires_grad()) a.node()->accumulate(g);
        if (b.requires_grad()) b.node()->accumulate(g);
    });
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::require_same_shape("sub", a, b);
    Matrix<Scalar> out = a.value() - b.value();
    return make_result<Scalar>(std::move(out), {a, b}, [a, b](const Matrix<Scalar>& g) {
        if (a.requires_grad()) a.node()->accumulate(g);
        if (b.requires_grad()) b.node()->accumulate(-g);
    });
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    detail::require_same_shape("mul", a, b);
    Matrix<Scalar> out = a.value().cwiseProduct(b.value());
    return make_result<Scalar>(std::move(out), {a, b}, [a, b](const Matrix<Scalar>& g) {
        if (a.requires_grad()) a.node()->accumulate(g.cwiseProduct(b.value()));
        if (b.requires_grad()) b.node()->accumulate(g.cwiseProduct(a.value()));
    });
}

template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) {
    Matrix<Scalar> out = a.value() * s;
    return make_result<Scalar>(std::move(out), {a}, [a, s](const Matrix<Scalar>& g) {
        a.node()->accumulate(g * s);
    });
}

template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
    return a * s;
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) {
    return a * Scalar(-1);
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& a, Scalar s) {
    Matrix<Scalar> out = a.value().array() + s;
    return make_result<Scalar>(std::move(out), {a}, [a](const Matrix<Scalar>& g) { a.node()->accumulate(g); });
}

/// Adds a [1 x C] row to every row of x.
template <typename Scalar>
Tensor<Scalar> add_row(const Tensor<Scalar>& x, const Tensor<Scalar>& row) {
    if (row.rows() != 1 || row.cols() != x.cols()) {
        throw DimensionError("add_row: " + x.shape_string() + " + " + row.shape_string());
    }
    Matrix<Scalar> out = x.value();
    out.rowwise() += row.value().row(0);
    return make_result<Scalar>(std::move(out), {x, row}, [x, row](const Matrix<Scalar>& g) {
        if (x.requires_grad()) x.node()->accumulate(g);
        if (row.requires_grad()) row.node()->accumulate(g.colwise().sum());
    });
}

/// Repeats a [R x 1] column across `cols` columns.
template <typename Scalar>
Tensor<Scalar> broadcast_cols(const Tensor<Scalar>& x, Index cols) {
    if (x.cols() != 1) throw DimensionError("broadcast_cols: expected one column, got " + x.shape_string());
    Matrix<Scalar> out = x.value().replicate(1, cols);
    return make_result<Scalar>(std::move(out), {x}, [x](const Matrix<Scalar>& g) {
        x.node()->accumulate(g.rowwise().sum());
    });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
    Matrix<Scalar> out = x.value().array().exp();
    Matrix<Scalar> saved = out;
    return make_result<Scalar>(std::move(out), {x}, [x, saved](const Matrix<Scalar>& g) {
        x.node()->accumulate(g.cwiseProduct(saved));
    });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
    Matrix<Scalar> out = x.value().array().log();
    return make_result<Scalar>(std::move(out), {x}, [x](const Matrix<Scalar>& g) {
        x.node()->accumulate(g.cwiseQuotient(x.value()));
    });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
    Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return detail::sigmoid(v); });
    Matrix<Scalar> saved = out;
    return make_result<Scalar>(std::move(out), {x}, [x, saved](const Matrix<Scalar>& g) {
        x.node()->accumulate(g.cwiseProduct(saved.unaryExpr([](Scalar s) { return s * (Scalar(1) - s); })));
    });
}

/// x * sigmoid(x)
template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
    Matrix<Scalar> sig = x.value().unaryExpr([](Scalar v) { return detail::sigmoid(v); });
    Matrix<Scalar> out = x.value().cwiseProduct(sig);
    return make_result<Scalar>(std::move(out), {x}, [x, sig](const Matrix<Scalar>& g) {
        auto s = sig.array();
        Matrix<Scalar> d = s * (Scalar(1) + x.value().array() * (Scalar(1) - s));
        x.node()->accumulate(g.cwiseProduct(d));
    });
}

/// log(1 + e^x), evaluated without overflow.
template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
    Matrix<Scalar> out = x.value().unaryExpr([](Scalar v) { return detail::softplus(v); });
    return make_result<Scalar>(std::move(out), {x}, [x](const Matrix<Scalar>& g) {
        x.node()->accumulate(g.cwiseProduct(x.value().unaryExpr([](Scalar v) { return detail::sigmoid(v); })));
    });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
    Matrix<Scalar> out(1, 1);
    out(0, 0) = x.value().sum();
    return make_result<Scalar>(std::move(out), {x}, [x](const Matrix<Scalar>& g) {
        x.node()->accumulate(Matrix<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
    });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
    return sum(x) * (Scalar(1) / static_cast<Scalar>(x.size()));
}

/// Mean over the rows of each segment: [total x C] -> [count x C].
template <typename Scalar>
Tensor<Scalar> segment_mean(const Tensor<Scalar>& x, const Segments& seg) {
    if (seg.total() != x.rows()) throw DimensionError("segment_mean: segments do not cover " + x.shape_string());
    Matrix<Scalar> out(seg.count(), x.cols());
    for (Index b = 0; b < seg.count(); ++b) {
        const Index len = seg.length(b);
        if (len == 0) {
            out.row(b).setZero();
        } else {
            out.row(b) = x.value().middleRows(seg.begin(b), len).colwise().sum() / static_cast<Scalar>(len);
        }
    }
    return make_result<Scalar>(std::move(out), {x}, [x, seg](const Matrix<Scalar>& g) {
        auto& buf = x.node()->grad_buffer();
        for (Index b = 0; b < seg.count(); ++b) {
            const Index len = seg.length(b);
            if (len == 0) continue;
            buf.middleRows(seg.begin(b), len).rowwise() += g.row(b) / static_cast<Scalar>(len);
        }
    });
}

/// Softmax along `axis` (0 = down columns, 1 = across rows), max-shifted.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis = 1) {
    if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
    if (x.value().hasNaN()) throw NumericError("softmax: NaN input " + x.shape_string());
    Matrix<Scalar> in = axis == 1 ? Matrix<Scalar>(x.value()) : Matrix<Scalar>(x.value().transpose());
    Matrix<Scalar> out(in.rows(), in.cols());
    for (Index r = 0; r < in.rows(); ++r) {
        const Scalar m = in.row(r).maxCoeff();
        out.row(r) = (in.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    Matrix<Scalar> saved = out;
    if (axis == 0) out.transposeInPlace();
    return make_result<Scalar>(std::move(out), {x}, [x, saved, axis](const Matrix<Scalar>& g_in) {
        Matrix<Scalar> g = axis == 1 ? Matrix<Scalar>(g_in) : Matrix<Scalar>(g_in.transpose());
        Matrix<Scalar> dx(saved.rows(), saved.cols());
        for (Index r = 0; r < saved.rows(); ++r) {
            const Scalar dot = g.row(r).dot(saved.row(r));
            dx.row(r) = saved.row(r).array() * (g.row(r).array() - dot);
        }
        if (axis == 1) {
            x.node()->accumulate(dx);
        } else {
            x.node()->accumulate(dx.transpose());
        }
    });
}

/// Per-row layer normalization with learned gain and bias ([1 x C] each).
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
    const Index n = x.rows();
    const Index c = x.cols();
    if (gamma.cols() != c || beta.cols() != c) {
        throw DimensionError("layer_norm: " + x.shape_string() + " with gain " + gamma.shape_string());
    }
    Matrix<Scalar> xhat(n, c);
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(n);
    for (Index r = 0; r < n; ++r) {
        const Scalar mu = x.value().row(r).mean();
        const Scalar var = (x.value().row(r).array() - mu).square().mean();
        inv_std(r) = Scalar(1) / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
    }
    Matrix<Scalar> out = xhat;
    out.array().rowwise() *= gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return make_result<Scalar>(std::move(out), {x, gamma, beta},
                               [x, gamma, beta, xhat, inv_std](const Matrix<Scalar>& g) {
        if (gamma.requires_grad()) gamma.node()->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (beta.requires_grad()) beta.node()->accumulate(g.colwise().sum());
        if (!x.requires_grad()) return;
        Matrix<Scalar> gh = g;
        gh.array().rowwise() *= gamma.value().row(0).array();
        const Scalar inv_c = Scalar(1) / static_cast<Scalar>(xhat.cols());
        Matrix<Scalar> dx(xhat.rows(), xhat.cols());
        for (Index r = 0; r < xhat.rows(); ++r) {
            const Scalar mean_g = gh.row(r).sum() * inv_c;
            const Scalar mean_gx = gh.row(r).dot(xhat.row(r)) * inv_c;
            dx.row(r) = inv_std(r) * (gh.row(r).array() - mean_g - xhat.row(r).array() * mean_gx);
        }
        x.node()->accumulate(dx);
    });
}

// ---------------------------------------------------------------------------
// Indexing and reshaping

/// out.row(i) = x.row(index[i]); a negative index yields a zero row.
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, const std::vector<Index>& index) {
    Matrix<Scalar> out(static_cast<Index>(index.size()), x.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        const Index src = index[i];
        if (src >= x.rows()) {
            throw DimensionError("gather_rows: row " + std::to_string(src) + " outside " + x.shape_string());
        }
        if (src < 0) {
            out.row(static_cast<Index>(i)).setZero();
        } else {
            out.row(static_cast<Index>(i)) = x.value().row(src);
        }
    }
    return make_result<Scalar>(std::move(out), {x}, [x, index](const Matrix<Scalar>& g) {
        auto& buf = x.node()->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i) {
            if (index[i] >= 0) buf.row(index[i]) += g.row(static_cast<Index>(i));
        }
    });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > x.rows()) {
        throw DimensionError("slice_rows: [" + std::to_string(start) + ", +" + std::to_string(count) +
                             ") outside " + x.shape_string());
    }
    Matrix<Scalar> out = x.value().middleRows(start, count);
    return make_result<Scalar>(std::move(out), {x}, [x, start, count](const Matrix<Scalar>& g) {
        x.node()->grad_buffer().middleRows(start, count) += g;
    });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& x, Index start, Index count) {
    if (start < 0 || count < 0 || start + count > x.cols()) {
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) +
                             ") outside " + x.shape_string());
    }
    Matrix<Scalar> out = x.value().middleCols(start, count);
    return make_result<Scalar>(std::move(out), {x}, [x, start, count](const Matrix<Scalar>& g) {
        x.node()->grad_buffer().middleCols(start, count) += g;
    });
}

/// Side-by-side concatenation [a | b].
template <typename Scalar>
Tensor<Scalar> concat_cols(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("concat_cols: row counts differ " + a.shape_string() + " vs " + b.shape_string());
    }
    Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
    out << a.value(), b.value();
    const Index ac = a.cols();
    const Index bc = b.cols();
    return make_result<Scalar>(std::move(out), {a, b}, [a, b, ac, bc](const Matrix<Scalar>& g) {
        if (a.requires_grad()) a.node()->accumulate(g.leftCols(ac));
        if (b.requires_grad()) b.node()->accumulate(g.rightCols(bc));
    });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    Index rows = 0;
    const Index cols = parts.front().cols();
    for (const auto& p : parts) {
        if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
        rows += p.rows();
    }
    Matrix<Scalar> out(rows, cols);
    Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return make_result<Scalar>(std::move(out), parts, [parts](const Matrix<Scalar>& g) {
        Index offset = 0;
        for (const auto& p : parts) {
            if (p.requires_grad()) p.node()->accumulate(g.middleRows(offset, p.rows()));
            offset += p.rows();
        }
    });
}

/// Reverses row order inside every segment.
template <typename Scalar>
Tensor<Scalar> reverse_segments(const Tensor<Scalar>& x, const Segments& seg) {
    std::vector<Index> index(static_cast<std::size_t>(x.rows()));
    for (Index b = 0; b < seg.count(); ++b) {
        const Index s = seg.begin(b);
        const Index len = seg.length(b);
        for (Index i = 0; i < len; ++i) index[static_cast<std::size_t>(s + i)] = s + len - 1 - i;
    }
    return gather_rows(x, index);
}

// ---------------------------------------------------------------------------
// Convolution

/// Zero padding (left, right) that makes a width-`kernel`, stride-`stride`
/// convolution over `length` rows produce ceil(length / stride) outputs.
inline std::pair<Index, Index> conv_padding(Index length, Index kernel, Index stride, bool causal) {
    const Index out_len = (length + stride - 1) / stride;
    const Index total = std::max<Index>(0, (out_len - 1) * stride + kernel - length);
    if (causal) return {total, 0};
    const Index left = total / 2;
    return {left, total - left};
}

/// Unfolds each segment into convolution windows: row j of the result holds
/// rows [j*stride - pad_left, ... + kernel) of the segment side by side.
/// Returns the windows and the output segments.
template <typename Scalar>
std::pair<Tensor<Scalar>, Segments> unfold_segments(const Tensor<Scalar>& x, const Segments& seg, Index kernel,
                                                    Index stride, bool causal) {
    if (stride <= 0) throw ConfigError("stride", "convolution stride must be >= 1");
    if (kernel <= 0) throw ConfigError("kernel", "convolution width must be >= 1");
    const Index c = x.cols();
    std::vector<Index> out_lengths;
    for (Index b = 0; b < seg.count(); ++b) out_lengths.push_back((seg.length(b) + stride - 1) / stride);
    Segments out_seg = Segments::from_lengths(out_lengths);

    // index[(row * kernel + k)] = source row or -1 for padding
    std::vector<Index> index(static_cast<std::size_t>(out_seg.total() * kernel), -1);
    for (Index b = 0; b < seg.count(); ++b) {
        const Index len = seg.length(b);
        const auto [left, right] = conv_padding(len, kernel, stride, causal);
        (void)right;
        for (Index j = 0; j < out_seg.length(b); ++j) {
            for (Index k = 0; k < kernel; ++k) {
                const Index src = j * stride + k - left;
                if (src >= 0 && src < len) {
                    index[static_cast<std::size_t>((out_seg.begin(b) + j) * kernel + k)] = seg.begin(b) + src;
                }
            }
        }
    }
    Matrix<Scalar> out = Matrix<Scalar>::Zero(out_seg.total(), kernel * c);
    for (Index r = 0; r < out_seg.total(); ++r) {
        for (Index k = 0; k < kernel; ++k) {
            const Index src = index[static_cast<std::size_t>(r * kernel + k)];
            if (src >= 0) out.block(r, k * c, 1, c) = x.value().row(src);
        }
    }
    auto result = make_result<Scalar>(std::move(out), {x}, [x, index, kernel, c](const Matrix<Scalar>& g) {
        auto& buf = x.node()->grad_buffer();
        const Index rows = g.rows();
        for (Index r = 0; r < rows; ++r) {
            for (Index k = 0; k < kernel; ++k) {
                const Index src = index[static_cast<std::size_t>(r * kernel + k)];
                if (src >= 0) buf.row(src) += g.block(r, k * c, 1, c);
            }
        }
    });
    return {result, out_seg};
}

/// Full (channel-mixing) 1-D convolution over each segment.
/// `weight` is [kernel*C_in x C_out] with tap k occupying rows [k*C_in, (k+1)*C_in).
template <typename Scalar>
std::pair<Tensor<Scalar>, Segments> conv1d(const Tensor<Scalar>& x, const Segments& seg, const Tensor<Scalar>& weight,
                                           const Tensor<Scalar>& bias, Index kernel, Index stride, bool causal) {
    if (weight.rows() != kernel * x.cols()) {
        throw DimensionError("conv1d: weight " + weight.shape_string() + " does not match kernel " +
                             std::to_string(kernel) + " over " + x.shape_string());
    }
    auto [windows, out_seg] = unfold_segments(x, seg, kernel, stride, causal);
    return {affine(windows, weight, bias), out_seg};
}

/// Depthwise stride-1 convolution; `weight` is [kernel x C], one filter per channel.
template <typename Scalar>
Tensor<Scalar> depthwise_conv1d(const Tensor<Scalar>& x, const Segments& seg, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias, bool causal) {
    const Index kernel = weight.rows();
    const Index c = x.cols();
    if (weight.cols() != c || bias.cols() != c) {
        throw DimensionError("depthwise_conv1d: weight " + weight.shape_string() + " vs input " + x.shape_string());
    }
    if (seg.total() != x.rows()) throw DimensionError("depthwise_conv1d: segments do not cover input");
    Matrix<Scalar> out(x.rows(), c);
    out.rowwise() = bias.value().row(0);
    for (Index b = 0; b < seg.count(); ++b) {
        const Index s = seg.begin(b);
        const Index len = seg.length(b);
        const Index left = conv_padding(len, kernel, 1, causal).first;
        for (Index i = 0; i < len; ++i) {
            for (Index k = 0; k < kernel; ++k) {
                const Index src = i + k - left;
                if (src < 0 || src >= len) continue;
                out.row(s + i).array() += x.value().row(s + src).array() * weight.value().row(k).array();
            }
        }
    }
    return make_result<Scalar>(std::move(out), {x, weight, bias},
                               [x, weight, bias, seg, kernel, causal](const Matrix<Scalar>& g) {
        if (bias.requires_grad()) bias.node()->accumulate(g.colwise().sum());
        Matrix<Scalar> dx = Matrix<Scalar>::Zero(x.rows(), x.cols());
        Matrix<Scalar> dw = Matrix<Scalar>::Zero(weight.rows(), weight.cols());
        for (Index b = 0; b < seg.count(); ++b) {
            const Index s = seg.begin(b);
            const Index len = seg.length(b);
            const Index left = conv_padding(len, kernel, 1, causal).first;
            for (Index i = 0; i < len; ++i) {
                for (Index k = 0; k < kernel; ++k) {
                    const Index src = i + k - left;
                    if (src < 0 || src >= len) continue;
                    dx.row(s + src).array() += g.row(s + i).array() * weight.value().row(k).array();
                    dw.row(k).array() += g.row(s + i).array() * x.value().row(s + src).array();
                }
            }
        }
        if (x.requires_grad()) x.node()->accumulate(dx);
        if (weight.requires_grad()) weight.node()->accumulate(dw);
    });
}

// ---------------------------------------------------------------------------
// Losses

/// sum_i weights[i] * -log softmax(logits.row(i))[targets[i]]; rows with zero weight are skipped.
template <typename Scalar>
Tensor<Scalar> weighted_nll(const Tensor<Scalar>& logits, const std::vector<Index>& targets,
                            const std::vector<double>& weights) {
    const Index n = logits.rows();
    const Index v = logits.cols();
    if (static_cast<Index>(targets.size()) != n || static_cast<Index>(weights.size()) != n) {
        throw DimensionError("weighted_nll: " + std::to_string(targets.size()) + " targets for logits " +
                             logits.shape_string());
    }
    if (!logits.value().allFinite()) throw NumericError("weighted_nll: non-finite logits");
    Matrix<Scalar> probs = Matrix<Scalar>::Zero(n, v);
    Scalar total(0);
    for (Index i = 0; i < n; ++i) {
        if (weights[static_cast<std::size_t>(i)] == 0.0) continue;
        const Index y = targets[static_cast<std::size_t>(i)];
        if (y < 0 || y >= v) {
            throw DimensionError("weighted_nll: target " + std::to_string(y) + " outside vocabulary of " +
                                 std::to_string(v));
        }
        const Scalar m = logits.value().row(i).maxCoeff();
        probs.row(i) = (logits.value().row(i).array() - m).exp();
        const Scalar z = probs.row(i).sum();
        probs.row(i) /= z;
        total += static_cast<Scalar>(weights[static_cast<std::size_t>(i)]) * (m + std::log(z) - logits.value()(i, y));
    }
    Matrix<Scalar> out(1, 1);
    out(0, 0) = total;
    return make_result<Scalar>(std::move(out), {logits}, [logits, probs, targets, weights](const Matrix<Scalar>& g) {
        Matrix<Scalar> d = probs;
        for (Index i = 0; i < d.rows(); ++i) {
            const double w = weights[static_cast<std::size_t>(i)];
            if (w == 0.0) continue;
            d(i, targets[static_cast<std::size_t>(i)]) -= Scalar(1);
            d.row(i) *= static_cast<Scalar>(w) * g(0, 0);
        }
        logits.node()->accumulate(d);
    });
}

/// Mean negative log-likelihood over rows whose mask flag is set. An empty
/// selection yields 0 and sets `*empty_selection`.
template <typename Scalar>
Tensor<Scalar> cross_entropy_logits(const Tensor<Scalar>& logits, const std::vector<Index>& targets,
                                    const std::vector<bool>& mask, bool* empty_selection = nullptr) {
    if (static_cast<Index>(mask.size()) != logits.rows()) {
        throw DimensionError("cross_entropy_logits: mask length " + std::to_string(mask.size()) + " vs logits " +
                             logits.shape_string());
    }
    const auto count = std::count(mask.begin(), mask.end(), true);
    if (empty_selection) *empty_selection = count == 0;
    if (count == 0) return Tensor<Scalar>::scalar(Scalar(0));
    std::vector<double> w(mask.size(), 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i) w[i] = mask[i] ? 1.0 / static_cast<double>(count) : 0.0;
    return weighted_nll(logits, targets, w);
}

/// Row-wise cosine similarity of two [R x C] tensors -> [R x 1]. A zero row
/// gives cosine 0 and sets `*degenerate`.
template <typename Scalar>
Tensor<Scalar> cosine_rows(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool* degenerate = nullptr) {
    detail::require_same_shape("cosine_rows", a, b);
    const Index r = a.rows();
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> na(r), nb(r);
    Matrix<Scalar> out(r, 1);
    bool zero = false;
    for (Index i = 0; i < r; ++i) {
        na(i) = a.value().row(i).norm();
        nb(i) = b.value().row(i).norm();
        if (na(i) == Scalar(0) || nb(i) == Scalar(0)) {
            out(i, 0) = Scalar(0);
            zero = true;
        } else {
            out(i, 0) = std::clamp(a.value().row(i).dot(b.value().row(i)) / (na(i) * nb(i)), Scalar(-1), Scalar(1));
        }
    }
    if (degenerate) *degenerate = zero;
    Matrix<Scalar> cos = out;
    return make_result<Scalar>(std::move(out), {a, b}, [a, b, na, nb, cos](const Matrix<Scalar>& g) {
        Matrix<Scalar> da = Matrix<Scalar>::Zero(a.rows(), a.cols());
        Matrix<Scalar> db = Matrix<Scalar>::Zero(b.rows(), b.cols());
        for (Index i = 0; i < a.rows(); ++i) {
            if (na(i) == Scalar(0) || nb(i) == Scalar(0)) continue;
            const Scalar c = cos(i, 0);
            da.row(i) = g(i, 0) * (b.value().row(i) / (na(i) * nb(i)) - c * a.value().row(i) / (na(i) * na(i)));
            db.row(i) = g(i, 0) * (a.value().row(i) / (na(i) * nb(i)) - c * b.value().row(i) / (nb(i) * nb(i)));
        }
        if (a.requires_grad()) a.node()->accumulate(da);
        if (b.requires_grad()) b.node()->accumulate(db);
    });
}

// ---------------------------------------------------------------------------
// Attention

/// Head-averaged attention probabilities, one [Lq x Lk] matrix per segment.
template <typename Scalar>
using AttentionMaps = std::vector<Matrix<Scalar>>;

/// Scaled dot-product attention over packed segments with `heads` heads.
/// q is [total_q x D]; k, v are [total_k x D]; segment b of q attends only to
/// segment b of k/v. No causal mask.
template <typename Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                    Index heads, const Segments& q_seg, const Segments& kv_seg,
                                    AttentionMaps<Scalar>* maps = nullptr) {
    const Index d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) {
        throw DimensionError("attention: q " + q.shape_string() + " k " + k.shape_string() + " v " +
                             v.shape_string());
    }
    if (heads <= 0 || d % heads != 0) throw ContractError("attention: heads must divide model width");
    if (q_seg.count() != kv_seg.count() || q_seg.total() != q.rows() || kv_seg.total() != k.rows()) {
        throw DimensionError("attention: segment layout does not match inputs");
    }
    const Index hd = d / heads;
    const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(hd));
    Matrix<Scalar> out(q.rows(), d);
    // probs[b * heads + h]
    auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(static_cast<std::size_t>(q_seg.count() * heads));
    if (maps) maps->assign(static_cast<std::size_t>(q_seg.count()), Matrix<Scalar>());
    for (Index b = 0; b < q_seg.count(); ++b) {
        const Index qs = q_seg.begin(b), ql = q_seg.length(b);
        const Index ks = kv_seg.begin(b), kl = kv_seg.length(b);
        if (maps) (*maps)[static_cast<std::size_t>(b)] = Matrix<Scalar>::Zero(ql, kl);
        for (Index h = 0; h < heads; ++h) {
            auto qb = q.value().block(qs, h * hd, ql, hd);
            auto kb = k.value().block(ks, h * hd, kl, hd);
            auto vb = v.value().block(ks, h * hd, kl, hd);
            Matrix<Scalar> p = (qb * kb.transpose()) * scale;
            for (Index r = 0; r < ql; ++r) {
                const Scalar m = kl > 0 ? p.row(r).maxCoeff() : Scalar(0);
                p.row(r) = (p.row(r).array() - m).exp();
                const Scalar z = p.row(r).sum();
                if (z > Scalar(0)) p.row(r) /= z;
            }
            out.block(qs, h * hd, ql, hd) = p * vb;
            if (maps) (*maps)[static_cast<std::size_t>(b)] += p / static_cast<Scalar>(heads);
            (*probs)[static_cast<std::size_t>(b * heads + h)] = std::move(p);
        }
    }
    return make_result<Scalar>(std::move(out), {q, k, v},
                               [q, k, v, heads, hd, scale, q_seg, kv_seg, probs](const Matrix<Scalar>& g) {
        Matrix<Scalar> dq = Matrix<Scalar>::Zero(q.rows(), q.cols());
        Matrix<Scalar> dk = Matrix<Scalar>::Zero(k.rows(), k.cols());
        Matrix<Scalar> dv = Matrix<Scalar>::Zero(v.rows(), v.cols());
        for (Index b = 0; b < q_seg.count(); ++b) {
            const Index qs = q_seg.begin(b), ql = q_seg.length(b);
            const Index ks = kv_seg.begin(b), kl = kv_seg.length(b);
            for (Index h = 0; h < heads; ++h) {
                const Matrix<Scalar>& p = (*probs)[static_cast<std::size_t>(b * heads + h)];
                auto gb = g.block(qs, h * hd, ql, hd);
                auto qb = q.value().block(qs, h * hd, ql, hd);
                auto kb = k.value().block(ks, h * hd, kl, hd);
                auto vb = v.value().block(ks, h * hd, kl, hd);
                dv.block(ks, h * hd, kl, hd) += p.transpose() * gb;
                Matrix<Scalar> dp = gb * vb.transpose();
                Matrix<Scalar> ds(ql, kl);
                for (Index r = 0; r < ql; ++r) {
                    const Scalar dot = dp.row(r).dot(p.row(r));
                    ds.row(r) = p.row(r).array() * (dp.row(r).array() - dot);
                }
                ds *= scale;
                dq.block(qs, h * hd, ql, hd) += ds * kb;
                dk.block(ks, h * hd, kl, hd) += ds.transpose() * qb;
            }
        }
        if (q.requires_grad()) q.node()->accumulate(dq);
        if (k.requires_grad()) k.node()->accumulate(dk);
        if (v.requires_grad()) v.node()->accumulate(dv);
    });
}

}  // namespace seqdiff
