#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "seqdiff/core/ops.hpp"

namespace seqdiff {

/// Ordered, named collection of trainable leaves.
template <typename Scalar>
class ParameterStore {
public:
    Tensor<Scalar> add(const std::string& name, Matrix<Scalar> value) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        auto t = Tensor<Scalar>::parameter(std::move(value), name);
        index_[name] = params_.size();
        params_.push_back(t);
        return t;
    }

    const std::vector<Tensor<Scalar>>& all() const { return params_; }
    std::size_t size() const { return params_.size(); }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    Tensor<Scalar> get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter: " + name);
        return params_[it->second];
    }

    Index element_count() const {
        Index n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

private:
    std::vector<Tensor<Scalar>> params_;
    std::map<std::string, std::size_t> index_;
};

/// Deterministic initializers driven by a caller-owned engine.
template <typename Scalar>
Matrix<Scalar> uniform_init(Index rows, Index cols, double bound, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    return m;
}

template <typename Scalar>
Matrix<Scalar> normal_init(Index rows, Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<Scalar> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<Scalar>(dist(rng));
    return m;
}

template <typename Scalar>
struct Linear {
    Tensor<Scalar> weight;  // [in x out]
    Tensor<Scalar> bias;    // [1 x out]

    Linear() = default;
    Linear(ParameterStore<Scalar>& store, const std::string& name, Index in, Index out, std::mt19937_64& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        weight = store.add(name + ".weight", uniform_init<Scalar>(in, out, bound, rng));
        bias = store.add(name + ".bias", Matrix<Scalar>::Zero(1, out));
    }

    Index in_features() const { return weight.rows(); }
    Index out_features() const { return weight.cols(); }

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return affine(x, weight, bias); }
};

template <typename Scalar>
struct LayerNorm {
    Tensor<Scalar> gain;
    Tensor<Scalar> shift;

    LayerNorm() = default;
    LayerNorm(ParameterStore<Scalar>& store, const std::string& name, Index width) {
        gain = store.add(name + ".gain", Matrix<Scalar>::Ones(1, width));
        shift = store.add(name + ".shift", Matrix<Scalar>::Zero(1, width));
    }

    Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return layer_norm(x, gain, shift); }
};

template <typename Scalar>
struct Embedding {
    Tensor<Scalar> table;  // [vocab x width]

    Embedding() = default;
    Embedding(ParameterStore<Scalar>& store, const std::string& name, Index vocab, Index width, std::mt19937_64& rng) {
        table = store.add(name + ".table", normal_init<Scalar>(vocab, width, 1.0, rng));
    }

    Tensor<Scalar> operator()(const std::vector<Index>& ids) const { return gather_rows(table, ids); }
};

/// Fixed sinusoidal code: entry 2k = sin(p w_k), 2k+1 = cos(p w_k), w_k = 10000^(-2k/width).
template <typename Scalar>
RowVector<Scalar> sinusoid(double position, Index width) {
    RowVector<Scalar> out(width);
    for (Index j = 0; j < width; ++j) {
        const double k = static_cast<double>(j / 2);
        const double freq = std::pow(10000.0, -2.0 * k / static_cast<double>(width));
        out(j) = static_cast<Scalar>(j % 2 == 0 ? std::sin(position * freq) : std::cos(position * freq));
    }
    return out;
}

}  // namespace seqdiff
