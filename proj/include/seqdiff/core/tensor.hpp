#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "seqdiff/core/errors.hpp"

namespace seqdiff {

using Index = Eigen::Index;

/// Dense row-major matrix; rows are sequence positions, columns are features.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the lifetime of the guard (inference, finite differences).
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

template <typename Scalar>
struct Node {
    using Mat = Matrix<Scalar>;

    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(const Mat&)> backward;

    bool is_leaf() const { return !backward; }

    template <typename Derived>
    void accumulate(const Eigen::MatrixBase<Derived>& g) {
        if (!requires_grad) return;
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad += g;
        }
    }

    // Hands out a zero-initialized gradient buffer for scatter-style accumulation.
    Mat& grad_buffer() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
        return grad;
    }
};

/// Handle to a node of the define-by-run differentiation graph.
///
/// Copies share the node. Parameters are leaves with `requires_grad`; every
/// operation result records its inputs and a backward closure while grad mode
/// is on and at least one input requires a gradient.
template <typename Scalar>
class Tensor {
public:
    using Mat = Matrix<Scalar>;
    using NodePtr = std::shared_ptr<Node<Scalar>>;

    Tensor() = default;

    explicit Tensor(Mat value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    static Tensor parameter(Mat value, std::string name) {
        Tensor t(std::move(value), true);
        t.node_->name = std::move(name);
        return t;
    }

    static Tensor scalar(Scalar v) {
        Mat m(1, 1);
        m(0, 0) = v;
        return Tensor(std::move(m));
    }

    static Tensor zeros(Index rows, Index cols) { return Tensor(Mat::Zero(rows, cols)); }

    bool defined() const { return static_cast<bool>(node_); }
    const Mat& value() const { return node_->value; }
    Mat& value() { return node_->value; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    Index size() const { return node_->value.size(); }
    std::array<Index, 2> shape() const { return {rows(), cols()}; }
    Scalar item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string());
        return node_->value(0, 0);
    }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_->grad.size() != 0; }

    /// Gradient after `backward`; all zeros when the node was unreachable.
    Mat grad() const {
        if (node_->grad.size() == 0) return Mat::Zero(rows(), cols());
        return node_->grad;
    }

    void zero_grad() { node_->grad = Mat::Zero(rows(), cols()); }

    /// New leaf with the same value and no gradient path.
    Tensor detach() const { return Tensor(node_->value); }

    const std::string& name() const { return node_->name; }
    const NodePtr& node() const { return node_; }

    std::string shape_string() const {
        std::ostringstream os;
        os << '[' << rows() << 'x' << cols() << ']';
        return os.str();
    }

    static Tensor from_node(NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    NodePtr node_;
};

/// Builds an operation result. `backward` receives dLoss/dResult and must
/// accumulate into the input nodes; it is only kept when a gradient is needed.
template <typename Scalar>
Tensor<Scalar> make_result(Matrix<Scalar> value, std::initializer_list<Tensor<Scalar>> inputs,
                           std::function<void(const Matrix<Scalar>&)> backward) {
    Tensor<Scalar> out(std::move(value));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) {
        if (in.requires_grad()) node.inputs.push_back(in.node());
    }
    node.backward = std::move(backward);
    return out;
}

template <typename Scalar>
Tensor<Scalar> make_result(Matrix<Scalar> value, const std::vector<Tensor<Scalar>>& inputs,
                           std::function<void(const Matrix<Scalar>&)> backward) {
    Tensor<Scalar> out(std::move(value));
    if (!grad_enabled()) return out;
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (!needs) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& in : inputs) {
        if (in.requires_grad()) node.inputs.push_back(in.node());
    }
    node.backward = std::move(backward);
    return out;
}

/// Reverse-mode sweep from a scalar root. Leaf gradients accumulate; the
/// recorded graph is released afterwards.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) {
        throw ContractError("backward: root must be scalar, got " + loss.shape_string());
    }
    if (!loss.requires_grad()) return;

    std::vector<Node<Scalar>*> order;
    std::unordered_set<Node<Scalar>*> visited;
    std::vector<std::pair<Node<Scalar>*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node<Scalar>* child = node->inputs[next++].get();
            if (visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    loss.node()->accumulate(Matrix<Scalar>::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<Scalar>* node = *it;
        if (node->backward && node->grad.size() != 0) node->backward(node->grad);
    }

    // Post-order: inputs are released before the nodes that own them.
    for (Node<Scalar>* node : order) {
        if (node->is_leaf()) continue;
        node->backward = nullptr;
        node->inputs.clear();
        node->grad.resize(0, 0);
    }
}

}  // namespace seqdiff
