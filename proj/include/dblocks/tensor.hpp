#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace dblocks {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ColVector = Eigen::Matrix<double, Eigen::Dynamic, 1>;

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
    Matrix value;
    Matrix grad;  // empty until something accumulates into it
    bool requires_grad = false;
    bool backward_done = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this->grad and accumulates into inputs.
    std::function<void(Node&)> backward;

    void accumulate(const Matrix& g);
    template <typename Derived>
    void accumulate_expr(const Eigen::MatrixBase<Derived>& g) {
        if (!requires_grad) return;
        if (grad.size() == 0) {
            grad = g;
        } else {
            grad.noalias() += g;
        }
    }
};

}  // namespace detail

/// Handle to a dense rank-2 array of doubles that may participate in reverse-mode
/// differentiation. Vectors are 1xN, scalars are 1x1. Copies share the same node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Matrix value, bool requires_grad = false);

    static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
    static Tensor constant(Index rows, Index cols, double v);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows,
                            bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Matrix& value() const { return node_->value; }
    // Leaf-only in-place update (optimizers, checkpoint loading).
    Matrix& mutable_value();

    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    Index size() const { return node_->value.size(); }
    std::vector<Index> shape() const { return {rows(), cols()}; }
    double item() const;

    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool has_grad() const { return node_ && node_->grad.size() != 0; }
    const Matrix& grad() const;
    void zero_grad();

    // Same values, cut from the graph.
    Tensor detach() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

/// Reverse-topological record of the graph reachable from a scalar loss.
class Tape {
public:
    static Tape record(const Tensor& loss);

    // Seeds d(loss)/d(loss) = 1 and visits every node once, outputs before inputs.
    void backward();
    // Clears gradients held by every node on the tape, including leaves, and
    // allows backward() to run again.
    void reset();

    std::size_t size() const { return order_.size(); }

private:
    Tensor loss_;
    std::vector<detail::Node*> order_;  // topological: inputs before outputs
    std::vector<std::shared_ptr<detail::Node>> keep_alive_;
};

void backward(const Tensor& loss);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_mode_enabled();

namespace detail {

void check_finite(const Matrix& m, const char* op);

// Builds the output node; records `inputs` and `backward` only when grad mode is on
// and some input requires grad.
Tensor make_result(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward,
                   const char* op);

}  // namespace detail

}  // namespace dblocks
