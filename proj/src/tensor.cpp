#include "dblocks/tensor.hpp"

#include <cmath>
#include <unordered_set>

namespace dblocks {

namespace {
thread_local bool g_grad_enabled = true;
}

namespace detail {

void Node::accumulate(const Matrix& g) { accumulate_expr(g); }

void check_finite(const Matrix& m, const char* op) {
    // A single vectorized sum is non-finite whenever any entry is; confirm
    // with the exact scan before throwing.
    if (!std::isfinite(m.sum()) && !m.allFinite()) {
        throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

Tensor make_result(Matrix value, std::vector<Tensor> inputs, std::function<void(Node&)> backward,
                   const char* op) {
    check_finite(value, op);
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    bool any = false;
    if (g_grad_enabled) {
        for (const auto& t : inputs) any = any || t.requires_grad();
    }
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (const auto& t : inputs) node->inputs.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor::wrap(std::move(node));
}

}  // namespace detail

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
    detail::check_finite(value, "Tensor construction");
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
    return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::constant(Index rows, Index cols, double v) {
    return Tensor(Matrix::Constant(rows, cols, v));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(Matrix::Constant(1, 1, v), requires_grad);
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows,
                         bool requires_grad) {
    const Index r = static_cast<Index>(rows.size());
    const Index c = r == 0 ? 0 : static_cast<Index>(rows.begin()->size());
    Matrix m(r, c);
    Index i = 0;
    for (const auto& row : rows) {
        if (static_cast<Index>(row.size()) != c) throw ShapeError("ragged initializer");
        Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return Tensor(std::move(m), requires_grad);
}

Matrix& Tensor::mutable_value() {
    if (!node_->inputs.empty()) throw std::logic_error("mutable_value on a non-leaf tensor");
    return node_->value;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
    return node_->value(0, 0);
}

const Matrix& Tensor::grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    if (node_) node_->grad.resize(0, 0);
}

Tensor Tensor::detach() const { return Tensor(node_->value, false); }

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tape Tape::record(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ShapeError("backward requires a scalar loss");
    }
    Tape tape;
    tape.loss_ = loss;
    // Iterative post-order DFS; inputs are visited in declaration order so the
    // ordering is deterministic.
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    detail::Node* root = loss.node().get();
    if (!root->requires_grad) return tape;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && seen.insert(child).second) {
                stack.emplace_back(child, 0);
            }
        } else {
            tape.order_.push_back(node);
            stack.pop_back();
        }
    }
    return tape;
}

void Tape::backward() {
    if (order_.empty()) return;
    detail::Node* root = loss_.node().get();
    if (root->backward_done) {
        throw std::logic_error("backward called twice on the same graph without reset");
    }
    root->grad = Matrix::Ones(1, 1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
        detail::Node* node = *it;
        if (node->backward && node->grad.size() != 0) node->backward(*node);
    }
    root->backward_done = true;
}

void Tape::reset() {
    for (detail::Node* node : order_) {
        node->grad.resize(0, 0);
        node->backward_done = false;
    }
}

void backward(const Tensor& loss) { Tape::record(loss).backward(); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

}  // namespace dblocks
