#include "dblocks/ops.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace dblocks {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

Index broadcast_dim(Index a, Index b, const char* what) {
    if (a == b) return a;
    if (a == 1) return b;
    if (b == 1) return a;
    throw ShapeError(std::string("incompatible shapes for ") + what);
}

// a (op) b with numpy-style broadcasting to rows x cols; no copies of the
// broadcast operand for the common same-shape and row-vector cases.
Matrix combine(BinaryOp op, const Matrix& a, const Matrix& b, Index rows, Index cols) {
    const auto apply = [op](const auto& x, const auto& y) -> Matrix {
        switch (op) {
            case BinaryOp::add: return (x + y).matrix();
            case BinaryOp::sub: return (x - y).matrix();
            case BinaryOp::mul: return (x * y).matrix();
            case BinaryOp::div: return (x / y).matrix();
        }
        return Matrix();
    };
    const bool a_full = a.rows() == rows && a.cols() == cols;
    const bool b_full = b.rows() == rows && b.cols() == cols;
    if (a_full && b_full) return apply(a.array(), b.array());
    if (a_full && b.rows() == 1 && b.cols() == cols) {
        Matrix out(rows, cols);
        for (Index i = 0; i < rows; ++i) out.row(i) = apply(a.row(i).array(), b.row(0).array());
        return out;
    }
    if (a_full && b.size() == 1) return apply(a.array(), Matrix::Constant(rows, cols, b(0, 0)).array());
    return apply(a.replicate(rows / a.rows(), cols / a.cols()).array(),
                 b.replicate(rows / b.rows(), cols / b.cols()).array());
}

// Sums a full-shape gradient back down to an operand's (possibly broadcast) shape.
Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
    if (rows == 1) return g.colwise().sum();
    return g.rowwise().sum();
}

const char* binary_name(BinaryOp op) {
    switch (op) {
        case BinaryOp::add: return "add";
        case BinaryOp::sub: return "sub";
        case BinaryOp::mul: return "mul";
        case BinaryOp::div: return "div";
    }
    return "binary";
}

}  // namespace

Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b) {
    const Index rows = broadcast_dim(a.rows(), b.rows(), binary_name(op));
    const Index cols = broadcast_dim(a.cols(), b.cols(), binary_name(op));
    Matrix out = combine(op, a.value(), b.value(), rows, cols);
    const Index ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    return detail::make_result(
        std::move(out), {a, b},
        [op, rows, cols, ar, ac, br, bc](detail::Node& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            const Matrix& g = self.grad;
            switch (op) {
                case BinaryOp::add:
                    if (na.requires_grad) na.accumulate(reduce_to(g, ar, ac));
                    if (nb.requires_grad) nb.accumulate(reduce_to(g, br, bc));
                    break;
                case BinaryOp::sub:
                    if (na.requires_grad) na.accumulate(reduce_to(g, ar, ac));
                    if (nb.requires_grad) nb.accumulate(reduce_to(-g, br, bc));
                    break;
                case BinaryOp::mul:
                    if (na.requires_grad) na.accumulate(reduce_to(combine(BinaryOp::mul, g, nb.value, rows, cols), ar, ac));
                    if (nb.requires_grad) nb.accumulate(reduce_to(combine(BinaryOp::mul, g, na.value, rows, cols), br, bc));
                    break;
                case BinaryOp::div:
                    if (na.requires_grad) na.accumulate(reduce_to(combine(BinaryOp::div, g, nb.value, rows, cols), ar, ac));
                    if (nb.requires_grad) {
                        const Matrix ga = combine(BinaryOp::mul, g, na.value, rows, cols);
                        const Matrix gb = -combine(BinaryOp::div, ga, nb.value.cwiseProduct(nb.value), rows, cols);
                        nb.accumulate(reduce_to(gb, br, bc));
                    }
                    break;
            }
        },
        binary_name(op));
}

namespace {

// tanh through the vectorized exp; saturates cleanly at +-1.
Matrix fast_tanh(const Matrix& u) {
    return (1.0 - 2.0 / ((2.0 * u.array()).exp() + 1.0)).matrix();
}

}  // namespace

Tensor elementwise(UnaryOp op, const Tensor& a) {
    const Matrix& x = a.value();
    Matrix out;
    Matrix aux;  // gelu: tanh of the inner argument
    const char* name = "unary";
    switch (op) {
        case UnaryOp::neg: out = -x; name = "neg"; break;
        case UnaryOp::exp: out = x.array().exp().matrix(); name = "exp"; break;
        case UnaryOp::log: out = x.array().log().matrix(); name = "log"; break;
        case UnaryOp::tanh: out = x.array().tanh().matrix(); name = "tanh"; break;
        case UnaryOp::square: out = x.array().square().matrix(); name = "square"; break;
        case UnaryOp::sqrt: out = x.array().sqrt().matrix(); name = "sqrt"; break;
        case UnaryOp::relu: out = x.cwiseMax(0.0); name = "relu"; break;
        case UnaryOp::silu:
            out = (x.array() / (1.0 + (-x.array()).exp())).matrix();
            name = "silu";
            break;
        case UnaryOp::gelu: {
            aux = fast_tanh((kGeluC * (x.array() + kGeluA * x.array().cube())).matrix());
            out = (0.5 * x.array() * (1.0 + aux.array())).matrix();
            name = "gelu";
            break;
        }
    }
    return detail::make_result(
        std::move(out), {a},
        [op, t = std::move(aux)](detail::Node& self) {
            auto& na = *self.inputs[0];
            const auto x = na.value.array();
            const auto y = self.value.array();
            const auto g = self.grad.array();
            switch (op) {
                case UnaryOp::neg: na.accumulate_expr((-g).matrix()); break;
                case UnaryOp::exp: na.accumulate_expr((g * y).matrix()); break;
                case UnaryOp::log: na.accumulate_expr((g / x).matrix()); break;
                case UnaryOp::tanh: na.accumulate_expr((g * (1.0 - y.square())).matrix()); break;
                case UnaryOp::square: na.accumulate_expr((2.0 * g * x).matrix()); break;
                case UnaryOp::sqrt: na.accumulate_expr((0.5 * g / y).matrix()); break;
                case UnaryOp::relu: na.accumulate_expr((g * (x > 0.0).cast<double>()).matrix()); break;
                case UnaryOp::silu: {
                    const Matrix s = (1.0 / (1.0 + (-x).exp())).matrix();
                    const auto sa = s.array();
                    na.accumulate_expr((g * (sa + x * sa * (1.0 - sa))).matrix());
                    break;
                }
                case UnaryOp::gelu: {
                    const auto ta = t.array();
                    na.accumulate_expr((g * (0.5 * (1.0 + ta) + 0.5 * x * (1.0 - ta.square()) * kGeluC *
                                                                     (1.0 + 3.0 * kGeluA * x.square())))
                                           .matrix());
                    break;
                }
            }
        },
        name);
}

Tensor operator*(const Tensor& a, double s) {
    return detail::make_result(
        a.value() * s, {a},
        [s](detail::Node& self) { self.inputs[0]->accumulate_expr(self.grad * s); }, "scale");
}

Tensor operator+(const Tensor& a, double s) {
    return detail::make_result(
        (a.value().array() + s).matrix(), {a},
        [](detail::Node& self) { self.inputs[0]->accumulate(self.grad); }, "add_scalar");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul inner dimension mismatch: " + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()));
    }
    Matrix out(a.rows(), b.cols());
    out.noalias() = a.value() * b.value();
    return detail::make_result(
        std::move(out), {a, b},
        [](detail::Node& self) {
            auto& na = *self.inputs[0];
            auto& nb = *self.inputs[1];
            if (na.requires_grad) na.accumulate_expr(self.grad * nb.value.transpose());
            if (nb.requires_grad) nb.accumulate_expr(na.value.transpose() * self.grad);
        },
        "matmul");
}

Tensor transpose(const Tensor& a) {
    return detail::make_result(
        a.value().transpose(), {a},
        [](detail::Node& self) { self.inputs[0]->accumulate_expr(self.grad.transpose()); },
        "transpose");
}

Tensor sum(const Tensor& a) {
    const Index r = a.rows(), c = a.cols();
    return detail::make_result(
        Matrix::Constant(1, 1, a.value().sum()), {a},
        [r, c](detail::Node& self) {
            self.inputs[0]->accumulate(Matrix::Constant(r, c, self.grad(0, 0)));
        },
        "sum");
}

Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ShapeError("mean of an empty tensor");
    return sum(a) * (1.0 / static_cast<double>(a.size()));
}

Tensor row_sums(const Tensor& a) {
    const Index c = a.cols();
    return detail::make_result(
        a.value().rowwise().sum(), {a},
        [c](detail::Node& self) { self.inputs[0]->accumulate(self.grad.replicate(1, c)); },
        "row_sums");
}

namespace {

Matrix softmax_rows_value(const Matrix& x) {
    Matrix y = x.colwise() - x.rowwise().maxCoeff();
    y = y.array().exp().matrix();
    y.array().colwise() /= y.rowwise().sum().array();
    return y;
}

Tensor softmax_rows(const Tensor& x) {
    Matrix y = softmax_rows_value(x.value());
    return detail::make_result(
        std::move(y), {x},
        [](detail::Node& self) {
            const Matrix& yc = self.value;
            const Matrix& g = self.grad;
            ColVector dot = g.cwiseProduct(yc).rowwise().sum();
            Matrix dx = yc.cwiseProduct(g.colwise() - dot);
            self.inputs[0]->accumulate(dx);
        },
        "softmax");
}

Tensor log_softmax_rows(const Tensor& x) {
    const Matrix& v = x.value();
    ColVector mx = v.rowwise().maxCoeff();
    Matrix shifted = v.colwise() - mx;
    ColVector lse = shifted.array().exp().rowwise().sum().log().matrix();
    Matrix y = shifted.colwise() - lse;
    Matrix p = y.array().exp().matrix();
    return detail::make_result(
        std::move(y), {x},
        [p](detail::Node& self) {
            const Matrix& g = self.grad;
            ColVector gs = g.rowwise().sum();
            Matrix dx = g - p.cwiseProduct(gs.replicate(1, p.cols()));
            self.inputs[0]->accumulate(dx);
        },
        "log_softmax");
}

}  // namespace

Tensor softmax(const Tensor& x, Axis axis) {
    if (axis == Axis::cols) return softmax_rows(x);
    return transpose(softmax_rows(transpose(x)));
}

Tensor log_softmax(const Tensor& x, Axis axis) {
    if (axis == Axis::cols) return log_softmax_rows(x);
    return transpose(log_softmax_rows(transpose(x)));
}

Tensor layer_norm(const Tensor& x, double eps) {
    const Matrix& v = x.value();
    const double n = static_cast<double>(v.cols());
    ColVector mu = v.rowwise().mean();
    Matrix centered = v.colwise() - mu;
    ColVector var = centered.array().square().rowwise().sum().matrix() / n;
    ColVector inv_std = (var.array() + eps).rsqrt().matrix();
    Matrix xhat = centered.array().colwise() * inv_std.array();
    return detail::make_result(
        std::move(xhat), {x},
        [inv_std, n](detail::Node& self) {
            const Matrix& xh = self.value;
            const Matrix& g = self.grad;
            ColVector g_mean = g.rowwise().sum() / n;
            ColVector gx_mean = g.cwiseProduct(xh).rowwise().sum() / n;
            Matrix dx = g.colwise() - g_mean;
            dx -= (xh.array().colwise() * gx_mean.array()).matrix();
            dx.array().colwise() *= inv_std.array();
            self.inputs[0]->accumulate(dx);
        },
        "layer_norm");
}

Tensor l2_normalize_rows(const Tensor& x) {
    ColVector norms = x.value().rowwise().norm();
    Matrix y = x.value().array().colwise() / norms.array();
    return detail::make_result(
        std::move(y), {x},
        [norms](detail::Node& self) {
            const Matrix& yc = self.value;
            const Matrix& g = self.grad;
            ColVector dot = g.cwiseProduct(yc).rowwise().sum();
            Matrix dx = g - yc.cwiseProduct(dot.replicate(1, yc.cols()));
            dx.array().colwise() /= norms.array();
            self.inputs[0]->accumulate(dx);
        },
        "l2_normalize");
}

Tensor gather_rows(const Tensor& x, const std::vector<Index>& index) {
    const Index n = x.rows();
    Matrix out(static_cast<Index>(index.size()), x.cols());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= n) throw std::out_of_range("gather_rows index out of range");
        out.row(static_cast<Index>(i)) = x.value().row(index[i]);
    }
    const Index cols = x.cols();
    return detail::make_result(
        std::move(out), {x},
        [index, n, cols](detail::Node& self) {
            Matrix dx = Matrix::Zero(n, cols);
            for (std::size_t i = 0; i < index.size(); ++i) {
                dx.row(index[i]) += self.grad.row(static_cast<Index>(i));
            }
            self.inputs[0]->accumulate(dx);
        },
        "gather_rows");
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw ShapeError("concat_rows column mismatch");
    Matrix out(a.rows() + b.rows(), a.cols());
    out.topRows(a.rows()) = a.value();
    out.bottomRows(b.rows()) = b.value();
    const Index ar = a.rows(), br = b.rows();
    return detail::make_result(
        std::move(out), {a, b},
        [ar, br](detail::Node& self) {
            self.inputs[0]->accumulate_expr(self.grad.topRows(ar));
            self.inputs[1]->accumulate_expr(self.grad.bottomRows(br));
        },
        "concat_rows");
}

Tensor pick(const Tensor& x, const std::vector<int>& column) {
    if (static_cast<Index>(column.size()) != x.rows()) throw ShapeError("pick: one column per row");
    Matrix out(x.rows(), 1);
    for (Index i = 0; i < x.rows(); ++i) {
        const int c = column[static_cast<std::size_t>(i)];
        if (c < 0 || c >= x.cols()) throw std::out_of_range("pick column out of range");
        out(i, 0) = x.value()(i, c);
    }
    const Index r = x.rows(), cols = x.cols();
    return detail::make_result(
        std::move(out), {x},
        [column, r, cols](detail::Node& self) {
            Matrix dx = Matrix::Zero(r, cols);
            for (Index i = 0; i < r; ++i) dx(i, column[static_cast<std::size_t>(i)]) = self.grad(i, 0);
            self.inputs[0]->accumulate(dx);
        },
        "pick");
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index seq_len, int heads,
                 const AttentionMask* mask) {
    const Index rows = q.rows();
    const Index d = q.cols();
    if (k.rows() != rows || v.rows() != rows || k.cols() != d || v.cols() != d) {
        throw ShapeError("attention: q, k, v shapes differ");
    }
    if (seq_len <= 0 || rows % seq_len != 0) throw ShapeError("attention: rows not a multiple of seq_len");
    if (heads <= 0 || d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    if (mask) {
        if (mask->rows() != seq_len || mask->cols() != seq_len) throw ShapeError("attention: mask shape");
        for (Index i = 0; i < seq_len; ++i) {
            if (!mask->row(i).any()) throw std::invalid_argument("attention mask row " + std::to_string(i) + " is all false");
        }
    }
    const Index groups = rows / seq_len;
    const Index dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    const Matrix& Q = q.value();
    const Matrix& K = k.value();
    const Matrix& V = v.value();
    Matrix out(rows, d);
    // Attention weights per (group, head), kept for the backward pass.
    auto probs = std::make_shared<std::vector<Matrix>>(static_cast<std::size_t>(groups * heads));
    for (Index g = 0; g < groups; ++g) {
        for (int h = 0; h < heads; ++h) {
            auto qb = Q.block(g * seq_len, h * dh, seq_len, dh);
            auto kb = K.block(g * seq_len, h * dh, seq_len, dh);
            auto vb = V.block(g * seq_len, h * dh, seq_len, dh);
            Matrix s = (qb * kb.transpose()) * scale;
            if (mask) {
                for (Index i = 0; i < seq_len; ++i) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (Index j = 0; j < seq_len; ++j) {
                        if ((*mask)(i, j)) mx = std::max(mx, s(i, j));
                    }
                    double total = 0.0;
                    for (Index j = 0; j < seq_len; ++j) {
                        s(i, j) = (*mask)(i, j) ? std::exp(s(i, j) - mx) : 0.0;
                        total += s(i, j);
                    }
                    s.row(i) /= total;
                }
            } else {
                s = softmax_rows_value(s);
            }
            out.block(g * seq_len, h * dh, seq_len, dh).noalias() = s * vb;
            (*probs)[static_cast<std::size_t>(g * heads + h)] = std::move(s);
        }
    }
    return detail::make_result(
        std::move(out), {q, k, v},
        [probs, groups, heads, seq_len, dh, scale](detail::Node& self) {
            auto& nq = *self.inputs[0];
            auto& nk = *self.inputs[1];
            auto& nv = *self.inputs[2];
            const Matrix& G = self.grad;
            const Index rows = G.rows();
            const Index d = G.cols();
            Matrix dq = Matrix::Zero(rows, d), dk = Matrix::Zero(rows, d), dv = Matrix::Zero(rows, d);
            for (Index g = 0; g < groups; ++g) {
                for (int h = 0; h < heads; ++h) {
                    const Matrix& p = (*probs)[static_cast<std::size_t>(g * heads + h)];
                    auto go = G.block(g * seq_len, h * dh, seq_len, dh);
                    auto qb = nq.value.block(g * seq_len, h * dh, seq_len, dh);
                    auto kb = nk.value.block(g * seq_len, h * dh, seq_len, dh);
                    auto vb = nv.value.block(g * seq_len, h * dh, seq_len, dh);
                    dv.block(g * seq_len, h * dh, seq_len, dh).noalias() = p.transpose() * go;
                    Matrix dp = go * vb.transpose();
                    ColVector dot = dp.cwiseProduct(p).rowwise().sum();
                    Matrix ds = p.cwiseProduct(dp.colwise() - dot) * scale;
                    dq.block(g * seq_len, h * dh, seq_len, dh).noalias() = ds * kb;
                    dk.block(g * seq_len, h * dh, seq_len, dh).noalias() = ds.transpose() * qb;
                }
            }
            if (nq.requires_grad) nq.accumulate(dq);
            if (nk.requires_grad) nk.accumulate(dk);
            if (nv.requires_grad) nv.accumulate(dv);
        },
        "attention");
}

}  // namespace dblocks
