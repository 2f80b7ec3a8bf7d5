#pragma once

#include "dblocks/tensor.hpp"

#include <optional>
#include <vector>

namespace dblocks {

enum class BinaryOp { add, sub, mul, div };
enum class UnaryOp { neg, exp, log, tanh, square, sqrt, relu, silu, gelu };

// Broadcasting: every dimension of each operand equals the result's or is 1
// (row vectors over rows, column vectors over columns, 1x1 over everything).
Tensor elementwise(BinaryOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(UnaryOp op, const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::add, a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::sub, a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::mul, a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return elementwise(BinaryOp::div, a, b); }
inline Tensor operator-(const Tensor& a) { return elementwise(UnaryOp::neg, a); }

Tensor operator*(const Tensor& a, double s);
inline Tensor operator*(double s, const Tensor& a) { return a * s; }
Tensor operator+(const Tensor& a, double s);

inline Tensor exp(const Tensor& a) { return elementwise(UnaryOp::exp, a); }
inline Tensor log(const Tensor& a) { return elementwise(UnaryOp::log, a); }
inline Tensor tanh(const Tensor& a) { return elementwise(UnaryOp::tanh, a); }
inline Tensor square(const Tensor& a) { return elementwise(UnaryOp::square, a); }
inline Tensor sqrt(const Tensor& a) { return elementwise(UnaryOp::sqrt, a); }
inline Tensor relu(const Tensor& a) { return elementwise(UnaryOp::relu, a); }
inline Tensor silu(const Tensor& a) { return elementwise(UnaryOp::silu, a); }
// tanh approximation
inline Tensor gelu(const Tensor& a) { return elementwise(UnaryOp::gelu, a); }

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Sum over columns: r x c -> r x 1.
Tensor row_sums(const Tensor& a);

enum class Axis { rows = 0, cols = 1 };

// Normalizes along `axis` (Axis::cols: each row sums to one).
Tensor softmax(const Tensor& x, Axis axis = Axis::cols);
Tensor log_softmax(const Tensor& x, Axis axis = Axis::cols);

// Per-row (x - mean) / sqrt(var + eps), no affine parameters.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
// Per-row x / ||x||_2.
Tensor l2_normalize_rows(const Tensor& x);

// out.row(i) = x.row(index[i]); backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<Index>& index);
Tensor concat_rows(const Tensor& a, const Tensor& b);
// r x c -> r x 1 with out(i) = x(i, column[i]).
Tensor pick(const Tensor& x, const std::vector<int>& column);

// mask(i, j) == true lets query position i attend to key position j.
using AttentionMask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Multi-head scaled dot-product attention over consecutive groups of `seq_len`
// rows (one group per sequence). q, k, v are (groups * seq_len) x d. Masked
// logits are treated as -inf before the softmax.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, Index seq_len, int heads,
                 const AttentionMask* mask = nullptr);

}  // namespace dblocks
