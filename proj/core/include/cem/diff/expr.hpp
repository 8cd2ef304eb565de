#pragma once

// Eagerly evaluated expression graphs with reverse-mode derivatives that are
// themselves expressions, so gradients can be differentiated again.

#include "cem/diff/tensor.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace cem::diff {

enum class Op : std::uint8_t {
  Input,
  Constant,
  Noise,
  Add,
  Sub,
  Mul,
  Neg,
  Scale,
  MatMul,
  Affine,
  Tanh,
  TanhBackward,
  Sigmoid,
  SigmoidBackward,
  Softplus,
  Square,
  Sum,
  Expand,
  ColSum,
  RepeatRows,
  RowSum,
  RepeatCols,
  RowScale,
  Gather,
  Scatter,
  ConcatCols,
  SliceCols,
  PadCols,
  StopGradient,
  Clamp,
  ClampMask,
};

const char* op_name(Op op);

class UnboundInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class DerivativeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using IndexList = std::shared_ptr<const std::vector<Index>>;

struct Node;

// Immutable handle to a graph node. Copies share the node.
class Expr {
 public:
  Expr() = default;
  explicit Expr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}

  const Tensor& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Op op() const;
  // True when some non-stopped path reaches an Input node.
  bool differentiable() const;
  const Node* get() const { return node_.get(); }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<const Node> node_;
};

struct Node {
  Op op{};
  std::vector<Expr> in;
  Tensor value;
  bool differentiable = false;  // derivative may flow into this node
  bool has_input = false;       // value depends on some Input (for re-evaluation)
  double scalar = 0.0;          // Scale factor, Clamp lower bound, Noise stddev
  double scalar2 = 0.0;         // Clamp upper bound
  bool flag_a = false;          // MatMul transpose of lhs
  bool flag_b = false;          // MatMul transpose of rhs
  Index dim0 = 0;               // repeat count / output rows / column offset
  Index dim1 = 0;               // output cols / total columns
  std::uint64_t seed = 0;
  IndexList index;
  std::string name;
};

// Leaves
Expr input(Tensor value, std::string name = {});
Expr constant(Tensor value);
Expr constant(double v);
Expr zeros(Index rows, Index cols);
Expr noise(Index rows, Index cols, std::uint64_t seed, double stddev);

// Arithmetic. Shapes must match except that either side of Add/Sub/Mul may be 1x1.
Expr add(const Expr& a, const Expr& b);
Expr sub(const Expr& a, const Expr& b);
Expr mul(const Expr& a, const Expr& b);
Expr neg(const Expr& a);
Expr scale(const Expr& a, double c);
Expr matmul(const Expr& a, const Expr& b, bool transpose_a = false, bool transpose_b = false);
// x * W + 1 * b with b a 1 x cols(W) row.
Expr affine(const Expr& x, const Expr& w, const Expr& b);

// Elementwise nonlinearities
Expr tanh(const Expr& a);
Expr sigmoid(const Expr& a);
Expr softplus(const Expr& a);
Expr square(const Expr& a);
// g * (1 - y^2), the tanh adjoint given its output y.
Expr tanh_backward(const Expr& g, const Expr& y);
// g * y * (1 - y), the sigmoid adjoint given its output y.
Expr sigmoid_backward(const Expr& g, const Expr& y);

// Reductions and broadcasts
Expr sum(const Expr& a);
Expr expand(const Expr& s, Index rows, Index cols);
Expr col_sum(const Expr& a);  // -> 1 x cols
Expr repeat_rows(const Expr& r, Index rows);
Expr row_sum(const Expr& a);  // -> rows x 1
Expr repeat_cols(const Expr& c, Index cols);
// Scales row i of m by v(i); v is rows x 1.
Expr row_scale(const Expr& m, const Expr& v);

// Indexing
Expr gather(const Expr& m, IndexList rows);
// out(rows[k]) += m(k); out has out_rows rows.
Expr scatter(const Expr& m, IndexList rows, Index out_rows);
Expr concat_cols(std::span<const Expr> parts);
Expr concat_cols(std::initializer_list<Expr> parts);
Expr slice_cols(const Expr& m, Index offset, Index width);
Expr pad_cols(const Expr& m, Index offset, Index total);

// Identity in value, zero derivative.
Expr stop_gradient(const Expr& a);
// Elementwise clamp; derivative is passed through only strictly inside the bounds.
Expr clamp(const Expr& a, double lo, double hi);
Expr clamp_mask(const Expr& g, const Expr& x, double lo, double hi);

inline Expr operator+(const Expr& a, const Expr& b) { return add(a, b); }
inline Expr operator-(const Expr& a, const Expr& b) { return sub(a, b); }
inline Expr operator*(const Expr& a, const Expr& b) { return mul(a, b); }
inline Expr operator-(const Expr& a) { return neg(a); }

IndexList make_index(std::vector<Index> v);

using Bindings = std::unordered_map<const Node*, Tensor>;

// Re-evaluates `root` with some Input nodes rebound. Unbound inputs keep the value
// they were constructed with unless `require_all` is set.
Tensor evaluate(const Expr& root, const Bindings& bindings, bool require_all = false);

// Reverse-mode derivative of a scalar root with respect to each of `wrt` (Input nodes
// or any interior node). The results are graph expressions and can be differentiated
// again. Inputs that the root does not depend on get a zero constant.
std::vector<Expr> derivative(const Expr& root, std::span<const Expr> wrt);
Expr derivative(const Expr& root, const Expr& wrt);

// Number of distinct nodes reachable from root (diagnostics and tests).
std::size_t graph_size(const Expr& root);

}  // namespace cem::diff
