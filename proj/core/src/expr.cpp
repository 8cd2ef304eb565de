#include "cem/diff/expr.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

namespace cem::diff {

namespace {

[[noreturn]] void shape_fail(const char* what, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                   b.shape_str());
}

double softplus_scalar(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

// Vectorizable tanh: odd Taylor series near zero, (e^2x - 1) / (e^2x + 1) elsewhere.
// Max abs error ~1e-16; libm's scalar tanh is an order of magnitude slower here.
Mat fast_tanh(const Mat& m) {
  Mat out(m.rows(), m.cols());
  out.array() = (2.0 * m.array().max(-20.0).min(20.0)).exp();
  const double* in = m.data();
  double* y = out.data();
  for (Index i = 0; i < out.size(); ++i) {
    const double v = in[i];
    const double v2 = v * v;
    const double series = v * (1.0 + v2 * (-1.0 / 3 + v2 * (2.0 / 15 + v2 * (-17.0 / 315))));
    const double t = y[i];
    y[i] = std::abs(v) < 0.02 ? series : (t - 1.0) / (t + 1.0);
  }
  return out;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor broadcast_binary(Op op, const Tensor& a, const Tensor& b) {
  auto apply = [op](auto x, auto y) -> Mat {
    switch (op) {
      case Op::Add: return (x + y).matrix();
      case Op::Sub: return (x - y).matrix();
      default: return (x * y).matrix();
    }
  };
  if (a.same_shape(b)) return Tensor(apply(a.mat().array(), b.mat().array()));
  if (a.is_scalar()) {
    Mat av = Mat::Constant(b.rows(), b.cols(), a.item());
    return Tensor(apply(av.array(), b.mat().array()));
  }
  Mat bv = Mat::Constant(a.rows(), a.cols(), b.item());
  return Tensor(apply(a.mat().array(), bv.array()));
}

Tensor compute(const Node& n, std::span<const Tensor* const> in) {
  switch (n.op) {
    case Op::Input:
    case Op::Constant:
    case Op::Noise:
      return n.value;
    case Op::Add:
    case Op::Sub:
    case Op::Mul:
      return broadcast_binary(n.op, *in[0], *in[1]);
    case Op::Neg:
      return Tensor(Mat(-in[0]->mat()));
    case Op::Scale:
      return Tensor(Mat(n.scalar * in[0]->mat()));
    case Op::MatMul: {
      const Mat& a = in[0]->mat();
      const Mat& b = in[1]->mat();
      Mat out;
      if (!n.flag_a && !n.flag_b) out.noalias() = a * b;
      else if (n.flag_a && !n.flag_b) out.noalias() = a.transpose() * b;
      else if (!n.flag_a && n.flag_b) out.noalias() = a * b.transpose();
      else out.noalias() = a.transpose() * b.transpose();
      return Tensor(std::move(out));
    }
    case Op::Affine: {
      Mat out;
      out.noalias() = in[0]->mat() * in[1]->mat();
      out.rowwise() += in[2]->mat().row(0);
      return Tensor(std::move(out));
    }
    case Op::Tanh:
      return Tensor(fast_tanh(in[0]->mat()));
    case Op::TanhBackward: {
      const auto y = in[1]->mat().array();
      return Tensor(Mat(in[0]->mat().array() * (1.0 - y * y)));
    }
    case Op::Sigmoid:
      return Tensor(Mat(in[0]->mat().unaryExpr(&sigmoid_scalar)));
    case Op::SigmoidBackward: {
      const auto y = in[1]->mat().array();
      return Tensor(Mat(in[0]->mat().array() * y * (1.0 - y)));
    }
    case Op::Softplus:
      return Tensor(Mat(in[0]->mat().unaryExpr(&softplus_scalar)));
    case Op::Square:
      return Tensor(Mat(in[0]->mat().array().square()));
    case Op::Sum:
      return Tensor::scalar(in[0]->mat().sum());
    case Op::Expand:
      return Tensor(n.dim0, n.dim1, in[0]->item());
    case Op::ColSum:
      return Tensor(Mat(in[0]->mat().colwise().sum()));
    case Op::RepeatRows:
      return Tensor(Mat(in[0]->mat().replicate(n.dim0, 1)));
    case Op::RowSum:
      return Tensor(Mat(in[0]->mat().rowwise().sum()));
    case Op::RepeatCols:
      return Tensor(Mat(in[0]->mat().replicate(1, n.dim0)));
    case Op::RowScale:
      return Tensor(Mat(in[0]->mat().array().colwise() * in[1]->mat().col(0).array()));
    case Op::Gather: {
      const Mat& m = in[0]->mat();
      const auto& idx = *n.index;
      Mat out(static_cast<Index>(idx.size()), m.cols());
      for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Index>(k)) = m.row(idx[k]);
      return Tensor(std::move(out));
    }
    case Op::Scatter: {
      const Mat& m = in[0]->mat();
      const auto& idx = *n.index;
      Mat out = Mat::Zero(n.dim0, m.cols());
      for (std::size_t k = 0; k < idx.size(); ++k) out.row(idx[k]) += m.row(static_cast<Index>(k));
      return Tensor(std::move(out));
    }
    case Op::ConcatCols: {
      Index cols = 0;
      for (const auto* t : in) cols += t->cols();
      Mat out(in[0]->rows(), cols);
      Index off = 0;
      for (const auto* t : in) {
        out.middleCols(off, t->cols()) = t->mat();
        off += t->cols();
      }
      return Tensor(std::move(out));
    }
    case Op::SliceCols:
      return Tensor(Mat(in[0]->mat().middleCols(n.dim0, n.dim1)));
    case Op::PadCols: {
      Mat out = Mat::Zero(in[0]->rows(), n.dim1);
      out.middleCols(n.dim0, in[0]->cols()) = in[0]->mat();
      return Tensor(std::move(out));
    }
    case Op::StopGradient:
      return *in[0];
    case Op::Clamp:
      return Tensor(Mat(in[0]->mat().cwiseMax(n.scalar).cwiseMin(n.scalar2)));
    case Op::ClampMask: {
      const auto x = in[1]->mat().array();
      const double lo = n.scalar;
      const double hi = n.scalar2;
      return Tensor(Mat(((x > lo) && (x < hi)).select(in[0]->mat().array(), 0.0)));
    }
  }
  throw DerivativeError("compute: unknown op");
}

Expr make(Node n) {
  bool diff = false;
  bool has_input = false;
  for (std::size_t i = 0; i < n.in.size(); ++i) {
    const auto* c = n.in[i].get();
    has_input = has_input || c->has_input;
    if (n.op == Op::ClampMask && i == 1) continue;
    diff = diff || c->differentiable;
  }
  if (n.op == Op::StopGradient) diff = false;
  n.differentiable = diff;
  n.has_input = has_input;
  std::vector<const Tensor*> vals;
  vals.reserve(n.in.size());
  for (const auto& c : n.in) vals.push_back(&c.value());
  n.value = compute(n, vals);
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Node node(Op op, std::initializer_list<Expr> in) {
  Node n;
  n.op = op;
  n.in.assign(in.begin(), in.end());
  for (const auto& e : n.in)
    if (!e) throw ShapeError(std::string(op_name(op)) + ": null operand");
  return n;
}

void check_same_or_scalar(const char* what, const Expr& a, const Expr& b) {
  const auto& va = a.value();
  const auto& vb = b.value();
  if (va.same_shape(vb) || va.is_scalar() || vb.is_scalar()) return;
  shape_fail(what, va, vb);
}

void check_column(const char* what, const Expr& v, Index rows) {
  if (v.cols() != 1 || v.rows() != rows)
    throw ShapeError(std::string(what) + ": expected column of " + std::to_string(rows) +
                     " rows, got " + v.value().shape_str());
}

// Reduces an adjoint to the shape of a possibly scalar-broadcast operand.
Expr reduce_to(const Expr& g, const Expr& operand) {
  if (operand.value().is_scalar() && !g.value().is_scalar()) return sum(g);
  return g;
}

Expr vjp(const Expr& self, std::size_t child, const Expr& g) {
  const Node& n = *self.get();
  const auto& in = n.in;
  switch (n.op) {
    case Op::Add:
      return reduce_to(g, in[child]);
    case Op::Sub:
      return reduce_to(child == 0 ? g : neg(g), in[child]);
    case Op::Mul:
      return reduce_to(mul(g, in[1 - child]), in[child]);
    case Op::Neg:
      return neg(g);
    case Op::Scale:
      return scale(g, n.scalar);
    case Op::MatMul: {
      const bool ta = n.flag_a;
      const bool tb = n.flag_b;
      if (child == 0) return ta ? matmul(in[1], g, tb, true) : matmul(g, in[1], false, !tb);
      return tb ? matmul(g, in[0], true, ta) : matmul(in[0], g, !ta, false);
    }
    case Op::Affine:
      if (child == 0) return matmul(g, in[1], false, true);
      if (child == 1) return matmul(in[0], g, true, false);
      return col_sum(g);
    case Op::Tanh:
      return tanh_backward(g, self);
    case Op::TanhBackward:
      if (child == 0) return tanh_backward(g, in[1]);
      return mul(mul(g, in[0]), scale(in[1], -2.0));
    case Op::Sigmoid:
      return sigmoid_backward(g, self);
    case Op::SigmoidBackward: {
      if (child == 0) return sigmoid_backward(g, in[1]);
      // d/dy [y (1 - y)] = 1 - 2y
      Expr one_minus_2y = add(constant(1.0), scale(in[1], -2.0));
      return mul(mul(g, in[0]), one_minus_2y);
    }
    case Op::Softplus:
      return mul(g, sigmoid(in[0]));
    case Op::Square:
      return mul(g, scale(in[0], 2.0));
    case Op::Sum:
      return expand(g, in[0].rows(), in[0].cols());
    case Op::Expand:
      return sum(g);
    case Op::ColSum:
      return repeat_rows(g, in[0].rows());
    case Op::RepeatRows:
      return col_sum(g);
    case Op::RowSum:
      return repeat_cols(g, in[0].cols());
    case Op::RepeatCols:
      return row_sum(g);
    case Op::RowScale:
      if (child == 0) return row_scale(g, in[1]);
      return row_sum(mul(g, in[0]));
    case Op::Gather:
      return scatter(g, n.index, in[0].rows());
    case Op::Scatter:
      return gather(g, n.index);
    case Op::ConcatCols: {
      Index off = 0;
      for (std::size_t i = 0; i < child; ++i) off += in[i].cols();
      return slice_cols(g, off, in[child].cols());
    }
    case Op::SliceCols:
      return pad_cols(g, n.dim0, in[0].cols());
    case Op::PadCols:
      return slice_cols(g, n.dim0, in[0].cols());
    case Op::Clamp:
      return clamp_mask(g, in[0], n.scalar, n.scalar2);
    case Op::ClampMask:
      return clamp_mask(g, in[1], n.scalar, n.scalar2);
    case Op::Input:
    case Op::Constant:
    case Op::Noise:
    case Op::StopGradient:
      break;
  }
  throw DerivativeError(std::string("no derivative rule for ") + op_name(n.op));
}

bool child_is_differentiable(const Node& n, std::size_t i) {
  if (n.op == Op::StopGradient) return false;
  if (n.op == Op::ClampMask && i == 1) return false;
  return n.in[i].differentiable();
}

// Post-order over nodes satisfying `keep`, iterative to survive long unrolled chains.
template <class Keep>
std::vector<Expr> postorder(const Expr& root, Keep keep) {
  std::vector<Expr> order;
  std::unordered_set<const Node*> seen;
  std::vector<std::pair<Expr, std::size_t>> stack;
  if (!keep(*root.get())) return order;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [e, next] = stack.back();
    const Node& n = *e.get();
    if (next < n.in.size()) {
      const std::size_t i = next++;
      const Expr& c = n.in[i];
      if (seen.count(c.get()) || !keep(*c.get())) continue;
      seen.insert(c.get());
      stack.emplace_back(c, 0);
      continue;
    }
    order.push_back(e);
    stack.pop_back();
  }
  return order;
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Noise: return "gaussian-noise";
    case Op::Add: return "add";
    case Op::Sub: return "sub";
    case Op::Mul: return "mul";
    case Op::Neg: return "neg";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Affine: return "affine";
    case Op::Tanh: return "tanh";
    case Op::TanhBackward: return "tanh-backward";
    case Op::Sigmoid: return "sigmoid";
    case Op::SigmoidBackward: return "sigmoid-backward";
    case Op::Softplus: return "softplus";
    case Op::Square: return "square";
    case Op::Sum: return "sum";
    case Op::Expand: return "expand";
    case Op::ColSum: return "col-sum";
    case Op::RepeatRows: return "repeat-rows";
    case Op::RowSum: return "row-sum";
    case Op::RepeatCols: return "repeat-cols";
    case Op::RowScale: return "row-scale";
    case Op::Gather: return "gather";
    case Op::Scatter: return "scatter";
    case Op::ConcatCols: return "concat";
    case Op::SliceCols: return "slice";
    case Op::PadCols: return "pad";
    case Op::StopGradient: return "stop-gradient";
    case Op::Clamp: return "clamp";
    case Op::ClampMask: return "clamp-mask";
  }
  return "?";
}

const Tensor& Expr::value() const { return node_->value; }
Op Expr::op() const { return node_->op; }
bool Expr::differentiable() const { return node_->differentiable; }

IndexList make_index(std::vector<Index> v) {
  return std::make_shared<const std::vector<Index>>(std::move(v));
}

Expr input(Tensor value, std::string name) {
  Node n;
  n.op = Op::Input;
  n.value = std::move(value);
  n.differentiable = true;
  n.has_input = true;
  n.name = std::move(name);
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr constant(Tensor value) {
  Node n;
  n.op = Op::Constant;
  n.value = std::move(value);
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr constant(double v) { return constant(Tensor::scalar(v)); }

Expr zeros(Index rows, Index cols) { return constant(Tensor(rows, cols)); }

Expr noise(Index rows, Index cols, std::uint64_t seed, double stddev) {
  Node n;
  n.op = Op::Noise;
  n.seed = seed;
  n.scalar = stddev;
  n.value = gaussian(rows, cols, seed, stddev);
  return Expr(std::make_shared<const Node>(std::move(n)));
}

Expr add(const Expr& a, const Expr& b) {
  check_same_or_scalar("add", a, b);
  return make(node(Op::Add, {a, b}));
}

Expr sub(const Expr& a, const Expr& b) {
  check_same_or_scalar("sub", a, b);
  return make(node(Op::Sub, {a, b}));
}

Expr mul(const Expr& a, const Expr& b) {
  check_same_or_scalar("mul", a, b);
  return make(node(Op::Mul, {a, b}));
}

Expr neg(const Expr& a) { return make(node(Op::Neg, {a})); }

Expr scale(const Expr& a, double c) {
  Node n = node(Op::Scale, {a});
  n.scalar = c;
  return make(std::move(n));
}

Expr matmul(const Expr& a, const Expr& b, bool transpose_a, bool transpose_b) {
  const Index inner_a = transpose_a ? a.rows() : a.cols();
  const Index inner_b = transpose_b ? b.cols() : b.rows();
  if (inner_a != inner_b) shape_fail("matmul", a.value(), b.value());
  Node n = node(Op::MatMul, {a, b});
  n.flag_a = transpose_a;
  n.flag_b = transpose_b;
  return make(std::move(n));
}

Expr affine(const Expr& x, const Expr& w, const Expr& b) {
  if (x.cols() != w.rows()) shape_fail("affine", x.value(), w.value());
  if (b.rows() != 1 || b.cols() != w.cols()) shape_fail("affine bias", w.value(), b.value());
  return make(node(Op::Affine, {x, w, b}));
}

Expr tanh(const Expr& a) { return make(node(Op::Tanh, {a})); }
Expr sigmoid(const Expr& a) { return make(node(Op::Sigmoid, {a})); }
Expr softplus(const Expr& a) { return make(node(Op::Softplus, {a})); }
Expr square(const Expr& a) { return make(node(Op::Square, {a})); }

Expr tanh_backward(const Expr& g, const Expr& y) {
  if (!g.value().same_shape(y.value())) shape_fail("tanh_backward", g.value(), y.value());
  return make(node(Op::TanhBackward, {g, y}));
}

Expr sigmoid_backward(const Expr& g, const Expr& y) {
  if (!g.value().same_shape(y.value())) shape_fail("sigmoid_backward", g.value(), y.value());
  return make(node(Op::SigmoidBackward, {g, y}));
}

Expr sum(const Expr& a) { return make(node(Op::Sum, {a})); }

Expr expand(const Expr& s, Index rows, Index cols) {
  if (!s.value().is_scalar()) throw ShapeError("expand: operand must be 1x1");
  Node n = node(Op::Expand, {s});
  n.dim0 = rows;
  n.dim1 = cols;
  return make(std::move(n));
}

Expr col_sum(const Expr& a) { return make(node(Op::ColSum, {a})); }

Expr repeat_rows(const Expr& r, Index rows) {
  if (r.rows() != 1) throw ShapeError("repeat_rows: operand must be a single row");
  Node n = node(Op::RepeatRows, {r});
  n.dim0 = rows;
  return make(std::move(n));
}

Expr row_sum(const Expr& a) { return make(node(Op::RowSum, {a})); }

Expr repeat_cols(const Expr& c, Index cols) {
  if (c.cols() != 1) throw ShapeError("repeat_cols: operand must be a single column");
  Node n = node(Op::RepeatCols, {c});
  n.dim0 = cols;
  return make(std::move(n));
}

Expr row_scale(const Expr& m, const Expr& v) {
  check_column("row_scale", v, m.rows());
  return make(node(Op::RowScale, {m, v}));
}

Expr gather(const Expr& m, IndexList rows) {
  for (Index r : *rows)
    if (r < 0 || r >= m.rows()) throw ShapeError("gather: row index out of range");
  Node n = node(Op::Gather, {m});
  n.index = std::move(rows);
  return make(std::move(n));
}

Expr scatter(const Expr& m, IndexList rows, Index out_rows) {
  if (static_cast<Index>(rows->size()) != m.rows())
    throw ShapeError("scatter: index count must equal operand rows");
  for (Index r : *rows)
    if (r < 0 || r >= out_rows) throw ShapeError("scatter: row index out of range");
  Node n = node(Op::Scatter, {m});
  n.index = std::move(rows);
  n.dim0 = out_rows;
  return make(std::move(n));
}

Expr concat_cols(std::span<const Expr> parts) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  Node n;
  n.op = Op::ConcatCols;
  for (const auto& p : parts) {
    if (!p) throw ShapeError("concat: null operand");
    if (p.rows() != parts[0].rows()) shape_fail("concat", parts[0].value(), p.value());
    n.in.push_back(p);
  }
  return make(std::move(n));
}

Expr concat_cols(std::initializer_list<Expr> parts) {
  return concat_cols(std::span<const Expr>(parts.begin(), parts.size()));
}

Expr slice_cols(const Expr& m, Index offset, Index width) {
  if (offset < 0 || width < 0 || offset + width > m.cols())
    throw ShapeError("slice_cols: range outside operand");
  Node n = node(Op::SliceCols, {m});
  n.dim0 = offset;
  n.dim1 = width;
  return make(std::move(n));
}

Expr pad_cols(const Expr& m, Index offset, Index total) {
  if (offset < 0 || offset + m.cols() > total) throw ShapeError("pad_cols: range outside result");
  Node n = node(Op::PadCols, {m});
  n.dim0 = offset;
  n.dim1 = total;
  return make(std::move(n));
}

Expr stop_gradient(const Expr& a) { return make(node(Op::StopGradient, {a})); }

Expr clamp(const Expr& a, double lo, double hi) {
  Node n = node(Op::Clamp, {a});
  n.scalar = lo;
  n.scalar2 = hi;
  return make(std::move(n));
}

Expr clamp_mask(const Expr& g, const Expr& x, double lo, double hi) {
  if (!g.value().same_shape(x.value())) shape_fail("clamp_mask", g.value(), x.value());
  Node n = node(Op::ClampMask, {g, x});
  n.scalar = lo;
  n.scalar2 = hi;
  return make(std::move(n));
}

Tensor evaluate(const Expr& root, const Bindings& bindings, bool require_all) {
  if (!root.get()->has_input) return root.value();
  const auto order = postorder(root, [](const Node& n) { return n.has_input; });
  std::unordered_map<const Node*, Tensor> memo;
  memo.reserve(order.size());
  auto value_of = [&memo](const Expr& e) -> const Tensor* {
    if (!e.get()->has_input) return &e.value();
    return &memo.at(e.get());
  };
  std::vector<const Tensor*> vals;
  for (const auto& e : order) {
    const Node& n = *e.get();
    if (n.op == Op::Input) {
      auto it = bindings.find(&n);
      if (it == bindings.end()) {
        if (require_all)
          throw UnboundInputError("unbound input" + (n.name.empty() ? "" : " '" + n.name + "'"));
        memo.emplace(&n, n.value);
      } else {
        if (!it->second.same_shape(n.value)) shape_fail("evaluate binding", n.value, it->second);
        memo.emplace(&n, it->second);
      }
      continue;
    }
    vals.clear();
    for (const auto& c : n.in) vals.push_back(value_of(c));
    memo.emplace(&n, compute(n, vals));
  }
  return memo.at(root.get());
}

std::vector<Expr> derivative(const Expr& root, std::span<const Expr> wrt) {
  if (!root.value().is_scalar())
    throw DerivativeError("derivative: root must be scalar, got " + root.value().shape_str());
  std::unordered_set<const Node*> targets;
  for (const auto& w : wrt) targets.insert(w.get());

  const auto order = postorder(root, [](const Node& n) { return n.differentiable; });
  std::unordered_set<const Node*> reaches;
  for (const auto& e : order) {
    const Node& n = *e.get();
    bool r = targets.count(&n) > 0;
    for (std::size_t i = 0; i < n.in.size() && !r; ++i)
      r = child_is_differentiable(n, i) && reaches.count(n.in[i].get());
    if (r) reaches.insert(&n);
  }

  std::unordered_map<const Node*, Expr> adj;
  std::unordered_map<const Node*, Expr> found;
  if (reaches.count(root.get())) adj.emplace(root.get(), constant(1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node& n = *it->get();
    auto a = adj.find(&n);
    if (a == adj.end()) continue;
    const Expr g = a->second;
    adj.erase(a);
    if (targets.count(&n)) found.emplace(&n, g);
    for (std::size_t i = 0; i < n.in.size(); ++i) {
      if (!child_is_differentiable(n, i) || !reaches.count(n.in[i].get())) continue;
      Expr contrib = vjp(*it, i, g);
      auto [slot, inserted] = adj.try_emplace(n.in[i].get(), contrib);
      if (!inserted) slot->second = add(slot->second, contrib);
    }
  }

  std::vector<Expr> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    auto f = found.find(w.get());
    out.push_back(f != found.end() ? f->second : zeros(w.rows(), w.cols()));
  }
  return out;
}

Expr derivative(const Expr& root, const Expr& wrt) {
  return derivative(root, std::span<const Expr>(&wrt, 1)).front();
}

std::size_t graph_size(const Expr& root) {
  return postorder(root, [](const Node&) { return true; }).size();
}

}  // namespace cem::diff
