#include "desae/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace desae::ad {

namespace {

thread_local bool t_grad_enabled = true;
thread_local bool t_check_finite = false;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void shape_error(std::string_view op, const std::string& detail) {
  throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + detail);
}

int normalize_axis(std::string_view op, int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) shape_error(op, "axis out of range");
  return axis;
}

struct AxisSplit {
  Eigen::Index outer = 1, extent = 1, inner = 1;
  Eigen::Index at(Eigen::Index o, Eigen::Index k, Eigen::Index i) const {
    return (o * extent + k) * inner + i;
  }
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int d = 0; d < axis; ++d) s.outer *= shape[d];
  s.extent = shape[axis];
  for (int d = axis + 1; d < static_cast<int>(shape.size()); ++d) s.inner *= shape[d];
  return s;
}

Shape without_axis(const Shape& shape, int axis) {
  Shape out = shape;
  out.erase(out.begin() + axis);
  return out;
}

// Maps a flat output index to the flat index of a broadcast operand.
struct OperandIndex {
  enum class Mode { Same, Scalar, Suffix, General } mode = Mode::Same;
  Eigen::Index size = 1;
  std::vector<Eigen::Index> map;

  Eigen::Index operator()(Eigen::Index o) const {
    switch (mode) {
      case Mode::Same: return o;
      case Mode::Scalar: return 0;
      case Mode::Suffix: return o % size;
      case Mode::General: return map[o];
    }
    return o;
  }
};

Shape broadcast_shape(std::string_view op, const Shape& a, const Shape& b) {
  const size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t d = 0; d < rank; ++d) {
    const int da = d < rank - a.size() ? 1 : a[d - (rank - a.size())];
    const int db = d < rank - b.size() ? 1 : b[d - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      shape_error(op, "cannot broadcast " + shape_string(a) + " with " + shape_string(b));
    }
    out[d] = std::max(da, db);
  }
  return out;
}

OperandIndex plan_operand(const Shape& shape, const Shape& out) {
  OperandIndex idx;
  idx.size = shape_size(shape);
  if (shape == out) return idx;
  if (idx.size == 1) {
    idx.mode = OperandIndex::Mode::Scalar;
    return idx;
  }
  // Strip leading unit extents, then test for a trailing-suffix match.
  size_t first = 0;
  while (first < shape.size() && shape[first] == 1) ++first;
  const Shape core(shape.begin() + static_cast<long>(first), shape.end());
  if (core.size() <= out.size() && std::equal(core.begin(), core.end(), out.end() - static_cast<long>(core.size()))) {
    idx.mode = OperandIndex::Mode::Suffix;
    return idx;
  }
  idx.mode = OperandIndex::Mode::General;
  const size_t rank = out.size();
  const size_t offset = rank - shape.size();
  std::vector<Eigen::Index> stride(rank, 0);
  Eigen::Index s = 1;
  for (size_t d = rank; d-- > offset;) {
    const int extent = shape[d - offset];
    stride[d] = extent == 1 ? 0 : s;
    s *= extent;
  }
  const Eigen::Index total = shape_size(out);
  idx.map.resize(static_cast<size_t>(total));
  std::vector<int> counter(rank, 0);
  Eigen::Index pos = 0;
  for (Eigen::Index o = 0; o < total; ++o) {
    idx.map[o] = pos;
    for (size_t d = rank; d-- > 0;) {
      ++counter[d];
      pos += stride[d];
      if (counter[d] < out[d]) break;
      pos -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

// f(x, y) -> out; dfx / dfy(x, y, out) -> partial derivatives.
template <class F, class DX, class DY>
Tensor binary(std::string_view name, const Tensor& a, const Tensor& b, F f, DX dfx, DY dfy) {
  Shape out_shape = broadcast_shape(name, a.shape(), b.shape());
  const Eigen::Index n = shape_size(out_shape);
  OperandIndex ia = plan_operand(a.shape(), out_shape);
  OperandIndex ib = plan_operand(b.shape(), out_shape);
  const Array& x = a.value();
  const Array& y = b.value();
  Array out(n);
  for (Eigen::Index o = 0; o < n; ++o) out[o] = f(x[ia(o)], y[ib(o)]);
  Array saved = out;
  return make_op(name, std::move(out_shape), std::move(out), {a, b},
                 [a, b, ia = std::move(ia), ib = std::move(ib), saved = std::move(saved), dfx,
                  dfy](const Array& g, std::span<Array* const> grads) {
                   const Array& x = a.value();
                   const Array& y = b.value();
                   for (Eigen::Index o = 0; o < g.size(); ++o) {
                     const double xv = x[ia(o)], yv = y[ib(o)];
                     if (grads[0]) (*grads[0])[ia(o)] += g[o] * dfx(xv, yv, saved[o]);
                     if (grads[1]) (*grads[1])[ib(o)] += g[o] * dfy(xv, yv, saved[o]);
                   }
                 });
}

// Elementwise unary op; df(x, out) is the derivative.
template <class F, class DF>
Tensor unary(std::string_view name, const Tensor& x, F f, DF df) {
  Array out = x.value().unaryExpr(f);
  Array saved = out;
  return make_op(name, x.shape(), std::move(out), {x},
                 [x, saved = std::move(saved), df](const Array& g, std::span<Array* const> grads) {
                   const Array& v = x.value();
                   Array& gx = *grads[0];
                   for (Eigen::Index i = 0; i < g.size(); ++i) gx[i] += g[i] * df(v[i], saved[i]);
                 });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Eigen::Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Eigen::Index{1},
                         [](Eigen::Index acc, int d) { return acc * d; });
}

// ---------------------------------------------------------------------------
// Tensor

Tensor make_leaf(Shape shape, Array value, bool requires_grad) {
  if (shape_size(shape) != value.size()) {
    shape_error("tensor", "shape " + shape_string(shape) + " does not match " +
                              std::to_string(value.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->op = "leaf";
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_size(shape);
  return make_leaf(std::move(shape), Array::Zero(n), requires_grad);
}

Tensor Tensor::constant(Shape shape, double value) {
  const auto n = shape_size(shape);
  return make_leaf(std::move(shape), Array::Constant(n, value), false);
}

Tensor Tensor::from(Shape shape, Array values, bool requires_grad) {
  return make_leaf(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values, bool requires_grad) {
  Array a(static_cast<Eigen::Index>(values.size()));
  std::copy(values.begin(), values.end(), a.data());
  return make_leaf(std::move(shape), std::move(a), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return make_leaf({}, Array::Constant(1, value), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim(int axis) const { return shape()[normalize_axis("dim", axis, rank())]; }
Eigen::Index Tensor::size() const { return node_->value.size(); }
const Array& Tensor::value() const { return node_->value; }
Array& Tensor::mutable_value() { return node_->value; }

double Tensor::item() const {
  if (size() != 1) shape_error("item", "tensor of shape " + shape_string(shape()) + " is not a scalar");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (static_cast<int>(index.size()) != rank()) shape_error("at", "index rank mismatch");
  Eigen::Index flat = 0;
  int d = 0;
  for (int i : index) flat = flat * shape()[d++] + i;
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }
bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
Array Tensor::grad() const { return has_grad() ? node_->grad : Array::Zero(size()); }
void Tensor::zero_grad() {
  if (node_) node_->grad = Array();
}

Tensor Tensor::detach() const { return make_leaf(shape(), value(), false); }

Tensor make_op(std::string_view name, Shape shape, Array value, std::vector<Tensor> inputs,
               BackwardFn backward) {
  if (t_check_finite && !value.allFinite()) {
    throw Error(ErrorCode::NonFiniteValue, "non-finite value produced by " + std::string(name));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = std::string(name);
  const bool track = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->backward = std::move(backward);
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node_ptr());
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(const Tensor& root) : root_(root) {
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

void Tape::backward() {
  for (Node* n : order_) {
    if (n->backward) n->grad = Array();
  }
  if (order_.empty()) return;
  Node* root = root_.node();
  root->grad = Array::Ones(root->value.size());
  std::vector<Array*> slots;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    Node* n = *it;
    if (!n->backward || n->grad.size() == 0) continue;
    slots.assign(n->inputs.size(), nullptr);
    for (size_t i = 0; i < n->inputs.size(); ++i) {
      Node* in = n->inputs[i].get();
      if (!in->requires_grad) continue;
      if (in->grad.size() != in->value.size()) in->grad = Array::Zero(in->value.size());
      slots[i] = &in->grad;
    }
    n->backward(n->grad, slots);
    if (n != root) n->grad = Array();
  }
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    shape_error("backward", "loss must be a scalar");
  }
  if (!loss.requires_grad()) {
    throw Error(ErrorCode::DisconnectedGraph, "loss does not depend on any trainable tensor");
  }
  Tape(loss).backward();
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
FiniteCheckGuard::FiniteCheckGuard() : previous_(t_check_finite) { t_check_finite = true; }
FiniteCheckGuard::~FiniteCheckGuard() { t_check_finite = previous_; }
bool grad_enabled() noexcept { return t_grad_enabled; }

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor atan2(const Tensor& y, const Tensor& x) {
  return binary(
      "atan2", y, x, [](double yv, double xv) { return std::atan2(yv, xv); },
      [](double yv, double xv, double) {
        const double r2 = xv * xv + yv * yv;
        return r2 > 0.0 ? xv / r2 : 0.0;
      },
      [](double yv, double xv, double) {
        const double r2 = xv * xv + yv * yv;
        return r2 > 0.0 ? -yv / r2 : 0.0;
      });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }
Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double s) { return s * (1.0 - s); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double t) { return 1.0 - t * t; });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double e) { return e; });
}

Tensor log(const Tensor& x) {
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double r) { return r > 0.0 ? 0.5 / r : 0.0; });
}

Tensor square(const Tensor& x) {
  return unary(
      "square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  const bool batched = a.rank() == 3 && b.rank() == 3;
  if (!(batched || (a.rank() == 2 && b.rank() == 2))) {
    shape_error("matmul", "expects rank-2 or batched rank-3 operands, got " +
                              shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const int batch = batched ? a.dim(0) : 1;
  const int n = a.dim(-2), k = a.dim(-1), m = b.dim(-1);
  if (b.dim(-2) != k || (batched && b.dim(0) != batch)) {
    shape_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Shape shape = batched ? Shape{batch, n, m} : Shape{n, m};
  Array out(static_cast<Eigen::Index>(batch) * n * m);
  for (int s = 0; s < batch; ++s) {
    ConstRowMap A(a.value().data() + static_cast<Eigen::Index>(s) * n * k, n, k);
    ConstRowMap B(b.value().data() + static_cast<Eigen::Index>(s) * k * m, k, m);
    RowMap C(out.data() + static_cast<Eigen::Index>(s) * n * m, n, m);
    // Tiny per-item products: the blocked GEMM path costs more than it saves.
    if (batched) C.noalias() = A.lazyProduct(B);
    else C.noalias() = A * B;
  }
  return make_op("matmul", std::move(shape), std::move(out), {a, b},
                 [a, b, batched, batch, n, k, m](const Array& g, std::span<Array* const> grads) {
                   for (int s = 0; s < batch; ++s) {
                     ConstRowMap G(g.data() + static_cast<Eigen::Index>(s) * n * m, n, m);
                     if (grads[0]) {
                       ConstRowMap B(b.value().data() + static_cast<Eigen::Index>(s) * k * m, k, m);
                       RowMap GA(grads[0]->data() + static_cast<Eigen::Index>(s) * n * k, n, k);
                       if (batched) GA.noalias() += G.lazyProduct(B.transpose());
                       else GA.noalias() += G * B.transpose();
                     }
                     if (grads[1]) {
                       ConstRowMap A(a.value().data() + static_cast<Eigen::Index>(s) * n * k, n, k);
                       RowMap GB(grads[1]->data() + static_cast<Eigen::Index>(s) * k * m, k, m);
                       if (batched) GB.noalias() += A.transpose().lazyProduct(G);
                       else GB.noalias() += A.transpose() * G;
                     }
                   }
                 });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) shape_error("transpose", "needs rank >= 2");
  const int r = x.dim(-2), c = x.dim(-1);
  const Eigen::Index batch = x.size() / (static_cast<Eigen::Index>(r) * c);
  Shape shape = x.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Array out(x.size());
  for (Eigen::Index s = 0; s < batch; ++s) {
    RowMap(out.data() + s * r * c, c, r) = ConstRowMap(x.value().data() + s * r * c, r, c).transpose();
  }
  return make_op("transpose", std::move(shape), std::move(out), {x},
                 [batch, r, c](const Array& g, std::span<Array* const> grads) {
                   for (Eigen::Index s = 0; s < batch; ++s) {
                     RowMap(grads[0]->data() + s * r * c, r, c) +=
                         ConstRowMap(g.data() + s * r * c, c, r).transpose();
                   }
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  Eigen::Index known = 1;
  int wildcard = -1;
  for (int d = 0; d < static_cast<int>(shape.size()); ++d) {
    if (shape[d] == -1) {
      if (wildcard >= 0) shape_error("reshape", "more than one -1 extent");
      wildcard = d;
    } else {
      known *= shape[d];
    }
  }
  if (wildcard >= 0 && known > 0) shape[wildcard] = static_cast<int>(x.size() / known);
  if (shape_size(shape) != x.size()) {
    shape_error("reshape", shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  return make_op("reshape", std::move(shape), x.value(), {x},
                 [](const Array& g, std::span<Array* const> grads) { *grads[0] += g; });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  const int rank = parts[0].rank();
  axis = normalize_axis("concat", axis, rank);
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != rank) shape_error("concat", "rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d != axis && p.shape()[d] != parts[0].shape()[d]) {
        shape_error("concat", shape_string(p.shape()) + " vs " + shape_string(parts[0].shape()));
      }
    }
    shape[axis] += p.shape()[axis];
  }
  const AxisSplit whole = split_at(shape, axis);
  Array out(shape_size(shape));
  std::vector<Eigen::Index> offsets;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    const AxisSplit s = split_at(p.shape(), axis);
    const Eigen::Index chunk = s.extent * s.inner;
    for (Eigen::Index o = 0; o < s.outer; ++o) {
      out.segment(o * whole.extent * whole.inner + offset, chunk) = p.value().segment(o * chunk, chunk);
    }
    offsets.push_back(offset);
    offset += chunk;
  }
  std::vector<Eigen::Index> chunks;
  for (const auto& p : parts) {
    const AxisSplit s = split_at(p.shape(), axis);
    chunks.push_back(s.extent * s.inner);
  }
  const Eigen::Index row = whole.extent * whole.inner;
  return make_op("concat", std::move(shape), std::move(out), parts,
                 [offsets, chunks, row, outer = whole.outer](const Array& g,
                                                             std::span<Array* const> grads) {
                   for (size_t p = 0; p < grads.size(); ++p) {
                     if (!grads[p]) continue;
                     for (Eigen::Index o = 0; o < outer; ++o) {
                       grads[p]->segment(o * chunks[p], chunks[p]) +=
                           g.segment(o * row + offsets[p], chunks[p]);
                     }
                   }
                 });
}

Tensor slice(const Tensor& x, int axis, int begin, int end) {
  axis = normalize_axis("slice", axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  if (begin < 0 || end > s.extent || begin >= end) shape_error("slice", "range out of bounds");
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const Eigen::Index chunk = static_cast<Eigen::Index>(end - begin) * s.inner;
  const Eigen::Index row = s.extent * s.inner;
  const Eigen::Index start = static_cast<Eigen::Index>(begin) * s.inner;
  Array out(s.outer * chunk);
  for (Eigen::Index o = 0; o < s.outer; ++o) out.segment(o * chunk, chunk) = x.value().segment(o * row + start, chunk);
  return make_op("slice", std::move(shape), std::move(out), {x},
                 [outer = s.outer, chunk, row, start](const Array& g, std::span<Array* const> grads) {
                   for (Eigen::Index o = 0; o < outer; ++o) {
                     grads[0]->segment(o * row + start, chunk) += g.segment(o * chunk, chunk);
                   }
                 });
}

Tensor gather(const Tensor& x, std::span<const int> index) {
  if (x.rank() < 1) shape_error("gather", "needs rank >= 1");
  const int rows = x.dim(0);
  const Eigen::Index inner = x.size() / std::max(rows, 1);
  Shape shape = x.shape();
  shape[0] = static_cast<int>(index.size());
  Array out(static_cast<Eigen::Index>(index.size()) * inner);
  for (size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= rows) shape_error("gather", "index out of range");
    out.segment(static_cast<Eigen::Index>(r) * inner, inner) = x.value().segment(index[r] * inner, inner);
  }
  return make_op("gather", std::move(shape), std::move(out), {x},
                 [idx = std::vector<int>(index.begin(), index.end()), inner](
                     const Array& g, std::span<Array* const> grads) {
                   for (size_t r = 0; r < idx.size(); ++r) {
                     grads[0]->segment(idx[r] * inner, inner) +=
                         g.segment(static_cast<Eigen::Index>(r) * inner, inner);
                   }
                 });
}

Tensor scatter_add(const Tensor& x, std::span<const int> index, int rows) {
  if (x.rank() < 1 || x.dim(0) != static_cast<int>(index.size())) {
    shape_error("scatter_add", "index count must equal leading extent");
  }
  const Eigen::Index inner = index.empty() ? 0 : x.size() / x.dim(0);
  Shape shape = x.shape();
  shape[0] = rows;
  Array out = Array::Zero(shape_size(shape));
  for (size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= rows) shape_error("scatter_add", "index out of range");
    out.segment(index[r] * inner, inner) += x.value().segment(static_cast<Eigen::Index>(r) * inner, inner);
  }
  return make_op("scatter_add", std::move(shape), std::move(out), {x},
                 [idx = std::vector<int>(index.begin(), index.end()), inner](
                     const Array& g, std::span<Array* const> grads) {
                   for (size_t r = 0; r < idx.size(); ++r) {
                     grads[0]->segment(static_cast<Eigen::Index>(r) * inner, inner) +=
                         g.segment(idx[r] * inner, inner);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  return make_op("sum", {}, Array::Constant(1, x.value().sum()), {x},
                 [](const Array& g, std::span<Array* const> grads) { *grads[0] += g[0]; });
}

Tensor sum(const Tensor& x, int axis) {
  axis = normalize_axis("sum", axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  Array out = Array::Zero(s.outer * s.inner);
  for (Eigen::Index o = 0; o < s.outer; ++o)
    for (Eigen::Index k = 0; k < s.extent; ++k)
      out.segment(o * s.inner, s.inner) += x.value().segment(s.at(o, k, 0), s.inner);
  return make_op("sum_axis", without_axis(x.shape(), axis), std::move(out), {x},
                 [s](const Array& g, std::span<Array* const> grads) {
                   for (Eigen::Index o = 0; o < s.outer; ++o)
                     for (Eigen::Index k = 0; k < s.extent; ++k)
                       grads[0]->segment(s.at(o, k, 0), s.inner) += g.segment(o * s.inner, s.inner);
                 });
}

Tensor mean(const Tensor& x) {
  if (x.size() == 0) shape_error("mean", "empty tensor");
  return sum(x) * (1.0 / static_cast<double>(x.size()));
}

Tensor mean(const Tensor& x, int axis) {
  axis = normalize_axis("mean", axis, x.rank());
  return sum(x, axis) * (1.0 / static_cast<double>(x.shape()[axis]));
}

Tensor softmax(const Tensor& x, int axis) {
  axis = normalize_axis("softmax", axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  Array out(x.size());
  const Array& v = x.value();
  for (Eigen::Index o = 0; o < s.outer; ++o) {
    for (Eigen::Index i = 0; i < s.inner; ++i) {
      double peak = -std::numeric_limits<double>::infinity();
      for (Eigen::Index k = 0; k < s.extent; ++k) peak = std::max(peak, v[s.at(o, k, i)]);
      double total = 0.0;
      for (Eigen::Index k = 0; k < s.extent; ++k) {
        const double e = std::exp(v[s.at(o, k, i)] - peak);
        out[s.at(o, k, i)] = e;
        total += e;
      }
      for (Eigen::Index k = 0; k < s.extent; ++k) out[s.at(o, k, i)] /= total;
    }
  }
  Array saved = out;
  return make_op("softmax", x.shape(), std::move(out), {x},
                 [s, y = std::move(saved)](const Array& g, std::span<Array* const> grads) {
                   for (Eigen::Index o = 0; o < s.outer; ++o) {
                     for (Eigen::Index i = 0; i < s.inner; ++i) {
                       double dot = 0.0;
                       for (Eigen::Index k = 0; k < s.extent; ++k) dot += g[s.at(o, k, i)] * y[s.at(o, k, i)];
                       for (Eigen::Index k = 0; k < s.extent; ++k) {
                         const auto p = s.at(o, k, i);
                         (*grads[0])[p] += y[p] * (g[p] - dot);
                       }
                     }
                   }
                 });
}

Tensor layer_norm(const Tensor& x, double eps) {
  if (x.rank() < 1) shape_error("layer_norm", "needs rank >= 1");
  const Eigen::Index width = x.dim(-1);
  const Eigen::Index rows = x.size() / width;
  Array out(x.size());
  Array inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto seg = x.value().segment(r * width, width);
    const double mu = seg.mean();
    const double var = (seg - mu).square().mean();
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    out.segment(r * width, width) = (seg - mu) * inv_std[r];
  }
  Array saved = out;
  return make_op("layer_norm", x.shape(), std::move(out), {x},
                 [y = std::move(saved), inv_std = std::move(inv_std), width, rows](
                     const Array& g, std::span<Array* const> grads) {
                   for (Eigen::Index r = 0; r < rows; ++r) {
                     const auto gs = g.segment(r * width, width);
                     const auto ys = y.segment(r * width, width);
                     const double gm = gs.mean();
                     const double gym = (gs * ys).mean();
                     grads[0]->segment(r * width, width) += inv_std[r] * (gs - gm - ys * gym);
                   }
                 });
}

Tensor norm(const Tensor& x, int axis) {
  axis = normalize_axis("norm", axis, x.rank());
  const AxisSplit s = split_at(x.shape(), axis);
  Array out = Array::Zero(s.outer * s.inner);
  const Array& v = x.value();
  for (Eigen::Index o = 0; o < s.outer; ++o)
    for (Eigen::Index k = 0; k < s.extent; ++k)
      for (Eigen::Index i = 0; i < s.inner; ++i) out[o * s.inner + i] += v[s.at(o, k, i)] * v[s.at(o, k, i)];
  out = out.sqrt();
  Array saved = out;
  return make_op("norm", without_axis(x.shape(), axis), std::move(out), {x},
                 [x, s, n = std::move(saved)](const Array& g, std::span<Array* const> grads) {
                   const Array& v = x.value();
                   for (Eigen::Index o = 0; o < s.outer; ++o)
                     for (Eigen::Index i = 0; i < s.inner; ++i) {
                       const double len = n[o * s.inner + i];
                       if (len == 0.0) continue;
                       const double scale = g[o * s.inner + i] / len;
                       for (Eigen::Index k = 0; k < s.extent; ++k) {
                         const auto p = s.at(o, k, i);
                         (*grads[0])[p] += scale * v[p];
                       }
                     }
                 });
}

Tensor cross(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() < 1 || a.dim(-1) != 3) {
    shape_error("cross", "operands must share a shape ending in 3");
  }
  const Eigen::Index n = a.size() / 3;
  auto cross3 = [](const double* u, const double* v, double* w, double scale) {
    w[0] += scale * (u[1] * v[2] - u[2] * v[1]);
    w[1] += scale * (u[2] * v[0] - u[0] * v[2]);
    w[2] += scale * (u[0] * v[1] - u[1] * v[0]);
  };
  Array out = Array::Zero(a.size());
  for (Eigen::Index r = 0; r < n; ++r) cross3(&a.value()[3 * r], &b.value()[3 * r], &out[3 * r], 1.0);
  return make_op("cross", a.shape(), std::move(out), {a, b},
                 [a, b, n, cross3](const Array& g, std::span<Array* const> grads) {
                   for (Eigen::Index r = 0; r < n; ++r) {
                     // d(a x b) with upstream g: grad_a = b x g, grad_b = g x a
                     if (grads[0]) cross3(&b.value()[3 * r], &g[3 * r], &(*grads[0])[3 * r], 1.0);
                     if (grads[1]) cross3(&g[3 * r], &a.value()[3 * r], &(*grads[1])[3 * r], 1.0);
                   }
                 });
}

}  // namespace desae::ad
