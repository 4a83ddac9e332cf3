#pragma once

// Reverse-mode automatic differentiation over dense row-major arrays.
//
// A Graph records primitive operations symbolically. Inputs are named and
// bound to concrete Arrays at evaluation time, so one recorded graph can be
// re-bound for every minibatch. Evaluation never mutates the graph; a const
// Graph may be evaluated and differentiated from several threads at once.
//
// Every operation works on rank-2 arrays (scalars are 1x1). Binary
// elementwise operations broadcast along any dimension of size 1.
//
// Non-smooth primitives (relu, leaky_relu, max_const) use the right
// derivative at their kink.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "iflow/error.hpp"

namespace iflow::ad {

class Array {
 public:
  Array() = default;

  Array(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, data_(rows * cols, fill) {}

  Array(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    std::size_t n = 1;
    for (auto d : shape_) n *= d;
    if (n != data_.size()) {
      throw std::invalid_argument("Array: shape does not match data length");
    }
  }

  static Array scalar(double v) { return Array({1, 1}, {v}); }

  static Array row(std::vector<double> values) {
    const auto n = values.size();
    return Array({1, n}, std::move(values));
  }

  static Array column(std::vector<double> values) {
    const auto n = values.size();
    return Array({n, 1}, std::move(values));
  }

  static Array from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    Array out(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      if (row.size() != c) throw std::invalid_argument("Array::from_rows: ragged rows");
      for (double v : row) out.data_[i++] = v;
    }
    return out;
  }

  static Array identity(std::size_t n) {
    Array out(n, n);
    for (std::size_t i = 0; i < n; ++i) out(i, i) = 1.0;
    return out;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
  std::size_t cols() const { return shape_.size() < 2 ? 1 : shape_[1]; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double item() const {
    if (data_.size() != 1) throw std::invalid_argument("Array::item: array is not a scalar");
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "x" : "") << shape_[i];
    os << ')';
    return os.str();
  }

  bool operator==(const Array&) const = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

using Bindings = std::map<std::string, Array, std::less<>>;

enum class Op : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Div,
  Neg,
  MatMul,
  Sum,
  Mean,
  SumRows,
  Log,
  Exp,
  Square,
  Sqrt,
  Softplus,
  Sigmoid,
  Relu,
  LeakyRelu,
  Softmax,
  MaxConst,
  AddConst,
  MulConst,
  ReshapeCols,
  Columns,
  ConcatCols,
  BinOneHot,
  InRange,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Input: return "input";
    case Op::Constant: return "constant";
    case Op::Add: return "add";
    case Op::Sub: return "subtract";
    case Op::Mul: return "multiply";
    case Op::Div: return "divide";
    case Op::Neg: return "negate";
    case Op::MatMul: return "matmul";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SumRows: return "sum_rows";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Square: return "square";
    case Op::Sqrt: return "sqrt";
    case Op::Softplus: return "softplus";
    case Op::Sigmoid: return "sigmoid";
    case Op::Relu: return "relu";
    case Op::LeakyRelu: return "leaky_relu";
    case Op::Softmax: return "softmax";
    case Op::MaxConst: return "max_const";
    case Op::AddConst: return "add_const";
    case Op::MulConst: return "mul_const";
    case Op::ReshapeCols: return "reshape";
    case Op::Columns: return "columns";
    case Op::ConcatCols: return "concat_cols";
    case Op::BinOneHot: return "bin_onehot";
    case Op::InRange: return "in_range";
  }
  return "?";
}

namespace detail {

inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const RowMat> view(const Array& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.rows()),
          static_cast<Eigen::Index>(a.cols())};
}

inline Eigen::Map<RowMat> view(Array& a) {
  return {a.data().data(), static_cast<Eigen::Index>(a.rows()),
          static_cast<Eigen::Index>(a.cols())};
}

}  // namespace detail

class Graph;

// Lightweight handle to a recorded node.
class Node {
 public:
  Node() = default;
  Node(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

  std::uint32_t id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

  // Attaches a human-readable label used in error messages.
  Node named(std::string label) const;

 private:
  Graph* graph_ = nullptr;
  std::uint32_t id_ = 0;
};

class Graph {
 public:
  struct Record {
    Op op = Op::Constant;
    std::uint32_t a = 0;
    std::uint32_t b = 0;
    double param = 0.0;
    std::size_t cols = 0;
    std::vector<std::size_t> indices;
    Array constant;
    std::string label;
    bool needs_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Named input; repeated calls with one name return the same node.
  Node input(const std::string& name) {
    if (auto it = inputs_.find(name); it != inputs_.end()) return {this, it->second};
    Record r;
    r.op = Op::Input;
    r.label = name;
    r.needs_grad = true;
    const auto id = push(std::move(r));
    inputs_.emplace(name, id);
    return {this, id};
  }

  Node constant(Array value, std::string label = "constant") {
    Record r;
    r.op = Op::Constant;
    r.constant = std::move(value);
    r.label = std::move(label);
    return {this, push(std::move(r))};
  }

  Node scalar(double v) { return constant(Array::scalar(v), "scalar"); }

  Node unary(Op op, Node a, double param = 0.0) {
    Record r;
    r.op = op;
    r.a = check(a);
    r.param = param;
    r.needs_grad = records_[r.a].needs_grad && differentiable(op);
    r.label = op_name(op);
    return {this, push(std::move(r))};
  }

  Node binary(Op op, Node a, Node b) {
    Record r;
    r.op = op;
    r.a = check(a);
    r.b = check(b);
    r.needs_grad = differentiable(op) && (records_[r.a].needs_grad || records_[r.b].needs_grad);
    r.label = op_name(op);
    return {this, push(std::move(r))};
  }

  Node reshape_cols(Node a, std::size_t cols) {
    Record r;
    r.op = Op::ReshapeCols;
    r.a = check(a);
    r.cols = cols;
    r.needs_grad = records_[r.a].needs_grad;
    r.label = op_name(r.op);
    return {this, push(std::move(r))};
  }

  Node columns(Node a, std::vector<std::size_t> indices) {
    Record r;
    r.op = Op::Columns;
    r.a = check(a);
    r.indices = std::move(indices);
    r.needs_grad = records_[r.a].needs_grad;
    r.label = op_name(r.op);
    return {this, push(std::move(r))};
  }

  Node column_range(Node a, std::size_t first, std::size_t count) {
    std::vector<std::size_t> idx(count);
    for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
    return columns(a, std::move(idx));
  }

  void set_output(Node n) { output_ = check(n); has_output_ = true; }
  bool has_output() const { return has_output_; }
  std::uint32_t output() const {
    if (!has_output_) throw std::logic_error("Graph: output not set");
    return output_;
  }

  std::size_t size() const { return records_.size(); }
  const Record& record(std::uint32_t id) const { return records_.at(id); }
  Record& record_mut(std::uint32_t id) { return records_.at(id); }
  const std::map<std::string, std::uint32_t, std::less<>>& inputs() const { return inputs_; }

  std::string describe(std::uint32_t id) const {
    const auto& r = records_.at(id);
    std::ostringstream os;
    os << "node #" << id << " '" << r.label << "' (" << op_name(r.op) << ")";
    return os.str();
  }

 private:
  static bool differentiable(Op op) { return op != Op::BinOneHot && op != Op::InRange; }

  std::uint32_t check(Node n) const {
    if (n.graph() != this) throw std::invalid_argument("Graph: node belongs to another graph");
    return n.id();
  }

  std::uint32_t push(Record r) {
    records_.push_back(std::move(r));
    return static_cast<std::uint32_t>(records_.size() - 1);
  }

  std::vector<Record> records_;
  std::map<std::string, std::uint32_t, std::less<>> inputs_;
  std::uint32_t output_ = 0;
  bool has_output_ = false;
};

inline Node Node::named(std::string label) const {
  auto& rec = graph_->record_mut(id_);
  if (rec.op != Op::Input) rec.label = std::move(label);
  return *this;
}

// ---- builders ---------------------------------------------------------------

inline Node operator+(Node a, Node b) { return a.graph()->binary(Op::Add, a, b); }
inline Node operator-(Node a, Node b) { return a.graph()->binary(Op::Sub, a, b); }
inline Node operator*(Node a, Node b) { return a.graph()->binary(Op::Mul, a, b); }
inline Node operator/(Node a, Node b) { return a.graph()->binary(Op::Div, a, b); }
inline Node operator-(Node a) { return a.graph()->unary(Op::Neg, a); }
inline Node operator+(Node a, double c) { return a.graph()->unary(Op::AddConst, a, c); }
inline Node operator+(double c, Node a) { return a + c; }
inline Node operator-(Node a, double c) { return a + (-c); }
inline Node operator-(double c, Node a) { return (-a) + c; }
inline Node operator*(Node a, double c) { return a.graph()->unary(Op::MulConst, a, c); }
inline Node operator*(double c, Node a) { return a * c; }
inline Node operator/(Node a, double c) { return a * (1.0 / c); }

inline Node matmul(Node a, Node b) { return a.graph()->binary(Op::MatMul, a, b); }
inline Node sum(Node a) { return a.graph()->unary(Op::Sum, a); }
inline Node sum_rows(Node a) { return a.graph()->unary(Op::SumRows, a); }
inline Node log(Node a) { return a.graph()->unary(Op::Log, a); }
inline Node exp(Node a) { return a.graph()->unary(Op::Exp, a); }
inline Node square(Node a) { return a.graph()->unary(Op::Square, a); }
inline Node sqrt(Node a) { return a.graph()->unary(Op::Sqrt, a); }
inline Node softplus(Node a) { return a.graph()->unary(Op::Softplus, a); }
inline Node sigmoid(Node a) { return a.graph()->unary(Op::Sigmoid, a); }
inline Node relu(Node a) { return a.graph()->unary(Op::Relu, a); }
inline Node leaky_relu(Node a, double slope) { return a.graph()->unary(Op::LeakyRelu, a, slope); }
inline Node softmax(Node a) { return a.graph()->unary(Op::Softmax, a); }
inline Node max_const(Node a, double c) { return a.graph()->unary(Op::MaxConst, a, c); }
inline Node reshape_cols(Node a, std::size_t cols) { return a.graph()->reshape_cols(a, cols); }
inline Node columns(Node a, std::vector<std::size_t> idx) { return a.graph()->columns(a, std::move(idx)); }
inline Node concat_cols(Node a, Node b) { return a.graph()->binary(Op::ConcatCols, a, b); }
inline Node mean(Node a) { return a.graph()->unary(Op::Mean, a); }

// One-hot bin membership: for x (r x 1) and ascending knots (r x K+1), row i
// marks the bin k with knots[i,k] <= x[i] < knots[i,k+1], clamped to
// [0, K-1]. Piecewise constant, so it carries no gradient.
inline Node bin_onehot(Node x, Node knots) { return x.graph()->binary(Op::BinOneHot, x, knots); }

// 1 where -bound <= x <= bound, else 0. Carries no gradient.
inline Node in_range(Node x, double bound) { return x.graph()->unary(Op::InRange, x, bound); }

// ---- evaluation -------------------------------------------------------------

class Evaluation {
 public:
  Evaluation(const Graph& graph, std::vector<Array> owned, std::vector<const Array*> ptrs)
      : graph_(&graph), owned_(std::move(owned)), ptrs_(std::move(ptrs)) {}

  const Array& value(std::uint32_t id) const { return *ptrs_.at(id); }
  const Array& value(Node n) const { return value(n.id()); }
  const Array& output() const { return value(graph_->output()); }
  const Graph& graph() const { return *graph_; }

 private:
  const Graph* graph_;
  std::vector<Array> owned_;
  std::vector<const Array*> ptrs_;
};

namespace detail {

struct Broadcast {
  std::size_t rows = 0, cols = 0;
  std::size_t ar = 0, ac = 0, br = 0, bc = 0;
  bool same = false;

  std::size_t ai(std::size_t r, std::size_t c) const {
    return (ar == 1 ? 0 : r) * ac + (ac == 1 ? 0 : c);
  }
  std::size_t bi(std::size_t r, std::size_t c) const {
    return (br == 1 ? 0 : r) * bc + (bc == 1 ? 0 : c);
  }
};

inline std::size_t broadcast_dim(std::size_t x, std::size_t y, bool& ok) {
  if (x == y) return x;
  if (x == 1) return y;
  if (y == 1) return x;
  ok = false;
  return 0;
}

template <typename F>
Array elementwise(const Broadcast& bc, const Array& a, const Array& b, F f) {
  Array out(bc.rows, bc.cols);
  if (bc.same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
  } else {
    for (std::size_t r = 0; r < bc.rows; ++r)
      for (std::size_t c = 0; c < bc.cols; ++c) out(r, c) = f(a[bc.ai(r, c)], b[bc.bi(r, c)]);
  }
  return out;
}

template <typename F>
Array map(const Array& a, F f) {
  Array out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

inline void accumulate(std::vector<Array>& adj, std::uint32_t id, Array&& g) {
  auto& slot = adj[id];
  if (slot.size() == 0) {
    slot = std::move(g);
  } else {
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += g[i];
  }
}

// Reduces a broadcast-shaped gradient back onto an operand of shape r x c.
inline Array reduce_to(const Array& g, const Broadcast& bc, bool first) {
  const std::size_t r = first ? bc.ar : bc.br;
  const std::size_t c = first ? bc.ac : bc.bc;
  if (r == bc.rows && c == bc.cols) return g;
  Array out(r, c);
  for (std::size_t i = 0; i < bc.rows; ++i)
    for (std::size_t j = 0; j < bc.cols; ++j)
      out[(r == 1 ? 0 : i) * c + (c == 1 ? 0 : j)] += g(i, j);
  return out;
}

}  // namespace detail

class Evaluator {
 public:
  Evaluator(const Graph& graph, const Bindings& bindings) : graph_(graph), bindings_(bindings) {}

  Evaluation forward() const {
    const std::size_t n = graph_.size();
    std::vector<Array> owned(n);
    std::vector<const Array*> ptrs(n, nullptr);
    for (std::uint32_t id = 0; id < n; ++id) {
      const auto& rec = graph_.record(id);
      if (rec.op == Op::Input) {
        auto it = bindings_.find(rec.label);
        if (it == bindings_.end()) {
          throw std::invalid_argument("unbound graph input '" + rec.label + "'");
        }
        if (it->second.rank() != 2) {
          throw NumericalError(graph_.describe(id) + ": bound array must be rank 2, got " +
                               it->second.shape_string());
        }
        ptrs[id] = &it->second;
        continue;
      }
      if (rec.op == Op::Constant) {
        ptrs[id] = &rec.constant;
        continue;
      }
      owned[id] = compute(id, rec, ptrs);
      if (!owned[id].all_finite()) {
        throw NumericalError(graph_.describe(id) + " produced a non-finite value");
      }
      ptrs[id] = &owned[id];
    }
    return Evaluation(graph_, std::move(owned), std::move(ptrs));
  }

  // Reverse sweep from the scalar output. Returns adjoints of every input.
  std::map<std::string, Array> backward(const Evaluation& ev) const {
    const auto out_id = graph_.output();
    const Array& out = ev.value(out_id);
    if (out.size() != 1) {
      throw NumericalError("gradient requires a scalar output; " + graph_.describe(out_id) +
                           " has shape " + out.shape_string());
    }
    std::vector<Array> adj(graph_.size());
    adj[out_id] = Array::scalar(1.0);
    for (std::int64_t id = out_id; id >= 0; --id) {
      const auto uid = static_cast<std::uint32_t>(id);
      const auto& rec = graph_.record(uid);
      if (adj[uid].size() == 0 || !rec.needs_grad) continue;
      if (rec.op == Op::Input) continue;
      propagate(uid, rec, ev, adj);
    }
    std::map<std::string, Array> grads;
    for (const auto& [name, id] : graph_.inputs()) {
      if (!bindings_.contains(name)) continue;
      if (adj[id].size() == 0) {
        const Array& v = ev.value(id);
        grads.emplace(name, Array(v.rows(), v.cols()));
      } else {
        grads.emplace(name, std::move(adj[id]));
      }
    }
    return grads;
  }

 private:
  detail::Broadcast broadcast(std::uint32_t id, const Array& a, const Array& b) const {
    detail::Broadcast bc;
    bc.ar = a.rows();
    bc.ac = a.cols();
    bc.br = b.rows();
    bc.bc = b.cols();
    bool ok = true;
    bc.rows = detail::broadcast_dim(bc.ar, bc.br, ok);
    bc.cols = detail::broadcast_dim(bc.ac, bc.bc, ok);
    if (!ok) {
      throw NumericalError(graph_.describe(id) + ": shape mismatch " + a.shape_string() + " vs " +
                           b.shape_string());
    }
    bc.same = bc.ar == bc.br && bc.ac == bc.bc;
    return bc;
  }

  Array compute(std::uint32_t id, const Graph::Record& rec,
                const std::vector<const Array*>& v) const {
    using namespace detail;
    const Array& a = *v[rec.a];
    switch (rec.op) {
      case Op::Add: {
        const Array& b = *v[rec.b];
        return elementwise(broadcast(id, a, b), a, b, [](double x, double y) { return x + y; });
      }
      case Op::Sub: {
        const Array& b = *v[rec.b];
        return elementwise(broadcast(id, a, b), a, b, [](double x, double y) { return x - y; });
      }
      case Op::Mul: {
        const Array& b = *v[rec.b];
        return elementwise(broadcast(id, a, b), a, b, [](double x, double y) { return x * y; });
      }
      case Op::Div: {
        const Array& b = *v[rec.b];
        return elementwise(broadcast(id, a, b), a, b, [](double x, double y) { return x / y; });
      }
      case Op::Neg: return map(a, [](double x) { return -x; });
      case Op::MatMul: {
        const Array& b = *v[rec.b];
        if (a.cols() != b.rows()) {
          throw NumericalError(graph_.describe(id) + ": matmul shape mismatch " +
                               a.shape_string() + " x " + b.shape_string());
        }
        Array out(a.rows(), b.cols());
        view(out).noalias() = view(a) * view(b);
        return out;
      }
      case Op::Sum: {
        double s = 0.0;
        for (double x : a.data()) s += x;
        return Array::scalar(s);
      }
      case Op::Mean: {
        double s = 0.0;
        for (double x : a.data()) s += x;
        return Array::scalar(s / static_cast<double>(a.size()));
      }
      case Op::SumRows: {
        Array out(a.rows(), 1);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) s += a(r, c);
          out[r] = s;
        }
        return out;
      }
      case Op::Log: return map(a, [](double x) { return std::log(x); });
      case Op::Exp: return map(a, [](double x) { return std::exp(x); });
      case Op::Square: return map(a, [](double x) { return x * x; });
      case Op::Sqrt: return map(a, [](double x) { return std::sqrt(x); });
      case Op::Softplus: return map(a, [](double x) { return detail::softplus(x); });
      case Op::Sigmoid: return map(a, [](double x) { return detail::sigmoid(x); });
      case Op::Relu: return map(a, [](double x) { return x >= 0.0 ? x : 0.0; });
      case Op::LeakyRelu: {
        const double s = rec.param;
        return map(a, [s](double x) { return x >= 0.0 ? x : s * x; });
      }
      case Op::Softmax: {
        Array out(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double mx = -std::numeric_limits<double>::infinity();
          for (std::size_t c = 0; c < a.cols(); ++c) mx = std::max(mx, a(r, c));
          double z = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) z += (out(r, c) = std::exp(a(r, c) - mx));
          for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) /= z;
        }
        return out;
      }
      case Op::MaxConst: {
        const double c = rec.param;
        return map(a, [c](double x) { return x >= c ? x : c; });
      }
      case Op::AddConst: {
        const double c = rec.param;
        return map(a, [c](double x) { return x + c; });
      }
      case Op::MulConst: {
        const double c = rec.param;
        return map(a, [c](double x) { return x * c; });
      }
      case Op::ReshapeCols: {
        if (rec.cols == 0 || a.size() % rec.cols != 0) {
          throw NumericalError(graph_.describe(id) + ": cannot reshape " + a.shape_string() +
                               " to " + std::to_string(rec.cols) + " columns");
        }
        return Array({a.size() / rec.cols, rec.cols}, a.values());
      }
      case Op::Columns: {
        Array out(a.rows(), rec.indices.size());
        for (std::size_t j = 0; j < rec.indices.size(); ++j) {
          if (rec.indices[j] >= a.cols()) {
            throw NumericalError(graph_.describe(id) + ": column index " +
                                 std::to_string(rec.indices[j]) + " out of range for " +
                                 a.shape_string());
          }
        }
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t j = 0; j < rec.indices.size(); ++j) out(r, j) = a(r, rec.indices[j]);
        return out;
      }
      case Op::ConcatCols: {
        const Array& b = *v[rec.b];
        if (a.rows() != b.rows()) {
          throw NumericalError(graph_.describe(id) + ": row mismatch " + a.shape_string() +
                               " vs " + b.shape_string());
        }
        Array out(a.rows(), a.cols() + b.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          for (std::size_t c = 0; c < a.cols(); ++c) out(r, c) = a(r, c);
          for (std::size_t c = 0; c < b.cols(); ++c) out(r, a.cols() + c) = b(r, c);
        }
        return out;
      }
      case Op::BinOneHot: {
        const Array& knots = *v[rec.b];
        if (a.cols() != 1 || knots.rows() != a.rows() || knots.cols() < 2) {
          throw NumericalError(graph_.describe(id) + ": expects x (r x 1) and knots (r x K+1), got " +
                               a.shape_string() + " and " + knots.shape_string());
        }
        const std::size_t bins = knots.cols() - 1;
        Array out(a.rows(), bins);
        for (std::size_t r = 0; r < a.rows(); ++r) {
          std::size_t k = 0;
          while (k + 1 < bins && knots(r, k + 1) <= a[r]) ++k;
          out(r, k) = 1.0;
        }
        return out;
      }
      case Op::InRange: {
        const double bnd = rec.param;
        return map(a, [bnd](double x) { return (x >= -bnd && x <= bnd) ? 1.0 : 0.0; });
      }
      case Op::Input:
      case Op::Constant: break;
    }
    throw std::logic_error("unreachable op");
  }

  void propagate(std::uint32_t id, const Graph::Record& rec, const Evaluation& ev,
                 std::vector<Array>& adj) const {
    using namespace detail;
    const Array g = std::move(adj[id]);
    const Array& a = ev.value(rec.a);
    const bool ga = graph_.record(rec.a).needs_grad;
    auto unary_rule = [&](auto deriv) {
      if (!ga) return;
      Array d(a.rows(), a.cols());
      const Array& y = ev.value(id);
      for (std::size_t i = 0; i < a.size(); ++i) d[i] = g[i] * deriv(a[i], y[i]);
      accumulate(adj, rec.a, std::move(d));
    };
    switch (rec.op) {
      case Op::Add:
      case Op::Sub:
      case Op::Mul:
      case Op::Div: {
        const Array& b = ev.value(rec.b);
        const bool gb = graph_.record(rec.b).needs_grad;
        const auto bc = broadcast(id, a, b);
        Array da(bc.rows, bc.cols), db(bc.rows, bc.cols);
        for (std::size_t r = 0; r < bc.rows; ++r) {
          for (std::size_t c = 0; c < bc.cols; ++c) {
            const double gv = g(r, c);
            const double av = a[bc.ai(r, c)];
            const double bv = b[bc.bi(r, c)];
            switch (rec.op) {
              case Op::Add: da(r, c) = gv; db(r, c) = gv; break;
              case Op::Sub: da(r, c) = gv; db(r, c) = -gv; break;
              case Op::Mul: da(r, c) = gv * bv; db(r, c) = gv * av; break;
              default: da(r, c) = gv / bv; db(r, c) = -gv * av / (bv * bv); break;
            }
          }
        }
        if (ga) accumulate(adj, rec.a, reduce_to(da, bc, true));
        if (gb) accumulate(adj, rec.b, reduce_to(db, bc, false));
        return;
      }
      case Op::Neg: unary_rule([](double, double) { return -1.0; }); return;
      case Op::MatMul: {
        const Array& b = ev.value(rec.b);
        if (ga) {
          Array da(a.rows(), a.cols());
          view(da).noalias() = view(g) * view(b).transpose();
          accumulate(adj, rec.a, std::move(da));
        }
        if (graph_.record(rec.b).needs_grad) {
          Array db(b.rows(), b.cols());
          view(db).noalias() = view(a).transpose() * view(g);
          accumulate(adj, rec.b, std::move(db));
        }
        return;
      }
      case Op::Sum: {
        if (ga) accumulate(adj, rec.a, Array(a.rows(), a.cols(), g[0]));
        return;
      }
      case Op::Mean: {
        if (ga) {
          accumulate(adj, rec.a, Array(a.rows(), a.cols(), g[0] / static_cast<double>(a.size())));
        }
        return;
      }
      case Op::SumRows: {
        if (!ga) return;
        Array d(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t c = 0; c < a.cols(); ++c) d(r, c) = g[r];
        accumulate(adj, rec.a, std::move(d));
        return;
      }
      case Op::Log: unary_rule([](double x, double) { return 1.0 / x; }); return;
      case Op::Exp: unary_rule([](double, double y) { return y; }); return;
      case Op::Square: unary_rule([](double x, double) { return 2.0 * x; }); return;
      case Op::Sqrt: unary_rule([](double, double y) { return 0.5 / y; }); return;
      case Op::Softplus: unary_rule([](double x, double) { return detail::sigmoid(x); }); return;
      case Op::Sigmoid: unary_rule([](double, double y) { return y * (1.0 - y); }); return;
      case Op::Relu: unary_rule([](double x, double) { return x >= 0.0 ? 1.0 : 0.0; }); return;
      case Op::LeakyRelu: {
        const double s = rec.param;
        unary_rule([s](double x, double) { return x >= 0.0 ? 1.0 : s; });
        return;
      }
      case Op::MaxConst: {
        const double c = rec.param;
        unary_rule([c](double x, double) { return x >= c ? 1.0 : 0.0; });
        return;
      }
      case Op::AddConst: unary_rule([](double, double) { return 1.0; }); return;
      case Op::MulConst: {
        const double c = rec.param;
        unary_rule([c](double, double) { return c; });
        return;
      }
      case Op::Softmax: {
        if (!ga) return;
        const Array& y = ev.value(id);
        Array d(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) dot += g(r, c) * y(r, c);
          for (std::size_t c = 0; c < a.cols(); ++c) d(r, c) = y(r, c) * (g(r, c) - dot);
        }
        accumulate(adj, rec.a, std::move(d));
        return;
      }
      case Op::ReshapeCols: {
        if (ga) accumulate(adj, rec.a, Array({a.rows(), a.cols()}, g.values()));
        return;
      }
      case Op::Columns: {
        if (!ga) return;
        Array d(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r)
          for (std::size_t j = 0; j < rec.indices.size(); ++j) d(r, rec.indices[j]) += g(r, j);
        accumulate(adj, rec.a, std::move(d));
        return;
      }
      case Op::ConcatCols: {
        const Array& b = ev.value(rec.b);
        if (ga) {
          Array d(a.rows(), a.cols());
          for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < a.cols(); ++c) d(r, c) = g(r, c);
          accumulate(adj, rec.a, std::move(d));
        }
        if (graph_.record(rec.b).needs_grad) {
          Array d(b.rows(), b.cols());
          for (std::size_t r = 0; r < b.rows(); ++r)
            for (std::size_t c = 0; c < b.cols(); ++c) d(r, c) = g(r, a.cols() + c);
          accumulate(adj, rec.b, std::move(d));
        }
        return;
      }
      case Op::BinOneHot:
      case Op::InRange:
      case Op::Input:
      case Op::Constant: return;
    }
  }

  const Graph& graph_;
  const Bindings& bindings_;
};

inline Evaluation forward(const Graph& graph, const Bindings& bindings) {
  return Evaluator(graph, bindings).forward();
}

inline Array evaluate(const Graph& graph, const Bindings& bindings) {
  return forward(graph, bindings).output();
}

struct GradientResult {
  double value = 0.0;
  std::map<std::string, Array> grads;
};

inline GradientResult gradient(const Graph& graph, const Bindings& bindings) {
  Evaluator ev(graph, bindings);
  const auto fwd = ev.forward();
  const Array& out = fwd.output();
  GradientResult res;
  res.grads = ev.backward(fwd);
  res.value = out.item();
  return res;
}

struct GradientCheck {
  double max_relative_error = 0.0;
  std::string worst_input;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  // Set when a relu/leaky_relu/max_const input sits exactly on its kink at the
  // base point; central differences are not meaningful there.
  bool nonsmooth = false;
  std::vector<std::string> kink_nodes;
};

// Compares analytic gradients against central differences for every element
// of the checked inputs:  |analytic - numeric| / (|numeric| + 1e-12).
// An empty `only` checks every bound input; otherwise just the named ones
// (typically the trainable parameters, leaving data inputs out).
inline GradientCheck check_gradient(const Graph& graph, const Bindings& bindings, double step,
                                    const std::vector<std::string>& only = {}) {
  if (!(step > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");
  GradientCheck report;
  const auto base = forward(graph, bindings);
  for (std::uint32_t id = 0; id < graph.size(); ++id) {
    const auto& rec = graph.record(id);
    if (rec.op != Op::Relu && rec.op != Op::LeakyRelu && rec.op != Op::MaxConst) continue;
    const double kink = rec.op == Op::MaxConst ? rec.param : 0.0;
    for (double x : base.value(rec.a).data()) {
      if (x == kink) {
        report.nonsmooth = true;
        report.kink_nodes.push_back(graph.describe(id));
        break;
      }
    }
  }
  const auto analytic = gradient(graph, bindings);
  Bindings work = bindings;
  for (auto& [name, arr] : work) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto git = analytic.grads.find(name);
    if (git == analytic.grads.end()) continue;
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const double orig = arr[i];
      arr[i] = orig + step;
      const double fp = evaluate(graph, work).item();
      arr[i] = orig - step;
      const double fm = evaluate(graph, work).item();
      arr[i] = orig;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = git->second[i];
      const double rel = std::abs(a - numeric) / (std::abs(numeric) + 1e-12);
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace iflow::ad
