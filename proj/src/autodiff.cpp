#include "depo/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace depo::ad {

// Lets the file-local op builders below reach Graph internals.
struct NodeAccess {
  using Node = Graph::Node;
  static Var push(Graph& g, Node n) { return g.push(std::move(n)); }
};

namespace {

constexpr double kMinNormalizeNorm = 1e-12;

std::size_t product(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

bool is_scalar(const Shape& s) { return s.size() == 1 && s[0] == 1; }

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                              shape_string(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a) {
  throw std::invalid_argument(std::string(op) + ": unsupported shape " + shape_string(a));
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape.empty() || shape.size() > 2 ||
      std::any_of(shape.begin(), shape.end(), [](std::size_t e) { return e == 0; })) {
    throw std::invalid_argument("Tensor: extents must be positive, rank 1 or 2, got " + shape_string(shape));
  }
  if (product(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_string(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
}

Tensor Tensor::zeros(Shape s) {
  const std::size_t n = product(s);
  return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::vector(std::vector<double> v) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  return Tensor({rows, cols}, std::move(v));
}

// ---------------------------------------------------------------------------
// Var

const Shape& Var::shape() const { return graph_->node(id_).shape; }
std::size_t Var::size() const { return graph_->node(id_).value.size(); }
std::span<const double> Var::values() const { return graph_->node(id_).value; }
double Var::item() const {
  const auto& n = graph_->node(id_);
  if (!is_scalar(n.shape)) shape_error("item", n.shape);
  return n.value[0];
}
std::span<const double> Var::grad() const { return graph_->node(id_).grad; }
bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

// ---------------------------------------------------------------------------
// Graph bookkeeping

Var Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  auto& back = nodes_.back();
  if (back.requires_grad) back.grad.assign(back.value.size(), 0.0);
  return Var(this, nodes_.size() - 1);
}

Graph::Node& Graph::node(Var v) { return nodes_[v.id()]; }

void Graph::check_owner(Var v, const char* op) const {
  if (v.graph() != this) throw std::invalid_argument(std::string(op) + ": operand belongs to another graph");
}

Var Graph::variable(Tensor t) {
  Node n;
  n.shape = std::move(t.shape);
  n.value = std::move(t.values);
  n.requires_grad = true;
  n.trainable_leaf = true;
  return push(std::move(n));
}

Var Graph::constant(Tensor t) {
  Node n;
  n.shape = std::move(t.shape);
  n.value = std::move(t.values);
  return push(std::move(n));
}

std::vector<std::size_t> Graph::inputs(std::size_t id) const {
  const Node& n = nodes_.at(id);
  switch (n.op) {
    case Op::kLeaf:
      return {};
    case Op::kMatVec:
    case Op::kAdd:
    case Op::kSub:
    case Op::kMul:
    case Op::kDot:
    case Op::kSqDist:
    case Op::kMin:
    case Op::kMax:
      return {n.a, n.b};
    case Op::kSum:
      return n.many;
    default:
      return {n.a};
  }
}

void Graph::zero_grad() {
  for (auto& n : nodes_) {
    if (n.trainable_leaf) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
}

void Graph::backward(Var root) {
  check_owner(root, "backward");
  const Node& r = nodes_[root.id()];
  if (!is_scalar(r.shape)) {
    throw std::invalid_argument("backward: root must be scalar, got shape " + shape_string(r.shape));
  }
  if (!r.requires_grad) return;
  for (std::size_t i = 0; i <= root.id(); ++i) {
    Node& n = nodes_[i];
    if (n.requires_grad && !n.trainable_leaf) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
  nodes_[root.id()].grad[0] += 1.0;
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    if (nodes_[i].requires_grad && nodes_[i].op != Op::kLeaf) propagate(i);
  }
}

void Graph::propagate(std::size_t id) {
  Node& n = nodes_[id];
  const std::vector<double>& g = n.grad;
  auto want = [this](std::size_t in) { return nodes_[in].requires_grad; };
  auto gin = [this](std::size_t in) -> std::vector<double>& { return nodes_[in].grad; };
  auto val = [this](std::size_t in) -> const std::vector<double>& { return nodes_[in].value; };

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kMatVec: {
      const auto& w = val(n.a);
      const auto& x = val(n.b);
      const std::size_t rows = nodes_[n.a].shape[0];
      const std::size_t cols = nodes_[n.a].shape[1];
      if (want(n.a)) {
        auto& gw = gin(n.a);
        for (std::size_t r = 0; r < rows; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          double* out = gw.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) out[c] += gr * x[c];
        }
      }
      if (want(n.b)) {
        auto& gx = gin(n.b);
        for (std::size_t r = 0; r < rows; ++r) {
          const double gr = g[r];
          if (gr == 0.0) continue;
          const double* wr = w.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) gx[c] += gr * wr[c];
        }
      }
      break;
    }
    case Op::kAdd:
    case Op::kSub: {
      const double sign = n.op == Op::kAdd ? 1.0 : -1.0;
      if (want(n.a)) {
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (want(n.b)) {
        auto& gb = gin(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += sign * g[i];
      }
      break;
    }
    case Op::kTanh: {
      if (want(n.a)) {
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
      }
      break;
    }
    case Op::kScale: {
      if (want(n.a)) {
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += n.p0 * g[i];
      }
      break;
    }
    case Op::kAddScalar: {
      if (want(n.a)) {
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      break;
    }
    case Op::kMul: {
      const double s = val(n.a)[0];
      const auto& t = val(n.b);
      if (want(n.a)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * t[i];
        gin(n.a)[0] += acc;
      }
      if (want(n.b)) {
        auto& gb = gin(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += s * g[i];
      }
      break;
    }
    case Op::kDot: {
      const auto& x = val(n.a);
      const auto& y = val(n.b);
      if (want(n.a)) {
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[0] * y[i];
      }
      if (want(n.b)) {
        auto& gb = gin(n.b);
        for (std::size_t i = 0; i < x.size(); ++i) gb[i] += g[0] * x[i];
      }
      break;
    }
    case Op::kSqDist: {
      const auto& x = val(n.a);
      const auto& y = val(n.b);
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = 2.0 * g[0] * (x[i] - y[i]);
        if (want(n.a)) gin(n.a)[i] += d;
        if (want(n.b)) gin(n.b)[i] -= d;
      }
      break;
    }
    case Op::kNorm: {
      const double len = n.value[0];
      if (want(n.a) && len > 0.0) {
        const auto& x = val(n.a);
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[0] * x[i] / len;
      }
      break;
    }
    case Op::kNormalize: {
      if (want(n.a)) {
        const double len = n.p0;
        const auto& y = n.value;
        double proj = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) proj += y[i] * g[i];
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < y.size(); ++i) ga[i] += (g[i] - y[i] * proj) / len;
      }
      break;
    }
    case Op::kLogSoftmaxAt: {
      if (want(n.a)) {
        const auto& z = val(n.a);
        const auto index = static_cast<std::size_t>(n.p0);
        const double lse = n.p1;
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < z.size(); ++i) {
          ga[i] += g[0] * ((i == index ? 1.0 : 0.0) - std::exp(z[i] - lse));
        }
      }
      break;
    }
    case Op::kExp: {
      if (want(n.a)) {
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.value[i];
      }
      break;
    }
    case Op::kLog: {
      if (want(n.a)) {
        const auto& x = val(n.a);
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
      }
      break;
    }
    case Op::kClip: {
      if (want(n.a)) {
        const auto& x = val(n.a);
        auto& ga = gin(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] >= n.p0 && x[i] <= n.p1) ga[i] += g[i];
        }
      }
      break;
    }
    case Op::kMin:
    case Op::kMax: {
      // p0 records which operand was selected (0 -> a, 1 -> b).
      const std::size_t chosen = n.p0 == 0.0 ? n.a : n.b;
      if (want(chosen)) gin(chosen)[0] += g[0];
      break;
    }
    case Op::kRow: {
      if (want(n.a)) {
        const std::size_t r = static_cast<std::size_t>(n.p0);
        auto& gm = gin(n.a);
        const std::size_t cols = g.size();
        for (std::size_t c = 0; c < cols; ++c) gm[r * cols + c] += g[c];
      }
      break;
    }
    case Op::kSum: {
      for (std::size_t in : n.many) {
        if (want(in)) gin(in)[0] += g[0];
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

Graph& owner(Var a, const char* op) {
  if (!a.valid()) throw std::invalid_argument(std::string(op) + ": empty Var");
  return *a.graph();
}

void same_graph(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || a.graph() != b.graph()) {
    throw std::invalid_argument(std::string(op) + ": operands belong to different graphs");
  }
}

void same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) shape_error(op, a.shape(), b.shape());
}

void require_vector(Var a, const char* op) {
  if (a.shape().size() != 1) shape_error(op, a.shape());
}

void require_scalar(Var a, const char* op) {
  if (!is_scalar(a.shape())) shape_error(op, a.shape());
}

}  // namespace

Var matvec(Var w, Var x) {
  same_graph(w, x, "matvec");
  const Shape& ws = w.shape();
  const Shape& xs = x.shape();
  if (ws.size() != 2 || xs.size() != 1 || ws[1] != xs[0]) shape_error("matvec", ws, xs);
  Graph& g = *w.graph();
  NodeAccess::Node n;
  n.op = Op::kMatVec;
  n.shape = {ws[0]};
  n.a = w.id();
  n.b = x.id();
  n.requires_grad = w.requires_grad() || x.requires_grad();
  n.value.assign(ws[0], 0.0);
  const auto wv = w.values();
  const auto xv = x.values();
  for (std::size_t r = 0; r < ws[0]; ++r) {
    double acc = 0.0;
    const double* wr = wv.data() + r * ws[1];
    for (std::size_t c = 0; c < ws[1]; ++c) acc += wr[c] * xv[c];
    n.value[r] = acc;
  }
  return g.push(std::move(n));
}

namespace {

Var binary_elementwise(Var a, Var b, Op op, const char* name) {
  same_graph(a, b, name);
  same_shape(a, b, name);
  NodeAccess::Node n;
  n.op = op;
  n.shape = a.shape();
  n.a = a.id();
  n.b = b.id();
  n.requires_grad = a.requires_grad() || b.requires_grad();
  const auto av = a.values();
  const auto bv = b.values();
  n.value.resize(av.size());
  const double sign = op == Op::kAdd ? 1.0 : -1.0;
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = av[i] + sign * bv[i];
  return NodeAccess::push(*a.graph(), std::move(n));
}

template <class F>
Var unary_elementwise(Var a, Op op, F f, double p0 = 0.0, double p1 = 0.0) {
  NodeAccess::Node n;
  n.op = op;
  n.shape = a.shape();
  n.a = a.id();
  n.p0 = p0;
  n.p1 = p1;
  n.requires_grad = a.requires_grad();
  const auto av = a.values();
  n.value.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = f(av[i]);
  return NodeAccess::push(*a.graph(), std::move(n));
}

}  // namespace

Var add(Var a, Var b) { return binary_elementwise(a, b, Op::kAdd, "add"); }
Var sub(Var a, Var b) { return binary_elementwise(a, b, Op::kSub, "sub"); }

Var tanh(Var a) {
  owner(a, "tanh");
  return unary_elementwise(a, Op::kTanh, [](double x) { return std::tanh(x); });
}

Var scale(Var a, double c) {
  owner(a, "scale");
  return unary_elementwise(a, Op::kScale, [c](double x) { return c * x; }, c);
}

Var add_scalar(Var a, double c) {
  owner(a, "add_scalar");
  return unary_elementwise(a, Op::kAddScalar, [c](double x) { return x + c; }, c);
}

Var mul(Var s, Var a) {
  same_graph(s, a, "mul");
  if (!is_scalar(s.shape())) shape_error("mul", s.shape(), a.shape());
  NodeAccess::Node n;
  n.op = Op::kMul;
  n.shape = a.shape();
  n.a = s.id();
  n.b = a.id();
  n.requires_grad = s.requires_grad() || a.requires_grad();
  const double sv = s.values()[0];
  const auto av = a.values();
  n.value.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) n.value[i] = sv * av[i];
  return s.graph()->push(std::move(n));
}

Var dot(Var a, Var b) {
  same_graph(a, b, "dot");
  require_vector(a, "dot");
  same_shape(a, b, "dot");
  NodeAccess::Node n;
  n.op = Op::kDot;
  n.shape = {1};
  n.a = a.id();
  n.b = b.id();
  n.requires_grad = a.requires_grad() || b.requires_grad();
  double acc = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  n.value = {acc};
  return NodeAccess::push(*a.graph(), std::move(n));
}

Var sqdist(Var a, Var b) {
  same_graph(a, b, "sqdist");
  require_vector(a, "sqdist");
  same_shape(a, b, "sqdist");
  NodeAccess::Node n;
  n.op = Op::kSqDist;
  n.shape = {1};
  n.a = a.id();
  n.b = b.id();
  n.requires_grad = a.requires_grad() || b.requires_grad();
  double acc = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  n.value = {acc};
  return NodeAccess::push(*a.graph(), std::move(n));
}

Var norm(Var a) {
  owner(a, "norm");
  require_vector(a, "norm");
  NodeAccess::Node n;
  n.op = Op::kNorm;
  n.shape = {1};
  n.a = a.id();
  n.requires_grad = a.requires_grad();
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  n.value = {std::sqrt(acc)};
  return NodeAccess::push(*a.graph(), std::move(n));
}

Var normalize(Var a) {
  owner(a, "normalize");
  require_vector(a, "normalize");
  double acc = 0.0;
  for (double v : a.values()) acc += v * v;
  const double len = std::sqrt(acc);
  if (!(len >= kMinNormalizeNorm)) {
    throw std::domain_error("normalize: degenerate direction (norm below 1e-12)");
  }
  return unary_elementwise(a, Op::kNormalize, [len](double x) { return x / len; }, len);
}

Var log_softmax_at(Var logits, std::size_t index) {
  owner(logits, "log_softmax_at");
  require_vector(logits, "log_softmax_at");
  const auto z = logits.values();
  if (index >= z.size()) {
    throw std::invalid_argument("log_softmax_at: index " + std::to_string(index) + " out of range for shape " +
                                shape_string(logits.shape()));
  }
  const double zmax = *std::max_element(z.begin(), z.end());
  double acc = 0.0;
  for (double v : z) acc += std::exp(v - zmax);
  const double lse = zmax + std::log(acc);
  NodeAccess::Node n;
  n.op = Op::kLogSoftmaxAt;
  n.shape = {1};
  n.a = logits.id();
  n.p0 = static_cast<double>(index);
  n.p1 = lse;
  n.requires_grad = logits.requires_grad();
  n.value = {z[index] - lse};
  return logits.graph()->push(std::move(n));
}

Var exp(Var a) {
  owner(a, "exp");
  return unary_elementwise(a, Op::kExp, [](double x) { return std::exp(x); });
}

Var log(Var a) {
  owner(a, "log");
  for (double v : a.values()) {
    if (!(v > 0.0)) throw std::domain_error("log: non-positive argument");
  }
  return unary_elementwise(a, Op::kLog, [](double x) { return std::log(x); });
}

Var clip(Var a, double lo, double hi) {
  owner(a, "clip");
  if (!(lo <= hi)) throw std::invalid_argument("clip: empty interval");
  return unary_elementwise(a, Op::kClip, [lo, hi](double x) { return std::clamp(x, lo, hi); }, lo, hi);
}

namespace {

Var select(Var a, Var b, bool take_b, Op op, const char* name) {
  NodeAccess::Node n;
  n.op = op;
  n.shape = {1};
  n.a = a.id();
  n.b = b.id();
  n.p0 = take_b ? 1.0 : 0.0;
  n.requires_grad = a.requires_grad() || b.requires_grad();
  n.value = {take_b ? b.values()[0] : a.values()[0]};
  (void)name;
  return NodeAccess::push(*a.graph(), std::move(n));
}

}  // namespace

Var min(Var a, Var b) {
  same_graph(a, b, "min");
  require_scalar(a, "min");
  require_scalar(b, "min");
  return select(a, b, b.values()[0] < a.values()[0], Op::kMin, "min");
}

Var max(Var a, Var b) {
  same_graph(a, b, "max");
  require_scalar(a, "max");
  require_scalar(b, "max");
  return select(a, b, b.values()[0] > a.values()[0], Op::kMax, "max");
}

Var row(Var m, std::size_t index) {
  owner(m, "row");
  const Shape& s = m.shape();
  if (s.size() != 2) shape_error("row", s);
  if (index >= s[0]) {
    throw std::invalid_argument("row: index " + std::to_string(index) + " out of range for shape " + shape_string(s));
  }
  NodeAccess::Node n;
  n.op = Op::kRow;
  n.shape = {s[1]};
  n.a = m.id();
  n.p0 = static_cast<double>(index);
  n.requires_grad = m.requires_grad();
  const auto mv = m.values();
  n.value.assign(mv.begin() + static_cast<std::ptrdiff_t>(index * s[1]),
                 mv.begin() + static_cast<std::ptrdiff_t>((index + 1) * s[1]));
  return m.graph()->push(std::move(n));
}

Var sum(std::span<const Var> terms) {
  if (terms.empty()) throw std::invalid_argument("sum: no operands");
  Graph& g = owner(terms[0], "sum");
  NodeAccess::Node n;
  n.op = Op::kSum;
  n.shape = {1};
  double acc = 0.0;
  for (const Var& t : terms) {
    same_graph(terms[0], t, "sum");
    require_scalar(t, "sum");
    n.many.push_back(t.id());
    acc += t.values()[0];
    n.requires_grad = n.requires_grad || t.requires_grad();
  }
  n.value = {acc};
  return g.push(std::move(n));
}

}  // namespace depo::ad
