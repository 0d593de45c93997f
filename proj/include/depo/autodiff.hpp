#pragma once

// Tape-based reverse-mode automatic differentiation over small dense tensors.
//
// A Graph records every primitive application in topological order. Each
// node owns its value; nodes that depend on a trainable leaf also own a
// gradient buffer. backward() walks the tape once, newest node first.
//
// Shapes are rank 1 (vectors, scalars are {1}) or rank 2 (row-major
// matrices). The only broadcast is scalar-times-tensor; every other shape
// disagreement throws std::invalid_argument naming the op and the shapes.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace depo::ad {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

/// Dense row-major array of 64-bit reals.
struct Tensor {
  Shape shape;
  std::vector<double> values;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> v);

  static Tensor zeros(Shape s);
  static Tensor vector(std::vector<double> v);
  static Tensor scalar(double v);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.at(0); }
  std::size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
  double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(values).subspan(r * cols(), cols());
  }

  bool operator==(const Tensor&) const = default;
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatVec,
  kAdd,
  kSub,
  kTanh,
  kScale,
  kAddScalar,
  kMul,
  kDot,
  kSqDist,
  kNorm,
  kNormalize,
  kLogSoftmaxAt,
  kExp,
  kLog,
  kClip,
  kMin,
  kMax,
  kRow,
  kSum,
};

class Graph;
struct NodeAccess;

/// Handle to a node of a Graph. Cheap to copy; valid while its Graph lives.
class Var {
 public:
  Var() = default;

  std::size_t id() const { return id_; }
  Graph* graph() const { return graph_; }
  bool valid() const { return graph_ != nullptr; }

  const Shape& shape() const;
  std::size_t size() const;
  std::span<const double> values() const;
  /// Value of a scalar node.
  double item() const;
  /// Accumulated gradient (empty span when the node carries no gradient).
  std::span<const double> grad() const;
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, std::size_t id) : graph_(g), id_(id) {}
  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Trainable leaf: receives gradients in backward().
  Var variable(Tensor t);
  /// Constant leaf: never receives a gradient.
  Var constant(Tensor t);
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  /// Propagates d(root)/d(node) to every node. Leaf gradients accumulate
  /// across calls; interior gradients are reset on every call.
  void backward(Var root);
  /// Clears leaf gradients.
  void zero_grad();

  std::size_t size() const { return nodes_.size(); }
  Op op(std::size_t id) const { return nodes_.at(id).op; }
  /// Node ids consumed by node `id`, in argument order.
  std::vector<std::size_t> inputs(std::size_t id) const;

 private:
  friend class Var;
  friend struct NodeAccess;
  friend Var matvec(Var w, Var x);
  friend Var add(Var a, Var b);
  friend Var sub(Var a, Var b);
  friend Var tanh(Var a);
  friend Var scale(Var a, double c);
  friend Var add_scalar(Var a, double c);
  friend Var mul(Var s, Var a);
  friend Var dot(Var a, Var b);
  friend Var sqdist(Var a, Var b);
  friend Var norm(Var a);
  friend Var normalize(Var a);
  friend Var log_softmax_at(Var logits, std::size_t index);
  friend Var exp(Var a);
  friend Var log(Var a);
  friend Var clip(Var a, double lo, double hi);
  friend Var min(Var a, Var b);
  friend Var max(Var a, Var b);
  friend Var row(Var m, std::size_t index);
  friend Var sum(std::span<const Var> terms);

  struct Node {
    Op op = Op::kLeaf;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::size_t a = 0;
    std::size_t b = 0;
    std::vector<std::size_t> many;  // kSum operands
    double p0 = 0.0;                // op parameter (scale, bounds, index)
    double p1 = 0.0;
    bool requires_grad = false;
    bool trainable_leaf = false;
  };

  Var push(Node n);
  Node& node(Var v);
  const Node& node(std::size_t id) const { return nodes_[id]; }
  void check_owner(Var v, const char* op) const;
  void propagate(std::size_t id);

  std::vector<Node> nodes_;
};

Var matvec(Var w, Var x);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var tanh(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// Scalar `s` times tensor `a` (also scalar times scalar).
Var mul(Var s, Var a);
Var dot(Var a, Var b);
Var sqdist(Var a, Var b);
Var norm(Var a);
/// a / ||a||; throws std::domain_error when ||a|| < 1e-12.
Var normalize(Var a);
/// log_softmax(logits)[index].
Var log_softmax_at(Var logits, std::size_t index);
Var exp(Var a);
/// Natural log; throws std::domain_error for non-positive entries.
Var log(Var a);
/// Gradient passes on [lo, hi] and is zero outside.
Var clip(Var a, double lo, double hi);
Var min(Var a, Var b);
Var max(Var a, Var b);
/// Row `index` of a matrix, as a vector.
Var row(Var m, std::size_t index);
/// Sum of scalar nodes; an empty list is rejected.
Var sum(std::span<const Var> terms);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator-(Var a) { return scale(a, -1.0); }

}  // namespace depo::ad
