#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "mrvi/tensor.hpp"

namespace mrvi {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

// Reverse-mode tape. Nodes are appended in evaluation order, so reverse
// creation order is a valid topological order for the backward pass.
//
// A graph constructed with record = false evaluates values only and never
// allocates adjoints; this is the inference path.
class Graph {
 public:
  using Backward = std::function<void(Graph&, Var self)>;

  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return record_; }

  Var constant(Tensor value);
  // Leaf whose adjoint is kept after backward().
  Var parameter(Tensor value);

  // Appends an op node. `backward` reads adjoint(out) and accumulates into
  // the parents' adjoints; it is dropped when nothing upstream needs a gradient.
  Var emit(Tensor value, bool requires_grad, Backward backward);

  // Seeds d(root)/d(root) = 1 and runs every recorded backward closure once,
  // in reverse creation order. Root must hold a single element.
  void backward(Var root);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Adjoint of a node; zeros when nothing flowed into it.
  const Tensor& adjoint(Var v);
  // Accumulate `delta` into the adjoint of v (allocating on first use).
  Tensor& adjoint_for_update(Var v);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor adjoint;
    bool requires_grad = false;
    bool has_adjoint = false;
    Backward backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }
inline bool Var::requires_grad() const { return graph->requires_grad(*this); }

// ---- affine / convolution -------------------------------------------------

// x[B,I] * w[I,O] + b[O]
Var linear(Var x, Var w, Var b);

// 3x3 cross-correlation with zero padding 1. x[B,C,H,W], k[F,C,3,3], b[F].
// stride 1 keeps the spatial extent; stride 2 halves it (rounding up).
Var conv2d(Var x, Var k, Var b, int stride = 1);

// Nearest-neighbour x2 upsampling of x[B,C,H,W].
Var upsample2(Var x);

// ---- elementwise -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var square(Var a);
Var reciprocal(Var a);
Var sqrt(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var log(Var a);  // throws DomainError on non-positive input
Var softplus(Var a);
// Values outside [lo, hi] are clamped and pass no gradient.
Var clamp(Var a, double lo, double hi);
Var lgamma(Var a);   // requires a > 0
Var digamma(Var a);  // requires a > 0; adjoint uses trigamma

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// ---- reductions / structure -----------------------------------------------

Var sum(Var a);   // -> scalar
Var mean(Var a);  // -> scalar
// Broadcast a one-element tensor to `shape`.
Var expand(Var scalar, Shape shape);
Var reshape(Var a, Shape shape);
// Softmax along `axis` (negative counts from the back).
Var softmax(Var a, int axis);
// Concatenate along axis 1 of [B,C,H,W] tensors.
Var concat_channels(Var a, Var b);
// Channels [begin, begin+count) of x[B,C,H,W].
Var slice_channels(Var x, std::size_t begin, std::size_t count);
// Broadcast v[K] to [1,K,H,W].
Var broadcast_channels(Var v, std::size_t height, std::size_t width);
// Row `row` of a rank-2 tensor as a rank-1 tensor.
Var take_row(Var a, std::size_t row);
// Element `index` of a flat tensor as a scalar.
Var pick(Var a, std::size_t index);

// ---- fused losses ------------------------------------------------------------

// -log softmax(logits)[target] via log-sum-exp. logits[N].
Var cross_entropy_logits(Var logits, std::size_t target);
// Mean per-pixel cross-entropy. logits[1,K,H,W] (or [K,H,W]); labels hold class
// indices in row-major H*W order.
Var pixel_cross_entropy(Var logits, std::span<const std::uint8_t> labels);
// Mean squared error between a and a constant target of the same shape.
Var mse(Var a, const Tensor& target);

// Plain-value helpers shared by the ops and by tests.
double softplus_value(double x);
double sigmoid_value(double x);

}  // namespace mrvi
