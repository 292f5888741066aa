#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// Every backward rule is written in terms of the same differentiable ops, so
// a backward pass run with create_graph=true is itself a recorded graph and
// can be differentiated again (reverse-over-reverse). The one exception is
// the fused softmax-cross-entropy gradient, whose second-order rule is
// analytic and which does not support a third order.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "repfuse/tensor.hpp"

namespace repfuse::ad {

enum class OpKind {
  Leaf,
  MatMul,
  Add,
  Sub,
  Scale,
  MulMask,
  Relu,
  BiasAdd,
  ChannelSum,
  ChannelBroadcast,
  Reshape,
  Permute,
  Im2Col,
  Col2Im,
  Gather,
  ScatterAdd,
  MaxPool,
  SoftmaxXent,
  SoftmaxXentGrad,
  Sum,
  Fill,
  Dot,
  MulScalar,
  ScalarDiv,
  Sqrt,
};

const char* op_name(OpKind op);

class Var;
using BackwardFn = std::function<std::vector<Var>(const Var& grad_out)>;

struct Node {
  Tensor value;
  OpKind op = OpKind::Leaf;
  bool requires_grad = false;
  std::vector<Var> parents;
  // Maps d(root)/d(this) to one gradient per parent (undefined Var = none).
  BackwardFn backward;
};

/// Handle to a graph node. Cheap to copy; the graph is kept alive by the
/// handles that reference it.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  OpKind op() const { return node_->op; }
  const Node* node() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// Disables recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
Var variable(Tensor value);

/// d(root)/d(wrt[i]) for each i. root must be a single-element node that
/// depends on recorded inputs. With create_graph the returned gradients are
/// recorded nodes that can be differentiated again. Inputs the root does not
/// depend on get a zero gradient.
std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph = false);

/// Second-order entry point: root must be built from gradients returned by a
/// create_graph=true pass. Fails with a graph error if that pass was not
/// recorded.
Var grad_of_grad(const Var& root, const Var& wrt);

// --- primitives -----------------------------------------------------------

/// op(a) * op(b) for rank-2 a and b, where op transposes when the flag is set.
Var matmul(const Var& a, const Var& b, bool transpose_a = false, bool transpose_b = false);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scale(const Var& a, double c);
/// Elementwise product with a constant tensor.
Var mul_mask(const Var& a, const Tensor& mask);
Var relu(const Var& a);
/// x: [N, C, ...], b: [C]; adds b along axis 1.
Var bias_add(const Var& x, const Var& b);
/// Sum over every axis except 1; [N, C, ...] -> [C].
Var channel_sum(const Var& x);
/// Inverse shape map of channel_sum: [C] -> shape, copying along axis 1.
Var channel_broadcast(const Var& b, const Shape& shape);
Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, std::vector<std::size_t> perm);
/// Patch expansion for stride-1 square kernels: [N, C, H, W] ->
/// [N*Ho*Wo, C*k*k] with Ho = H + 2*pad - k + 1.
Var im2col(const Var& x, std::size_t kernel, std::size_t pad);
/// Adjoint of im2col: accumulates patches back into an image of `image_shape`.
Var col2im(const Var& cols, const Shape& image_shape, std::size_t kernel, std::size_t pad);
/// out.flat[i] = x.flat[index[i]].
Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape);
/// Adjoint of gather: out = zeros(shape); out.flat[index[i]] += g.flat[i].
Var scatter_add(const Var& g, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);
/// 2x2 max pool with stride 2 over [N, C, H, W]; ties go to the first element.
Var max_pool2x2(const Var& x);
/// Sum over rows of -log softmax(logits)[label]; logits [N, M].
Var softmax_cross_entropy(const Var& logits, std::shared_ptr<const std::vector<int>> labels);
Var sum(const Var& x);
/// Broadcast a single-element node to `shape`.
Var fill(const Var& s, const Shape& shape);
Var dot(const Var& a, const Var& b);
/// x times a single-element node.
Var mul_scalar(const Var& x, const Var& s);
Var scalar_div(const Var& a, const Var& b);
Var sqrt(const Var& a);
/// Euclidean norm; the subgradient at 0 is taken as 0.
Var l2_norm(const Var& x);

/// Composite 2-D convolution, stride 1: x [N, C, H, W], w [O, C, k, k] ->
/// [N, O, Ho, Wo], built from im2col, matmul, reshape and permute.
Var conv2d(const Var& x, const Var& w, std::size_t pad);

}  // namespace repfuse::ad
