#include "repfuse/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "repfuse/error.hpp"

namespace repfuse::ad {

namespace {

thread_local bool t_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

Var make(Tensor value, OpKind op, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) {
    throw Error(ErrorKind::NumericFault, std::string("non-finite value produced by ") + op_name(op));
  }
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  if (t_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(), [](const Var& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents = std::move(parents);
      node->backward = std::move(backward);
    }
  }
  return Var(std::move(node));
}

void require_same_shape(const Var& a, const Var& b, OpKind op) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op_name(op)) + ": " + shape_str(a.shape()) + " vs " +
                                              shape_str(b.shape()));
  }
}

void require_single(const Var& s, OpKind op) {
  if (s.size() != 1) {
    throw Error(ErrorKind::ShapeMismatch,
                std::string(op_name(op)) + ": expected a single element, got " + shape_str(s.shape()));
  }
}

void require_rank(const Var& x, std::size_t rank, OpKind op) {
  if (x.shape().size() != rank) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op_name(op)) + ": expected rank " + std::to_string(rank) +
                                              ", got " + shape_str(x.shape()));
  }
}

Tensor matmul_value(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  if (k != kb) {
    throw Error(ErrorKind::ShapeMismatch, "matmul: inner dimensions differ: " + shape_str(a.shape()) +
                                              (ta ? "^T" : "") + " x " + shape_str(b.shape()) + (tb ? "^T" : ""));
  }
  Tensor c(Shape{m, n});
  ConstMap A(a.data().data(), a.dim(0), a.dim(1));
  ConstMap B(b.data().data(), b.dim(0), b.dim(1));
  MutMap C(c.data().data(), m, n);
  if (!ta && !tb) {
    C.noalias() = A * B;
  } else if (ta && !tb) {
    C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    C.noalias() = A * B.transpose();
  } else {
    C.noalias() = A.transpose() * B.transpose();
  }
  return c;
}

std::vector<double> softmax_rows(const Tensor& z) {
  const std::size_t n = z.dim(0), m = z.dim(1);
  std::vector<double> p(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = z.data().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      p[i * m + j] = std::exp(row[j] - mx);
      s += p[i * m + j];
    }
    for (std::size_t j = 0; j < m; ++j) p[i * m + j] /= s;
  }
  return p;
}

// g * (softmax(z) - onehot(labels)), rows of z.
Var softmax_xent_grad(const Var& z, std::shared_ptr<const std::vector<int>> labels, const Var& g) {
  const std::size_t n = z.shape()[0], m = z.shape()[1];
  const auto p = softmax_rows(z.value());
  const double gv = g.value().item();
  Tensor out(z.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double y = static_cast<std::size_t>((*labels)[i]) == j ? 1.0 : 0.0;
      out[i * m + j] = gv * (p[i * m + j] - y);
    }
  }
  return make(std::move(out), OpKind::SoftmaxXentGrad, {z, g}, [z, labels, g](const Var& gg) {
    if (grad_enabled() && (z.requires_grad() || g.requires_grad())) {
      throw Error(ErrorKind::Graph, "third-order derivatives through softmax_cross_entropy are not supported");
    }
    const std::size_t n = z.shape()[0], m = z.shape()[1];
    const auto p = softmax_rows(z.value());
    const double gv = g.value().item();
    const auto& u = gg.value();
    Tensor dz(z.shape());
    double dg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double up = 0.0;
      for (std::size_t j = 0; j < m; ++j) up += u[i * m + j] * p[i * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        const double pij = p[i * m + j];
        const double y = static_cast<std::size_t>((*labels)[i]) == j ? 1.0 : 0.0;
        dz[i * m + j] = gv * pij * (u[i * m + j] - up);
        dg += u[i * m + j] * (pij - y);
      }
    }
    return std::vector<Var>{constant(std::move(dz)), constant(Tensor(g.shape(), dg))};
  });
}

Var gather_tagged(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape, OpKind op) {
  if (shape_size(out_shape) != index->size()) {
    throw Error(ErrorKind::ShapeMismatch, "gather: index count does not match " + shape_str(out_shape));
  }
  Tensor out(out_shape);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t src = (*index)[i];
    if (src >= xv.size()) throw Error(ErrorKind::ShapeMismatch, "gather: index out of range");
    out[i] = xv[src];
  }
  Shape in_shape = x.shape();
  return make(std::move(out), op, {x}, [index, in_shape](const Var& g) {
    return std::vector<Var>{scatter_add(g, index, in_shape)};
  });
}

}  // namespace

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::MatMul: return "matmul";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Scale: return "scale";
    case OpKind::MulMask: return "mul_mask";
    case OpKind::Relu: return "relu";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::ChannelSum: return "channel_sum";
    case OpKind::ChannelBroadcast: return "channel_broadcast";
    case OpKind::Reshape: return "reshape";
    case OpKind::Permute: return "permute";
    case OpKind::Im2Col: return "im2col";
    case OpKind::Col2Im: return "col2im";
    case OpKind::Gather: return "gather";
    case OpKind::ScatterAdd: return "scatter_add";
    case OpKind::MaxPool: return "max_pool2x2";
    case OpKind::SoftmaxXent: return "softmax_cross_entropy";
    case OpKind::SoftmaxXentGrad: return "softmax_cross_entropy_grad";
    case OpKind::Sum: return "sum";
    case OpKind::Fill: return "fill";
    case OpKind::Dot: return "dot";
    case OpKind::MulScalar: return "mul_scalar";
    case OpKind::ScalarDiv: return "scalar_div";
    case OpKind::Sqrt: return "sqrt";
  }
  return "unknown";
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Var constant(Tensor value) { return make(std::move(value), OpKind::Leaf, {}, {}); }

Var variable(Tensor value) {
  if (!value.all_finite()) throw Error(ErrorKind::NumericFault, "non-finite value bound to a variable");
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

namespace {

struct Sweep {
  std::vector<Var> grads;
  std::vector<bool> reached;
};

Sweep backward_sweep(const Var& root, std::span<const Var> wrt, bool create_graph) {
  if (!root.defined() || root.size() != 1) {
    throw Error(ErrorKind::ShapeMismatch,
                "backward root must be a single-element node, got " + (root.defined() ? shape_str(root.shape()) : "<undefined>"));
  }
  if (!root.requires_grad()) {
    throw Error(ErrorKind::Graph, "backward root was not recorded (no recorded input reaches it)");
  }

  // Post-order DFS over recorded nodes: every node appears after its parents.
  std::vector<const Node*> order;
  std::unordered_set<const Node*> visited;
  std::vector<std::pair<const Node*, std::size_t>> stack{{root.node(), 0}};
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Var& p = node->parents[next++];
      if (p.requires_grad() && visited.insert(p.node()).second) stack.emplace_back(p.node(), 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_set<const Node*> wanted;
  for (const auto& w : wrt) wanted.insert(w.node());

  std::optional<NoGradGuard> guard;
  if (!create_graph) guard.emplace();

  std::unordered_map<const Node*, Var> grads;
  grads.emplace(root.node(), constant(Tensor(root.shape(), 1.0)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    auto found = grads.find(node);
    if (found == grads.end()) continue;
    const Var g = found->second;
    if (!wanted.count(node)) grads.erase(found);
    if (!node->backward) continue;
    auto parent_grads = node->backward(g);
    for (std::size_t i = 0; i < node->parents.size(); ++i) {
      const Var& p = node->parents[i];
      if (!p.requires_grad() || !parent_grads[i].defined()) continue;
      Var& slot = grads[p.node()];
      slot = slot.defined() ? add(slot, parent_grads[i]) : parent_grads[i];
    }
  }

  Sweep out;
  for (const auto& w : wrt) {
    auto found = grads.find(w.node());
    out.reached.push_back(visited.count(w.node()) > 0);
    out.grads.push_back(found != grads.end() ? found->second : constant(Tensor(w.shape(), 0.0)));
  }
  return out;
}

}  // namespace

std::vector<Var> grad(const Var& root, std::span<const Var> wrt, bool create_graph) {
  return backward_sweep(root, wrt, create_graph).grads;
}

Var grad_of_grad(const Var& root, const Var& wrt) {
  if (!root.requires_grad()) {
    throw Error(ErrorKind::Graph, "grad_of_grad: the first backward pass was not recorded (use create_graph)");
  }
  if (!wrt.requires_grad()) throw Error(ErrorKind::Graph, "grad_of_grad: wrt is not a recorded input");
  const Var targets[] = {wrt};
  auto sweep = backward_sweep(root, targets, false);
  if (!sweep.reached[0]) throw Error(ErrorKind::Graph, "grad_of_grad: root does not depend on wrt");
  return sweep.grads[0];
}

// --- primitives -------------------------------------------------------------

Var matmul(const Var& a, const Var& b, bool ta, bool tb) {
  require_rank(a, 2, OpKind::MatMul);
  require_rank(b, 2, OpKind::MatMul);
  return make(matmul_value(a.value(), b.value(), ta, tb), OpKind::MatMul, {a, b}, [a, b, ta, tb](const Var& g) {
    Var da = ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb);
    Var db = tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false);
    return std::vector<Var>{da, db};
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, OpKind::Add);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make(std::move(out), OpKind::Add, {a, b}, [](const Var& g) { return std::vector<Var>{g, g}; });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, OpKind::Sub);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make(std::move(out), OpKind::Sub, {a, b}, [](const Var& g) { return std::vector<Var>{g, scale(g, -1.0)}; });
}

Var scale(const Var& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.value()[i];
  return make(std::move(out), OpKind::Scale, {a}, [c](const Var& g) { return std::vector<Var>{scale(g, c)}; });
}

Var mul_mask(const Var& a, const Tensor& mask) {
  if (a.shape() != mask.shape()) {
    throw Error(ErrorKind::ShapeMismatch, "mul_mask: " + shape_str(a.shape()) + " vs " + shape_str(mask.shape()));
  }
  auto m = std::make_shared<const Tensor>(mask);
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * (*m)[i];
  return make(std::move(out), OpKind::MulMask, {a}, [m](const Var& g) { return std::vector<Var>{mul_mask(g, *m)}; });
}

Var relu(const Var& a) {
  auto mask = std::make_shared<Tensor>(a.shape());
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const bool on = a.value()[i] > 0.0;
    (*mask)[i] = on ? 1.0 : 0.0;
    out[i] = on ? a.value()[i] : 0.0;
  }
  return make(std::move(out), OpKind::Relu, {a}, [mask](const Var& g) { return std::vector<Var>{mul_mask(g, *mask)}; });
}

namespace {

// [N, C, inner] view of a rank >= 2 shape.
struct ChannelView {
  std::size_t outer, channels, inner;
};

ChannelView channel_view(const Shape& s, OpKind op) {
  if (s.size() < 2) throw Error(ErrorKind::ShapeMismatch, std::string(op_name(op)) + ": rank < 2 " + shape_str(s));
  std::size_t inner = 1;
  for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
  return {s[0], s[1], inner};
}

}  // namespace

Var bias_add(const Var& x, const Var& b) {
  const auto v = channel_view(x.shape(), OpKind::BiasAdd);
  if (b.shape().size() != 1 || b.shape()[0] != v.channels) {
    throw Error(ErrorKind::ShapeMismatch, "bias_add: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  }
  Tensor out(x.shape());
  for (std::size_t n = 0; n < v.outer; ++n)
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t base = (n * v.channels + c) * v.inner;
      const double bc = b.value()[c];
      for (std::size_t i = 0; i < v.inner; ++i) out[base + i] = x.value()[base + i] + bc;
    }
  return make(std::move(out), OpKind::BiasAdd, {x, b}, [](const Var& g) {
    return std::vector<Var>{g, channel_sum(g)};
  });
}

Var channel_sum(const Var& x) {
  const auto v = channel_view(x.shape(), OpKind::ChannelSum);
  Tensor out(Shape{v.channels});
  for (std::size_t n = 0; n < v.outer; ++n)
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t base = (n * v.channels + c) * v.inner;
      double s = 0.0;
      for (std::size_t i = 0; i < v.inner; ++i) s += x.value()[base + i];
      out[c] += s;
    }
  Shape in_shape = x.shape();
  return make(std::move(out), OpKind::ChannelSum, {x}, [in_shape](const Var& g) {
    return std::vector<Var>{channel_broadcast(g, in_shape)};
  });
}

Var channel_broadcast(const Var& b, const Shape& shape) {
  const auto v = channel_view(shape, OpKind::ChannelBroadcast);
  if (b.shape().size() != 1 || b.shape()[0] != v.channels) {
    throw Error(ErrorKind::ShapeMismatch, "channel_broadcast: " + shape_str(b.shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape);
  for (std::size_t n = 0; n < v.outer; ++n)
    for (std::size_t c = 0; c < v.channels; ++c) {
      const std::size_t base = (n * v.channels + c) * v.inner;
      for (std::size_t i = 0; i < v.inner; ++i) out[base + i] = b.value()[c];
    }
  return make(std::move(out), OpKind::ChannelBroadcast, {b}, [](const Var& g) {
    return std::vector<Var>{channel_sum(g)};
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  Shape in_shape = x.shape();
  return make(std::move(out), OpKind::Reshape, {x}, [in_shape](const Var& g) {
    return std::vector<Var>{reshape(g, in_shape)};
  });
}

Var permute(const Var& x, std::vector<std::size_t> perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) throw Error(ErrorKind::ShapeMismatch, "permute: rank mismatch for " + shape_str(in));
  std::vector<std::size_t> inverse(r, r);
  for (std::size_t i = 0; i < r; ++i) {
    if (perm[i] >= r || inverse[perm[i]] != r) throw Error(ErrorKind::InvalidArgument, "permute: not a permutation");
    inverse[perm[i]] = i;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[perm[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  // Stride in the input for each output axis.
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) step[i] = in_strides[perm[i]];

  // Axes at the end that stay in place form contiguous runs.
  std::size_t run = 1, outer_rank = r;
  while (outer_rank > 0 && perm[outer_rank - 1] == outer_rank - 1) run *= in[--outer_rank];

  Tensor out(out_shape);
  const double* xv = x.value().data().data();
  double* ov = out.data().data();
  std::vector<std::size_t> counter(outer_rank, 0);
  std::size_t src = 0;
  for (std::size_t k = 0; k < out.size(); k += run) {
    std::copy(xv + src, xv + src + run, ov + k);
    for (std::size_t ax = outer_rank; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += step[ax];
        break;
      }
      src -= step[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  return make(std::move(out), OpKind::Permute, {x}, [inverse](const Var& g) {
    return std::vector<Var>{permute(g, inverse)};
  });
}

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, k, pad, ho, wo;
};

ConvGeometry conv_geometry(const Shape& image, std::size_t kernel, std::size_t pad, OpKind op) {
  if (image.size() != 4) throw Error(ErrorKind::ShapeMismatch, std::string(op_name(op)) + ": expected [N,C,H,W], got " + shape_str(image));
  ConvGeometry g{image[0], image[1], image[2], image[3], kernel, pad, 0, 0};
  if (kernel == 0 || g.h + 2 * pad < kernel || g.w + 2 * pad < kernel) {
    throw Error(ErrorKind::ShapeMismatch, std::string(op_name(op)) + ": kernel does not fit " + shape_str(image));
  }
  g.ho = g.h + 2 * pad - kernel + 1;
  g.wo = g.w + 2 * pad - kernel + 1;
  return g;
}

}  // namespace

Var im2col(const Var& x, std::size_t kernel, std::size_t pad) {
  const auto g = conv_geometry(x.shape(), kernel, pad, OpKind::Im2Col);
  const std::size_t cols = g.c * g.k * g.k;
  Tensor out(Shape{g.n * g.ho * g.wo, cols});
  const double* xv = x.value().data().data();
  double* ov = out.data().data();
  const auto pad_i = static_cast<std::ptrdiff_t>(g.pad);
  const auto h_i = static_cast<std::ptrdiff_t>(g.h), w_i = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        double* row = ov + ((n * g.ho + oh) * g.wo + ow) * cols;
        // kernel columns whose input column lies inside the image
        const std::ptrdiff_t iw0 = static_cast<std::ptrdiff_t>(ow) - pad_i;
        const std::size_t kw_lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -iw0));
        const std::size_t kw_hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(w_i - iw0, 0, static_cast<std::ptrdiff_t>(g.k)));
        for (std::size_t c = 0; c < g.c; ++c)
          for (std::size_t kh = 0; kh < g.k; ++kh) {
            double* dst = row + (c * g.k + kh) * g.k;
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - pad_i;
            if (ih < 0 || ih >= h_i || kw_lo >= kw_hi) {
              std::fill(dst, dst + g.k, 0.0);
              continue;
            }
            const double* src = xv + ((n * g.c + c) * g.h + static_cast<std::size_t>(ih)) * g.w;
            for (std::size_t kw = 0; kw < kw_lo; ++kw) dst[kw] = 0.0;
            for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) dst[kw] = src[iw0 + static_cast<std::ptrdiff_t>(kw)];
            for (std::size_t kw = kw_hi; kw < g.k; ++kw) dst[kw] = 0.0;
          }
      }
  Shape in_shape = x.shape();
  return make(std::move(out), OpKind::Im2Col, {x}, [in_shape, kernel, pad](const Var& gr) {
    return std::vector<Var>{col2im(gr, in_shape, kernel, pad)};
  });
}

Var col2im(const Var& cols_var, const Shape& image_shape, std::size_t kernel, std::size_t pad) {
  const auto g = conv_geometry(image_shape, kernel, pad, OpKind::Col2Im);
  const std::size_t cols = g.c * g.k * g.k;
  if (cols_var.shape() != Shape{g.n * g.ho * g.wo, cols}) {
    throw Error(ErrorKind::ShapeMismatch, "col2im: " + shape_str(cols_var.shape()) + " for image " + shape_str(image_shape));
  }
  Tensor out(image_shape);
  const double* cv = cols_var.value().data().data();
  double* ov = out.data().data();
  const auto pad_i = static_cast<std::ptrdiff_t>(g.pad);
  const auto h_i = static_cast<std::ptrdiff_t>(g.h), w_i = static_cast<std::ptrdiff_t>(g.w);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t oh = 0; oh < g.ho; ++oh)
      for (std::size_t ow = 0; ow < g.wo; ++ow) {
        const double* row = cv + ((n * g.ho + oh) * g.wo + ow) * cols;
        const std::ptrdiff_t iw0 = static_cast<std::ptrdiff_t>(ow) - pad_i;
        const std::size_t kw_lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -iw0));
        const std::size_t kw_hi = static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(w_i - iw0, 0, static_cast<std::ptrdiff_t>(g.k)));
        for (std::size_t c = 0; c < g.c; ++c)
          for (std::size_t kh = 0; kh < g.k; ++kh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh + kh) - pad_i;
            if (ih < 0 || ih >= h_i) continue;
            const double* src = row + (c * g.k + kh) * g.k;
            double* dst = ov + ((n * g.c + c) * g.h + static_cast<std::size_t>(ih)) * g.w;
            for (std::size_t kw = kw_lo; kw < kw_hi; ++kw) dst[iw0 + static_cast<std::ptrdiff_t>(kw)] += src[kw];
          }
      }
  return make(std::move(out), OpKind::Col2Im, {cols_var}, [kernel, pad](const Var& gr) {
    return std::vector<Var>{im2col(gr, kernel, pad)};
  });
}

Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
  return gather_tagged(x, std::move(index), std::move(out_shape), OpKind::Gather);
}

Var scatter_add(const Var& g, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape) {
  if (g.size() != index->size()) throw Error(ErrorKind::ShapeMismatch, "scatter_add: index count does not match input");
  Tensor out(shape);
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t dst = (*index)[i];
    if (dst >= out.size()) throw Error(ErrorKind::ShapeMismatch, "scatter_add: index out of range");
    out[dst] += g.value()[i];
  }
  Shape g_shape = g.shape();
  return make(std::move(out), OpKind::ScatterAdd, {g}, [index, g_shape](const Var& gg) {
    return std::vector<Var>{gather(gg, index, g_shape)};
  });
}

Var max_pool2x2(const Var& x) {
  require_rank(x, 4, OpKind::MaxPool);
  const auto& s = x.shape();
  const std::size_t N = s[0], C = s[1], H = s[2], W = s[3];
  if (H < 2 || W < 2) throw Error(ErrorKind::ShapeMismatch, "max_pool2x2: input too small " + shape_str(s));
  const std::size_t Ho = H / 2, Wo = W / 2;
  auto index = std::make_shared<std::vector<std::size_t>>(N * C * Ho * Wo);
  const auto& xv = x.value();
  std::size_t k = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc)
    for (std::size_t oh = 0; oh < Ho; ++oh)
      for (std::size_t ow = 0; ow < Wo; ++ow) {
        const std::size_t base = nc * H * W;
        const std::size_t cand[4] = {base + (2 * oh) * W + 2 * ow, base + (2 * oh) * W + 2 * ow + 1,
                                     base + (2 * oh + 1) * W + 2 * ow, base + (2 * oh + 1) * W + 2 * ow + 1};
        std::size_t best = cand[0];
        for (int j = 1; j < 4; ++j) {
          if (xv[cand[j]] > xv[best]) best = cand[j];
        }
        (*index)[k++] = best;
      }
  return gather_tagged(x, std::move(index), Shape{N, C, Ho, Wo}, OpKind::MaxPool);
}

Var softmax_cross_entropy(const Var& logits, std::shared_ptr<const std::vector<int>> labels) {
  require_rank(logits, 2, OpKind::SoftmaxXent);
  const std::size_t n = logits.shape()[0], m = logits.shape()[1];
  if (labels->size() != n) {
    throw Error(ErrorKind::ShapeMismatch, "softmax_cross_entropy: " + std::to_string(labels->size()) +
                                              " labels for logits " + shape_str(logits.shape()));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = (*labels)[i];
    if (y < 0 || static_cast<std::size_t>(y) >= m) {
      throw Error(ErrorKind::InvalidArgument, "label " + std::to_string(y) + " out of range [0," + std::to_string(m) + ")");
    }
    const double* row = logits.value().data().data() + i * m;
    const double mx = *std::max_element(row, row + m);
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += std::exp(row[j] - mx);
    total += std::log(s) + mx - row[y];
  }
  return make(Tensor::scalar(total), OpKind::SoftmaxXent, {logits}, [logits, labels](const Var& g) {
    return std::vector<Var>{softmax_xent_grad(logits, labels, g)};
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  Shape in_shape = x.shape();
  return make(Tensor::scalar(s), OpKind::Sum, {x}, [in_shape](const Var& g) {
    return std::vector<Var>{fill(g, in_shape)};
  });
}

Var fill(const Var& s, const Shape& shape) {
  require_single(s, OpKind::Fill);
  return make(Tensor(shape, s.value()[0]), OpKind::Fill, {s}, [](const Var& g) { return std::vector<Var>{sum(g)}; });
}

Var dot(const Var& a, const Var& b) {
  require_same_shape(a, b, OpKind::Dot);
  return make(Tensor::scalar(repfuse::dot(a.value().data(), b.value().data())), OpKind::Dot, {a, b},
              [a, b](const Var& g) { return std::vector<Var>{mul_scalar(b, g), mul_scalar(a, g)}; });
}

Var mul_scalar(const Var& x, const Var& s) {
  require_single(s, OpKind::MulScalar);
  const double c = s.value()[0];
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * c;
  return make(std::move(out), OpKind::MulScalar, {x, s}, [x, s](const Var& g) {
    return std::vector<Var>{mul_scalar(g, s), dot(g, x)};
  });
}

Var scalar_div(const Var& a, const Var& b) {
  require_single(a, OpKind::ScalarDiv);
  require_single(b, OpKind::ScalarDiv);
  Tensor out(a.shape(), a.value()[0] / b.value()[0]);
  return make(std::move(out), OpKind::ScalarDiv, {a, b}, [a, b](const Var& g) {
    Var da = scalar_div(g, b);
    Var db = scale(scalar_div(mul_scalar(a, g), mul_scalar(b, b)), -1.0);
    return std::vector<Var>{da, db};
  });
}

Var sqrt(const Var& a) {
  require_single(a, OpKind::Sqrt);
  Tensor out(a.shape(), std::sqrt(a.value()[0]));
  return make(std::move(out), OpKind::Sqrt, {a}, [a](const Var& g) {
    if (a.value()[0] == 0.0) return std::vector<Var>{constant(Tensor(a.shape(), 0.0))};
    return std::vector<Var>{scalar_div(g, scale(ad::sqrt(a), 2.0))};
  });
}

Var l2_norm(const Var& x) { return ad::sqrt(dot(x, x)); }

Var conv2d(const Var& x, const Var& w, std::size_t pad) {
  require_rank(x, 4, OpKind::Im2Col);
  if (w.shape().size() != 4 || w.shape()[1] != x.shape()[1] || w.shape()[2] != w.shape()[3]) {
    throw Error(ErrorKind::ShapeMismatch, "conv2d: kernel " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  }
  const std::size_t n = x.shape()[0], c = x.shape()[1], o = w.shape()[0], k = w.shape()[2];
  const std::size_t ho = x.shape()[2] + 2 * pad - k + 1, wo = x.shape()[3] + 2 * pad - k + 1;
  Var cols = im2col(x, k, pad);
  // [O, N*Ho*Wo]; moving N in front keeps each Ho*Wo plane contiguous.
  Var planes = matmul(reshape(w, Shape{o, c * k * k}), cols, false, true);
  return reshape(permute(reshape(planes, Shape{o, n, ho * wo}), {1, 0, 2}), Shape{n, o, ho, wo});
}

}  // namespace repfuse::ad
