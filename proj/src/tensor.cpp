#include "ucl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>

namespace ucl {

namespace {

thread_local bool g_grad_enabled = true;

using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Tensor value, std::vector<NodePtr> parents, const char* op,
                  std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool need = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) {
      if (p && p->requires_grad) {
        need = true;
        break;
      }
    }
  }
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

void accumulate(const NodePtr& p, const Eigen::Ref<const Eigen::ArrayXd>& g) {
  if (p->requires_grad) p->grad_buffer().array() += g;
}

double stable_softplus(double x) {
  if (x > 30.0) return x;
  if (x < -30.0) return std::exp(x);
  return std::log1p(std::exp(x));
}

double sigmoid(double x) {
  if (x >= 0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad && g_grad_enabled;
  node_->op = "leaf";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

void backward(const Var& root) {
  UCL_CHECK(root.defined(), "backward on undefined Var");
  UCL_CHECK(root.value().size() == 1, "backward requires a scalar root");
  Node* r = root.node().get();
  if (!r->requires_grad) return;

  // Iterative post-order DFS over the grad-requiring subgraph.
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  std::unordered_set<Node*> seen;
  stack.emplace_back(r, 0);
  seen.insert(r);
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  r->grad_buffer().array().setConstant(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  UCL_CHECK(a.value().shape() == b.value().shape(), "add: shape mismatch");
  Tensor out(a.value().shape());
  out.array() = a.value().array() + b.value().array();
  return Var::wrap(make_node(std::move(out), {a.node(), b.node()}, "add", [](Node& n) {
    accumulate(n.parents[0], n.grad.array());
    accumulate(n.parents[1], n.grad.array());
  }));
}

Var sub(const Var& a, const Var& b) {
  UCL_CHECK(a.value().shape() == b.value().shape(), "sub: shape mismatch");
  Tensor out(a.value().shape());
  out.array() = a.value().array() - b.value().array();
  return Var::wrap(make_node(std::move(out), {a.node(), b.node()}, "sub", [](Node& n) {
    accumulate(n.parents[0], n.grad.array());
    accumulate(n.parents[1], -n.grad.array());
  }));
}

Var mul(const Var& a, const Var& b) {
  UCL_CHECK(a.value().shape() == b.value().shape(), "mul: shape mismatch");
  Tensor out(a.value().shape());
  out.array() = a.value().array() * b.value().array();
  return Var::wrap(make_node(std::move(out), {a.node(), b.node()}, "mul", [](Node& n) {
    accumulate(n.parents[0], n.grad.array() * n.parents[1]->value.array());
    accumulate(n.parents[1], n.grad.array() * n.parents[0]->value.array());
  }));
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
  Tensor out(a.value().shape());
  out.array() = a.value().array() * s;
  return Var::wrap(make_node(std::move(out), {a.node()}, "scale", [s](Node& n) {
    accumulate(n.parents[0], n.grad.array() * s);
  }));
}

Var add_scalar(const Var& a, double s) {
  Tensor out(a.value().shape());
  out.array() = a.value().array() + s;
  return Var::wrap(make_node(std::move(out), {a.node()}, "add_scalar", [](Node& n) {
    accumulate(n.parents[0], n.grad.array());
  }));
}

Var add_rowvec(const Var& x, const Var& v) {
  UCL_CHECK(x.value().rank() == 2 && v.value().rank() == 1, "add_rowvec: need (R,C) and (C)");
  UCL_CHECK(x.value().dim(1) == v.value().dim(0), "add_rowvec: width mismatch");
  Tensor out(x.value().shape());
  out.matrix() = x.value().matrix();
  out.matrix().rowwise() += v.value().array().matrix().transpose();
  return Var::wrap(make_node(std::move(out), {x.node(), v.node()}, "add_rowvec", [](Node& n) {
    accumulate(n.parents[0], n.grad.array());
    if (n.parents[1]->requires_grad) {
      auto g = n.grad.matrix();
      n.parents[1]->grad_buffer().array() += g.colwise().sum().transpose().array();
    }
  }));
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  UCL_CHECK(a.value().rank() == 2 && b.value().rank() == 2, "matmul: rank-2 inputs required");
  UCL_CHECK(a.value().dim(1) == b.value().dim(0), "matmul: inner dimension mismatch");
  Tensor out({a.value().dim(0), b.value().dim(1)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix();
  return Var::wrap(make_node(std::move(out), {a.node(), b.node()}, "matmul", [](Node& n) {
    auto g = n.grad.matrix();
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buffer().matrix().noalias() += g * n.parents[1]->value.matrix().transpose();
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buffer().matrix().noalias() += n.parents[0]->value.matrix().transpose() * g;
  }));
}

Var matmul_nt(const Var& a, const Var& b) {
  UCL_CHECK(a.value().rank() == 2 && b.value().rank() == 2, "matmul_nt: rank-2 inputs required");
  UCL_CHECK(a.value().dim(1) == b.value().dim(1), "matmul_nt: inner dimension mismatch");
  Tensor out({a.value().dim(0), b.value().dim(0)});
  out.matrix().noalias() = a.value().matrix() * b.value().matrix().transpose();
  return Var::wrap(make_node(std::move(out), {a.node(), b.node()}, "matmul_nt", [](Node& n) {
    auto g = n.grad.matrix();
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buffer().matrix().noalias() += g * n.parents[1]->value.matrix();
    if (n.parents[1]->requires_grad)
      n.parents[1]->grad_buffer().matrix().noalias() += g.transpose() * n.parents[0]->value.matrix();
  }));
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

Var vexp(const Var& a) {
  Tensor out(a.value().shape());
  out.array() = a.value().array().exp();
  return Var::wrap(make_node(std::move(out), {a.node()}, "exp", [](Node& n) {
    accumulate(n.parents[0], n.grad.array() * n.value.array());
  }));
}

Var vlog(const Var& a) {
  Tensor out(a.value().shape());
  out.array() = a.value().array().log();
  return Var::wrap(make_node(std::move(out), {a.node()}, "log", [](Node& n) {
    accumulate(n.parents[0], n.grad.array() / n.parents[0]->value.array());
  }));
}

Var vtanh(const Var& a) {
  Tensor out(a.value().shape());
  out.array() = a.value().array().tanh();
  return Var::wrap(make_node(std::move(out), {a.node()}, "tanh", [](Node& n) {
    accumulate(n.parents[0], n.grad.array() * (1.0 - n.value.array().square()));
  }));
}

Var softplus(const Var& a) {
  Tensor out(a.value().shape());
  for (Index i = 0; i < a.value().size(); ++i) out.data()[i] = stable_softplus(a.value().data()[i]);
  return Var::wrap(make_node(std::move(out), {a.node()}, "softplus", [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->grad_buffer();
    for (Index i = 0; i < n.value.size(); ++i)
      g.data()[i] += n.grad.data()[i] * sigmoid(n.parents[0]->value.data()[i]);
  }));
}

Var relu(const Var& a) {
  Tensor out(a.value().shape());
  out.array() = a.value().array().max(0.0);
  return Var::wrap(make_node(std::move(out), {a.node()}, "relu", [](Node& n) {
    accumulate(n.parents[0],
               n.grad.array() * (n.parents[0]->value.array() > 0.0).cast<double>());
  }));
}

Var mish(const Var& a) {
  // mish(x) = x * tanh(softplus(x)); fused for backbone use.
  Tensor out(a.value().shape());
  const Index sz = a.value().size();
  for (Index i = 0; i < sz; ++i) {
    double x = a.value().data()[i];
    out.data()[i] = x * std::tanh(stable_softplus(x));
  }
  return Var::wrap(make_node(std::move(out), {a.node()}, "mish", [](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& g = n.parents[0]->grad_buffer();
    for (Index i = 0; i < n.value.size(); ++i) {
      double x = n.parents[0]->value.data()[i];
      double t = std::tanh(stable_softplus(x));
      double d = t + x * (1.0 - t * t) * sigmoid(x);
      g.data()[i] += n.grad.data()[i] * d;
    }
  }));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(a.value().array().sum());
  return Var::wrap(make_node(std::move(out), {a.node()}, "sum", [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buffer().array() += n.grad.data()[0];
  }));
}

Var mean(const Var& a) {
  const double inv = 1.0 / double(a.value().size());
  Tensor out = Tensor::scalar(a.value().array().sum() * inv);
  return Var::wrap(make_node(std::move(out), {a.node()}, "mean", [inv](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buffer().array() += n.grad.data()[0] * inv;
  }));
}

Var sum_squares(const Var& a) {
  Tensor out = Tensor::scalar(a.value().array().square().sum());
  return Var::wrap(make_node(std::move(out), {a.node()}, "sum_squares", [](Node& n) {
    if (n.parents[0]->requires_grad)
      n.parents[0]->grad_buffer().array() += 2.0 * n.grad.data()[0] * n.parents[0]->value.array();
  }));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Var reshape(const Var& a, std::vector<Index> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return Var::wrap(make_node(std::move(out), {a.node()}, "reshape", [](Node& n) {
    accumulate(n.parents[0], n.grad.array());
  }));
}

Var concat_rows(const std::vector<Var>& parts) {
  UCL_CHECK(!parts.empty(), "concat_rows: empty input");
  std::vector<Index> shape = parts[0].value().shape();
  UCL_CHECK(!shape.empty(), "concat_rows: rank >= 1 required");
  Index rows = 0;
  for (const auto& p : parts) {
    UCL_CHECK(p.value().rank() == int(shape.size()), "concat_rows: rank mismatch");
    for (std::size_t i = 1; i < shape.size(); ++i)
      UCL_CHECK(p.value().shape()[i] == shape[i], "concat_rows: trailing dims mismatch");
    rows += p.value().dim(0);
  }
  shape[0] = rows;
  Tensor out(shape);
  Index at = 0;
  for (const auto& p : parts) {
    Index n = p.value().size();
    out.array().segment(at, n) = p.value().array();
    at += n;
  }
  std::vector<NodePtr> nodes;
  nodes.reserve(parts.size());
  for (const auto& p : parts) nodes.push_back(p.node());
  return Var::wrap(make_node(std::move(out), std::move(nodes), "concat_rows", [](Node& n) {
    Index at = 0;
    for (auto& p : n.parents) {
      Index len = p->value.size();
      if (p->requires_grad) p->grad_buffer().array() += n.grad.array().segment(at, len);
      at += len;
    }
  }));
}

Var slice_rows(const Var& a, Index begin, Index count) {
  UCL_CHECK(a.value().rank() >= 1, "slice_rows: rank >= 1 required");
  UCL_CHECK(begin >= 0 && count >= 0 && begin + count <= a.value().dim(0),
            "slice_rows: out of range");
  std::vector<Index> shape = a.value().shape();
  const Index inner = a.value().size() / std::max<Index>(shape[0], 1);
  shape[0] = count;
  Tensor out(shape);
  out.array() = a.value().array().segment(begin * inner, count * inner);
  return Var::wrap(
      make_node(std::move(out), {a.node()}, "slice_rows", [begin, count, inner](Node& n) {
        if (n.parents[0]->requires_grad)
          n.parents[0]->grad_buffer().array().segment(begin * inner, count * inner) +=
              n.grad.array();
      }));
}

Var normalize_rows(const Var& a) {
  UCL_CHECK(a.value().rank() == 2, "normalize_rows: rank-2 input required");
  const Index rows = a.value().dim(0);
  Tensor out(a.value().shape());
  Eigen::ArrayXd inv_norm(rows);
  auto x = a.value().matrix();
  auto y = out.matrix();
  for (Index i = 0; i < rows; ++i) {
    double n = x.row(i).norm();
    UCL_CHECK(n > 1e-12, "normalize_rows: zero-norm row");
    inv_norm[i] = 1.0 / n;
    y.row(i) = x.row(i) * inv_norm[i];
  }
  return Var::wrap(
      make_node(std::move(out), {a.node()}, "normalize_rows", [inv_norm](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        auto g = n.grad.matrix();
        auto y = n.value.matrix();
        auto dx = n.parents[0]->grad_buffer().matrix();
        for (Index i = 0; i < y.rows(); ++i) {
          double dot = g.row(i).dot(y.row(i));
          dx.row(i) += inv_norm[i] * (g.row(i) - dot * y.row(i));
        }
      }));
}

// ---------------------------------------------------------------------------
// Contrastive softmax core
// ---------------------------------------------------------------------------

Var nt_xent(const Var& anchors, const Var& comparands, const std::vector<Index>& positive_col,
            const BoolMatrix& allowed, double tau) {
  UCL_CHECK(tau > 0.0, "nt_xent: temperature must be positive");
  const auto& A = anchors.value();
  const auto& C = comparands.value();
  UCL_CHECK(A.rank() == 2 && C.rank() == 2, "nt_xent: rank-2 inputs required");
  UCL_CHECK(A.dim(1) == C.dim(1), "nt_xent: embedding dimension mismatch");
  const Index B = A.dim(0);
  const Index M = C.dim(0);
  UCL_CHECK(B >= 1, "nt_xent: empty anchor batch");
  UCL_CHECK(Index(positive_col.size()) == B, "nt_xent: one positive per anchor required");
  UCL_CHECK(allowed.rows() == B && allowed.cols() == M, "nt_xent: mask shape mismatch");
  UCL_CHECK(A.all_finite() && C.all_finite(), "nt_xent: non-finite embeddings");

  RowMatrixXd scores = (A.matrix() * C.matrix().transpose()) / tau;

  RowMatrixXd q = RowMatrixXd::Zero(B, M);  // softmax over allowed entries
  double loss = 0.0;
  for (Index i = 0; i < B; ++i) {
    const Index pos = positive_col[i];
    UCL_CHECK(pos >= 0 && pos < M, "nt_xent: positive index out of range");
    Index n_allowed = 0;
    double mx = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < M; ++j) {
      if (j == pos || allowed(i, j)) {
        mx = std::max(mx, scores(i, j));
        if (j != pos) ++n_allowed;
      }
    }
    UCL_CHECK(n_allowed >= 1, "nt_xent: anchor has no negatives to contrast against");
    double denom = 0.0;
    for (Index j = 0; j < M; ++j) {
      if (j == pos || allowed(i, j)) {
        q(i, j) = std::exp(scores(i, j) - mx);
        denom += q(i, j);
      }
    }
    q.row(i) /= denom;
    loss += mx + std::log(denom) - scores(i, pos);
  }
  loss /= double(B);

  std::vector<Index> pos_copy = positive_col;
  return Var::wrap(make_node(
      Tensor::scalar(loss), {anchors.node(), comparands.node()}, "nt_xent",
      [q = std::move(q), pos_copy = std::move(pos_copy), tau, B](Node& n) {
        RowMatrixXd G = q;
        for (Index i = 0; i < B; ++i) G(i, pos_copy[i]) -= 1.0;
        G *= n.grad.data()[0] / (double(B) * tau);
        if (n.parents[0]->requires_grad)
          n.parents[0]->grad_buffer().matrix().noalias() += G * n.parents[1]->value.matrix();
        if (n.parents[1]->requires_grad)
          n.parents[1]->grad_buffer().matrix().noalias() +=
              G.transpose() * n.parents[0]->value.matrix();
      }));
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  Index n, c, h, w, oc, kh, kw, oh, ow, ckk, ohw;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int padding) {
  ConvDims d;
  d.n = x.dim(0);
  d.c = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.oc = w.dim(0);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.stride = stride;
  d.pad = padding;
  d.oh = (d.h + 2 * padding - d.kh) / stride + 1;
  d.ow = (d.w + 2 * padding - d.kw) / stride + 1;
  d.ckk = d.c * d.kh * d.kw;
  d.ohw = d.oh * d.ow;
  return d;
}

void im2col(const double* x, const ConvDims& d, Index sample, RowMatrixXd& col) {
  const double* xs = x + sample * d.c * d.h * d.w;
  for (Index oh = 0; oh < d.oh; ++oh) {
    for (Index ow = 0; ow < d.ow; ++ow) {
      const Index r = oh * d.ow + ow;
      const Index ih0 = oh * d.stride - d.pad;
      const Index iw0 = ow * d.stride - d.pad;
      double* row = col.data() + r * d.ckk;
      Index q = 0;
      for (Index c = 0; c < d.c; ++c) {
        const double* xc = xs + c * d.h * d.w;
        for (Index kh = 0; kh < d.kh; ++kh) {
          const Index ih = ih0 + kh;
          for (Index kw = 0; kw < d.kw; ++kw, ++q) {
            const Index iw = iw0 + kw;
            row[q] = (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) ? xc[ih * d.w + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(double* dx, const ConvDims& d, Index sample, const RowMatrixXd& dcol) {
  double* xs = dx + sample * d.c * d.h * d.w;
  for (Index oh = 0; oh < d.oh; ++oh) {
    for (Index ow = 0; ow < d.ow; ++ow) {
      const Index r = oh * d.ow + ow;
      const Index ih0 = oh * d.stride - d.pad;
      const Index iw0 = ow * d.stride - d.pad;
      const double* row = dcol.data() + r * d.ckk;
      Index q = 0;
      for (Index c = 0; c < d.c; ++c) {
        double* xc = xs + c * d.h * d.w;
        for (Index kh = 0; kh < d.kh; ++kh) {
          const Index ih = ih0 + kh;
          for (Index kw = 0; kw < d.kw; ++kw, ++q) {
            const Index iw = iw0 + kw;
            if (ih >= 0 && ih < d.h && iw >= 0 && iw < d.w) xc[ih * d.w + iw] += row[q];
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int padding) {
  UCL_CHECK(x.value().rank() == 4, "conv2d: input must be (N,C,H,W)");
  UCL_CHECK(w.value().rank() == 4, "conv2d: weight must be (OC,C,KH,KW)");
  UCL_CHECK(x.value().dim(1) == w.value().dim(1), "conv2d: channel mismatch");
  UCL_CHECK(stride >= 1 && padding >= 0, "conv2d: bad stride/padding");
  const ConvDims d = conv_dims(x.value(), w.value(), stride, padding);
  UCL_CHECK(d.oh > 0 && d.ow > 0, "conv2d: output would be empty");
  const bool has_bias = bias.defined();
  if (has_bias) UCL_CHECK(bias.value().size() == d.oc, "conv2d: bias size mismatch");

  Tensor out({d.n, d.oc, d.oh, d.ow});
  auto wmat = w.value().as_matrix(d.oc, d.ckk);
  RowMatrixXd col(d.ohw, d.ckk);
  for (Index s = 0; s < d.n; ++s) {
    im2col(x.value().data(), d, s, col);
    Eigen::Map<RowMatrixXd> os(out.data() + s * d.oc * d.ohw, d.oc, d.ohw);
    os.noalias() = wmat * col.transpose();
    if (has_bias)
      os.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.value().data(), d.oc);
  }

  std::vector<NodePtr> parents = {x.node(), w.node()};
  if (has_bias) parents.push_back(bias.node());
  return Var::wrap(make_node(std::move(out), std::move(parents), "conv2d",
                             [d, has_bias](Node& n) {
    auto& xp = n.parents[0];
    auto& wp = n.parents[1];
    auto wmat = wp->value.as_matrix(d.oc, d.ckk);
    RowMatrixXd col(d.ohw, d.ckk);
    RowMatrixXd dcol(d.ohw, d.ckk);
    const bool need_x = xp->requires_grad;
    const bool need_w = wp->requires_grad;
    const bool need_b = has_bias && n.parents[2]->requires_grad;
    for (Index s = 0; s < d.n; ++s) {
      Eigen::Map<const RowMatrixXd> go(n.grad.data() + s * d.oc * d.ohw, d.oc, d.ohw);
      if (need_w || need_x) im2col(xp->value.data(), d, s, col);
      if (need_w) {
        auto dw = wp->grad_buffer().as_matrix(d.oc, d.ckk);
        dw.noalias() += go * col;
      }
      if (need_b) {
        auto db = n.parents[2]->grad_buffer().array();
        for (Index oc = 0; oc < d.oc; ++oc) db[oc] += go.row(oc).sum();
      }
      if (need_x) {
        dcol.noalias() = go.transpose() * wmat;
        col2im_add(xp->grad_buffer().data(), d, s, dcol);
      }
    }
  }));
}

// ---------------------------------------------------------------------------
// Normalization layers
// ---------------------------------------------------------------------------

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  UCL_CHECK(x.value().rank() == 4, "group_norm: input must be (N,C,H,W)");
  const Index N = x.value().dim(0), C = x.value().dim(1);
  const Index HW = x.value().dim(2) * x.value().dim(3);
  UCL_CHECK(groups >= 1 && C % groups == 0, "group_norm: channels must divide into groups");
  UCL_CHECK(gamma.value().size() == C && beta.value().size() == C, "group_norm: affine size");
  const Index cg = C / groups;
  const Index m = cg * HW;

  Tensor out(x.value().shape());
  Tensor xhat(x.value().shape());
  Eigen::ArrayXd inv_std(N * groups);

  for (Index n = 0; n < N; ++n) {
    for (Index g = 0; g < groups; ++g) {
      const Index off = (n * C + g * cg) * HW;
      auto seg = x.value().array().segment(off, m);
      const double mu = seg.mean();
      const double var = (seg - mu).square().mean();
      const double inv = 1.0 / std::sqrt(var + eps);
      inv_std[n * groups + g] = inv;
      auto xh = xhat.array().segment(off, m);
      xh = (seg - mu) * inv;
      for (Index j = 0; j < cg; ++j) {
        const Index ch = g * cg + j;
        out.array().segment(off + j * HW, HW) =
            xh.segment(j * HW, HW) * gamma.value().data()[ch] + beta.value().data()[ch];
      }
    }
  }

  return Var::wrap(make_node(
      std::move(out), {x.node(), gamma.node(), beta.node()}, "group_norm",
      [xhat = std::move(xhat), inv_std = std::move(inv_std), groups, cg, HW, m, N, C](Node& n) {
        auto& xp = n.parents[0];
        auto& gp = n.parents[1];
        auto& bp = n.parents[2];
        Eigen::ArrayXd dyg(m);
        for (Index s = 0; s < N; ++s) {
          for (Index g = 0; g < groups; ++g) {
            const Index off = (s * C + g * cg) * HW;
            auto dy = n.grad.array().segment(off, m);
            auto xh = xhat.array().segment(off, m);
            if (gp->requires_grad || bp->requires_grad) {
              for (Index j = 0; j < cg; ++j) {
                const Index ch = g * cg + j;
                if (gp->requires_grad)
                  gp->grad_buffer().data()[ch] +=
                      (dy.segment(j * HW, HW) * xh.segment(j * HW, HW)).sum();
                if (bp->requires_grad) bp->grad_buffer().data()[ch] += dy.segment(j * HW, HW).sum();
              }
            }
            if (xp->requires_grad) {
              for (Index j = 0; j < cg; ++j)
                dyg.segment(j * HW, HW) =
                    dy.segment(j * HW, HW) * gp->value.data()[g * cg + j];
              const double s1 = dyg.mean();
              const double s2 = (dyg * xh).mean();
              xp->grad_buffer().array().segment(off, m) +=
                  inv_std[s * groups + g] * (dyg - s1 - xh * s2);
            }
          }
        }
      }));
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
  UCL_CHECK(x.value().rank() == 4, "batch_norm: input must be (N,C,H,W)");
  const Index N = x.value().dim(0), C = x.value().dim(1);
  const Index HW = x.value().dim(2) * x.value().dim(3);
  UCL_CHECK(gamma.value().size() == C && beta.value().size() == C, "batch_norm: affine size");
  UCL_CHECK(running_mean.size() == C && running_var.size() == C, "batch_norm: buffer size");
  const Index m = N * HW;

  Eigen::ArrayXd mu(C), var(C);
  if (training) {
    for (Index c = 0; c < C; ++c) {
      double s = 0.0, s2 = 0.0;
      for (Index n = 0; n < N; ++n) {
        auto seg = x.value().array().segment((n * C + c) * HW, HW);
        s += seg.sum();
        s2 += seg.square().sum();
      }
      mu[c] = s / double(m);
      var[c] = s2 / double(m) - mu[c] * mu[c];
    }
    // Biased batch statistics feed the running estimates; this mutation during
    // training steps is the behavior the norm-comparison experiment probes.
    running_mean.array() = (1.0 - momentum) * running_mean.array() + momentum * mu;
    running_var.array() = (1.0 - momentum) * running_var.array() + momentum * var;
  } else {
    mu = running_mean.array();
    var = running_var.array();
  }

  Eigen::ArrayXd inv_std = (var + eps).sqrt().inverse();
  Tensor out(x.value().shape());
  Tensor xhat(x.value().shape());
  for (Index n = 0; n < N; ++n) {
    for (Index c = 0; c < C; ++c) {
      const Index off = (n * C + c) * HW;
      auto xh = xhat.array().segment(off, HW);
      xh = (x.value().array().segment(off, HW) - mu[c]) * inv_std[c];
      out.array().segment(off, HW) = xh * gamma.value().data()[c] + beta.value().data()[c];
    }
  }

  return Var::wrap(make_node(
      std::move(out), {x.node(), gamma.node(), beta.node()}, "batch_norm",
      [xhat = std::move(xhat), inv_std = std::move(inv_std), training, N, C, HW, m](Node& n) {
        auto& xp = n.parents[0];
        auto& gp = n.parents[1];
        auto& bp = n.parents[2];
        for (Index c = 0; c < C; ++c) {
          double dg = 0.0, db = 0.0;
          for (Index s = 0; s < N; ++s) {
            const Index off = (s * C + c) * HW;
            auto dy = n.grad.array().segment(off, HW);
            auto xh = xhat.array().segment(off, HW);
            dg += (dy * xh).sum();
            db += dy.sum();
          }
          if (gp->requires_grad) gp->grad_buffer().data()[c] += dg;
          if (bp->requires_grad) bp->grad_buffer().data()[c] += db;
          if (xp->requires_grad) {
            const double gam = gp->value.data()[c];
            if (training) {
              const double s1 = gam * db / double(m);
              const double s2 = gam * dg / double(m);
              for (Index s = 0; s < N; ++s) {
                const Index off = (s * C + c) * HW;
                auto dy = n.grad.array().segment(off, HW);
                auto xh = xhat.array().segment(off, HW);
                xp->grad_buffer().array().segment(off, HW) +=
                    inv_std[c] * (dy * gam - s1 - xh * s2);
              }
            } else {
              for (Index s = 0; s < N; ++s) {
                const Index off = (s * C + c) * HW;
                xp->grad_buffer().array().segment(off, HW) +=
                    n.grad.array().segment(off, HW) * gam * inv_std[c];
              }
            }
          }
        }
      }));
}

Var global_avg_pool(const Var& x) {
  UCL_CHECK(x.value().rank() == 4, "global_avg_pool: input must be (N,C,H,W)");
  const Index N = x.value().dim(0), C = x.value().dim(1);
  const Index HW = x.value().dim(2) * x.value().dim(3);
  Tensor out({N, C});
  for (Index n = 0; n < N; ++n)
    for (Index c = 0; c < C; ++c)
      out.data()[n * C + c] = x.value().array().segment((n * C + c) * HW, HW).mean();
  return Var::wrap(make_node(std::move(out), {x.node()}, "global_avg_pool", [N, C, HW](Node& n) {
    if (!n.parents[0]->requires_grad) return;
    auto& dx = n.parents[0]->grad_buffer();
    const double inv = 1.0 / double(HW);
    for (Index s = 0; s < N; ++s)
      for (Index c = 0; c < C; ++c)
        dx.array().segment((s * C + c) * HW, HW) += n.grad.data()[s * C + c] * inv;
  }));
}

}  // namespace ucl
