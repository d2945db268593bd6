#include "ucl/nn.hpp"

#include <cmath>

namespace ucl {

int NormConfig::groups_for(Index channels) {
  return int(std::max<Index>(1, std::min<Index>(32, channels / 4)));
}

Tensor he_normal(std::vector<Index> shape, Index fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = dist(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d Conv2d::make(Index in_c, Index out_c, Index k, int stride, int padding, bool bias,
                    std::mt19937_64& rng, bool trainable) {
  Conv2d c;
  c.stride = stride;
  c.padding = padding;
  c.has_bias = bias;
  c.w = Var(he_normal({out_c, in_c, k, k}, in_c * k * k, rng), trainable);
  if (bias) c.b = Var(Tensor::zeros({out_c}), trainable);
  return c;
}

Var Conv2d::forward(const Var& x) const { return conv2d(x, w, b, stride, padding); }

void Conv2d::visit(const std::string& prefix, ParamVisitor fn) {
  fn(prefix + ".w", w);
  if (has_bias) fn(prefix + ".b", b);
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear Linear::make(Index in, Index out, std::mt19937_64& rng, bool trainable) {
  Linear l;
  l.w = Var(he_normal({out, in}, in, rng), trainable);
  l.b = Var(Tensor::zeros({out}), trainable);
  return l;
}

Var Linear::forward(const Var& x) const { return add_rowvec(matmul_nt(x, w), b); }

void Linear::visit(const std::string& prefix, ParamVisitor fn) {
  fn(prefix + ".w", w);
  fn(prefix + ".b", b);
}

// ---------------------------------------------------------------------------
// Norm2d
// ---------------------------------------------------------------------------

Norm2d Norm2d::make(NormKind kind, Index channels, bool trainable) {
  Norm2d n;
  n.kind = kind;
  n.groups = kind == NormKind::kGroupNorm ? NormConfig::groups_for(channels) : 1;
  n.gamma = Var(Tensor::full({channels}, 1.0), trainable);
  n.beta = Var(Tensor::zeros({channels}), trainable);
  if (kind == NormKind::kBatchNorm) {
    n.running_mean = Tensor::zeros({channels});
    n.running_var = Tensor::full({channels}, 1.0);
  }
  return n;
}

Var Norm2d::forward(const Var& x, bool training) {
  if (kind == NormKind::kGroupNorm) return group_norm(x, gamma, beta, groups, eps);
  return batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
}

void Norm2d::visit(const std::string& prefix, ParamVisitor fn) {
  fn(prefix + ".gamma", gamma);
  fn(prefix + ".beta", beta);
}

void Norm2d::visit_buffers(const std::string& prefix, BufferVisitor fn) {
  if (kind == NormKind::kBatchNorm) {
    fn(prefix + ".running_mean", running_mean);
    fn(prefix + ".running_var", running_var);
  }
}

Var activate(const Var& x, ActKind kind) {
  return kind == ActKind::kMish ? mish(x) : relu(x);
}

// ---------------------------------------------------------------------------
// Mlp
// ---------------------------------------------------------------------------

Mlp Mlp::make(Index in, Index hidden, Index out, std::mt19937_64& rng, bool trainable) {
  Mlp m;
  m.fc1 = Linear::make(in, hidden, rng, trainable);
  m.fc2 = Linear::make(hidden, out, rng, trainable);
  return m;
}

Var Mlp::forward(const Var& x) const { return fc2.forward(activate(fc1.forward(x), act)); }

void Mlp::visit(const std::string& prefix, ParamVisitor fn) {
  fc1.visit(prefix + ".fc1", fn);
  fc2.visit(prefix + ".fc2", fn);
}

Index Mlp::param_count() const {
  return fc1.w.value().size() + fc1.b.value().size() + fc2.w.value().size() +
         fc2.b.value().size();
}

// ---------------------------------------------------------------------------
// tiny4 backbone: stem + three stride-2 conv blocks, global average pool.
// ---------------------------------------------------------------------------

namespace {

struct ConvBlock {
  Conv2d conv;
  Norm2d norm;
  ActKind act;

  Var forward(const Var& x, bool training) {
    return activate(norm.forward(conv.forward(x), training), act);
  }
  void visit(const std::string& p, ParamVisitor fn) {
    conv.visit(p + ".conv", fn);
    norm.visit(p + ".norm", fn);
  }
  void visit_buffers(const std::string& p, BufferVisitor fn) { norm.visit_buffers(p + ".norm", fn); }
};

class TinyCnn final : public Backbone {
 public:
  TinyCnn(const BackboneConfig& cfg, std::mt19937_64& rng, bool trainable) : cfg_(cfg) {
    UCL_CHECK(cfg.widths.size() >= 2, "tiny4: at least two widths required");
    Index in_c = 3;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      const int stride = i == 0 ? 1 : 2;
      ConvBlock blk;
      blk.conv = Conv2d::make(in_c, cfg.widths[i], 3, stride, 1, false, rng, trainable);
      blk.norm = Norm2d::make(cfg.norm.kind, cfg.widths[i], trainable);
      blk.act = cfg.activation;
      blocks_.push_back(std::move(blk));
      in_c = cfg.widths[i];
    }
  }

  Var forward(const Var& images, bool training) override {
    Var h = images;
    for (auto& blk : blocks_) h = blk.forward(h, training);
    return global_avg_pool(h);
  }

  Index out_dim() const override { return cfg_.widths.back(); }

  void visit(const std::string& prefix, ParamVisitor fn) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit(prefix + ".block" + std::to_string(i), fn);
  }

  void visit_buffers(const std::string& prefix, BufferVisitor fn) override {
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit_buffers(prefix + ".block" + std::to_string(i), fn);
  }

  std::unique_ptr<Backbone> clone(bool trainable) const override;

 private:
  BackboneConfig cfg_;
  std::vector<ConvBlock> blocks_;
};

// ---------------------------------------------------------------------------
// ResNet-18 with the 3x3 stem and no initial max-pool.
// ---------------------------------------------------------------------------

struct BasicBlock {
  Conv2d c1, c2;
  Norm2d n1, n2;
  std::optional<Conv2d> down_c;
  std::optional<Norm2d> down_n;
  ActKind act;

  static BasicBlock make(Index in_c, Index out_c, int stride, NormKind norm, ActKind act,
                         std::mt19937_64& rng, bool trainable) {
    BasicBlock b;
    b.act = act;
    b.c1 = Conv2d::make(in_c, out_c, 3, stride, 1, false, rng, trainable);
    b.n1 = Norm2d::make(norm, out_c, trainable);
    b.c2 = Conv2d::make(out_c, out_c, 3, 1, 1, false, rng, trainable);
    b.n2 = Norm2d::make(norm, out_c, trainable);
    if (stride != 1 || in_c != out_c) {
      b.down_c = Conv2d::make(in_c, out_c, 1, stride, 0, false, rng, trainable);
      b.down_n = Norm2d::make(norm, out_c, trainable);
    }
    return b;
  }

  Var forward(const Var& x, bool training) {
    Var h = activate(n1.forward(c1.forward(x), training), act);
    h = n2.forward(c2.forward(h), training);
    Var skip = x;
    if (down_c) skip = down_n->forward(down_c->forward(x), training);
    return activate(add(h, skip), act);
  }

  void visit(const std::string& p, ParamVisitor fn) {
    c1.visit(p + ".c1", fn);
    n1.visit(p + ".n1", fn);
    c2.visit(p + ".c2", fn);
    n2.visit(p + ".n2", fn);
    if (down_c) {
      down_c->visit(p + ".down_c", fn);
      down_n->visit(p + ".down_n", fn);
    }
  }

  void visit_buffers(const std::string& p, BufferVisitor fn) {
    n1.visit_buffers(p + ".n1", fn);
    n2.visit_buffers(p + ".n2", fn);
    if (down_n) down_n->visit_buffers(p + ".down_n", fn);
  }
};

class ResNet18 final : public Backbone {
 public:
  ResNet18(const BackboneConfig& cfg, std::mt19937_64& rng, bool trainable) : cfg_(cfg) {
    const NormKind norm = cfg.norm.kind;
    const ActKind act = cfg.activation;
    stem_ = Conv2d::make(3, 64, 3, 1, 1, false, rng, trainable);
    stem_norm_ = Norm2d::make(norm, 64, trainable);
    act_ = act;
    const Index widths[4] = {64, 128, 256, 512};
    Index in_c = 64;
    for (int stage = 0; stage < 4; ++stage) {
      const int stride = stage == 0 ? 1 : 2;
      blocks_.push_back(BasicBlock::make(in_c, widths[stage], stride, norm, act, rng, trainable));
      blocks_.push_back(BasicBlock::make(widths[stage], widths[stage], 1, norm, act, rng, trainable));
      in_c = widths[stage];
    }
  }

  Var forward(const Var& images, bool training) override {
    Var h = activate(stem_norm_.forward(stem_.forward(images), training), act_);
    for (auto& blk : blocks_) h = blk.forward(h, training);
    return global_avg_pool(h);
  }

  Index out_dim() const override { return 512; }

  void visit(const std::string& prefix, ParamVisitor fn) override {
    stem_.visit(prefix + ".stem", fn);
    stem_norm_.visit(prefix + ".stem_norm", fn);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit(prefix + ".block" + std::to_string(i), fn);
  }

  void visit_buffers(const std::string& prefix, BufferVisitor fn) override {
    stem_norm_.visit_buffers(prefix + ".stem_norm", fn);
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].visit_buffers(prefix + ".block" + std::to_string(i), fn);
  }

  std::unique_ptr<Backbone> clone(bool trainable) const override;

 private:
  BackboneConfig cfg_;
  Conv2d stem_;
  Norm2d stem_norm_;
  ActKind act_;
  std::vector<BasicBlock> blocks_;
};

}  // namespace

/// Copies parameter values and buffers from one backbone into an
/// architecture-identical one.
void copy_backbone_state(Backbone& src, Backbone& dst) {
  std::vector<Tensor*> values;
  src.visit("", [&](const std::string&, Var& v) { values.push_back(&v.value_mut()); });
  std::size_t i = 0;
  dst.visit("", [&](const std::string&, Var& v) {
    UCL_CHECK(i < values.size(), "backbone copy: parameter count mismatch");
    UCL_CHECK(values[i]->size() == v.value().size(), "backbone copy: parameter shape mismatch");
    v.value_mut().array() = values[i]->array();
    ++i;
  });
  UCL_CHECK(i == values.size(), "backbone copy: parameter count mismatch");

  std::vector<Tensor*> bufs;
  src.visit_buffers("", [&](const std::string&, Tensor& t) { bufs.push_back(&t); });
  std::size_t j = 0;
  dst.visit_buffers("", [&](const std::string&, Tensor& t) {
    UCL_CHECK(j < bufs.size(), "backbone copy: buffer count mismatch");
    t.array() = bufs[j]->array();
    ++j;
  });
  UCL_CHECK(j == bufs.size(), "backbone copy: buffer count mismatch");
}

namespace {

template <typename T>
std::unique_ptr<Backbone> clone_impl(const T& self, const BackboneConfig& cfg, bool trainable) {
  std::mt19937_64 scratch_rng(0);
  auto copy = std::make_unique<T>(cfg, scratch_rng, trainable);
  copy_backbone_state(const_cast<T&>(self), *copy);
  return copy;
}

}  // namespace

std::unique_ptr<Backbone> TinyCnn::clone(bool trainable) const {
  return clone_impl(*this, cfg_, trainable);
}

std::unique_ptr<Backbone> ResNet18::clone(bool trainable) const {
  return clone_impl(*this, cfg_, trainable);
}

std::unique_ptr<Backbone> build_backbone(const BackboneConfig& cfg, std::mt19937_64& rng) {
  if (cfg.arch == "resnet18") return std::make_unique<ResNet18>(cfg, rng, true);
  if (cfg.arch == "tiny4") return std::make_unique<TinyCnn>(cfg, rng, true);
  throw ContractError("unknown backbone arch: " + cfg.arch);
}

// ---------------------------------------------------------------------------
// Sgd
// ---------------------------------------------------------------------------

Sgd::Sgd(std::vector<Var> params, double lr, double weight_decay, double momentum)
    : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), momentum_(momentum) {
  velocity_.reserve(params_.size());
  for (auto& p : params_) velocity_.push_back(Tensor::zeros(p.value().shape()));
}

void Sgd::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    Eigen::ArrayXd g = p.grad().array() + weight_decay_ * p.value().array();
    if (momentum_ != 0.0) {
      velocity_[i].array() = momentum_ * velocity_[i].array() + g;
      p.value_mut().array() -= lr_ * velocity_[i].array();
    } else {
      p.value_mut().array() -= lr_ * g;
    }
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace ucl
