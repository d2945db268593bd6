#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ucl/tensor.hpp"

namespace ucl {

enum class NormKind { kBatchNorm, kGroupNorm };
enum class ActKind { kRelu, kMish };

/// Normalization configuration for convolutional backbones.
struct NormConfig {
  NormKind kind = NormKind::kGroupNorm;

  /// Group count rule: min(32, floor(channels / 4)), clamped to at least 1.
  static int groups_for(Index channels);
};

using ParamVisitor = const std::function<void(const std::string&, Var&)>&;
using BufferVisitor = const std::function<void(const std::string&, Tensor&)>&;

// ---------------------------------------------------------------------------
// Layers. Plain structs; parameters are Var leaves created at init time.
// ---------------------------------------------------------------------------

struct Conv2d {
  Var w;  // (OC, C, KH, KW)
  Var b;  // optional
  int stride = 1;
  int padding = 0;
  bool has_bias = false;

  static Conv2d make(Index in_c, Index out_c, Index k, int stride, int padding, bool bias,
                     std::mt19937_64& rng, bool trainable = true);
  Var forward(const Var& x) const;
  void visit(const std::string& prefix, ParamVisitor fn);
};

struct Linear {
  Var w;  // (out, in)
  Var b;  // (out)

  static Linear make(Index in, Index out, std::mt19937_64& rng, bool trainable = true);
  Var forward(const Var& x) const;
  void visit(const std::string& prefix, ParamVisitor fn);
};

struct Norm2d {
  NormKind kind = NormKind::kGroupNorm;
  int groups = 1;
  Var gamma, beta;
  Tensor running_mean, running_var;  // batch norm only
  double momentum = 0.1;
  double eps = 1e-5;

  static Norm2d make(NormKind kind, Index channels, bool trainable = true);
  Var forward(const Var& x, bool training);
  void visit(const std::string& prefix, ParamVisitor fn);
  void visit_buffers(const std::string& prefix, BufferVisitor fn);
};

Var activate(const Var& x, ActKind kind);

/// Two-layer MLP, activation after the hidden layer only.
struct Mlp {
  Linear fc1, fc2;
  ActKind act = ActKind::kRelu;

  static Mlp make(Index in, Index hidden, Index out, std::mt19937_64& rng,
                  bool trainable = true);
  Var forward(const Var& x) const;
  void visit(const std::string& prefix, ParamVisitor fn);
  Index param_count() const;
};

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::string arch = "resnet18";        // "resnet18" | "tiny4"
  std::vector<Index> widths = {16, 32, 64, 128};  // tiny4 only
  NormConfig norm;
  ActKind activation = ActKind::kMish;
};

class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual Var forward(const Var& images, bool training) = 0;
  virtual Index out_dim() const = 0;
  virtual void visit(const std::string& prefix, ParamVisitor fn) = 0;
  virtual void visit_buffers(const std::string& prefix, BufferVisitor fn) = 0;
  virtual std::unique_ptr<Backbone> clone(bool trainable) const = 0;
};

/// Builds a backbone from its configuration. resnet18 uses the 3x3 stem
/// without an initial max-pool, which suits 32x32 and 64x64 inputs.
std::unique_ptr<Backbone> build_backbone(const BackboneConfig& cfg, std::mt19937_64& rng);

/// Copies parameters and buffers between architecture-identical backbones.
void copy_backbone_state(Backbone& src, Backbone& dst);

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// SGD with decoupled-from-nothing classic weight decay (added to the
/// gradient) and optional momentum.
class Sgd {
 public:
  Sgd(std::vector<Var> params, double lr, double weight_decay, double momentum = 0.0);

  void step();
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t size() const { return params_.size(); }
  std::vector<Tensor>& momentum_buffers() { return velocity_; }

 private:
  std::vector<Var> params_;
  std::vector<Tensor> velocity_;
  double lr_;
  double weight_decay_;
  double momentum_;
};

// Weight init helpers (He-normal, fan-in).
Tensor he_normal(std::vector<Index> shape, Index fan_in, std::mt19937_64& rng);

}  // namespace ucl
