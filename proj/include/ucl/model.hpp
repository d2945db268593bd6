#pragma once

#include <memory>
#include <optional>
#include <string>

#include "ucl/blob_io.hpp"
#include "ucl/nn.hpp"

namespace ucl {

struct ModelConfig {
  BackboneConfig backbone;
  Index projector_hidden = 2048;
  Index projector_dim = 128;
  bool with_predictor = false;  // extra predictor head stacked on g's output
};

/// Backbone f plus two parallel projectors g and h (and, when configured, a
/// predictor m applied to g's output). Projected embeddings come out
/// L2-normalized; encode() returns raw backbone features.
class EncoderProjectorModel {
 public:
  static EncoderProjectorModel build(const ModelConfig& cfg, std::mt19937_64& rng);

  Var encode(const Tensor& images);
  Var project_g(const Var& feats) const;
  Var project_h(const Var& feats) const;
  Var project_m(const Var& feats) const;

  /// Evaluation-mode, gradient-free backbone features as a (B, d_E) tensor.
  Tensor encode_eval(const Tensor& images);

  void set_training(bool training) { training_ = training; }
  bool is_training() const { return training_; }

  void visit_params(ParamVisitor fn);
  void visit_buffers(BufferVisitor fn);
  std::vector<Var> trainable_params();
  std::vector<Var> group_params(const std::string& group);  // "f", "g", "h", "m"
  void zero_grad();

  Index encoder_dim() const { return f_->out_dim(); }
  Index projector_dim() const { return cfg_.projector_dim; }
  bool has_predictor() const { return m_.has_value(); }
  const ModelConfig& config() const { return cfg_; }

  EncoderProjectorModel clone(bool trainable) const;
  Backbone& backbone() { return *f_; }
  const Backbone& backbone() const { return *f_; }
  const Mlp& g_mlp() const { return g_; }
  const Mlp& h_mlp() const { return h_; }

 private:
  ModelConfig cfg_;
  std::unique_ptr<Backbone> f_;
  Mlp g_, h_;
  std::optional<Mlp> m_;
  bool training_ = true;
};

/// Immutable snapshot of the backbone (optionally with g) taken at a task
/// boundary. Parameters never receive gradients and forward passes run in
/// evaluation mode, so outputs stay bit-identical under further training of
/// the source model.
class FrozenCheckpoint {
 public:
  FrozenCheckpoint() = default;

  int task_index() const { return task_index_; }
  bool has_g() const { return g_.has_value(); }

  Var encode(const Tensor& images) const;
  Var project_g(const Var& feats) const;

  void save(BlobStore& store, const std::string& prefix) const;
  static FrozenCheckpoint load(const BlobStore& store, const std::string& prefix,
                               const EncoderProjectorModel& reference);

  friend FrozenCheckpoint freeze_checkpoint(const EncoderProjectorModel& model, bool include_g,
                                            int task_index);

 private:
  int task_index_ = 0;
  std::shared_ptr<Backbone> f_;
  std::optional<Mlp> g_;
};

FrozenCheckpoint freeze_checkpoint(const EncoderProjectorModel& model, bool include_g,
                                   int task_index);

// Checkpoint directory layout: params.bin (blob store) + manifest.json.
// Round-trips bit-exactly.
struct CheckpointManifest {
  int task_index = 0;
  std::string config_hash;
  std::uint64_t seed = 0;
};

void save_model_checkpoint(const std::string& dir, EncoderProjectorModel& model,
                           const CheckpointManifest& manifest);
CheckpointManifest load_model_checkpoint(const std::string& dir, EncoderProjectorModel& model);

}  // namespace ucl
