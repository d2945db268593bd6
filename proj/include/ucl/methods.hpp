#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ucl/losses.hpp"
#include "ucl/memory.hpp"

namespace ucl {

enum class MethodId {
  kFt,
  kEr,
  kErPlus,
  kErPlusPlus,
  kDer,
  kEwc,
  kLump,
  kCassle,
  kOsirisR,
  kOsirisD,
};

MethodId method_from_string(const std::string& name);
std::string to_string(MethodId id);
std::vector<MethodId> all_methods();

struct MethodConfig {
  MethodId id = MethodId::kFt;
  double tau = 0.1;
  double extra_loss_weight = 1.0;       // weight on the additional loss term
  double ewc_lambda = 50.0;             // 50 on five-task, 100 on twenty-task runs
  double ewc_gamma = 1.0;               // running Fisher decay
  std::string ewc_fisher_norm = "max";  // "max" | "sum" per-task Fisher normalization
  double lump_alpha = 0.4;
  std::optional<double> lump_fixed_nu;  // test hook: pin the mixing coefficient
};

/// Memory batch handed to a method: fresh augmented views, the un-augmented
/// (resized) source images, and optional insertion-time payload rows.
struct ReplayBatch {
  ViewPairBatch views;
  Tensor raw;                               // (B, C, H, W)
  std::optional<Eigen::MatrixXd> payloads;  // (B, d_P) rows, unit-norm

  Index size() const { return views.size(); }
};

struct IsolationRow {
  std::string term;
  double f = 0.0, g = 0.0, h = 0.0, m = 0.0;
};

/// Per-loss-term gradient norms for the parameter groups (f, g, h, m).
struct IsolationReport {
  std::vector<IsolationRow> rows;
  const IsolationRow& term(const std::string& name) const;
};

/// Per-method training behavior: the per-step loss and the task-boundary
/// hook. During the first task every method computes the plain current-task
/// loss, and replay terms are silently skipped whenever no memory batch is
/// supplied.
class MethodState {
 public:
  explicit MethodState(MethodConfig cfg) : cfg_(std::move(cfg)) {}

  const MethodConfig& config() const { return cfg_; }
  MethodId id() const { return cfg_.id; }
  bool needs_buffer() const;
  bool needs_predictor() const;  // model must be built with the m head
  int completed_tasks() const { return completed_tasks_; }
  const std::optional<FrozenCheckpoint>& checkpoint() const { return checkpoint_; }

  Var step_loss(const ViewPairBatch& x, const ReplayBatch* y, EncoderProjectorModel& model,
                std::mt19937_64& method_rng);

  /// Called exactly once per task boundary. `task_batches` replays one pass
  /// over the ending task's data (used by the Fisher estimate); methods that
  /// do not need it never invoke it.
  void on_task_end(EncoderProjectorModel& model,
                   const std::function<std::optional<ViewPairBatch>()>& task_batches);

  IsolationReport gradient_isolation_report(EncoderProjectorModel& model, const ViewPairBatch& x,
                                            const ReplayBatch* y, std::mt19937_64& method_rng);

  const std::vector<Tensor>& fisher() const { return fisher_; }
  const std::vector<Tensor>& anchor() const { return anchor_; }

  void save(BlobStore& store, const std::string& prefix) const;
  static MethodState load(const BlobStore& store, const std::string& prefix, MethodConfig cfg,
                          const EncoderProjectorModel& reference);

 private:
  Var additional_terms(const ViewPairBatch& x, const ReplayBatch* y,
                       EncoderProjectorModel& model, std::mt19937_64& rng, const Var& current);
  Var ewc_penalty(EncoderProjectorModel& model) const;
  Var der_regularizer(const ReplayBatch& y, EncoderProjectorModel& model) const;
  Var lump_loss(const ViewPairBatch& x, const ReplayBatch& y, EncoderProjectorModel& model,
                std::mt19937_64& rng) const;
  Var cassle_distillation(const ViewPairBatch& x, EncoderProjectorModel& model) const;

  MethodConfig cfg_;
  int completed_tasks_ = 0;
  std::optional<FrozenCheckpoint> checkpoint_;
  std::vector<Tensor> fisher_;  // aligned with the backbone parameter order
  std::vector<Tensor> anchor_;
};

/// Mixes two view batches: out_view_k[i] = nu_i * x_view_k[i] + (1 - nu_i) *
/// y_view_k[i mod |y|], the same nu for both views of a pair.
ViewPairBatch mixup_views(const ViewPairBatch& x, const ViewPairBatch& y,
                          const Eigen::ArrayXd& nu);

}  // namespace ucl
