#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "ucl/model.hpp"

namespace ucl {

/// A batch of embedding row vectors. `normalized` asserts unit L2 rows.
struct EmbeddingBatch {
  Eigen::MatrixXd vectors;  // B x d
  bool normalized = false;

  Index rows() const { return vectors.rows(); }
  Index cols() const { return vectors.cols(); }
  void validate() const;
};

struct Temperature {
  double tau = 0.1;
  Temperature() = default;
  explicit Temperature(double t) : tau(t) { UCL_CHECK(tau > 0.0, "temperature must be > 0"); }
};

/// Pairwise cosine similarities, entry (i,j) = <a_i, b_j> / (|a_i||b_j|).
Eigen::MatrixXd cosine_similarity(const EmbeddingBatch& a, const EmbeddingBatch& b);

/// Mean over anchors of -log( e^{s_pos/tau} / (e^{s_pos/tau} + sum_j e^{s_ij/tau}) )
/// with s_pos = <anchor_i, positive_i> and the sum running over all rows of
/// `negatives`. Passing the anchor batch itself as `negatives` excludes each
/// anchor's own row from its negative sum.
///
/// The temperature divides the similarity inside the exponential; that is the
/// only reading under which tau acts as a softmax temperature.
double contrastive_loss(const EmbeddingBatch& anchors, const EmbeddingBatch& positives,
                        const EmbeddingBatch& negatives, Temperature tau);

// ---------------------------------------------------------------------------
// View-pair batches and graph-building losses
// ---------------------------------------------------------------------------

/// Two augmented views per example, as (B, C, H, W) image tensors. This type
/// deliberately carries no class or task labels: it is the only batch type
/// that reaches method code.
struct ViewPairBatch {
  Tensor view1;
  Tensor view2;

  Index size() const { return view1.defined() ? view1.dim(0) : 0; }
};

/// Maps a batch of raw inputs to unit-norm embedding rows.
using EncoderFn = std::function<Var(const Tensor& images)>;

/// One block of negative comparands. When `exclude_aligned` is set, the
/// block's row i is excluded from anchor i's negatives (the block is
/// row-aligned with the anchor batch).
struct NegativeBlock {
  Var embeddings;
  bool exclude_aligned = false;
};

/// Softmax contrastive loss from precomputed embeddings: anchors row-aligned
/// with positives, negatives given as blocks. Shared core of every loss here.
Var contrastive_from_embeddings(const Var& anchors, const Var& positives,
                                const std::vector<NegativeBlock>& negatives, Temperature tau);

/// Asymmetric contrastive loss over raw view pairs: the anchor view of each
/// s_plus example is encoded by f1; its other view and both views of every
/// s_minus example are encoded by f2. Passing s_minus == &s_plus marks the
/// sets as identical, excluding each anchor's own views from its negatives.
/// With f1 == f2 and s_minus == &s_plus this reduces to the plain
/// within-batch loss. An empty s_minus with a singleton s_plus has no
/// comparands at all and is a contract violation.
Var generalized_contrastive_loss(const ViewPairBatch& s_plus, const ViewPairBatch* s_minus,
                                 const EncoderFn& f1, const EncoderFn& f2, Temperature tau);

enum class ProjectorBranch { kG, kH };

/// Within-batch contrastive loss of `batch` on the given projector branch:
/// anchors are first views, positives the second views, and both views of
/// every other example serve as negatives.
Var ssl_loss(const ViewPairBatch& batch, EncoderProjectorModel& model, ProjectorBranch branch,
             Temperature tau);

/// Current-task loss on the g-branch.
Var plasticity_loss(const ViewPairBatch& x, EncoderProjectorModel& model, Temperature tau);

/// Symmetric distillation against a frozen backbone snapshot, on the
/// h-branch. Both asymmetric terms reuse the same four projector passes.
/// Gradients reach the current f and h only; g is not on the path.
Var distillation_stability_loss(const ViewPairBatch& x, EncoderProjectorModel& model,
                                const FrozenCheckpoint& checkpoint, Temperature tau);

/// Within-batch loss of memory samples on the h-branch. Needs |y| >= 2.
Var replay_stability_loss(const ViewPairBatch& y, EncoderProjectorModel& model, Temperature tau);

/// Symmetric cross-batch loss contrasting the current batch against memory
/// samples on the h-branch; invariant under swapping x and y.
Var cross_task_loss(const ViewPairBatch& x, const ViewPairBatch& y, EncoderProjectorModel& model,
                    Temperature tau);

enum class OsirisVariant { kReplay, kDistill };

/// L_current + 1/2 (L_cross + L_past), the fixed-weight composite objective.
/// The replay variant draws L_past from the memory batch; the distillation
/// variant from the frozen checkpoint.
Var osiris_total_loss(const ViewPairBatch& x, const ViewPairBatch& y,
                      EncoderProjectorModel& model, const FrozenCheckpoint* checkpoint,
                      OsirisVariant variant, Temperature tau);

// Embedding helpers shared with method implementations.
std::pair<Var, Var> embed_views(const ViewPairBatch& batch, EncoderProjectorModel& model,
                                ProjectorBranch branch);

}  // namespace ucl
