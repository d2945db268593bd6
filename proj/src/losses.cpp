#include "ucl/losses.hpp"

#include <cmath>

namespace ucl {

void EmbeddingBatch::validate() const {
  UCL_CHECK(vectors.rows() >= 1, "embedding batch is empty");
  UCL_CHECK(vectors.allFinite(), "embedding batch has non-finite entries");
  if (normalized) {
    for (Index i = 0; i < vectors.rows(); ++i)
      UCL_CHECK(std::abs(vectors.row(i).norm() - 1.0) < 1e-5,
                "batch flagged normalized but row is not unit-norm");
  }
}

Eigen::MatrixXd cosine_similarity(const EmbeddingBatch& a, const EmbeddingBatch& b) {
  a.validate();
  b.validate();
  UCL_CHECK(a.cols() == b.cols(), "cosine_similarity: dimension mismatch");
  Eigen::MatrixXd an = a.vectors;
  Eigen::MatrixXd bn = b.vectors;
  for (Index i = 0; i < an.rows(); ++i) {
    double n = an.row(i).norm();
    UCL_CHECK(n > 1e-12, "cosine_similarity: zero-norm row");
    an.row(i) /= n;
  }
  for (Index i = 0; i < bn.rows(); ++i) {
    double n = bn.row(i).norm();
    UCL_CHECK(n > 1e-12, "cosine_similarity: zero-norm row");
    bn.row(i) /= n;
  }
  Eigen::MatrixXd s = an * bn.transpose();
  return s.cwiseMax(-1.0).cwiseMin(1.0);
}

double contrastive_loss(const EmbeddingBatch& anchors, const EmbeddingBatch& positives,
                        const EmbeddingBatch& negatives, Temperature tau) {
  anchors.validate();
  positives.validate();
  negatives.validate();
  UCL_CHECK(anchors.rows() == positives.rows(), "anchors and positives must be row-aligned");
  UCL_CHECK(anchors.cols() == positives.cols() && anchors.cols() == negatives.cols(),
            "contrastive_loss: dimension mismatch");
  UCL_CHECK(anchors.normalized && positives.normalized && negatives.normalized,
            "contrastive_loss expects normalized batches");
  const bool self_negatives = &negatives == &anchors;
  const Index b = anchors.rows();
  const Index n = negatives.rows();
  UCL_CHECK(n - (self_negatives ? 1 : 0) >= 1, "contrastive_loss: no negatives");

  double total = 0.0;
  for (Index i = 0; i < b; ++i) {
    const double pos = anchors.vectors.row(i).dot(positives.vectors.row(i)) / tau.tau;
    double mx = pos;
    for (Index j = 0; j < n; ++j) {
      if (self_negatives && j == i) continue;
      mx = std::max(mx, anchors.vectors.row(i).dot(negatives.vectors.row(j)) / tau.tau);
    }
    double denom = std::exp(pos - mx);
    for (Index j = 0; j < n; ++j) {
      if (self_negatives && j == i) continue;
      denom += std::exp(anchors.vectors.row(i).dot(negatives.vectors.row(j)) / tau.tau - mx);
    }
    total += mx + std::log(denom) - pos;
  }
  return total / double(b);
}

// ---------------------------------------------------------------------------
// Graph-building losses
// ---------------------------------------------------------------------------

Var contrastive_from_embeddings(const Var& anchors, const Var& positives,
                                const std::vector<NegativeBlock>& negatives, Temperature tau) {
  const Index b = anchors.value().dim(0);
  UCL_CHECK(b >= 1, "contrastive loss: empty anchor batch");
  UCL_CHECK(positives.value().dim(0) == b, "anchors and positives must be row-aligned");

  std::vector<Var> parts = {positives};
  Index total_cols = b;
  for (const auto& blk : negatives) {
    if (blk.exclude_aligned)
      UCL_CHECK(blk.embeddings.value().dim(0) >= b,
                "aligned negative block shorter than anchor batch");
    total_cols += blk.embeddings.value().dim(0);
    parts.push_back(blk.embeddings);
  }
  Var comparands = concat_rows(parts);

  BoolMatrix allowed = BoolMatrix::Constant(b, total_cols, false);
  std::vector<Index> pos_col(static_cast<std::size_t>(b), 0);
  for (Index i = 0; i < b; ++i) {
    pos_col[std::size_t(i)] = i;
    allowed(i, i) = true;
  }
  Index offset = b;
  for (const auto& blk : negatives) {
    const Index rows = blk.embeddings.value().dim(0);
    for (Index i = 0; i < b; ++i)
      for (Index j = 0; j < rows; ++j)
        allowed(i, offset + j) = !(blk.exclude_aligned && j == i);
    offset += rows;
  }
  return nt_xent(anchors, comparands, pos_col, allowed, tau.tau);
}

Var generalized_contrastive_loss(const ViewPairBatch& s_plus, const ViewPairBatch* s_minus,
                                 const EncoderFn& f1, const EncoderFn& f2, Temperature tau) {
  UCL_CHECK(s_plus.size() >= 1, "generalized loss: empty positive set");
  const bool aliased = s_minus == &s_plus;
  const bool have_neg = s_minus != nullptr && s_minus->size() > 0;
  UCL_CHECK(have_neg || s_plus.size() > 1,
            "generalized loss: no comparands (empty negative set and singleton positive set)");

  Var anchors = f1(s_plus.view1);
  Var positives = f2(s_plus.view2);
  if (!have_neg) {
    // Loss degenerates to -log(softmax over the positive alone) = 0. No
    // gradient flows; callers hit this only in pathological configurations.
    return Var(Tensor::scalar(0.0));
  }
  Var neg1 = aliased ? f2(s_plus.view1) : f2(s_minus->view1);
  Var neg2 = aliased ? positives : f2(s_minus->view2);
  return contrastive_from_embeddings(anchors, positives,
                                     {{neg1, aliased}, {neg2, aliased}}, tau);
}

std::pair<Var, Var> embed_views(const ViewPairBatch& batch, EncoderProjectorModel& model,
                                ProjectorBranch branch) {
  Var f1 = model.encode(batch.view1);
  Var f2 = model.encode(batch.view2);
  if (branch == ProjectorBranch::kG) return {model.project_g(f1), model.project_g(f2)};
  return {model.project_h(f1), model.project_h(f2)};
}

Var ssl_loss(const ViewPairBatch& batch, EncoderProjectorModel& model, ProjectorBranch branch,
             Temperature tau) {
  UCL_CHECK(batch.size() >= 2, "within-batch contrastive loss needs at least 2 examples");
  auto [e1, e2] = embed_views(batch, model, branch);
  return contrastive_from_embeddings(e1, e2, {{e2, true}, {e1, true}}, tau);
}

Var plasticity_loss(const ViewPairBatch& x, EncoderProjectorModel& model, Temperature tau) {
  return ssl_loss(x, model, ProjectorBranch::kG, tau);
}

Var distillation_stability_loss(const ViewPairBatch& x, EncoderProjectorModel& model,
                                const FrozenCheckpoint& checkpoint, Temperature tau) {
  UCL_CHECK(x.size() >= 2, "distillation loss needs at least 2 examples");
  // Four projector passes shared by both asymmetric terms. The projector h is
  // the live one on both sides; only the backbone is frozen.
  Var cur1 = model.project_h(model.encode(x.view1));
  Var cur2 = model.project_h(model.encode(x.view2));
  Var ck1 = model.project_h(checkpoint.encode(x.view1));
  Var ck2 = model.project_h(checkpoint.encode(x.view2));

  Var term1 = contrastive_from_embeddings(ck1, cur2, {{cur1, true}, {cur2, true}}, tau);
  Var term2 = contrastive_from_embeddings(cur1, ck2, {{ck1, true}, {ck2, true}}, tau);
  return scale(add(term1, term2), 0.5);
}

Var replay_stability_loss(const ViewPairBatch& y, EncoderProjectorModel& model, Temperature tau) {
  UCL_CHECK(y.size() >= 2, "replay loss needs at least 2 memory examples");
  return ssl_loss(y, model, ProjectorBranch::kH, tau);
}

Var cross_task_loss(const ViewPairBatch& x, const ViewPairBatch& y, EncoderProjectorModel& model,
                    Temperature tau) {
  UCL_CHECK(x.size() >= 1 && y.size() >= 1, "cross-task loss needs both batches nonempty");
  auto [ex1, ex2] = embed_views(x, model, ProjectorBranch::kH);
  auto [ey1, ey2] = embed_views(y, model, ProjectorBranch::kH);
  Var term1 = contrastive_from_embeddings(ex1, ex2, {{ey1, false}, {ey2, false}}, tau);
  Var term2 = contrastive_from_embeddings(ey1, ey2, {{ex1, false}, {ex2, false}}, tau);
  return scale(add(term1, term2), 0.5);
}

Var osiris_total_loss(const ViewPairBatch& x, const ViewPairBatch& y,
                      EncoderProjectorModel& model, const FrozenCheckpoint* checkpoint,
                      OsirisVariant variant, Temperature tau) {
  Var current = plasticity_loss(x, model, tau);
  Var cross = cross_task_loss(x, y, model, tau);
  Var past;
  if (variant == OsirisVariant::kDistill) {
    UCL_CHECK(checkpoint != nullptr, "distillation variant requires a frozen checkpoint");
    past = distillation_stability_loss(x, model, *checkpoint, tau);
  } else {
    past = replay_stability_loss(y, model, tau);
  }
  return add(current, scale(add(cross, past), 0.5));
}

}  // namespace ucl
