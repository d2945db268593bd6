#include "ucl/methods.hpp"

#include <cmath>

namespace ucl {

MethodId method_from_string(const std::string& name) {
  if (name == "ft") return MethodId::kFt;
  if (name == "er") return MethodId::kEr;
  if (name == "er_plus") return MethodId::kErPlus;
  if (name == "er_plus_plus") return MethodId::kErPlusPlus;
  if (name == "der") return MethodId::kDer;
  if (name == "ewc") return MethodId::kEwc;
  if (name == "lump") return MethodId::kLump;
  if (name == "cassle") return MethodId::kCassle;
  if (name == "osiris_r") return MethodId::kOsirisR;
  if (name == "osiris_d") return MethodId::kOsirisD;
  throw ContractError("unknown method id: " + name);
}

std::string to_string(MethodId id) {
  switch (id) {
    case MethodId::kFt: return "ft";
    case MethodId::kEr: return "er";
    case MethodId::kErPlus: return "er_plus";
    case MethodId::kErPlusPlus: return "er_plus_plus";
    case MethodId::kDer: return "der";
    case MethodId::kEwc: return "ewc";
    case MethodId::kLump: return "lump";
    case MethodId::kCassle: return "cassle";
    case MethodId::kOsirisR: return "osiris_r";
    case MethodId::kOsirisD: return "osiris_d";
  }
  return "?";
}

std::vector<MethodId> all_methods() {
  return {MethodId::kFt,   MethodId::kEr,     MethodId::kErPlus, MethodId::kErPlusPlus,
          MethodId::kDer,  MethodId::kEwc,    MethodId::kLump,   MethodId::kCassle,
          MethodId::kOsirisR, MethodId::kOsirisD};
}

bool MethodState::needs_buffer() const {
  switch (cfg_.id) {
    case MethodId::kEr:
    case MethodId::kErPlus:
    case MethodId::kErPlusPlus:
    case MethodId::kDer:
    case MethodId::kLump:
    case MethodId::kOsirisR:
    case MethodId::kOsirisD:
      return true;
    default:
      return false;
  }
}

bool MethodState::needs_predictor() const { return cfg_.id == MethodId::kCassle; }

const IsolationRow& IsolationReport::term(const std::string& name) const {
  for (const auto& row : rows)
    if (row.term == name) return row;
  throw ContractError("no such isolation term: " + name);
}

// ---------------------------------------------------------------------------
// Loss pieces
// ---------------------------------------------------------------------------

ViewPairBatch mixup_views(const ViewPairBatch& x, const ViewPairBatch& y,
                          const Eigen::ArrayXd& nu) {
  const Index b = x.size();
  UCL_CHECK(y.size() >= 1, "mixup needs a nonempty memory batch");
  UCL_CHECK(nu.size() == b, "mixup needs one coefficient per pair");
  UCL_CHECK(x.view1.size() / b == y.view1.size() / y.size(),
            "mixup: image shapes do not match");
  ViewPairBatch out;
  out.view1 = Tensor::zeros(x.view1.shape());
  out.view2 = Tensor::zeros(x.view2.shape());
  const Index stride = x.view1.size() / b;
  for (Index i = 0; i < b; ++i) {
    const Index j = i % y.size();
    out.view1.array().segment(i * stride, stride) =
        nu[i] * x.view1.array().segment(i * stride, stride) +
        (1.0 - nu[i]) * y.view1.array().segment(j * stride, stride);
    out.view2.array().segment(i * stride, stride) =
        nu[i] * x.view2.array().segment(i * stride, stride) +
        (1.0 - nu[i]) * y.view2.array().segment(j * stride, stride);
  }
  return out;
}

Var MethodState::ewc_penalty(EncoderProjectorModel& model) const {
  auto params = model.group_params("f");
  UCL_CHECK(params.size() == anchor_.size() && params.size() == fisher_.size(),
            "EWC state does not match the model");
  Var total(Tensor::scalar(0.0));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var diff = sub(params[k], Var(anchor_[k]));
    total = add(total, sum(mul(Var(fisher_[k]), mul(diff, diff))));
  }
  return total;
}

Var MethodState::der_regularizer(const ReplayBatch& y, EncoderProjectorModel& model) const {
  UCL_CHECK(y.payloads.has_value(), "DER needs insertion-time payloads");
  UCL_CHECK(y.payloads->rows() == y.size(), "DER payload rows do not match the batch");
  // Normalized-feature L2 regression against the stored embedding.
  Var current = model.project_g(model.encode(y.raw));
  Var target(Tensor::from_matrix(*y.payloads));
  return scale(sum_squares(sub(current, target)), 1.0 / double(y.size()));
}

Var MethodState::lump_loss(const ViewPairBatch& x, const ReplayBatch& y,
                           EncoderProjectorModel& model, std::mt19937_64& rng) const {
  Eigen::ArrayXd nu(x.size());
  if (cfg_.lump_fixed_nu) {
    nu.setConstant(*cfg_.lump_fixed_nu);
  } else {
    std::gamma_distribution<double> gamma(cfg_.lump_alpha, 1.0);
    for (Index i = 0; i < nu.size(); ++i) {
      const double a = gamma(rng);
      const double b = gamma(rng);
      nu[i] = a / (a + b);
    }
  }
  ViewPairBatch mixed = mixup_views(x, y.views, nu);
  return ssl_loss(mixed, model, ProjectorBranch::kG, Temperature(cfg_.tau));
}

Var MethodState::cassle_distillation(const ViewPairBatch& x, EncoderProjectorModel& model) const {
  UCL_CHECK(checkpoint_.has_value() && checkpoint_->has_g(),
            "distillation requires a checkpoint with the g projector");
  UCL_CHECK(model.has_predictor(), "distillation predictor head missing from the model");
  // Anchor through the live predictor branch, comparands through the frozen
  // encoder and projector. The gradient reaches m, g, and f.
  Var anchors = model.project_m(model.encode(x.view1));
  Var pos = checkpoint_->project_g(checkpoint_->encode(x.view2));
  Var neg1 = checkpoint_->project_g(checkpoint_->encode(x.view1));
  return contrastive_from_embeddings(anchors, pos, {{neg1, true}, {pos, true}},
                                     Temperature(cfg_.tau));
}

Var MethodState::step_loss(const ViewPairBatch& x, const ReplayBatch* y,
                           EncoderProjectorModel& model, std::mt19937_64& method_rng) {
  const Temperature tau(cfg_.tau);
  const bool first_task = completed_tasks_ == 0;
  const bool have_y = y != nullptr && y->size() > 0;
  UCL_CHECK(!have_y || !first_task, "replay batches must not be passed during the first task");

  if (first_task) return plasticity_loss(x, model, tau);

  switch (cfg_.id) {
    case MethodId::kFt:
      return plasticity_loss(x, model, tau);

    case MethodId::kEr: {
      Var current = plasticity_loss(x, model, tau);
      if (!have_y) return current;
      Var replay = ssl_loss(y->views, model, ProjectorBranch::kG, tau);
      return add(current, scale(replay, cfg_.extra_loss_weight));
    }

    case MethodId::kErPlus: {
      // Memory views join the negatives of the within-batch loss.
      auto [e1, e2] = embed_views(x, model, ProjectorBranch::kG);
      std::vector<NegativeBlock> negatives = {{e2, true}, {e1, true}};
      if (have_y) {
        auto [m1, m2] = embed_views(y->views, model, ProjectorBranch::kG);
        negatives.push_back({m1, false});
        negatives.push_back({m2, false});
      }
      return contrastive_from_embeddings(e1, e2, negatives, tau);
    }

    case MethodId::kErPlusPlus: {
      if (!have_y) return plasticity_loss(x, model, tau);
      ViewPairBatch unioned;
      unioned.view1 = concat_rows({Var(x.view1), Var(y->views.view1)}).value();
      unioned.view2 = concat_rows({Var(x.view2), Var(y->views.view2)}).value();
      return ssl_loss(unioned, model, ProjectorBranch::kG, tau);
    }

    case MethodId::kDer: {
      Var current = plasticity_loss(x, model, tau);
      if (!have_y) return current;
      return add(current, scale(der_regularizer(*y, model), cfg_.extra_loss_weight));
    }

    case MethodId::kEwc: {
      Var current = plasticity_loss(x, model, tau);
      if (anchor_.empty()) return current;
      return add(current, scale(ewc_penalty(model), cfg_.ewc_lambda));
    }

    case MethodId::kLump: {
      if (!have_y) return plasticity_loss(x, model, tau);
      return lump_loss(x, *y, model, method_rng);
    }

    case MethodId::kCassle: {
      Var current = plasticity_loss(x, model, tau);
      return add(current, scale(cassle_distillation(x, model), cfg_.extra_loss_weight));
    }

    case MethodId::kOsirisR: {
      UCL_CHECK(have_y, "osiris_r needs a memory batch after the first task");
      return osiris_total_loss(x, y->views, model, nullptr, OsirisVariant::kReplay, tau);
    }

    case MethodId::kOsirisD: {
      UCL_CHECK(have_y, "osiris_d needs a memory batch after the first task");
      UCL_CHECK(checkpoint_.has_value(), "osiris_d needs a frozen checkpoint");
      return osiris_total_loss(x, y->views, model, &*checkpoint_, OsirisVariant::kDistill, tau);
    }
  }
  throw ContractError("unhandled method");
}

void MethodState::on_task_end(
    EncoderProjectorModel& model,
    const std::function<std::optional<ViewPairBatch>()>& task_batches) {
  const int ended_task = completed_tasks_ + 1;
  switch (cfg_.id) {
    case MethodId::kOsirisD:
      checkpoint_ = freeze_checkpoint(model, /*include_g=*/false, ended_task);
      break;
    case MethodId::kCassle:
      checkpoint_ = freeze_checkpoint(model, /*include_g=*/true, ended_task);
      break;
    case MethodId::kEwc: {
      // Diagonal Fisher of the current-task contrastive loss, one pass over
      // the ending task, normalized per task and folded with decay gamma.
      auto params = model.group_params("f");
      std::vector<Tensor> fisher;
      fisher.reserve(params.size());
      for (auto& p : params) fisher.push_back(Tensor::zeros(p.value().shape()));

      Index batches = 0;
      model.zero_grad();
      while (auto batch = task_batches()) {
        if (batch->size() < 2) continue;
        Var loss = plasticity_loss(*batch, model, Temperature(cfg_.tau));
        backward(loss);
        for (std::size_t k = 0; k < params.size(); ++k)
          fisher[k].array() += params[k].grad().array().square();
        model.zero_grad();
        ++batches;
      }
      UCL_CHECK(batches > 0, "EWC Fisher pass saw no usable batches");

      double norm = 0.0;
      for (auto& f : fisher) {
        f.array() /= double(batches);
        norm = cfg_.ewc_fisher_norm == "sum" ? norm + f.array().sum()
                                             : std::max(norm, f.array().maxCoeff());
      }
      if (norm > 0.0)
        for (auto& f : fisher) f.array() /= norm;

      if (fisher_.empty()) {
        fisher_ = std::move(fisher);
      } else {
        for (std::size_t k = 0; k < fisher_.size(); ++k)
          fisher_[k].array() = cfg_.ewc_gamma * fisher_[k].array() + fisher[k].array();
      }
      anchor_.clear();
      for (auto& p : params) {
        Tensor copy = Tensor::zeros(p.value().shape());
        copy.array() = p.value().array();
        anchor_.push_back(std::move(copy));
      }
      break;
    }
    default:
      break;  // no boundary work
  }
  ++completed_tasks_;
}

IsolationReport MethodState::gradient_isolation_report(EncoderProjectorModel& model,
                                                       const ViewPairBatch& x,
                                                       const ReplayBatch* y,
                                                       std::mt19937_64& method_rng) {
  const Temperature tau(cfg_.tau);
  IsolationReport report;

  auto record = [&](const std::string& name, const std::function<Var()>& make) {
    model.zero_grad();
    backward(make());
    IsolationRow row;
    row.term = name;
    auto norm_of = [&](const std::string& group) {
      double sq = 0.0;
      for (auto& p : model.group_params(group))
        if (p.has_grad()) sq += p.grad().array().square().sum();
      return std::sqrt(sq);
    };
    row.f = norm_of("f");
    row.g = norm_of("g");
    row.h = norm_of("h");
    row.m = norm_of("m");
    model.zero_grad();
    report.rows.push_back(row);
  };

  record("current", [&] { return plasticity_loss(x, model, tau); });

  switch (cfg_.id) {
    case MethodId::kFt:
      break;
    case MethodId::kEr:
      if (y) record("replay", [&] { return ssl_loss(y->views, model, ProjectorBranch::kG, tau); });
      break;
    case MethodId::kErPlus:
    case MethodId::kErPlusPlus:
      break;  // single-term objectives, covered by "current" plus step_loss
    case MethodId::kDer:
      if (y) record("der_regularizer", [&] { return der_regularizer(*y, model); });
      break;
    case MethodId::kEwc:
      if (!anchor_.empty()) record("ewc_penalty", [&] { return ewc_penalty(model); });
      break;
    case MethodId::kLump:
      if (y) record("lump", [&] { return lump_loss(x, *y, model, method_rng); });
      break;
    case MethodId::kCassle:
      if (checkpoint_) record("distillation", [&] { return cassle_distillation(x, model); });
      break;
    case MethodId::kOsirisR:
      if (y) {
        record("cross", [&] { return cross_task_loss(x, y->views, model, tau); });
        record("past_replay",
               [&] { return replay_stability_loss(y->views, model, tau); });
      }
      break;
    case MethodId::kOsirisD:
      if (y) record("cross", [&] { return cross_task_loss(x, y->views, model, tau); });
      if (checkpoint_)
        record("past_distillation",
               [&] { return distillation_stability_loss(x, model, *checkpoint_, tau); });
      break;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

void MethodState::save(BlobStore& store, const std::string& prefix) const {
  std::vector<std::int64_t> header = {completed_tasks_, checkpoint_.has_value() ? 1 : 0,
                                      std::int64_t(fisher_.size())};
  store.put_i64(prefix + "/header", header.data(), header.size());
  if (checkpoint_) checkpoint_->save(store, prefix + "/checkpoint");
  for (std::size_t k = 0; k < fisher_.size(); ++k) {
    store.put_f64(prefix + "/fisher" + std::to_string(k), fisher_[k].data(),
                  std::size_t(fisher_[k].size()));
    store.put_f64(prefix + "/anchor" + std::to_string(k), anchor_[k].data(),
                  std::size_t(anchor_[k].size()));
  }
}

MethodState MethodState::load(const BlobStore& store, const std::string& prefix,
                              MethodConfig cfg, const EncoderProjectorModel& reference) {
  MethodState state(std::move(cfg));
  auto header = store.get_i64(prefix + "/header");
  UCL_CHECK(header.size() == 3, "method state header malformed");
  state.completed_tasks_ = int(header[0]);
  if (header[1] != 0)
    state.checkpoint_ = FrozenCheckpoint::load(store, prefix + "/checkpoint", reference);
  const std::int64_t n = header[2];
  auto params = const_cast<EncoderProjectorModel&>(reference).group_params("f");
  UCL_CHECK(n == 0 || std::size_t(n) == params.size(),
            "method state Fisher does not match the model");
  for (std::int64_t k = 0; k < n; ++k) {
    auto f = store.get_f64(prefix + "/fisher" + std::to_string(k));
    auto a = store.get_f64(prefix + "/anchor" + std::to_string(k));
    Tensor ft = Tensor::zeros(params[std::size_t(k)].value().shape());
    Tensor at = Tensor::zeros(params[std::size_t(k)].value().shape());
    UCL_CHECK(Index(f.size()) == ft.size() && Index(a.size()) == at.size(),
              "method state tensor size mismatch");
    std::copy(f.begin(), f.end(), ft.data());
    std::copy(a.begin(), a.end(), at.data());
    state.fisher_.push_back(std::move(ft));
    state.anchor_.push_back(std::move(at));
  }
  return state;
}

}  // namespace ucl
