#include <doctest.h>

#include <random>

#include "test_support.hpp"
#include "ucl/methods.hpp"

using namespace ucl;
using namespace ucl::testing;

namespace {

ReplayBatch random_replay(Index b, std::mt19937_64& rng, EncoderProjectorModel* payload_model,
                          Index c = 3, Index h = 8, Index w = 8) {
  ReplayBatch y;
  y.views = random_views(b, c, h, w, rng);
  y.raw = random_tensor({b, c, h, w}, rng, 0.5);
  if (payload_model) {
    NoGradGuard off;
    Var feats = payload_model->encode(y.raw);
    Var emb = payload_model->project_g(feats);
    y.payloads = Eigen::MatrixXd(emb.value().matrix());
  }
  return y;
}

MethodConfig cfg_for(MethodId id) {
  MethodConfig cfg;
  cfg.id = id;
  return cfg;
}

ViewPairBatch clone_views(const ViewPairBatch& b) { return b; }

}  // namespace

TEST_SUITE_BEGIN("methods");

TEST_CASE("every method's first-task loss equals the plain current-task loss exactly") {
  auto model = tiny_model(17, NormKind::kGroupNorm, /*with_predictor=*/true);
  std::mt19937_64 rng(51);
  ViewPairBatch x = random_views(4, 3, 8, 8, rng);
  const double reference = plasticity_loss(x, model, Temperature(0.1)).value().item();

  for (MethodId id : all_methods()) {
    MethodState state(cfg_for(id));
    std::mt19937_64 method_rng(1);
    Var loss = state.step_loss(x, nullptr, model, method_rng);
    CHECK_MESSAGE(loss.value().item() == reference, to_string(id));
  }
}

TEST_CASE("replay batches are rejected during the first task") {
  auto model = tiny_model(17);
  std::mt19937_64 rng(52);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(3, rng, nullptr);
  MethodState state(cfg_for(MethodId::kEr));
  std::mt19937_64 mrng(1);
  CHECK_THROWS_AS(state.step_loss(x, &y, model, mrng), ContractError);
}

TEST_CASE("er adds a weight-one replay term on the g branch") {
  auto model = tiny_model(18);
  std::mt19937_64 rng(53);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(4, rng, nullptr);

  MethodState state(cfg_for(MethodId::kEr));
  state.on_task_end(model, nullptr);  // now in task 2
  std::mt19937_64 mrng(1);
  Var loss = state.step_loss(x, &y, model, mrng);

  const double current = plasticity_loss(x, model, Temperature(0.1)).value().item();
  const double replay = ssl_loss(y.views, model, ProjectorBranch::kG, Temperature(0.1)).value().item();
  CHECK(loss.value().item() == doctest::Approx(current + 1.0 * replay).epsilon(1e-12));
}

TEST_CASE("er_plus and er_plus_plus degenerate to ft on an empty memory") {
  auto model = tiny_model(19);
  std::mt19937_64 rng(54);
  ViewPairBatch x = random_views(4, 3, 8, 8, rng);
  const double reference = plasticity_loss(x, model, Temperature(0.1)).value().item();

  for (MethodId id : {MethodId::kErPlus, MethodId::kErPlusPlus, MethodId::kLump}) {
    MethodState state(cfg_for(id));
    state.on_task_end(model, nullptr);
    std::mt19937_64 mrng(1);
    ReplayBatch empty;
    Var with_null = state.step_loss(x, nullptr, model, mrng);
    Var with_empty = state.step_loss(x, &empty, model, mrng);
    CHECK_MESSAGE(with_null.value().item() == reference, to_string(id));
    CHECK_MESSAGE(with_empty.value().item() == reference, to_string(id));
  }
}

TEST_CASE("er_plus matches an explicit oracle with memory negatives") {
  auto model = tiny_model(20);
  std::mt19937_64 rng(55);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(2, rng, nullptr);

  MethodState state(cfg_for(MethodId::kErPlus));
  state.on_task_end(model, nullptr);
  std::mt19937_64 mrng(1);
  Var loss = state.step_loss(x, &y, model, mrng);

  auto emb = [&](const Tensor& images) {
    NoGradGuard off;
    return Eigen::MatrixXd(model.project_g(model.encode(images)).value().matrix());
  };
  Eigen::MatrixXd e1 = emb(x.view1), e2 = emb(x.view2);
  Eigen::MatrixXd m1 = emb(y.views.view1), m2 = emb(y.views.view2);

  const double tau = 0.1;
  double expect = 0.0;
  for (Index i = 0; i < 3; ++i) {
    double pos = std::exp(e1.row(i).dot(e2.row(i)) / tau);
    double denom = pos;
    for (Index j = 0; j < 3; ++j) {
      if (j == i) continue;
      denom += std::exp(e1.row(i).dot(e1.row(j)) / tau);
      denom += std::exp(e1.row(i).dot(e2.row(j)) / tau);
    }
    for (Index j = 0; j < 2; ++j) {
      denom += std::exp(e1.row(i).dot(m1.row(j)) / tau);
      denom += std::exp(e1.row(i).dot(m2.row(j)) / tau);
    }
    expect += -std::log(pos / denom);
  }
  expect /= 3.0;
  CHECK(loss.value().item() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("er_plus_plus equals the within-batch loss of the union") {
  auto model = tiny_model(21);
  std::mt19937_64 rng(56);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(2, rng, nullptr);

  MethodState state(cfg_for(MethodId::kErPlusPlus));
  state.on_task_end(model, nullptr);
  std::mt19937_64 mrng(1);
  Var loss = state.step_loss(x, &y, model, mrng);

  ViewPairBatch unioned;
  unioned.view1 = concat_rows({Var(x.view1), Var(y.views.view1)}).value();
  unioned.view2 = concat_rows({Var(x.view2), Var(y.views.view2)}).value();
  const double expect = ssl_loss(unioned, model, ProjectorBranch::kG, Temperature(0.1)).value().item();
  CHECK(loss.value().item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("der: zero residual at insertion and the cosine identity") {
  auto model = tiny_model(22);
  std::mt19937_64 rng(57);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(4, rng, &model);  // payloads from this very model

  MethodState state(cfg_for(MethodId::kDer));
  state.on_task_end(model, nullptr);
  std::mt19937_64 mrng(1);

  // payload equals the current embedding -> regularizer is zero
  Var loss = state.step_loss(x, &y, model, mrng);
  const double current = plasticity_loss(x, model, Temperature(0.1)).value().item();
  CHECK(loss.value().item() == doctest::Approx(current).epsilon(1e-9));

  // after perturbing the model, the per-item residual obeys 2 - 2 cos
  for (auto& p : model.trainable_params()) {
    std::normal_distribution<double> d(0.0, 0.02);
    for (Index i = 0; i < p.value().size(); ++i) p.value_mut().data()[i] += d(rng);
  }
  NoGradGuard off;
  Eigen::MatrixXd cur = model.project_g(model.encode(y.raw)).value().matrix();
  double reg = 0.0, identity = 0.0;
  for (Index i = 0; i < 4; ++i) {
    reg += (cur.row(i) - y.payloads->row(i)).squaredNorm();
    identity += 2.0 - 2.0 * cur.row(i).dot(y.payloads->row(i));
  }
  CHECK(std::abs(reg - identity) < 1e-6);
}

TEST_CASE("ewc: zero penalty at the anchor, positive away from it, fisher nonnegative") {
  auto model = tiny_model(23);
  std::mt19937_64 rng(58);

  MethodConfig cfg = cfg_for(MethodId::kEwc);
  cfg.ewc_lambda = 50.0;
  MethodState state(cfg);

  // one pass over "task data" for the Fisher estimate
  int produced = 0;
  auto batches = [&]() -> std::optional<ViewPairBatch> {
    if (produced >= 2) return std::nullopt;
    ++produced;
    std::mt19937_64 local(100 + produced);
    return random_views(4, 3, 8, 8, local);
  };
  state.on_task_end(model, batches);

  REQUIRE_FALSE(state.fisher().empty());
  double max_entry = 0.0;
  for (const auto& f : state.fisher()) {
    CHECK(f.array().minCoeff() >= 0.0);
    max_entry = std::max(max_entry, f.array().maxCoeff());
  }
  CHECK(max_entry == doctest::Approx(1.0));  // max-normalized per task

  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  std::mt19937_64 mrng(1);
  Var at_anchor = state.step_loss(x, nullptr, model, mrng);
  const double current = plasticity_loss(x, model, Temperature(0.1)).value().item();
  CHECK(at_anchor.value().item() == doctest::Approx(current).epsilon(1e-12));

  for (auto& p : model.group_params("f")) {
    for (Index i = 0; i < p.value().size(); ++i) p.value_mut().data()[i] += 0.01;
  }
  Var away = state.step_loss(x, nullptr, model, mrng);
  const double current_away = plasticity_loss(x, model, Temperature(0.1)).value().item();
  CHECK(away.value().item() > current_away);
}

TEST_CASE("ewc: gamma-one accumulation folds successive task fishers") {
  auto model = tiny_model(24);
  MethodConfig cfg = cfg_for(MethodId::kEwc);
  MethodState state(cfg);
  auto make_batches = [&](int seed) {
    auto counter = std::make_shared<int>(0);
    return [&, seed, counter]() -> std::optional<ViewPairBatch> {
      if (*counter >= 1) return std::nullopt;
      ++*counter;
      std::mt19937_64 local(seed);
      return random_views(4, 3, 8, 8, local);
    };
  };
  state.on_task_end(model, make_batches(7));
  Eigen::ArrayXd after_one = state.fisher()[0].array();
  state.on_task_end(model, make_batches(8));
  Eigen::ArrayXd after_two = state.fisher()[0].array();
  // gamma = 1: the running Fisher is the sum of normalized per-task fishers,
  // so it can only grow.
  CHECK((after_two - after_one).minCoeff() >= -1e-15);
  CHECK((after_two - after_one).maxCoeff() > 0.0);
  CHECK(state.completed_tasks() == 2);
}

TEST_CASE("lump: pinned mixing coefficient one reproduces ft exactly") {
  auto model = tiny_model(25);
  std::mt19937_64 rng(59);
  ViewPairBatch x = random_views(4, 3, 8, 8, rng);
  ReplayBatch y = random_replay(4, rng, nullptr);

  MethodConfig cfg = cfg_for(MethodId::kLump);
  cfg.lump_fixed_nu = 1.0;
  MethodState state(cfg);
  state.on_task_end(model, nullptr);
  std::mt19937_64 mrng(1);
  Var loss = state.step_loss(x, &y, model, mrng);
  const double reference = plasticity_loss(x, model, Temperature(0.1)).value().item();
  CHECK(loss.value().item() == doctest::Approx(reference).epsilon(1e-12));
}

TEST_CASE("lump: mixed pixels are convex combinations") {
  std::mt19937_64 rng(60);
  ViewPairBatch x = random_views(3, 1, 4, 4, rng);
  ViewPairBatch y = random_views(2, 1, 4, 4, rng);
  Eigen::ArrayXd nu(3);
  nu << 0.3, 0.8, 0.5;
  ViewPairBatch mixed = mixup_views(x, y, nu);
  const Index stride = 16;
  for (Index i = 0; i < 3; ++i) {
    const Index j = i % 2;
    for (Index k = 0; k < stride; ++k) {
      const double a = x.view1.array()[i * stride + k];
      const double b = y.view1.array()[j * stride + k];
      const double m = mixed.view1.array()[i * stride + k];
      CHECK(m >= std::min(a, b) - 1e-12);
      CHECK(m <= std::max(a, b) + 1e-12);
    }
  }
}

TEST_CASE("cassle: distillation reaches g; checkpoint stores g") {
  auto model = tiny_model(26, NormKind::kGroupNorm, /*with_predictor=*/true);
  std::mt19937_64 rng(61);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);

  MethodState state(cfg_for(MethodId::kCassle));
  CHECK(state.needs_predictor());
  state.on_task_end(model, nullptr);
  REQUIRE(state.checkpoint().has_value());
  CHECK(state.checkpoint()->has_g());
  CHECK(state.checkpoint()->task_index() == 1);

  std::mt19937_64 mrng(1);
  auto report = state.gradient_isolation_report(model, x, nullptr, mrng);
  const auto& distill = report.term("distillation");
  CHECK(distill.g > 0.0);
  CHECK(distill.m > 0.0);
  CHECK(distill.f > 0.0);
  CHECK(distill.h == 0.0);
}

TEST_CASE("osiris variants: checkpoint bookkeeping and required inputs") {
  auto model = tiny_model(27);
  std::mt19937_64 rng(62);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(3, rng, nullptr);

  MethodState d(cfg_for(MethodId::kOsirisD));
  d.on_task_end(model, nullptr);
  REQUIRE(d.checkpoint().has_value());
  CHECK(d.checkpoint()->task_index() == 1);
  CHECK_FALSE(d.checkpoint()->has_g());  // distillation stores no g

  std::mt19937_64 mrng(1);
  Var loss = d.step_loss(x, &y, model, mrng);
  CHECK(std::isfinite(loss.value().item()));
  CHECK_THROWS_AS(d.step_loss(x, nullptr, model, mrng), ContractError);

  MethodState r(cfg_for(MethodId::kOsirisR));
  r.on_task_end(model, nullptr);
  CHECK_FALSE(r.checkpoint().has_value());
  Var loss_r = r.step_loss(x, &y, model, mrng);
  const double expect = osiris_total_loss(x, y.views, model, nullptr, OsirisVariant::kReplay,
                                          Temperature(0.1)).value().item();
  CHECK(loss_r.value().item() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("gradient isolation table") {
  auto model = tiny_model(28, NormKind::kGroupNorm, /*with_predictor=*/true);
  std::mt19937_64 rng(63);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);
  ReplayBatch y = random_replay(3, rng, &model);
  std::mt19937_64 mrng(1);

  // ft: h receives nothing under its only loss
  MethodState ft(cfg_for(MethodId::kFt));
  auto ft_report = ft.gradient_isolation_report(model, x, nullptr, mrng);
  CHECK(ft_report.term("current").h == 0.0);
  CHECK(ft_report.term("current").g > 0.0);

  // osiris_d: cross and past terms leave g untouched
  MethodState od(cfg_for(MethodId::kOsirisD));
  od.on_task_end(model, nullptr);
  auto od_report = od.gradient_isolation_report(model, x, &y, mrng);
  CHECK(od_report.term("cross").g == 0.0);
  CHECK(od_report.term("cross").h > 0.0);
  CHECK(od_report.term("past_distillation").g == 0.0);
  CHECK(od_report.term("past_distillation").h > 0.0);
  CHECK(od_report.term("current").h == 0.0);

  // osiris_r: replay stability also leaves g untouched
  MethodState orp(cfg_for(MethodId::kOsirisR));
  orp.on_task_end(model, nullptr);
  auto or_report = orp.gradient_isolation_report(model, x, &y, mrng);
  CHECK(or_report.term("past_replay").g == 0.0);
  CHECK(or_report.term("past_replay").h > 0.0);
}

TEST_CASE("ft boundary hook is a no-op apart from the task counter") {
  auto model = tiny_model(29);
  MethodState state(cfg_for(MethodId::kFt));
  state.on_task_end(model, nullptr);
  CHECK(state.completed_tasks() == 1);
  CHECK_FALSE(state.checkpoint().has_value());
  CHECK(state.fisher().empty());
}

TEST_CASE("method state round-trips through blobs") {
  auto model = tiny_model(30, NormKind::kGroupNorm, true);
  std::mt19937_64 rng(64);

  MethodState state(cfg_for(MethodId::kCassle));
  state.on_task_end(model, nullptr);

  BlobStore store;
  state.save(store, "method");
  MethodState loaded = MethodState::load(store, "method", cfg_for(MethodId::kCassle), model);
  CHECK(loaded.completed_tasks() == 1);
  REQUIRE(loaded.checkpoint().has_value());
  CHECK(loaded.checkpoint()->has_g());

  // frozen outputs agree bit-exactly after the round trip
  ViewPairBatch x = random_views(2, 3, 8, 8, rng);
  NoGradGuard off;
  auto a = state.checkpoint()->project_g(state.checkpoint()->encode(x.view1));
  auto b = loaded.checkpoint()->project_g(loaded.checkpoint()->encode(x.view1));
  CHECK((a.value().array() - b.value().array()).abs().maxCoeff() == 0.0);
}

TEST_CASE("checkpoints stay frozen while the source model trains") {
  auto model = tiny_model(31);
  std::mt19937_64 rng(65);
  ViewPairBatch x = random_views(3, 3, 8, 8, rng);

  FrozenCheckpoint ck = freeze_checkpoint(model, false, 1);
  Tensor before;
  {
    NoGradGuard off;
    before = ck.encode(x.view1).value();
  }

  // ten training steps on the live model
  Sgd opt(model.trainable_params(), 0.05, 0.0);
  for (int step = 0; step < 10; ++step) {
    ViewPairBatch batch = random_views(4, 3, 8, 8, rng);
    model.zero_grad();
    backward(plasticity_loss(batch, model, Temperature(0.1)));
    opt.step();
  }

  NoGradGuard off;
  Tensor after = ck.encode(x.view1).value();
  CHECK((before.array() - after.array()).abs().maxCoeff() == 0.0);

  // and the live model did actually move
  Tensor live = model.encode_eval(x.view1);
  CHECK((live.array() - after.array()).abs().maxCoeff() > 0.0);
}

TEST_SUITE_END();
