#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "ucl/tensor.hpp"

using namespace ucl;

namespace {

Tensor random_tensor(std::vector<Index> shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> d(0.0, scale);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = d(rng);
  return t;
}

// Central finite differences of a scalar-valued graph with respect to one
// leaf, compared entry-wise against the autodiff gradient.
void check_gradient(const std::function<Var(const Var&)>& f, const Tensor& x0,
                    double h = 1e-6, double tol = 1e-6) {
  Var x(x0, true);
  Var y = f(x);
  REQUIRE(y.value().size() == 1);
  backward(y);
  Tensor analytic = x.grad();

  for (Index i = 0; i < x0.size(); ++i) {
    Tensor xp = x0;
    Tensor xm = x0;
    xp.data()[i] += h;
    xm.data()[i] -= h;
    double fp, fm;
    {
      NoGradGuard off;
      fp = f(Var(xp)).value().item();
      fm = f(Var(xm)).value().item();
    }
    const double fd = (fp - fm) / (2 * h);
    const double ad = analytic.data()[i];
    const double err = std::abs(fd - ad) / std::max(1.0, std::max(std::abs(fd), std::abs(ad)));
    CHECK_MESSAGE(err < tol, "entry ", i, ": fd=", fd, " ad=", ad);
  }
}

}  // namespace

TEST_SUITE_BEGIN("tensor");

TEST_CASE("elementwise forward values") {
  Tensor a = Tensor::from_matrix((RowMatrixXd(2, 2) << 1, 2, 3, 4).finished());
  Tensor b = Tensor::from_matrix((RowMatrixXd(2, 2) << 5, 6, 7, 8).finished());
  Var va(a), vb(b);
  CHECK(add(va, vb).value().matrix()(1, 1) == doctest::Approx(12));
  CHECK(sub(va, vb).value().matrix()(0, 0) == doctest::Approx(-4));
  CHECK(mul(va, vb).value().matrix()(0, 1) == doctest::Approx(12));
  CHECK(scale(va, 0.5).value().matrix()(1, 0) == doctest::Approx(1.5));
  CHECK(sum(va).value().item() == doctest::Approx(10));
  CHECK(mean(va).value().item() == doctest::Approx(2.5));
  CHECK(sum_squares(va).value().item() == doctest::Approx(30));
}

TEST_CASE("matmul matches Eigen") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Var out = matmul(Var(a), Var(b));
  RowMatrixXd expect = a.matrix() * b.matrix();
  CHECK((out.value().matrix() - expect).cwiseAbs().maxCoeff() < 1e-12);

  Tensor c = random_tensor({5, 4}, rng);
  Var out2 = matmul_nt(Var(a), Var(c));
  RowMatrixXd expect2 = a.matrix() * c.matrix().transpose();
  CHECK((out2.value().matrix() - expect2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradients: elementwise and reductions") {
  std::mt19937_64 rng(2);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor other = random_tensor({3, 4}, rng);

  check_gradient([&](const Var& v) { return sum(mul(v, Var(other))); }, x);
  check_gradient([&](const Var& v) { return mean(mul(v, v)); }, x);
  check_gradient([&](const Var& v) { return sum_squares(add(v, Var(other))); }, x);
  check_gradient([&](const Var& v) { return sum(vexp(scale(v, 0.3))); }, x);
  check_gradient([&](const Var& v) { return sum(vtanh(v)); }, x);
  check_gradient([&](const Var& v) { return sum(softplus(v)); }, x);
  check_gradient([&](const Var& v) { return sum(mish(v)); }, x);
  check_gradient([&](const Var& v) { return sum(relu(add_scalar(v, 0.05))); }, x, 1e-6, 1e-5);
  Tensor pos = x;
  pos.array() = pos.array().abs() + 0.5;
  check_gradient([&](const Var& v) { return sum(vlog(v)); }, pos);
}

TEST_CASE("gradients: matmul, bias, shape ops") {
  std::mt19937_64 rng(3);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = random_tensor({5, 4}, rng);
  Tensor bias = random_tensor({2}, rng);

  check_gradient([&](const Var& v) { return sum_squares(matmul(v, Var(b))); }, a);
  check_gradient([&](const Var& v) { return sum_squares(matmul(Var(a), v)); }, b);
  check_gradient([&](const Var& v) { return sum_squares(matmul_nt(v, Var(c))); }, a);
  check_gradient([&](const Var& v) { return sum_squares(matmul_nt(Var(a), v)); }, c);
  check_gradient([&](const Var& v) { return sum_squares(add_rowvec(matmul(v, Var(b)), Var(bias))); }, a);
  check_gradient([&](const Var& v) { return sum_squares(add_rowvec(matmul(Var(a), Var(b)), v)); }, bias);
  check_gradient([&](const Var& v) { return sum_squares(reshape(v, {4, 3})); }, a);
  check_gradient([&](const Var& v) { return sum_squares(slice_rows(v, 1, 3)); }, c);
  check_gradient(
      [&](const Var& v) { return sum_squares(concat_rows({v, Var(c), v})); }, c);
}

TEST_CASE("gradients: normalize_rows") {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({4, 6}, rng);
  check_gradient([&](const Var& v) { return sum_squares(matmul_nt(normalize_rows(v), Var(x))); }, x);
  // unit rows out
  Var y = normalize_rows(Var(x));
  for (Index i = 0; i < 4; ++i) CHECK(y.value().matrix().row(i).norm() == doctest::Approx(1.0));
  Tensor zero({2, 3});
  CHECK_THROWS_AS(normalize_rows(Var(zero)), ContractError);
}

TEST_CASE("gradients: nt_xent") {
  std::mt19937_64 rng(5);
  const Index B = 3, M = 7, d = 5;
  Tensor a0 = random_tensor({B, d}, rng);
  Tensor c0 = random_tensor({M, d}, rng);
  std::vector<Index> pos = {1, 4, 6};
  BoolMatrix allowed = BoolMatrix::Constant(B, M, true);
  allowed(0, 0) = false;
  allowed(2, 3) = false;

  check_gradient(
      [&](const Var& v) { return nt_xent(normalize_rows(v), normalize_rows(Var(c0)), pos, allowed, 0.3); },
      a0, 1e-6, 1e-6);
  check_gradient(
      [&](const Var& v) { return nt_xent(normalize_rows(Var(a0)), normalize_rows(v), pos, allowed, 0.3); },
      c0, 1e-6, 1e-6);

  // same tensor appearing as anchors and comparands accumulates both paths
  Tensor sq = random_tensor({4, 5}, rng);
  std::vector<Index> pos2 = {1, 0, 3, 2};
  BoolMatrix all2 = BoolMatrix::Constant(4, 4, true);
  for (int i = 0; i < 4; ++i) all2(i, i) = false;
  check_gradient(
      [&](const Var& v) {
        Var n = normalize_rows(v);
        return nt_xent(n, n, pos2, all2, 0.5);
      },
      sq, 1e-6, 1e-6);
}

TEST_CASE("nt_xent contract violations") {
  std::mt19937_64 rng(6);
  Tensor a = random_tensor({1, 4}, rng);
  Tensor c = random_tensor({1, 4}, rng);
  std::vector<Index> pos = {0};
  BoolMatrix allowed = BoolMatrix::Constant(1, 1, false);
  // only the positive is allowed -> no negatives
  CHECK_THROWS_AS(nt_xent(Var(a), Var(c), pos, allowed, 0.1), ContractError);
  CHECK_THROWS_AS(nt_xent(Var(a), Var(c), pos, allowed, -1.0), ContractError);
}

TEST_CASE("gradients: conv2d") {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3, 5, 5}, rng);
  Tensor w = random_tensor({4, 3, 3, 3}, rng, 0.4);
  Tensor b = random_tensor({4}, rng, 0.2);

  for (int stride : {1, 2}) {
    check_gradient(
        [&](const Var& v) { return sum_squares(conv2d(v, Var(w), Var(b), stride, 1)); }, x, 1e-6,
        1e-5);
    check_gradient(
        [&](const Var& v) { return sum_squares(conv2d(Var(x), v, Var(b), stride, 1)); }, w, 1e-6,
        1e-5);
    check_gradient(
        [&](const Var& v) { return sum_squares(conv2d(Var(x), Var(w), v, stride, 1)); }, b, 1e-6,
        1e-5);
  }
  // 1x1 kernel, no padding
  Tensor w1 = random_tensor({2, 3, 1, 1}, rng);
  check_gradient([&](const Var& v) { return sum_squares(conv2d(Var(x), v, Var(), 2, 0)); }, w1);
}

TEST_CASE("gradients: group_norm") {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 4, 3, 3}, rng);
  Tensor gamma = random_tensor({4}, rng, 0.5);
  gamma.array() += 1.0;
  Tensor beta = random_tensor({4}, rng, 0.2);

  check_gradient(
      [&](const Var& v) { return sum_squares(group_norm(v, Var(gamma), Var(beta), 2, 1e-5)); }, x,
      1e-6, 1e-5);
  check_gradient(
      [&](const Var& v) { return sum_squares(group_norm(Var(x), v, Var(beta), 2, 1e-5)); }, gamma);
  check_gradient(
      [&](const Var& v) { return sum_squares(group_norm(Var(x), Var(gamma), v, 2, 1e-5)); }, beta);
}

TEST_CASE("group_norm is batch-composition independent") {
  std::mt19937_64 rng(9);
  Tensor one = random_tensor({1, 4, 3, 3}, rng);
  Tensor pad = random_tensor({1, 4, 3, 3}, rng);
  Tensor both({2, 4, 3, 3});
  both.array().segment(0, one.size()) = one.array();
  both.array().segment(one.size(), pad.size()) = pad.array();

  Var gamma(Tensor::full({4}, 1.0)), beta(Tensor::zeros({4}));
  Var alone = group_norm(Var(one), gamma, beta, 2, 1e-5);
  Var batch = group_norm(Var(both), gamma, beta, 2, 1e-5);
  double max_diff =
      (alone.value().array() - batch.value().array().segment(0, one.size())).abs().maxCoeff();
  CHECK(max_diff < 1e-5);
}

TEST_CASE("gradients: batch_norm (training and eval)") {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({3, 2, 4, 4}, rng);
  Tensor gamma = Tensor::full({2}, 1.3);
  Tensor beta = Tensor::full({2}, -0.2);

  SUBCASE("training mode") {
    check_gradient(
        [&](const Var& v) {
          Tensor rm = Tensor::zeros({2});
          Tensor rv = Tensor::full({2}, 1.0);
          return sum_squares(batch_norm(v, Var(gamma), Var(beta), rm, rv, true, 0.1, 1e-5));
        },
        x, 1e-6, 1e-5);
  }
  SUBCASE("eval mode") {
    Tensor rm = Tensor::full({2}, 0.2);
    Tensor rv = Tensor::full({2}, 0.9);
    check_gradient(
        [&](const Var& v) {
          Tensor rm_copy = rm;
          Tensor rv_copy = rv;
          return sum_squares(batch_norm(v, Var(gamma), Var(beta), rm_copy, rv_copy, false, 0.1, 1e-5));
        },
        x, 1e-6, 1e-5);
  }
  SUBCASE("running statistics move during training") {
    Tensor rm = Tensor::zeros({2});
    Tensor rv = Tensor::full({2}, 1.0);
    Tensor rm0 = rm, rv0 = rv;
    batch_norm(Var(x), Var(gamma), Var(beta), rm, rv, true, 0.1, 1e-5);
    CHECK((rm.array() - rm0.array()).abs().maxCoeff() > 0.0);
    CHECK((rv.array() - rv0.array()).abs().maxCoeff() > 0.0);
  }
}

TEST_CASE("gradients: global_avg_pool") {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({2, 3, 4, 4}, rng);
  check_gradient([&](const Var& v) { return sum_squares(global_avg_pool(v)); }, x);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::full({2, 2}, 1.5);
  Var v(x, true);
  {
    NoGradGuard off;
    Var y = sum(mul(v, v));
    CHECK_FALSE(y.requires_grad());
  }
  Var y = sum(mul(v, v));
  CHECK(y.requires_grad());
  backward(y);
  CHECK(v.grad().array()(0) == doctest::Approx(3.0));
}

TEST_CASE("gradient accumulation across two backward passes") {
  Tensor x = Tensor::full({3}, 2.0);
  Var v(x, true);
  backward(sum_squares(v));
  backward(sum_squares(v));
  CHECK(v.grad().array()(0) == doctest::Approx(8.0));  // 2 * (2 * 2)
  v.zero_grad();
  CHECK(v.grad().array()(0) == doctest::Approx(0.0));
}

TEST_SUITE_END();
