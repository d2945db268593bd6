#include <doctest.h>

#include <random>

#include "test_support.hpp"
#include "ucl/memory.hpp"

using namespace ucl;
using namespace ucl::testing;

namespace {

StoredExample tiny_example(std::int64_t index, int task = 0) {
  StoredExample ex;
  ex.image = {std::uint8_t(index & 0xff)};
  ex.channels = 1;
  ex.height = 1;
  ex.width = 1;
  ex.source_index = index;
  ex.task_of_origin = task;
  return ex;
}

}  // namespace

TEST_SUITE_BEGIN("memory");

TEST_CASE("below capacity keeps everything") {
  ReservoirBuffer buf(500);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 500; ++i) buf.observe(tiny_example(i), std::nullopt, rng);
  CHECK(buf.size() == 500);
  CHECK(buf.seen() == 500);
  std::vector<bool> present(500, false);
  for (Index s = 0; s < buf.size(); ++s) present[std::size_t(buf.item(s).source_index)] = true;
  for (bool p : present) CHECK(p);
}

TEST_CASE("reservoir inclusion statistics over 1000 trials") {
  // M = 500, N = 5000: each element present with probability 1/10.
  const int M = 500, N = 5000, trials = 1000;
  std::vector<int> inclusion(N, 0);
  std::mt19937_64 rng(42);
  for (int t = 0; t < trials; ++t) {
    ReservoirBuffer buf(M);
    for (int i = 0; i < N; ++i) buf.observe(tiny_example(i), std::nullopt, rng);
    REQUIRE(buf.size() == M);
    for (Index s = 0; s < buf.size(); ++s) ++inclusion[std::size_t(buf.item(s).source_index)];
  }

  const double p = double(M) / N;
  const double sigma = std::sqrt(p * (1 - p) / trials);
  int outside = 0;
  double chi2 = 0.0;
  const double expect = trials * p;
  const double var = trials * p * (1 - p);
  for (int i = 0; i < N; ++i) {
    const double freq = double(inclusion[i]) / trials;
    if (std::abs(freq - p) > 3 * sigma) ++outside;
    chi2 += (inclusion[i] - expect) * (inclusion[i] - expect) / var;
  }
  // ~0.27% of items are expected outside a 3-sigma band; allow up to 1%.
  CHECK(double(outside) / N < 0.01);
  const double pval = gamma_q(N / 2.0, chi2 / 2.0);
  CHECK(pval > 0.01);
}

TEST_CASE("capacity one: second observation present half the time") {
  const int trials = 1000;
  std::mt19937_64 rng(7);
  int second = 0;
  for (int t = 0; t < trials; ++t) {
    ReservoirBuffer buf(1);
    buf.observe(tiny_example(0), std::nullopt, rng);
    buf.observe(tiny_example(1), std::nullopt, rng);
    if (buf.item(0).source_index == 1) ++second;
  }
  const double sigma = std::sqrt(0.25 / trials);
  CHECK(std::abs(double(second) / trials - 0.5) < 3 * sigma);
}

TEST_CASE("exhaustive sample is a permutation of the buffer") {
  ReservoirBuffer buf(20);
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) buf.observe(tiny_example(i), std::nullopt, rng);
  auto drawn = buf.sample(20, rng);
  std::vector<bool> seen(20, false);
  for (Index s : drawn.slots) {
    CHECK_FALSE(seen[std::size_t(s)]);
    seen[std::size_t(s)] = true;
  }
  for (bool s : seen) CHECK(s);

  // k larger than the buffer is capped
  auto capped = buf.sample(50, rng);
  CHECK(Index(capped.slots.size()) == 20);
}

TEST_CASE("sample marginals are uniform") {
  ReservoirBuffer buf(30);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 30; ++i) buf.observe(tiny_example(i), std::nullopt, rng);

  const int draws = 3000;
  const Index k = 10;
  std::vector<int> counts(30, 0);
  for (int t = 0; t < draws; ++t)
    for (Index s : buf.sample(k, rng).slots) ++counts[std::size_t(s)];

  const double p = double(k) / 30.0;
  const double sigma = std::sqrt(p * (1 - p) / draws);
  for (int c : counts) CHECK(std::abs(double(c) / draws - p) < 4 * sigma);
}

TEST_CASE("empty buffer cannot be sampled") {
  ReservoirBuffer buf(4);
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(buf.sample(1, rng), ContractError);
}

TEST_CASE("same seed gives a bit-identical trajectory") {
  auto run = [](std::uint64_t seed) {
    ReservoirBuffer buf(50);
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 1000; ++i) buf.observe(tiny_example(i), std::nullopt, rng);
    std::vector<std::int64_t> ids;
    for (Index s = 0; s < buf.size(); ++s) ids.push_back(buf.item(s).source_index);
    return ids;
  };
  CHECK(run(99) == run(99));
  CHECK(run(99) != run(100));
}

TEST_CASE("payloads stick to their insertion and round-trip through blobs") {
  ReservoirBuffer buf(8);
  std::mt19937_64 rng(11);
  for (int i = 0; i < 30; ++i) {
    Eigen::VectorXd payload = Eigen::VectorXd::Constant(3, double(i));
    buf.observe(tiny_example(i, i / 10), payload, rng);
  }
  for (Index s = 0; s < buf.size(); ++s) {
    REQUIRE(buf.payload(s).has_value());
    // payload value matches the item it was inserted with
    CHECK((*buf.payload(s))(0) == doctest::Approx(double(buf.item(s).source_index)));
  }

  BlobStore store;
  buf.save(store, "buffer");
  ReservoirBuffer loaded = ReservoirBuffer::load(store, "buffer");
  REQUIRE(loaded.size() == buf.size());
  CHECK(loaded.seen() == buf.seen());
  for (Index s = 0; s < buf.size(); ++s) {
    CHECK(loaded.item(s).source_index == buf.item(s).source_index);
    CHECK(loaded.item(s).task_of_origin == buf.item(s).task_of_origin);
    CHECK(loaded.item(s).image == buf.item(s).image);
    CHECK((*loaded.payload(s) - *buf.payload(s)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_SUITE_END();
