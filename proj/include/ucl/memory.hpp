#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "ucl/blob_io.hpp"
#include "ucl/check.hpp"

namespace ucl {

/// A raw, un-augmented example held in the replay buffer. Augmentation is
/// applied at retrieval time so replayed examples get fresh views each step.
/// task_of_origin is bookkeeping for evaluation-side diagnostics only and is
/// never handed to method code.
struct StoredExample {
  std::vector<std::uint8_t> image;  // CHW bytes
  int channels = 0;
  int height = 0;
  int width = 0;
  std::int64_t source_index = -1;
  int task_of_origin = 0;
};

/// Fixed-capacity uniform sample of the stream via online reservoir sampling
/// (Vitter's Algorithm R). After N >= M observations each past element is
/// present with probability M/N. An optional payload is captured at insertion
/// time and is never recomputed.
class ReservoirBuffer {
 public:
  explicit ReservoirBuffer(Eigen::Index capacity) : capacity_(capacity) {
    UCL_CHECK(capacity >= 1, "reservoir capacity must be positive");
  }

  void observe(StoredExample example, std::optional<Eigen::VectorXd> payload,
               std::mt19937_64& rng);

  struct Drawn {
    std::vector<Eigen::Index> slots;
  };

  /// Uniform sample of k distinct slots (k capped at the current size).
  Drawn sample(Eigen::Index k, std::mt19937_64& rng) const;

  Eigen::Index size() const { return Eigen::Index(items_.size()); }
  Eigen::Index capacity() const { return capacity_; }
  std::int64_t seen() const { return n_seen_; }
  bool empty() const { return items_.empty(); }

  const StoredExample& item(Eigen::Index slot) const { return items_.at(std::size_t(slot)); }
  const std::optional<Eigen::VectorXd>& payload(Eigen::Index slot) const {
    return payloads_.at(std::size_t(slot));
  }

  void save(BlobStore& store, const std::string& prefix) const;
  static ReservoirBuffer load(const BlobStore& store, const std::string& prefix);

 private:
  Eigen::Index capacity_;
  std::int64_t n_seen_ = 0;
  std::vector<StoredExample> items_;
  std::vector<std::optional<Eigen::VectorXd>> payloads_;
};

}  // namespace ucl
