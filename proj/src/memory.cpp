#include "ucl/memory.hpp"

#include <numeric>

namespace ucl {

void ReservoirBuffer::observe(StoredExample example, std::optional<Eigen::VectorXd> payload,
                              std::mt19937_64& rng) {
  if (Eigen::Index(items_.size()) < capacity_) {
    items_.push_back(std::move(example));
    payloads_.push_back(std::move(payload));
  } else {
    // Replace a uniform slot with probability M / (n_seen + 1).
    std::uniform_int_distribution<std::int64_t> dist(0, n_seen_);
    const std::int64_t j = dist(rng);
    if (j < capacity_) {
      items_[std::size_t(j)] = std::move(example);
      payloads_[std::size_t(j)] = std::move(payload);
    }
  }
  ++n_seen_;
}

ReservoirBuffer::Drawn ReservoirBuffer::sample(Eigen::Index k, std::mt19937_64& rng) const {
  UCL_CHECK(!items_.empty(), "sampling from an empty buffer");
  k = std::min(k, size());
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(size()), 0);
  std::iota(idx.begin(), idx.end(), 0);
  // Partial Fisher-Yates: the first k positions become the sample.
  for (Eigen::Index i = 0; i < k; ++i) {
    std::uniform_int_distribution<Eigen::Index> dist(i, size() - 1);
    std::swap(idx[std::size_t(i)], idx[std::size_t(dist(rng))]);
  }
  idx.resize(std::size_t(k));
  return Drawn{std::move(idx)};
}

void ReservoirBuffer::save(BlobStore& store, const std::string& prefix) const {
  std::vector<std::int64_t> header = {capacity_, n_seen_, Eigen::Index(items_.size())};
  store.put_i64(prefix + "/header", header.data(), header.size());
  for (std::size_t i = 0; i < items_.size(); ++i) {
    const auto& it = items_[i];
    const std::string base = prefix + "/item" + std::to_string(i);
    store.put_u8(base + "/image", it.image.data(), it.image.size(),
                 {it.channels, it.height, it.width});
    std::vector<std::int64_t> meta = {it.source_index, it.task_of_origin};
    store.put_i64(base + "/meta", meta.data(), meta.size());
    if (payloads_[i])
      store.put_f64(base + "/payload", payloads_[i]->data(), std::size_t(payloads_[i]->size()));
  }
}

ReservoirBuffer ReservoirBuffer::load(const BlobStore& store, const std::string& prefix) {
  auto header = store.get_i64(prefix + "/header");
  UCL_CHECK(header.size() == 3, "reservoir blob header malformed");
  ReservoirBuffer buf(header[0]);
  buf.n_seen_ = header[1];
  const std::int64_t count = header[2];
  for (std::int64_t i = 0; i < count; ++i) {
    const std::string base = prefix + "/item" + std::to_string(i);
    const Blob& img = store.get(base + "/image");
    StoredExample ex;
    ex.image = img.bytes;
    UCL_CHECK(img.shape.size() == 3, "reservoir image shape malformed");
    ex.channels = int(img.shape[0]);
    ex.height = int(img.shape[1]);
    ex.width = int(img.shape[2]);
    auto meta = store.get_i64(base + "/meta");
    ex.source_index = meta[0];
    ex.task_of_origin = int(meta[1]);
    buf.items_.push_back(std::move(ex));
    if (store.contains(base + "/payload")) {
      auto p = store.get_f64(base + "/payload");
      buf.payloads_.emplace_back(Eigen::Map<const Eigen::VectorXd>(p.data(), Eigen::Index(p.size())));
    } else {
      buf.payloads_.emplace_back(std::nullopt);
    }
  }
  return buf;
}

}  // namespace ucl
