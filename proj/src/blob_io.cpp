#include "ucl/blob_io.hpp"

#include <cstring>
#include <fstream>

#include "ucl/check.hpp"

namespace ucl {

namespace {

constexpr char kMagic[8] = {'U', 'C', 'L', 'B', 'L', 'O', 'B', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = std::uint8_t(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint8_t b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

void write_string(std::ostream& out, const std::string& s) {
  write_u64(out, s.size());
  out.write(s.data(), std::streamsize(s.size()));
}

std::string read_string(std::istream& in) {
  std::uint64_t n = read_u64(in);
  std::string s(n, '\0');
  in.read(s.data(), std::streamsize(n));
  return s;
}

}  // namespace

void BlobStore::put(const std::string& name, Blob blob) { blobs_[name] = std::move(blob); }

void BlobStore::put_f64(const std::string& name, const double* data, std::size_t count,
                        std::vector<std::int64_t> shape) {
  Blob b;
  b.dtype = "f64";
  b.shape = std::move(shape);
  b.bytes.resize(count * sizeof(double));
  std::memcpy(b.bytes.data(), data, b.bytes.size());
  put(name, std::move(b));
}

void BlobStore::put_u8(const std::string& name, const std::uint8_t* data, std::size_t count,
                       std::vector<std::int64_t> shape) {
  Blob b;
  b.dtype = "u8";
  b.shape = std::move(shape);
  b.bytes.assign(data, data + count);
  put(name, std::move(b));
}

void BlobStore::put_i64(const std::string& name, const std::int64_t* data, std::size_t count) {
  Blob b;
  b.dtype = "i64";
  b.bytes.resize(count * sizeof(std::int64_t));
  std::memcpy(b.bytes.data(), data, b.bytes.size());
  put(name, std::move(b));
}

void BlobStore::put_str(const std::string& name, const std::string& value) {
  Blob b;
  b.dtype = "str";
  b.bytes.assign(value.begin(), value.end());
  put(name, std::move(b));
}

bool BlobStore::contains(const std::string& name) const { return blobs_.count(name) > 0; }

const Blob& BlobStore::get(const std::string& name) const {
  auto it = blobs_.find(name);
  UCL_CHECK(it != blobs_.end(), "missing blob: " + name);
  return it->second;
}

std::vector<double> BlobStore::get_f64(const std::string& name) const {
  const Blob& b = get(name);
  UCL_CHECK(b.dtype == "f64", "blob dtype mismatch for " + name);
  std::vector<double> v(b.bytes.size() / sizeof(double));
  std::memcpy(v.data(), b.bytes.data(), b.bytes.size());
  return v;
}

std::vector<std::uint8_t> BlobStore::get_u8(const std::string& name) const {
  const Blob& b = get(name);
  UCL_CHECK(b.dtype == "u8", "blob dtype mismatch for " + name);
  return b.bytes;
}

std::vector<std::int64_t> BlobStore::get_i64(const std::string& name) const {
  const Blob& b = get(name);
  UCL_CHECK(b.dtype == "i64", "blob dtype mismatch for " + name);
  std::vector<std::int64_t> v(b.bytes.size() / sizeof(std::int64_t));
  std::memcpy(v.data(), b.bytes.data(), b.bytes.size());
  return v;
}

std::string BlobStore::get_str(const std::string& name) const {
  const Blob& b = get(name);
  UCL_CHECK(b.dtype == "str", "blob dtype mismatch for " + name);
  return std::string(b.bytes.begin(), b.bytes.end());
}

std::vector<std::string> BlobStore::names() const {
  std::vector<std::string> out;
  out.reserve(blobs_.size());
  for (const auto& [k, v] : blobs_) out.push_back(k);
  return out;
}

void BlobStore::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IngestError("cannot open for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, blobs_.size());
  for (const auto& [name, blob] : blobs_) {
    write_string(out, name);
    write_string(out, blob.dtype);
    write_u64(out, blob.shape.size());
    for (auto d : blob.shape) write_u64(out, std::uint64_t(d));
    write_u64(out, blob.bytes.size());
    out.write(reinterpret_cast<const char*>(blob.bytes.data()),
              std::streamsize(blob.bytes.size()));
  }
  if (!out) throw IngestError("write failure: " + path);
}

BlobStore BlobStore::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open for reading: " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw IngestError("bad blob file magic: " + path);
  BlobStore store;
  std::uint64_t n = read_u64(in);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = read_string(in);
    Blob b;
    b.dtype = read_string(in);
    std::uint64_t rank = read_u64(in);
    b.shape.resize(rank);
    for (auto& d : b.shape) d = std::int64_t(read_u64(in));
    std::uint64_t len = read_u64(in);
    b.bytes.resize(len);
    in.read(reinterpret_cast<char*>(b.bytes.data()), std::streamsize(len));
    if (!in) throw IngestError("truncated blob file: " + path);
    store.put(name, std::move(b));
  }
  return store;
}

}  // namespace ucl
