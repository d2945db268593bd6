#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace ucl {

/// One named binary record. dtype is a small tag ("f64", "u8", "i64", "str");
/// shape is advisory metadata that round-trips untouched.
struct Blob {
  std::string dtype;
  std::vector<std::int64_t> shape;
  std::vector<std::uint8_t> bytes;
};

/// A tiny ordered name -> blob container with a bit-exact file format.
/// Checkpoints (model parameters, optimizer state, buffers, RNG strings)
/// are stored through this so that save/load round-trips exactly.
class BlobStore {
 public:
  void put(const std::string& name, Blob blob);
  void put_f64(const std::string& name, const double* data, std::size_t count,
               std::vector<std::int64_t> shape = {});
  void put_u8(const std::string& name, const std::uint8_t* data, std::size_t count,
              std::vector<std::int64_t> shape = {});
  void put_i64(const std::string& name, const std::int64_t* data, std::size_t count);
  void put_str(const std::string& name, const std::string& value);

  bool contains(const std::string& name) const;
  const Blob& get(const std::string& name) const;
  std::vector<double> get_f64(const std::string& name) const;
  std::vector<std::uint8_t> get_u8(const std::string& name) const;
  std::vector<std::int64_t> get_i64(const std::string& name) const;
  std::string get_str(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return blobs_.size(); }

  void save(const std::string& path) const;
  static BlobStore load(const std::string& path);

 private:
  std::map<std::string, Blob> blobs_;
};

}  // namespace ucl
