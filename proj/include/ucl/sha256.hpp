#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace ucl {

/// Incremental SHA-256 (FIPS 180-4). Used for archive verification, golden
/// benchmark hashes, and config fingerprints.
class Sha256 {
 public:
  Sha256() { reset(); }

  void reset();
  void update(const void* data, std::size_t len);
  std::array<std::uint8_t, 32> digest();

  /// Hex digest of a whole buffer.
  static std::string hex(const void* data, std::size_t len);
  static std::string hex(const std::string& s) { return hex(s.data(), s.size()); }

  /// Hex digest of a file's contents; throws IngestError if unreadable.
  static std::string hex_file(const std::string& path);

 private:
  void process_block(const std::uint8_t* block);

  std::uint32_t state_[8];
  std::uint64_t bit_len_ = 0;
  std::uint8_t buffer_[64];
  std::size_t buffer_len_ = 0;
};

std::string to_hex(const std::uint8_t* data, std::size_t len);

}  // namespace ucl
