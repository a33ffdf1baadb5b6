#ifndef FLATCACHE_HASH_HPP
#define FLATCACHE_HASH_HPP

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>

namespace flatcache {

std::array<unsigned char, 16> md5_raw(std::string_view data);
std::string md5_hex(std::string_view data);

// Incremental SHA-256, used to verify registry blobs while streaming.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const void* data, size_t len);
  std::string hex_final();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view data);
std::string sha256_hex_file(const std::filesystem::path& p);

}  // namespace flatcache

#endif
