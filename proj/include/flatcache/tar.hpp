#ifndef FLATCACHE_TAR_HPP
#define FLATCACHE_TAR_HPP

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace flatcache {

// Pull-based byte stream; gzip is detected by magic bytes, not file name.
class ByteSource {
 public:
  virtual ~ByteSource() = default;
  virtual size_t read(void* buf, size_t len) = 0;  // 0 only at EOF
};

std::unique_ptr<ByteSource> open_file_source(const std::filesystem::path& p);
// Wraps decompression around the file when it starts with the gzip magic.
std::unique_ptr<ByteSource> open_possibly_gzipped(const std::filesystem::path& p);

struct TarEntry {
  std::string path;      // as stored; not yet sanitized
  char type = '0';       // '0' regular, '1' hard link, '2' symlink, '5' dir, '6' fifo, '3'/'4' device
  std::string linkname;  // for '1' and '2'
  uint32_t mode = 0;
  int64_t mtime_s = 0;
  uint64_t size = 0;
};

// ustar / GNU / pax reader covering what OCI layers need: long names,
// long link targets, pax path/linkpath/size/mtime overrides.
class TarReader {
 public:
  explicit TarReader(std::unique_ptr<ByteSource> src);

  // Next real entry, with GNU/pax meta-entries already folded in.
  std::optional<TarEntry> next();

  // Content of the current regular entry; must be consumed (or skipped)
  // before calling next() again.
  void read_content(const std::function<void(const char*, size_t)>& sink);
  void skip_content();

 private:
  bool read_block(unsigned char* block);
  void read_exact(void* buf, size_t len);

  std::unique_ptr<ByteSource> src_;
  uint64_t pending_content_ = 0;  // bytes of the current entry not yet consumed
};

}  // namespace flatcache

#endif
