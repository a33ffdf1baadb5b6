#ifndef FLATCACHE_OOB_HPP
#define FLATCACHE_OOB_HPP

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>

namespace flatcache {

// Key source for a large file: identified by metadata, never by content.
struct OobKeySource {
  int64_t mtime_ns = 0;
  uint32_t mode = 0;  // original permission bits, before write bits are stripped
  uint64_t size = 0;
  std::string rel_path;  // image-root-relative logical path
};

// "<mtime>-<mode octal>-<size>-<md5 of path>"; injective over the tuple.
std::string oob_key(const OobKeySource& src);

// Stored OOB inodes always have their write bits stripped: restored copies
// are hard links into this store, so an in-place write from a later RUN
// would otherwise corrupt every state sharing the key.
inline uint32_t oob_stored_mode(uint32_t mode) { return mode & ~0222u; }

class OobStore {
 public:
  explicit OobStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  const std::filesystem::path& dir() const { return dir_; }
  bool contains(const std::string& key) const;

  // Moves (no copy) the worktree file into the store under key, stripping
  // write bits; if the key is already stored the caller deletes its copy
  // instead (the stored one is canonical).
  void stash(const std::filesystem::path& file, const std::string& key);

  // Hard-links the stored file to dest, replacing dest atomically.
  void restore(const std::string& key, const std::filesystem::path& dest) const;

  // Unlinks entries whose key is in no reachable state; returns count removed.
  size_t gc(const std::set<std::string>& live_keys);

 private:
  std::filesystem::path dir_;
};

}  // namespace flatcache

#endif
