#ifndef FLATCACHE_STORE_HPP
#define FLATCACHE_STORE_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "flatcache/git.hpp"
#include "flatcache/metadata.hpp"
#include "flatcache/oob.hpp"
#include "flatcache/tree.hpp"

namespace flatcache {

// Bytes that Git will content-hash vs. bytes kept out of band, per commit.
struct CommitStats {
  uint64_t in_band_files = 0;
  uint64_t in_band_bytes = 0;
  uint64_t max_in_band_file = 0;
  uint64_t oob_files = 0;
  uint64_t oob_bytes = 0;
  void accumulate(const CommitStats& o);
};

struct CommitResult {
  std::string commit_sha;
  CommitStats stats;
};

struct CompactReport {
  uint64_t bytes_before = 0;
  uint64_t bytes_after = 0;
  double seconds = 0;
  size_t nodes_removed = 0;
  size_t oob_removed = 0;
};

enum class LockMode { Shared, Exclusive };

// Advisory flock on <storage>/lock. One exclusive holder per storage
// directory; released automatically when the process dies, which is what
// makes killing a detached compaction safe.
class StorageLock {
 public:
  StorageLock(const std::filesystem::path& storage, LockMode mode, int timeout_ms);
  ~StorageLock();
  StorageLock(StorageLock&& o) noexcept : fd_(o.fd_) { o.fd_ = -1; }
  StorageLock& operator=(StorageLock&&) = delete;
  StorageLock(const StorageLock&) = delete;

 private:
  int fd_ = -1;
};

// The storage directory: bare cache repository (bucache), per-image
// worktrees (img), verbatim downloads (dlcache), out-of-band large files
// (bularge), plus the node index.
class Store {
 public:
  static Store open(const std::filesystem::path& storage_dir, LockMode mode = LockMode::Exclusive,
                    int lock_timeout_ms = 30000);
  static bool looks_like_store(const std::filesystem::path& storage_dir);

  CacheTree& tree() { return tree_; }
  const CacheTree& tree() const { return tree_; }
  void save_tree();

  // Tree mutations that also maintain the backing git refs.
  const CacheNode& add_node(uint64_t parent_seq, const StateId& id, const std::string& text,
                            const std::string& commit_sha, bool rebuild = false);
  void move_label(const std::string& name, uint64_t seq);

  const std::filesystem::path& storage() const { return storage_; }
  std::filesystem::path bucache() const { return storage_ / "bucache"; }
  std::filesystem::path img_dir() const { return storage_ / "img"; }
  std::filesystem::path dlcache() const { return storage_ / "dlcache"; }
  std::filesystem::path worktree_path(const std::string& image) const;

  OobStore& oob() { return oob_; }
  GitRunner git() const { return GitRunner(bucache()); }
  GitRunner wt_git(const std::string& image) const { return GitRunner(worktree_path(image)); }

  // Materializes a node's state into the image's worktree: git checkout of
  // the commit, then reversal of everything the commit procedure recorded.
  std::filesystem::path checkout_state(uint64_t node_seq, const std::string& image);

  // The four-step commit: prepare (record metadata, dedupe hard links, move
  // large files out of band, drop empty dirs and FIFOs, rename .git*), write
  // the manifest, git commit, restore the worktree.
  CommitResult commit_state(const std::string& image, const std::string& message,
                            std::optional<uint64_t> oob_threshold_bytes);

  // For ENV/WORKDIR/ARG: commits only the ch/ metadata files.
  CommitResult commit_metadata_only(const std::string& image, const std::string& message);

  void delete_image(const std::string& name);

  // Drops nodes unreachable from any label, deletes their refs, runs git's
  // garbage collection (delta de-duplication), and prunes dead OOB files.
  // Safe to kill at any point: the index is swapped atomically first.
  CompactReport compact();

  MetadataManifest manifest_of(const CacheNode& node) const;

 private:
  Store(std::filesystem::path storage, StorageLock lock, CacheTree tree, bool exclusive);
  static void init_layout(const std::filesystem::path& storage);
  static void sweep_stale_git_locks(const std::filesystem::path& bucache);

  std::filesystem::path index_path() const { return bucache() / "flatcache-index"; }

  std::filesystem::path storage_;
  StorageLock lock_;
  CacheTree tree_;
  bool exclusive_ = false;
  OobStore oob_{std::filesystem::path()};
};

// Applies a manifest to a just-checked-out worktree: undo renames, recreate
// empty dirs / FIFOs / hard links, hard-link OOB files, then restore modes
// and mtimes for every recorded path. Exposed for tests.
void apply_manifest(const std::filesystem::path& worktree, const MetadataManifest& m,
                    const OobStore& oob, bool full_metadata_pass);

}  // namespace flatcache

#endif
