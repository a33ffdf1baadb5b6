#ifndef FLATCACHE_METADATA_HPP
#define FLATCACHE_METADATA_HPP

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace flatcache {

// Per-state record of everything Git cannot hold: modes, mtimes, hard links,
// empty directories, FIFOs, .git* renames, out-of-band large files. Stored
// inside the image at ch/git-meta as versioned line-oriented UTF-8.

struct FileRecord {
  std::string path;  // image-root-relative, logical (post-restore) form
  char ftype = 'f';  // f regular, d directory, l symlink, p fifo
  uint32_t mode = 0;
  int64_t mtime_ns = 0;
};

struct HardlinkGroup {
  std::string canonical;  // first member encountered in traversal order
  std::vector<std::string> members;
};

struct RenameRecord {
  std::string stored;   // on-disk/in-Git path (.weirdal_ form, ancestors included)
  std::string logical;  // original path (.git* form)
};

struct OobRecord {
  std::string path;
  std::string key;
};

struct MetadataManifest {
  int version = 1;
  std::vector<FileRecord> files;
  std::vector<HardlinkGroup> hardlink_groups;
  std::vector<std::string> empty_dirs;
  std::vector<std::string> fifos;
  std::vector<RenameRecord> renames;
  std::vector<OobRecord> large_files;

  std::string serialize() const;
  static MetadataManifest parse(std::string_view text);
};

inline constexpr const char* kManifestRelPath = "ch/git-meta";

}  // namespace flatcache

#endif
