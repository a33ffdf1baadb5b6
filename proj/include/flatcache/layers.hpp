#ifndef FLATCACHE_LAYERS_HPP
#define FLATCACHE_LAYERS_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace flatcache {

// A parsed registry manifest. raw_bytes is the verbatim document as
// received: it is what the PULL digest consumes, unmodified.
struct OciManifest {
  std::string raw_bytes;
  std::string config_digest;
  std::vector<std::string> layer_digests;  // ordered, "sha256:<hex>"
  static OciManifest parse(const std::string& raw);
};

// Env / working directory from the image config blob.
struct ImageConfig {
  std::vector<std::pair<std::string, std::string>> env;
  std::string workdir;
  static ImageConfig parse(const std::string& raw);
};

struct ApplyStats {
  size_t entries = 0;
  size_t whiteouts = 0;
  size_t opaque_dirs = 0;
  size_t skipped = 0;  // unsupported entry types (devices)
};

// Extracts one (possibly gzipped) OCI layer tarball onto root, honoring
// whiteouts: `.wh.<name>` deletes <name> recursively, `.wh..wh..opq` empties
// the containing directory of entries this layer did not itself create.
// Entries that would escape root are a hard error.
ApplyStats apply_layer(const std::filesystem::path& archive, const std::filesystem::path& root);

// Where a manifest and its blobs come from. Everything fetched lands
// verbatim in dlcache, named sha256-<hex>.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  // Verbatim manifest bytes for ref; multi-platform indexes are resolved to
  // the selected platform's manifest first.
  virtual std::string fetch_manifest(const std::string& ref) = 0;
  // Ensures the blob is present in dlcache and returns its path.
  virtual std::filesystem::path fetch_blob(const std::string& digest) = 0;
};

// OCI image layout directory (index.json + blobs/sha256/...).
class LayoutSource : public ImageSource {
 public:
  LayoutSource(std::filesystem::path layout_dir, std::filesystem::path dlcache,
               std::string platform);
  std::string fetch_manifest(const std::string& ref) override;
  std::filesystem::path fetch_blob(const std::string& digest) override;

  size_t blob_copies() const { return blob_copies_; }  // served-from-dlcache probe

 private:
  std::filesystem::path layout_;
  std::filesystem::path dlcache_;
  std::string platform_;
  size_t blob_copies_ = 0;
};

// Anonymous pulls from an OCI distribution / Docker v2 registry.
class RegistrySource : public ImageSource {
 public:
  RegistrySource(std::string base_url, std::filesystem::path dlcache, std::string platform);
  std::string fetch_manifest(const std::string& ref) override;
  std::filesystem::path fetch_blob(const std::string& digest) override;

 private:
  std::string get(const std::string& url_path, const std::string& accept);
  std::string base_url_;
  std::filesystem::path dlcache_;
  std::string platform_;
  std::string repository_;  // set by fetch_manifest, used for blob URLs
};

std::filesystem::path dlcache_path(const std::filesystem::path& dlcache, const std::string& digest);

// Picks the right manifest out of an index document for the platform
// ("linux/amd64" style); returns the digest to follow, or empty if the raw
// document is already a single-image manifest.
std::string select_platform_manifest(const std::string& raw, const std::string& platform);

}  // namespace flatcache

#endif
