#include "flatcache/layers.hpp"

#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "flatcache/errors.hpp"
#include "flatcache/hash.hpp"
#include "flatcache/recipe.hpp"
#include "flatcache/tar.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kWhiteoutPrefix = ".wh.";
constexpr const char* kOpaqueMarker = ".wh..wh..opq";

constexpr const char* kAcceptTypes =
    "application/vnd.oci.image.manifest.v1+json, "
    "application/vnd.docker.distribution.manifest.v2+json, "
    "application/vnd.oci.image.index.v1+json, "
    "application/vnd.docker.distribution.manifest.list.v2+json";

// Strips "./" segments, rejects absolute paths and ".." traversal.
fs::path sanitize_entry_path(const std::string& raw) {
  if (!raw.empty() && raw[0] == '/') {
    throw InternalError(fmt::format("layer entry has an absolute path: {}", raw));
  }
  fs::path out;
  for (auto& part : fs::path(raw)) {
    std::string s = part.string();
    if (s.empty() || s == "." || s == "/") continue;
    if (s == "..") throw InternalError(fmt::format("layer entry escapes image root: {}", raw));
    out /= s;
  }
  return out;
}

void require_inside_root(const fs::path& canonical_root, const fs::path& target) {
  // A symlinked ancestor must not redirect the entry outside the image.
  std::error_code ec;
  fs::path parent = fs::weakly_canonical(target.parent_path(), ec);
  if (ec) throw InternalError(fmt::format("cannot resolve {}", target.parent_path().string()));
  std::string p = parent.string(), r = canonical_root.string();
  if (p != r && !p.starts_with(r + "/")) {
    throw InternalError(fmt::format("layer entry escapes image root: {}", target.string()));
  }
}

void remove_existing(const fs::path& target) {
  auto st = fs::symlink_status(target);
  if (fs::exists(st)) fs::remove_all(target);
}

}  // namespace

ApplyStats apply_layer(const fs::path& archive, const fs::path& root) {
  fs::create_directories(root);
  fs::path canonical_root = fs::canonical(root);

  TarReader reader(open_possibly_gzipped(archive));
  ApplyStats stats;
  std::set<std::string> created_this_layer;
  std::vector<std::pair<fs::path, std::pair<uint32_t, int64_t>>> dir_attrs;

  while (auto entry = reader.next()) {
    fs::path rel = sanitize_entry_path(entry->path);
    if (rel.empty()) {
      reader.skip_content();
      continue;
    }
    std::string base = rel.filename().string();
    fs::path target = root / rel;

    if (base == kOpaqueMarker) {
      // Directory becomes opaque: drop everything a lower layer put there.
      ++stats.opaque_dirs;
      fs::path dir = target.parent_path();
      if (fs::exists(dir)) {
        for (auto& e : fs::directory_iterator(dir)) {
          std::string seen = e.path().lexically_relative(root).string();
          if (!created_this_layer.count(seen)) fs::remove_all(e.path());
        }
      }
      reader.skip_content();
      continue;
    }
    if (base.starts_with(kWhiteoutPrefix)) {
      ++stats.whiteouts;
      fs::path victim = target.parent_path() / base.substr(std::strlen(kWhiteoutPrefix));
      require_inside_root(canonical_root, victim);
      remove_existing(victim);
      reader.skip_content();
      continue;
    }

    require_inside_root(canonical_root, target);
    fs::create_directories(target.parent_path());
    int64_t mtime = entry->mtime_s * 1000000000;

    switch (entry->type) {
      case '0':
      case '7': {
        remove_existing(target);
        std::ofstream out(target, std::ios::binary);
        if (!out) throw InternalError(fmt::format("cannot create {}", target.string()));
        reader.read_content([&](const char* data, size_t len) {
          out.write(data, static_cast<std::streamsize>(len));
        });
        out.close();
        ::chmod(target.c_str(), entry->mode);
        set_mtime_ns(target, mtime);
        break;
      }
      case '5': {
        auto st = fs::symlink_status(target);
        if (fs::exists(st) && !fs::is_directory(st)) fs::remove_all(target);
        fs::create_directories(target);
        dir_attrs.push_back({target, {entry->mode, mtime}});
        break;
      }
      case '2': {
        remove_existing(target);
        if (::symlink(entry->linkname.c_str(), target.c_str()) != 0) {
          throw InternalError(fmt::format("symlink failed for {}", target.string()));
        }
        set_mtime_ns(target, mtime);
        break;
      }
      case '1': {
        remove_existing(target);
        fs::path link_target = root / sanitize_entry_path(entry->linkname);
        if (::link(link_target.c_str(), target.c_str()) != 0) {
          throw InternalError(fmt::format("hard link failed for {} -> {}: {}", target.string(),
                                          link_target.string(), std::strerror(errno)));
        }
        break;
      }
      case '6': {
        remove_existing(target);
        if (::mkfifo(target.c_str(), entry->mode) != 0) {
          throw InternalError(fmt::format("mkfifo failed for {}", target.string()));
        }
        set_mtime_ns(target, mtime);
        break;
      }
      case '3':
      case '4':
        // device nodes have no place in an unprivileged image
        fmt::print(stderr, "warning: skipping device node {} in layer\n", rel.string());
        ++stats.skipped;
        reader.skip_content();
        continue;
      default:
        fmt::print(stderr, "warning: skipping unsupported tar entry type '{}' for {}\n",
                   entry->type, rel.string());
        ++stats.skipped;
        reader.skip_content();
        continue;
    }
    created_this_layer.insert(rel.string());
    ++stats.entries;
  }

  // directory modes/mtimes last: child extraction would have disturbed them
  std::sort(dir_attrs.begin(), dir_attrs.end(),
            [](auto& a, auto& b) { return a.first.string() > b.first.string(); });
  for (auto& [dir, attrs] : dir_attrs) {
    ::chmod(dir.c_str(), attrs.first);
    set_mtime_ns(dir, attrs.second);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// manifest / config parsing

OciManifest OciManifest::parse(const std::string& raw) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::exception& e) {
    throw InternalError(fmt::format("cannot parse image manifest: {}", e.what()));
  }
  if (j.contains("manifests")) {
    throw InternalError("got a multi-platform index where a single manifest was expected");
  }
  if (!j.contains("layers") || !j.contains("config")) {
    throw InternalError("unsupported manifest schema (need layers + config)");
  }
  OciManifest m;
  m.raw_bytes = raw;
  m.config_digest = j["config"]["digest"].get<std::string>();
  for (auto& layer : j["layers"]) {
    m.layer_digests.push_back(layer["digest"].get<std::string>());
  }
  return m;
}

ImageConfig ImageConfig::parse(const std::string& raw) {
  ImageConfig out;
  json j = json::parse(raw);
  if (j.contains("config") && j["config"].is_object()) {
    auto& c = j["config"];
    if (c.contains("Env") && c["Env"].is_array()) {
      for (auto& e : c["Env"]) {
        std::string s = e.get<std::string>();
        size_t eq = s.find('=');
        if (eq != std::string::npos) out.env.emplace_back(s.substr(0, eq), s.substr(eq + 1));
      }
    }
    if (c.contains("WorkingDir") && c["WorkingDir"].is_string()) {
      out.workdir = c["WorkingDir"].get<std::string>();
    }
  }
  if (out.workdir.empty()) out.workdir = "/";
  return out;
}

std::string select_platform_manifest(const std::string& raw, const std::string& platform) {
  json j;
  try {
    j = json::parse(raw);
  } catch (const json::exception&) {
    return "";
  }
  if (!j.contains("manifests") || !j["manifests"].is_array()) return "";
  std::string os = platform.substr(0, platform.find('/'));
  std::string arch = platform.substr(platform.find('/') + 1);
  for (auto& m : j["manifests"]) {
    if (!m.contains("platform")) continue;
    auto& p = m["platform"];
    if (p.value("os", "") == os && p.value("architecture", "") == arch) {
      return m["digest"].get<std::string>();
    }
  }
  throw UserError(fmt::format("image index has no manifest for platform {}", platform));
}

// ---------------------------------------------------------------------------
// sources

fs::path dlcache_path(const fs::path& dlcache, const std::string& digest) {
  std::string name = digest;
  std::replace(name.begin(), name.end(), ':', '-');
  return dlcache / name;
}

static void verify_digest(const std::string& digest, const fs::path& file) {
  std::string want = digest.substr(digest.find(':') + 1);
  std::string got = sha256_hex_file(file);
  if (got != want) {
    throw InternalError(
        fmt::format("blob integrity failure for {}: content hashes to sha256:{}", digest, got));
  }
}

LayoutSource::LayoutSource(fs::path layout_dir, fs::path dlcache, std::string platform)
    : layout_(std::move(layout_dir)), dlcache_(std::move(dlcache)), platform_(std::move(platform)) {
  if (!fs::exists(layout_ / "index.json")) {
    throw UserError(fmt::format("{} is not an OCI image layout (no index.json)", layout_.string()));
  }
  fs::create_directories(dlcache_);
}

std::filesystem::path LayoutSource::fetch_blob(const std::string& digest) {
  fs::path cached = dlcache_path(dlcache_, digest);
  if (fs::exists(cached)) return cached;
  size_t colon = digest.find(':');
  fs::path src = layout_ / "blobs" / digest.substr(0, colon) / digest.substr(colon + 1);
  if (!fs::exists(src)) throw UserError(fmt::format("layout is missing blob {}", digest));
  verify_digest(digest, src);
  fs::path tmp = cached;
  tmp += ".tmp";
  fs::copy_file(src, tmp, fs::copy_options::overwrite_existing);
  fs::rename(tmp, cached);
  ++blob_copies_;
  return cached;
}

std::string LayoutSource::fetch_manifest(const std::string& ref) {
  json index = json::parse(read_file(layout_ / "index.json"));
  std::string digest;
  ImageRef want = ImageRef::parse(ref);
  for (auto& m : index["manifests"]) {
    std::string name = m.contains("annotations")
                           ? m["annotations"].value("org.opencontainers.image.ref.name", "")
                           : "";
    if (name == ref || name == want.tag ||
        name == fmt::format("{}:{}", want.repository, want.tag)) {
      digest = m["digest"].get<std::string>();
      break;
    }
  }
  if (digest.empty() && index["manifests"].size() == 1) {
    digest = index["manifests"][0]["digest"].get<std::string>();
  }
  if (digest.empty()) throw UserError(fmt::format("{} not found in image layout", ref));

  std::string raw = read_file(fetch_blob(digest));
  if (std::string platform_digest = select_platform_manifest(raw, platform_);
      !platform_digest.empty()) {
    raw = read_file(fetch_blob(platform_digest));
  }
  return raw;
}

}  // namespace flatcache

// httplib pulls in half of POSIX; keep it quarantined at the end.
#include <httplib.h>

namespace flatcache {

RegistrySource::RegistrySource(std::string base_url, fs::path dlcache, std::string platform)
    : base_url_(std::move(base_url)), dlcache_(std::move(dlcache)), platform_(std::move(platform)) {
  if (base_url_.starts_with("https://")) {
    throw UserError("registry over https (or with authentication) is not supported; "
                    "pull from an OCI image layout instead (--from-layout)");
  }
  if (!base_url_.starts_with("http://")) base_url_ = "http://" + base_url_;
  while (base_url_.ends_with("/")) base_url_.pop_back();
  fs::create_directories(dlcache_);
}

std::string RegistrySource::get(const std::string& url_path, const std::string& accept) {
  httplib::Client client(base_url_);
  client.set_read_timeout(60, 0);
  httplib::Headers headers = {{"Accept", accept}};
  auto res = client.Get(url_path, headers);
  if (!res) {
    throw UserError(fmt::format("cannot reach registry {} ({})", base_url_,
                                httplib::to_string(res.error())));
  }
  if (res->status == 404) {
    throw UserError(fmt::format("registry has no {}", url_path));
  }
  if (res->status != 200) {
    throw UserError(fmt::format("registry returned HTTP {} for {}", res->status, url_path));
  }
  return res->body;
}

std::string RegistrySource::fetch_manifest(const std::string& ref) {
  ImageRef r = ImageRef::parse(ref);
  repository_ = r.repository;
  std::string raw = get(fmt::format("/v2/{}/manifests/{}", r.repository, r.tag), kAcceptTypes);
  if (std::string digest = select_platform_manifest(raw, platform_); !digest.empty()) {
    raw = get(fmt::format("/v2/{}/manifests/{}", r.repository, digest), kAcceptTypes);
    std::string got = "sha256:" + sha256_hex(raw);
    if (got != digest) {
      throw InternalError(fmt::format("manifest integrity failure: expected {}, got {}", digest, got));
    }
  }
  return raw;
}

std::filesystem::path RegistrySource::fetch_blob(const std::string& digest) {
  fs::path cached = dlcache_path(dlcache_, digest);
  if (fs::exists(cached)) return cached;
  if (repository_.empty()) throw InternalError("fetch_blob before fetch_manifest");
  std::string body = get(fmt::format("/v2/{}/blobs/{}", repository_, digest), "*/*");
  fs::path tmp = cached;
  tmp += ".tmp";
  write_file(tmp, body);
  verify_digest(digest, tmp);
  fs::rename(tmp, cached);
  return cached;
}

}  // namespace flatcache
