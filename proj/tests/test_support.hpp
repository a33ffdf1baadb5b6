#ifndef FLATCACHE_TEST_SUPPORT_HPP
#define FLATCACHE_TEST_SUPPORT_HPP

#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <json.hpp>

#include "flatcache/errors.hpp"
#include "flatcache/hash.hpp"
#include "flatcache/subprocess.hpp"
#include "flatcache/util.hpp"

namespace fctest {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    char tmpl[] = "/tmp/flatcache-test-XXXXXX";
    if (!mkdtemp(tmpl)) throw std::runtime_error("mkdtemp failed");
    path = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
};

// ---------------------------------------------------------------------------
// minimal ustar writer for fixtures (long names via GNU 'L' entries)

class TarWriter {
 public:
  void add_file(const std::string& path, const std::string& content, uint32_t mode = 0644,
                int64_t mtime_s = 1000000000) {
    header(path, '0', content.size(), mode, mtime_s, "");
    append_padded(content);
  }
  void add_dir(const std::string& path, uint32_t mode = 0755, int64_t mtime_s = 1000000000) {
    header(path, '5', 0, mode, mtime_s, "");
  }
  void add_symlink(const std::string& path, const std::string& target,
                   int64_t mtime_s = 1000000000) {
    header(path, '2', 0, 0777, mtime_s, target);
  }
  void add_hardlink(const std::string& path, const std::string& target,
                    int64_t mtime_s = 1000000000) {
    header(path, '1', 0, 0644, mtime_s, target);
  }
  void add_fifo(const std::string& path, uint32_t mode = 0644, int64_t mtime_s = 1000000000) {
    header(path, '6', 0, mode, mtime_s, "");
  }
  void add_device(const std::string& path) { header(path, '3', 0, 0644, 1000000000, ""); }

  std::string finish() {
    std::string out = data_;
    out.append(1024, '\0');
    return out;
  }

 private:
  void header(const std::string& path, char type, uint64_t size, uint32_t mode, int64_t mtime_s,
              const std::string& linkname) {
    if (path.size() > 100) {
      std::string longname = path + '\0';
      header("././@LongLink", 'L', longname.size(), 0644, mtime_s, "");
      append_padded(longname);
    }
    char block[512];
    std::memset(block, 0, sizeof(block));
    std::snprintf(block, 101, "%s", path.substr(0, 100).c_str());
    std::snprintf(block + 100, 8, "%07o", mode);
    std::snprintf(block + 108, 8, "%07o", 0);
    std::snprintf(block + 116, 8, "%07o", 0);
    std::snprintf(block + 124, 12, "%011llo", static_cast<unsigned long long>(size));
    std::snprintf(block + 136, 12, "%011llo", static_cast<unsigned long long>(mtime_s));
    std::memset(block + 148, ' ', 8);  // checksum computed over spaces
    block[156] = type;
    if (!linkname.empty()) std::snprintf(block + 157, 100, "%s", linkname.c_str());
    std::memcpy(block + 257, "ustar", 5);
    block[262] = '\0';
    std::memcpy(block + 263, "00", 2);
    unsigned sum = 0;
    for (unsigned char c : std::string_view(block, 512)) sum += c;
    std::snprintf(block + 148, 8, "%06o", sum);
    block[154] = '\0';
    block[155] = ' ';
    data_.append(block, 512);
  }
  void append_padded(const std::string& content) {
    data_ += content;
    size_t pad = (512 - content.size() % 512) % 512;
    data_.append(pad, '\0');
  }
  std::string data_;
};

inline std::string gzip_compress(const std::string& in) {
  z_stream strm{};
  if (deflateInit2(&strm, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8,
                   Z_DEFAULT_STRATEGY) != Z_OK) {
    throw std::runtime_error("deflateInit2 failed");
  }
  std::string out;
  out.resize(deflateBound(&strm, in.size()) + 32);
  strm.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(in.data()));
  strm.avail_in = static_cast<uInt>(in.size());
  strm.next_out = reinterpret_cast<Bytef*>(out.data());
  strm.avail_out = static_cast<uInt>(out.size());
  if (deflate(&strm, Z_FINISH) != Z_STREAM_END) throw std::runtime_error("deflate failed");
  out.resize(out.size() - strm.avail_out);
  deflateEnd(&strm);
  return out;
}

// ---------------------------------------------------------------------------
// OCI image layout fixture

struct OciLayout {
  fs::path dir;
  std::string manifest_digest;
  std::string manifest_raw;
};

inline std::string layout_add_blob(const fs::path& dir, const std::string& content) {
  std::string digest = flatcache::sha256_hex(content);
  fs::create_directories(dir / "blobs" / "sha256");
  flatcache::write_file(dir / "blobs" / "sha256" / digest, content);
  return "sha256:" + digest;
}

// One-tag layout with the given gzipped layer tarballs.
inline OciLayout make_oci_layout(const fs::path& dir, const std::string& ref,
                                 const std::vector<std::string>& layer_tars_gz,
                                 const std::vector<std::string>& env = {},
                                 const std::string& workdir = "") {
  using nlohmann::json;
  OciLayout out;
  out.dir = dir;
  fs::create_directories(dir);

  json config = {{"architecture", "amd64"},
                 {"os", "linux"},
                 {"config", {{"Env", env}, {"WorkingDir", workdir}}},
                 {"rootfs", {{"type", "layers"}, {"diff_ids", json::array()}}}};
  std::string config_raw = config.dump();
  std::string config_digest = layout_add_blob(dir, config_raw);

  json layers = json::array();
  for (auto& tar : layer_tars_gz) {
    std::string d = layout_add_blob(dir, tar);
    layers.push_back({{"mediaType", "application/vnd.oci.image.layer.v1.tar+gzip"},
                      {"digest", d},
                      {"size", tar.size()}});
  }
  json manifest = {{"schemaVersion", 2},
                   {"mediaType", "application/vnd.oci.image.manifest.v1+json"},
                   {"config",
                    {{"mediaType", "application/vnd.oci.image.config.v1+json"},
                     {"digest", config_digest},
                     {"size", config_raw.size()}}},
                   {"layers", layers}};
  out.manifest_raw = manifest.dump();
  out.manifest_digest = layout_add_blob(dir, out.manifest_raw);

  json index = {{"schemaVersion", 2},
                {"manifests",
                 json::array({{{"mediaType", "application/vnd.oci.image.manifest.v1+json"},
                               {"digest", out.manifest_digest},
                               {"size", out.manifest_raw.size()},
                               {"annotations", {{"org.opencontainers.image.ref.name", ref}}}}})}};
  flatcache::write_file(dir / "index.json", index.dump());
  flatcache::write_file(dir / "oci-layout", R"({"imageLayoutVersion":"1.0.0"})");
  return out;
}

// ---------------------------------------------------------------------------
// randomized directory trees for round-trip properties

struct SpecEntry {
  std::string path;
  char type = 'f';     // f file, d dir, l symlink, p fifo, H hard-link member
  std::string data;    // file content or symlink target
  std::string link_to; // canonical path for 'H'
  uint32_t mode = 0644;
  int64_t mtime_ns = 0;
};

struct TreeSpec {
  std::vector<SpecEntry> entries;
};

inline TreeSpec random_tree(std::mt19937& rng, int n_entries) {
  TreeSpec spec;
  auto pick = [&](auto& v) { return v[rng() % v.size()]; };
  std::vector<std::string> dirs = {""};
  std::vector<std::string> files;
  std::vector<uint32_t> file_modes = {0644, 0755, 0600, 0640, 0444, 0700, 04755};
  std::vector<uint32_t> dir_modes = {0755, 0700, 0750, 0711};
  std::set<std::string> used;

  auto fresh_name = [&](bool allow_git_prefix) {
    static const char* stems[] = {"alpha", "beta", "data", "x", "run", "lib", "conf", "z z",
                                  "pkg-1.2", "notes.txt"};
    std::string name;
    do {
      name = fmt::format("{}{}", stems[rng() % 10], rng() % 1000);
      if (allow_git_prefix && rng() % 6 == 0) name = ".git" + name;
      if (rng() % 12 == 0) name = ".gitignore" + std::to_string(rng() % 100);
    } while (used.count(name));
    used.insert(name);
    return name;
  };
  auto rand_mtime = [&]() {
    int64_t sec = 1000000000 + static_cast<int64_t>(rng() % 700000000);
    int64_t ns = static_cast<int64_t>(rng() % 1000000000);
    return sec * 1000000000 + ns;
  };

  for (int i = 0; i < n_entries; ++i) {
    std::string parent = pick(dirs);
    std::string name = fresh_name(true);
    std::string path = parent.empty() ? name : parent + "/" + name;
    int roll = static_cast<int>(rng() % 10);
    SpecEntry e;
    e.path = path;
    e.mtime_ns = rand_mtime();
    if (roll < 2 && dirs.size() < 12) {
      e.type = 'd';
      e.mode = pick(dir_modes);
      dirs.push_back(path);
    } else if (roll < 6) {
      e.type = 'f';
      e.mode = pick(file_modes);
      size_t len = rng() % 2048;
      e.data.resize(len);
      for (auto& c : e.data) c = static_cast<char>(rng() % 256);
      files.push_back(path);
    } else if (roll < 7 && !files.empty()) {
      e.type = 'H';
      e.link_to = pick(files);
    } else if (roll < 9) {
      e.type = 'l';
      e.data = rng() % 2 == 0 ? "dangling/target" : "/etc/hosts";
    } else {
      e.type = 'p';
      e.mode = pick(file_modes) & 0777;
    }
    spec.entries.push_back(std::move(e));
  }
  return spec;
}

// Creates the tree; afterwards every entry's mtime_ns is re-read from disk
// (filesystem granularity) so comparisons are exact.
inline void materialize(TreeSpec& spec, const fs::path& root) {
  for (auto& e : spec.entries) {
    fs::path p = root / e.path;
    fs::create_directories(p.parent_path());
    switch (e.type) {
      case 'd': fs::create_directories(p); break;
      case 'f': flatcache::write_file(p, e.data); break;
      case 'l':
        if (::symlink(e.data.c_str(), p.c_str()) != 0) {
          throw std::runtime_error("test symlink failed");
        }
        break;
      case 'p': ::mkfifo(p.c_str(), 0600); break;
      case 'H':
        if (::link((root / e.link_to).c_str(), p.c_str()) != 0) {
          throw std::runtime_error("test hardlink failed");
        }
        break;
    }
  }
  // modes deepest-first so restrictive directory bits land last
  std::vector<SpecEntry*> order;
  for (auto& e : spec.entries) order.push_back(&e);
  std::sort(order.begin(), order.end(),
            [](auto* a, auto* b) { return a->path > b->path; });
  for (auto* e : order) {
    fs::path p = root / e->path;
    if (e->type == 'f' || e->type == 'd' || e->type == 'p') ::chmod(p.c_str(), e->mode);
    if (e->type != 'H') flatcache::set_mtime_ns(p, e->mtime_ns);
  }
  for (auto& e : spec.entries) {
    e.mtime_ns = flatcache::mtime_ns(root / e.path);  // fs granularity, inode truth
  }
}

// "" when the on-disk tree matches the TreeSpec; otherwise the first
// mismatch. Top-level "ch" and ".git" are artifact bookkeeping and ignored.
inline std::string compare_tree(const TreeSpec& spec, const fs::path& root) {
  std::set<std::string> disk;
  for (auto it = fs::recursive_directory_iterator(root); it != fs::recursive_directory_iterator();
       ++it) {
    std::string rel = it->path().lexically_relative(root).string();
    std::string top = rel.substr(0, rel.find('/'));
    if (top == "ch" || top == ".git") {
      if (it->is_directory() && !it->is_symlink()) it.disable_recursion_pending();
      continue;
    }
    disk.insert(rel);
  }
  std::set<std::string> expected;
  for (auto& e : spec.entries) expected.insert(e.path);
  for (auto& p : disk) {
    if (!expected.count(p)) return "unexpected path: " + p;
  }
  for (auto& p : expected) {
    if (!disk.count(p)) return "missing path: " + p;
  }

  std::map<std::string, const SpecEntry*> by_path;
  for (auto& e : spec.entries) by_path[e.path] = &e;
  std::map<std::string, std::vector<std::string>> want_groups, got_groups;
  std::map<std::pair<dev_t, ino_t>, std::string> inode_names;

  for (auto& e : spec.entries) {
    fs::path p = root / e.path;
    struct stat st{};
    if (::lstat(p.c_str(), &st) != 0) return "lstat failed: " + e.path;
    char want_type = e.type == 'H' ? 'f' : e.type;
    char got_type = S_ISREG(st.st_mode)    ? 'f'
                    : S_ISDIR(st.st_mode)  ? 'd'
                    : S_ISLNK(st.st_mode)  ? 'l'
                    : S_ISFIFO(st.st_mode) ? 'p'
                                           : '?';
    if (want_type != got_type) {
      return fmt::format("{}: type {} != {}", e.path, got_type, want_type);
    }
    if (e.type == 'f' && flatcache::read_file(p) != e.data) return e.path + ": content differs";
    if (e.type == 'l') {
      if (fs::read_symlink(p).string() != e.data) return e.path + ": symlink target differs";
    }
    if (e.type == 'f' || e.type == 'd' || e.type == 'p') {
      if ((st.st_mode & 07777) != e.mode) {
        return fmt::format("{}: mode {:o} != {:o}", e.path, st.st_mode & 07777, e.mode);
      }
    }
    if (e.type != 'H') {
      int64_t got = static_cast<int64_t>(st.st_mtim.tv_sec) * 1000000000 + st.st_mtim.tv_nsec;
      if (got != e.mtime_ns) {
        return fmt::format("{}: mtime {} != {}", e.path, got, e.mtime_ns);
      }
    }
    if (e.type == 'H') want_groups[e.link_to].push_back(e.path);
    if (want_type == 'f') {
      auto key = std::make_pair(st.st_dev, st.st_ino);
      auto it = inode_names.find(key);
      if (it == inode_names.end()) inode_names[key] = e.path;
      else got_groups[it->second].push_back(e.path);
    }
  }
  // same hard-link partition (members grouped under first-seen name)
  for (auto& [canon, members] : want_groups) {
    auto it = got_groups.find(canon);
    if (it == got_groups.end()) return "hard-link group lost for " + canon;
    auto want = members, got = it->second;
    std::sort(want.begin(), want.end());
    std::sort(got.begin(), got.end());
    if (want != got) return "hard-link group differs for " + canon;
  }
  for (auto& [canon, members] : got_groups) {
    if (!want_groups.count(canon)) return "unexpected hard-link group at " + canon;
  }
  return "";
}

// ---------------------------------------------------------------------------

inline flatcache::RunResult run_cli(const std::vector<std::string>& args,
                                    const std::string& storage) {
  std::vector<std::string> argv = {FLATCACHE_BIN, "--storage", storage};
  argv.insert(argv.end(), args.begin(), args.end());
  return flatcache::run_command(argv);
}

}  // namespace fctest

#endif
