#include "flatcache/oob.hpp"

#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/hash.hpp"

namespace flatcache {

namespace fs = std::filesystem;

std::string oob_key(const OobKeySource& src) {
  return fmt::format("{}-{:o}-{}-{}", src.mtime_ns, src.mode, src.size, md5_hex(src.rel_path));
}

bool OobStore::contains(const std::string& key) const { return fs::exists(dir_ / key); }

void OobStore::stash(const fs::path& file, const std::string& key) {
  fs::path dest = dir_ / key;
  if (::rename(file.c_str(), dest.c_str()) != 0) {
    if (errno != EXDEV) {
      throw InternalError(
          fmt::format("cannot move {} out of band: {}", file.string(), std::strerror(errno)));
    }
    // cross-device: copy then unlink
    fmt::print(stderr, "warning: cross-device move for {}, copying instead\n", file.string());
    fs::copy_file(file, dest, fs::copy_options::overwrite_existing);
    fs::remove(file);
  }
  struct stat st{};
  if (::stat(dest.c_str(), &st) == 0) {
    ::chmod(dest.c_str(), oob_stored_mode(st.st_mode & 07777));
  }
}

void OobStore::restore(const std::string& key, const fs::path& dest) const {
  fs::path src = dir_ / key;
  if (!fs::exists(src)) {
    throw InternalError(fmt::format("cache corrupt: out-of-band file missing for key {}", key));
  }
  fs::path tmp = dest;
  tmp += ".oobtmp";
  std::error_code ec;
  fs::remove(tmp, ec);
  if (::link(src.c_str(), tmp.c_str()) != 0) {
    throw InternalError(fmt::format("cannot hard-link out-of-band file {}: {}", key,
                                    std::strerror(errno)));
  }
  if (::rename(tmp.c_str(), dest.c_str()) != 0) {
    ::unlink(tmp.c_str());
    throw InternalError(fmt::format("cannot place out-of-band file at {}", dest.string()));
  }
}

size_t OobStore::gc(const std::set<std::string>& live_keys) {
  size_t removed = 0;
  if (!fs::exists(dir_)) return 0;
  for (auto& e : fs::directory_iterator(dir_)) {
    std::string key = e.path().filename().string();
    if (!live_keys.count(key)) {
      fs::remove(e.path());
      ++removed;
    }
  }
  return removed;
}

}  // namespace flatcache
