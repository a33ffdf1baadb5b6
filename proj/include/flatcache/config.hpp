#ifndef FLATCACHE_CONFIG_HPP
#define FLATCACHE_CONFIG_HPP

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace flatcache {

// Effective settings; precedence flag > environment > config file > default.
struct Config {
  std::filesystem::path storage_dir;         // --storage / FLATCACHE_STORAGE / ~/.flatcache
  uint64_t cache_large_mib = 4;              // 0 disables out-of-band storage
  std::set<std::string> excluded_args;       // values never digested (proxies, ssh agent)
  std::string platform = "linux/amd64";      // multi-platform index selector
  std::string registry;                      // base URL for remote pulls; empty = none
  std::vector<std::string> runner;           // command prefix RUN args are appended to

  std::optional<uint64_t> threshold_bytes() const {
    if (cache_large_mib == 0) return std::nullopt;
    return cache_large_mib * 1024ull * 1024ull;
  }
};

struct ConfigOverrides {
  std::optional<std::string> storage;
  std::optional<uint64_t> cache_large_mib;
  std::optional<std::string> platform;
  std::optional<std::string> registry;
  std::optional<std::string> config_file;  // also FLATCACHE_CONFIG
};

Config load_config(const ConfigOverrides& overrides);

}  // namespace flatcache

#endif
