#include "flatcache/config.hpp"

#include <cstdlib>

#include <fmt/format.h>
#include <json.hpp>

#include "flatcache/digest.hpp"
#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

using nlohmann::json;

Config load_config(const ConfigOverrides& overrides) {
  Config cfg;
  cfg.excluded_args = default_excluded_vars();
  cfg.runner = {"/bin/sh", "-c"};

  const char* home = std::getenv("HOME");
  cfg.storage_dir = std::filesystem::path(home ? home : "/root") / ".flatcache";

  // config file layer
  std::string cfg_file;
  if (overrides.config_file) cfg_file = *overrides.config_file;
  else if (const char* env = std::getenv("FLATCACHE_CONFIG")) cfg_file = env;
  if (!cfg_file.empty()) {
    json j;
    try {
      j = json::parse(read_file(cfg_file));
    } catch (const std::exception& e) {
      throw UserError(fmt::format("cannot read config file {}: {}", cfg_file, e.what()));
    }
    if (j.contains("storage")) cfg.storage_dir = j["storage"].get<std::string>();
    if (j.contains("cache_large_mib")) cfg.cache_large_mib = j["cache_large_mib"].get<uint64_t>();
    if (j.contains("platform")) cfg.platform = j["platform"].get<std::string>();
    if (j.contains("registry")) cfg.registry = j["registry"].get<std::string>();
    if (j.contains("excluded_args")) {
      cfg.excluded_args.clear();
      for (auto& v : j["excluded_args"]) cfg.excluded_args.insert(v.get<std::string>());
    }
    if (j.contains("runner")) {
      cfg.runner.clear();
      for (auto& v : j["runner"]) cfg.runner.push_back(v.get<std::string>());
    }
  }

  // environment layer
  if (const char* env = std::getenv("FLATCACHE_STORAGE")) cfg.storage_dir = env;

  // flag layer
  if (overrides.storage) cfg.storage_dir = *overrides.storage;
  if (overrides.cache_large_mib) cfg.cache_large_mib = *overrides.cache_large_mib;
  if (overrides.platform) cfg.platform = *overrides.platform;
  if (overrides.registry) cfg.registry = *overrides.registry;

  if (cfg.runner.empty()) throw UserError("runner command must not be empty");
  return cfg;
}

}  // namespace flatcache
