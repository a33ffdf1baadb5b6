#ifndef FLATCACHE_GIT_HPP
#define FLATCACHE_GIT_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "flatcache/subprocess.hpp"

namespace flatcache {

// Thin wrapper over the git command line, pinned to one repository or
// worktree directory.
class GitRunner {
 public:
  explicit GitRunner(std::filesystem::path dir) : dir_(std::move(dir)) {}

  // Throws InternalError with git's own output on nonzero exit.
  std::string run(const std::vector<std::string>& args) const;
  // No-throw variant for probing / best-effort cleanup.
  RunResult try_run(const std::vector<std::string>& args) const;
  // run() with trailing whitespace trimmed (rev-parse and friends).
  std::string capture(const std::vector<std::string>& args) const;

  const std::filesystem::path& dir() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

}  // namespace flatcache

#endif
