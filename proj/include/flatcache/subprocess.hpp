#ifndef FLATCACHE_SUBPROCESS_HPP
#define FLATCACHE_SUBPROCESS_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flatcache {

struct RunResult {
  int exit_code = -1;  // 128+signal when killed by a signal
  std::string output;  // merged stdout + stderr
  bool ok() const { return exit_code == 0; }
};

struct RunOptions {
  std::optional<std::filesystem::path> cwd;
  // Full environment replacement when set; inherit otherwise.
  std::optional<std::map<std::string, std::string>> env;
  // Additions layered over the inherited environment (ignored when env set).
  std::map<std::string, std::string> extra_env;
  // Fed to the child's stdin, which is closed afterwards.
  std::string stdin_data;
  // Stream output to stderr as it arrives (in addition to capturing it).
  bool echo = false;
};

// fork/exec wrapper. Children get PR_SET_PDEATHSIG so that killing this
// process (e.g. a detached compaction) never leaves orphaned git processes
// mutating the store.
RunResult run_command(const std::vector<std::string>& argv, const RunOptions& opts = {});

}  // namespace flatcache

#endif
