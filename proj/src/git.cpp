#include "flatcache/git.hpp"

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

RunResult GitRunner::try_run(const std::vector<std::string>& args) const {
  std::vector<std::string> argv = {"git", "-C", dir_.string()};
  argv.insert(argv.end(), args.begin(), args.end());
  return run_command(argv);
}

std::string GitRunner::run(const std::vector<std::string>& args) const {
  RunResult r = try_run(args);
  if (!r.ok()) {
    std::string cmd = "git";
    for (auto& a : args) cmd += " " + a;
    throw InternalError(fmt::format("{} failed (exit {}):\n{}", cmd, r.exit_code, r.output));
  }
  return r.output;
}

std::string GitRunner::capture(const std::vector<std::string>& args) const {
  return trim(run(args));
}

}  // namespace flatcache
