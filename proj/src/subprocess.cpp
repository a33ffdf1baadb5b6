#include "flatcache/subprocess.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <fmt/format.h>

#include "flatcache/errors.hpp"

extern char** environ;

namespace flatcache {

RunResult run_command(const std::vector<std::string>& argv, const RunOptions& opts) {
  if (argv.empty()) throw InternalError("run_command: empty argv");
  // EPIPE from a child that exits early is handled at the write site.
  static const bool sigpipe_ignored = (::signal(SIGPIPE, SIG_IGN), true);
  (void)sigpipe_ignored;

  int outpipe[2];
  int inpipe[2] = {-1, -1};
  if (::pipe(outpipe) != 0) throw InternalError("pipe failed");
  if (::pipe(inpipe) != 0) {
    ::close(outpipe[0]);
    ::close(outpipe[1]);
    throw InternalError("pipe failed");
  }

  pid_t parent = ::getpid();
  pid_t pid = ::fork();
  if (pid < 0) {
    for (int fd : {outpipe[0], outpipe[1], inpipe[0], inpipe[1]}) ::close(fd);
    throw InternalError("fork failed");
  }

  if (pid == 0) {
    ::prctl(PR_SET_PDEATHSIG, SIGKILL);
    if (::getppid() != parent) _exit(127);  // parent died before prctl took effect
    ::dup2(inpipe[0], STDIN_FILENO);
    ::dup2(outpipe[1], STDOUT_FILENO);
    ::dup2(outpipe[1], STDERR_FILENO);
    for (int fd : {outpipe[0], outpipe[1], inpipe[0], inpipe[1]}) ::close(fd);
    if (opts.cwd && ::chdir(opts.cwd->c_str()) != 0) _exit(126);

    std::vector<char*> cargv;
    cargv.reserve(argv.size() + 1);
    for (auto& a : argv) cargv.push_back(const_cast<char*>(a.c_str()));
    cargv.push_back(nullptr);

    std::vector<std::string> envstrs;
    std::vector<char*> cenv;
    if (opts.env) {
      for (auto& [k, v] : *opts.env) envstrs.push_back(k + "=" + v);
      for (auto& e : envstrs) cenv.push_back(const_cast<char*>(e.c_str()));
      cenv.push_back(nullptr);
      ::execvpe(cargv[0], cargv.data(), cenv.data());
    } else if (!opts.extra_env.empty()) {
      for (char** e = environ; *e; ++e) {
        std::string_view entry(*e);
        std::string key(entry.substr(0, entry.find('=')));
        if (!opts.extra_env.count(key)) envstrs.emplace_back(entry);
      }
      for (auto& [k, v] : opts.extra_env) envstrs.push_back(k + "=" + v);
      for (auto& e : envstrs) cenv.push_back(const_cast<char*>(e.c_str()));
      cenv.push_back(nullptr);
      ::execvpe(cargv[0], cargv.data(), cenv.data());
    } else {
      ::execvp(cargv[0], cargv.data());
    }
    _exit(127);
  }

  ::close(outpipe[1]);
  ::close(inpipe[0]);

  // Feed stdin and drain output together so neither pipe can deadlock.
  RunResult result;
  size_t in_off = 0;
  bool in_open = true;
  if (opts.stdin_data.empty()) {
    ::close(inpipe[1]);
    in_open = false;
  }
  char buf[4096];
  while (true) {
    struct pollfd fds[2];
    fds[0].fd = outpipe[0];
    fds[0].events = POLLIN;
    fds[1].fd = in_open ? inpipe[1] : -1;
    fds[1].events = POLLOUT;
    if (::poll(fds, 2, -1) < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (fds[1].revents & (POLLOUT | POLLERR)) {
      ssize_t n = ::write(inpipe[1], opts.stdin_data.data() + in_off,
                          opts.stdin_data.size() - in_off);
      if (n <= 0 || (in_off += static_cast<size_t>(n)) >= opts.stdin_data.size()) {
        ::close(inpipe[1]);
        in_open = false;
      }
    }
    if (fds[0].revents & (POLLIN | POLLHUP)) {
      ssize_t n = ::read(outpipe[0], buf, sizeof(buf));
      if (n < 0) {
        if (errno == EINTR) continue;
        break;
      }
      if (n == 0) break;
      result.output.append(buf, static_cast<size_t>(n));
      if (opts.echo) {
        ssize_t unused = ::write(STDERR_FILENO, buf, static_cast<size_t>(n));
        (void)unused;
      }
    }
  }
  ::close(outpipe[0]);
  if (in_open) ::close(inpipe[1]);

  int status = 0;
  while (::waitpid(pid, &status, 0) < 0) {
    if (errno != EINTR) throw InternalError("waitpid failed");
  }
  if (WIFEXITED(status)) {
    result.exit_code = WEXITSTATUS(status);
  } else if (WIFSIGNALED(status)) {
    result.exit_code = 128 + WTERMSIG(status);
  }
  return result;
}

}  // namespace flatcache
