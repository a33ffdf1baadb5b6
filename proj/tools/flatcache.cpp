// flatcache — layer-free container image builder with a Git-backed build
// cache. Image states live as commits in a bare repository; branch labels
// are image names; large files are kept out of band and hard-linked in.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cstdio>
#include <iostream>
#include <memory>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "flatcache/builder.hpp"
#include "flatcache/config.hpp"
#include "flatcache/errors.hpp"
#include "flatcache/layers.hpp"
#include "flatcache/recipe.hpp"
#include "flatcache/store.hpp"
#include "flatcache/util.hpp"

using namespace flatcache;
namespace fs = std::filesystem;

namespace {

Store open_store(const Config& cfg, LockMode want) {
  return Store::open(cfg.storage_dir, want);
}

std::unique_ptr<ImageSource> make_source(const Config& cfg, const Store& store,
                                         const std::string& layout_dir) {
  if (!layout_dir.empty()) {
    return std::make_unique<LayoutSource>(layout_dir, store.dlcache(), cfg.platform);
  }
  if (!cfg.registry.empty()) {
    return std::make_unique<RegistrySource>(cfg.registry, store.dlcache(), cfg.platform);
  }
  return nullptr;
}

const char* outcome_word(Outcome o) {
  switch (o) {
    case Outcome::Hit: return "hit";
    case Outcome::MissExecuted: return "executed";
    case Outcome::Ignored: return "ignored";
  }
  return "?";
}

int cmd_build(const Config& cfg, const std::string& name, std::string recipe_file,
              const std::string& context, bool rebuild, bool no_cache,
              const std::vector<std::string>& build_args, const std::string& layout_dir) {
  if (recipe_file.empty()) recipe_file = (fs::path(context) / "Dockerfile").string();
  if (!fs::exists(recipe_file)) {
    throw UserError(fmt::format("no recipe file at {}", recipe_file));
  }

  Store store = open_store(cfg, LockMode::Exclusive);
  Builder builder(store);

  BuildOptions opts;
  opts.rebuild = rebuild;
  opts.no_cache = no_cache;
  opts.threshold_bytes = cfg.threshold_bytes();
  opts.context_dir = context;
  opts.excluded_vars = cfg.excluded_args;
  opts.runner = cfg.runner;
  opts.echo = true;
  for (auto& kv : build_args) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw UserError("--build-arg needs NAME=value");
    opts.build_args[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  auto source = make_source(cfg, store, layout_dir);
  opts.base_source = source.get();

  BuildReport report = builder.build(read_file(recipe_file), name, opts);
  size_t i = 0;
  for (auto& r : report.instructions) {
    fmt::print("[{}/{}] {} ({}{})\n", ++i, report.instructions.size(), r.text,
               outcome_word(r.outcome),
               r.outcome == Outcome::MissExecuted ? fmt::format(", {:.2f}s", r.seconds) : "");
  }
  fmt::print("built image {}: {} hits, {} executed, {} ignored\n", name, report.hits,
             report.misses_executed, report.ignored);
  return 0;
}

int cmd_pull(const Config& cfg, const std::string& ref, const std::string& layout_dir) {
  Store store = open_store(cfg, LockMode::Exclusive);
  auto source = make_source(cfg, store, layout_dir);
  if (!source) {
    throw UserError("no pull source: pass --from-layout <dir> or configure --registry");
  }
  Builder builder(store);
  uint64_t before = store.tree().node_count();
  uint64_t seq = builder.pull(ref, *source, cfg.threshold_bytes());
  bool hit = store.tree().node_count() == before;
  fmt::print("pulled {} -> state {}{}\n", ref, store.tree().at(seq).state_id.abbrev(),
             hit ? " (cache hit, downloads skipped)" : "");
  return 0;
}

int cmd_import(const Config& cfg, const std::string& tarball, const std::string& name) {
  Store store = open_store(cfg, LockMode::Exclusive);
  Builder builder(store);
  uint64_t seq = builder.import_tar(tarball, name, cfg.threshold_bytes());
  fmt::print("imported {} as {} (state {})\n", tarball, name,
             store.tree().at(seq).state_id.abbrev());
  return 0;
}

int cmd_list(const Config& cfg) {
  Store store = open_store(cfg, LockMode::Shared);
  for (auto& [name, seq] : store.tree().labels()) {
    fmt::print("{}\n", unsanitize_image_name(name));
  }
  return 0;
}

int cmd_tree(const Config& cfg, bool dot) {
  Store store = open_store(cfg, LockMode::Shared);
  fmt::print("{}", dot ? store.tree().render_dot() : store.tree().render());
  return 0;
}

int cmd_gc(const Config& cfg, bool detach) {
  if (detach) {
    // The child holds the storage lock; killing it releases the flock and
    // cannot corrupt the store (index swaps are atomic, git steps idempotent).
    pid_t pid = fork();
    if (pid < 0) throw InternalError("fork failed");
    if (pid > 0) {
      fmt::print("compaction detached (pid {})\n", pid);
      return 0;
    }
    setsid();
    fs::path log = fs::path(cfg.storage_dir) / "gc.log";
    int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    if (fd >= 0) {
      ::dup2(fd, STDOUT_FILENO);
      ::dup2(fd, STDERR_FILENO);
      ::close(fd);
    }
  }
  Store store = open_store(cfg, LockMode::Exclusive);
  CompactReport r = store.compact();
  fmt::print("compacted: {} -> {} bytes ({} nodes, {} large files removed) in {:.2f}s\n",
             r.bytes_before, r.bytes_after, r.nodes_removed, r.oob_removed, r.seconds);
  if (detach) _exit(0);
  return 0;
}

int cmd_delete(const Config& cfg, const std::string& name) {
  Store store = open_store(cfg, LockMode::Exclusive);
  store.delete_image(sanitize_image_name(name));
  fmt::print("deleted image {} (cached states remain until gc)\n", name);
  return 0;
}

int cmd_reset(const Config& cfg, bool yes) {
  if (!fs::exists(cfg.storage_dir)) {
    fmt::print("nothing at {}\n", cfg.storage_dir.string());
    return 0;
  }
  if (!yes) {
    fmt::print("this deletes {} and every cached image state. Proceed? [y/N] ",
               cfg.storage_dir.string());
    std::string answer;
    std::getline(std::cin, answer);
    if (answer != "y" && answer != "Y" && answer != "yes") {
      fmt::print("aborted\n");
      return 1;
    }
  }
  { Store::open(cfg.storage_dir, LockMode::Exclusive); }  // wait for any running op
  fs::remove_all(cfg.storage_dir);
  fmt::print("removed {}\n", cfg.storage_dir.string());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flatcache: layer-free container image builder with a Git-backed build cache"};
  app.require_subcommand(1);

  ConfigOverrides ov;
  std::string storage_flag, platform_flag, registry_flag, config_flag;
  int64_t cache_large_flag = -1;
  app.add_option("--storage", storage_flag,
                 "storage directory (env FLATCACHE_STORAGE, default ~/.flatcache)");
  app.add_option("--cache-large", cache_large_flag,
                 "out-of-band threshold in MiB; files strictly larger are kept outside Git "
                 "(0 disables, default 4)");
  app.add_option("--platform", platform_flag, "platform for multi-platform images (linux/amd64)");
  app.add_option("--registry", registry_flag, "base URL of an anonymous registry (http only)");
  app.add_option("--config", config_flag, "config file (env FLATCACHE_CONFIG)");

  // build
  auto* build = app.add_subcommand("build", "build an image from a recipe");
  std::string b_name, b_file, b_context = ".", b_layout;
  bool b_rebuild = false, b_no_cache = false;
  std::vector<std::string> b_args;
  build->add_option("-t,--name", b_name, "image name")->required();
  build->add_option("-f,--file", b_file, "recipe file (default <context>/Dockerfile)");
  build->add_flag("--rebuild", b_rebuild, "re-execute all instructions after FROM");
  build->add_flag("--no-cache", b_no_cache, "disable the cache entirely (base resolution aside)");
  build->add_option("--build-arg", b_args, "ARG override NAME=value")->take_all();
  build->add_option("--from-layout", b_layout, "OCI image layout to resolve FROM against");
  build->add_option("context", b_context, "build context directory")->required();

  // pull
  auto* pull = app.add_subcommand("pull", "pull a base image into the cache");
  std::string p_ref, p_layout;
  pull->add_option("ref", p_ref, "image reference, e.g. alpine:3.17")->required();
  pull->add_option("--from-layout", p_layout, "OCI image layout directory to pull from");

  // import
  auto* import_ = app.add_subcommand("import", "import a flat tarball as a base image");
  std::string i_tar, i_name;
  import_->add_option("tarball", i_tar, "tar (optionally gzipped) of an image root")->required();
  import_->add_option("-t,--name", i_name, "image name")->required();

  auto* list = app.add_subcommand("list", "list image names");
  auto* tree = app.add_subcommand("tree", "print the cache tree");
  bool t_dot = false;
  tree->add_flag("--dot", t_dot, "emit a DOT graph instead of text");

  auto* gc = app.add_subcommand("gc", "compact the cache: drop unreachable states, repack");
  bool g_detach = false;
  gc->add_flag("--detach", g_detach, "run compaction in the background (killable)");

  auto* del = app.add_subcommand("delete", "remove an image name (states remain until gc)");
  std::string d_name;
  del->add_option("name", d_name)->required();

  auto* reset = app.add_subcommand("reset", "destroy the whole storage directory");
  bool r_yes = false;
  reset->add_flag("--yes", r_yes, "skip the confirmation prompt");

  // global flags (--storage, --cache-large, ...) are accepted after the
  // subcommand as well
  for (auto* sub : app.get_subcommands({})) sub->fallthrough(true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (!storage_flag.empty()) ov.storage = storage_flag;
    if (!platform_flag.empty()) ov.platform = platform_flag;
    if (!registry_flag.empty()) ov.registry = registry_flag;
    if (!config_flag.empty()) ov.config_file = config_flag;
    if (cache_large_flag >= 0) ov.cache_large_mib = static_cast<uint64_t>(cache_large_flag);
    Config cfg = load_config(ov);

    if (*build) {
      return cmd_build(cfg, b_name, b_file, b_context, b_rebuild, b_no_cache, b_args, b_layout);
    }
    if (*pull) return cmd_pull(cfg, p_ref, p_layout);
    if (*import_) return cmd_import(cfg, i_tar, i_name);
    if (*list) return cmd_list(cfg);
    if (*tree) return cmd_tree(cfg, t_dot);
    if (*gc) return cmd_gc(cfg, g_detach);
    if (*del) return cmd_delete(cfg, d_name);
    if (*reset) return cmd_reset(cfg, r_yes);
    return 1;
  } catch (const UserError& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "internal error: {}\n", e.what());
    return 2;
  }
}
