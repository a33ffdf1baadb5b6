#include "flatcache/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <map>
#include <set>
#include <thread>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/recipe.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

namespace fs = std::filesystem;

void CommitStats::accumulate(const CommitStats& o) {
  in_band_files += o.in_band_files;
  in_band_bytes += o.in_band_bytes;
  max_in_band_file = std::max(max_in_band_file, o.max_in_band_file);
  oob_files += o.oob_files;
  oob_bytes += o.oob_bytes;
}

// ---------------------------------------------------------------------------
// locking

StorageLock::StorageLock(const fs::path& storage, LockMode mode, int timeout_ms) {
  fs::create_directories(storage);
  fs::path lock_path = storage / "lock";
  fd_ = ::open(lock_path.c_str(), O_RDWR | O_CREAT, 0644);
  if (fd_ < 0) throw InternalError(fmt::format("cannot open lock file {}", lock_path.string()));
  int op = (mode == LockMode::Exclusive ? LOCK_EX : LOCK_SH) | LOCK_NB;
  auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
  while (::flock(fd_, op) != 0) {
    if (errno != EWOULDBLOCK && errno != EINTR) {
      ::close(fd_);
      throw InternalError("flock failed");
    }
    if (std::chrono::steady_clock::now() >= deadline) {
      char buf[32] = {0};
      ssize_t n = ::pread(fd_, buf, sizeof(buf) - 1, 0);
      ::close(fd_);
      fd_ = -1;
      throw UserError(fmt::format("storage directory {} is locked{}", storage.string(),
                                  n > 0 ? fmt::format(" by PID {}", trim(buf)) : std::string()));
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  if (mode == LockMode::Exclusive) {
    std::string pid = fmt::format("{}\n", ::getpid());
    if (::ftruncate(fd_, 0) == 0) {
      ssize_t unused = ::pwrite(fd_, pid.data(), pid.size(), 0);
      (void)unused;
    }
  }
}

StorageLock::~StorageLock() {
  if (fd_ >= 0) ::close(fd_);
}

// ---------------------------------------------------------------------------
// open / init

bool Store::looks_like_store(const fs::path& storage_dir) {
  return fs::exists(storage_dir / "bucache" / "HEAD") &&
         fs::exists(storage_dir / "bucache" / "flatcache-index");
}

void Store::sweep_stale_git_locks(const fs::path& bucache) {
  // Under the exclusive storage lock no other process can be operating here,
  // so any git lock file is a leftover from a killed process.
  auto sweep_dir = [](const fs::path& dir, bool recursive) {
    if (!fs::exists(dir)) return;
    std::error_code ec;
    if (recursive) {
      for (auto it = fs::recursive_directory_iterator(dir, ec);
           it != fs::recursive_directory_iterator(); it.increment(ec)) {
        if (ec) break;
        if (it->path().extension() == ".lock") fs::remove(it->path(), ec);
      }
    } else {
      for (auto& e : fs::directory_iterator(dir, ec)) {
        if (e.path().extension() == ".lock") fs::remove(e.path(), ec);
      }
    }
  };
  sweep_dir(bucache, false);
  sweep_dir(bucache / "refs", true);
  sweep_dir(bucache / "worktrees", true);
  sweep_dir(bucache / "objects" / "info", false);
  std::error_code ec;
  fs::remove(bucache / "gc.pid", ec);
}

void Store::init_layout(const fs::path& storage) {
  fs::create_directories(storage / "img");
  fs::create_directories(storage / "dlcache");
  fs::create_directories(storage / "bularge");

  fs::path bucache = storage / "bucache";
  RunResult init = run_command({"git", "init", "--bare", "--quiet", "-b", "main", bucache.string()});
  if (!init.ok()) throw InternalError(fmt::format("git init failed:\n{}", init.output));

  GitRunner g(bucache);
  g.run({"config", "user.name", "flatcache"});
  g.run({"config", "user.email", "flatcache@localhost"});
  g.run({"config", "commit.gpgsign", "false"});
  g.run({"config", "gc.auto", "0"});
  g.run({"config", "core.logAllRefUpdates", "false"});
  g.run({"config", "core.excludesFile", "/dev/null"});

  // Root commit: the empty image skeleton (ch/environment, ch/workdir) plus
  // its metadata manifest, built with plumbing so no worktree is needed.
  MetadataManifest meta;
  meta.files.push_back({"ch", 'd', 0755, 0});
  meta.files.push_back({"ch/environment", 'f', 0644, 0});
  meta.files.push_back({"ch/workdir", 'f', 0644, 0});

  auto hash_blob = [&](const std::string& content) {
    RunOptions opts;
    opts.stdin_data = content;
    RunResult r = run_command({"git", "-C", bucache.string(), "hash-object", "-w", "--stdin"}, opts);
    if (!r.ok()) throw InternalError(fmt::format("git hash-object failed:\n{}", r.output));
    return trim(r.output);
  };
  auto mktree = [&](const std::string& listing) {
    RunOptions opts;
    opts.stdin_data = listing;
    RunResult r = run_command({"git", "-C", bucache.string(), "mktree"}, opts);
    if (!r.ok()) throw InternalError(fmt::format("git mktree failed:\n{}", r.output));
    return trim(r.output);
  };

  std::string env_blob = hash_blob("");
  std::string wd_blob = hash_blob("/\n");
  std::string meta_blob = hash_blob(meta.serialize());
  std::string ch_tree = mktree(fmt::format("100644 blob {}\tenvironment\n100644 blob {}\tgit-meta\n100644 blob {}\tworkdir\n",
                                           env_blob, meta_blob, wd_blob));
  std::string root_tree = mktree(fmt::format("040000 tree {}\tch\n", ch_tree));

  RunOptions commit_opts;
  commit_opts.extra_env = {{"GIT_AUTHOR_DATE", "2000-01-01T00:00:00 +0000"},
                           {"GIT_COMMITTER_DATE", "2000-01-01T00:00:00 +0000"}};
  RunResult ct = run_command({"git", "-C", bucache.string(), "commit-tree", root_tree, "-m", "ROOT"},
                             commit_opts);
  if (!ct.ok()) throw InternalError(fmt::format("git commit-tree failed:\n{}", ct.output));
  std::string root_sha = trim(ct.output);

  g.run({"update-ref", "refs/heads/root", root_sha});
  g.run({"update-ref", "refs/bu/nodes/0", root_sha});

  CacheTree tree = CacheTree::with_root(root_sha);
  tree.move_label("root", 0);
  write_file_atomic(bucache / "flatcache-index", tree.serialize());
}

Store::Store(fs::path storage, StorageLock lock, CacheTree tree, bool exclusive)
    : storage_(std::move(storage)),
      lock_(std::move(lock)),
      tree_(std::move(tree)),
      exclusive_(exclusive),
      oob_(storage_ / "bularge") {}

Store Store::open(const fs::path& storage_dir, LockMode mode, int lock_timeout_ms) {
  fs::path dir = storage_dir.lexically_normal();
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw UserError(fmt::format("{} exists and is not a directory", dir.string()));
  }
  if (fs::exists(dir) && !fs::exists(dir / "bucache")) {
    // refuse to adopt a directory that has foreign content
    for (auto& e : fs::directory_iterator(dir)) {
      std::string name = e.path().filename().string();
      if (name != "lock" && name != "gc.log" && name != "img" && name != "dlcache" &&
          name != "bularge") {
        throw UserError(fmt::format(
            "{} exists but is not a flatcache storage directory; choose another path or run "
            "'flatcache reset' after pointing --storage at it",
            dir.string()));
      }
    }
  }

  if (!looks_like_store(dir)) {
    // initialization mutates, so take the exclusive lock for it even when the
    // caller only wants to read; re-check under the lock to serialize racers
    StorageLock init_lock(dir, LockMode::Exclusive, lock_timeout_ms);
    if (!looks_like_store(dir)) {
      if (fs::exists(dir / "bucache")) {
        throw UserError(fmt::format(
            "{} contains a damaged or foreign cache; run 'flatcache reset' to start over",
            dir.string()));
      }
      init_layout(dir);
    }
  }

  StorageLock lock(dir, mode, lock_timeout_ms);
  if (mode == LockMode::Exclusive) sweep_stale_git_locks(dir / "bucache");

  CacheTree tree = CacheTree::parse(read_file(dir / "bucache" / "flatcache-index"));
  return Store(dir, std::move(lock), std::move(tree), mode == LockMode::Exclusive);
}

void Store::save_tree() { write_file_atomic(index_path(), tree_.serialize()); }

fs::path Store::worktree_path(const std::string& image) const { return img_dir() / image; }

const CacheNode& Store::add_node(uint64_t parent_seq, const StateId& id, const std::string& text,
                                 const std::string& commit_sha, bool rebuild) {
  const CacheNode& node = tree_.add_node(parent_seq, id, text, commit_sha, rebuild);
  git().run({"update-ref", fmt::format("refs/bu/nodes/{}", node.seq), commit_sha});
  save_tree();
  return node;
}

void Store::move_label(const std::string& name, uint64_t seq) {
  tree_.move_label(name, seq);
  git().run({"branch", "-f", name, tree_.at(seq).commit_ref});
  save_tree();
}

// ---------------------------------------------------------------------------
// manifest application (checkout, and restore after commit)

static int path_depth(const std::string& p) {
  return static_cast<int>(std::count(p.begin(), p.end(), '/'));
}

void apply_manifest(const fs::path& wt, const MetadataManifest& m, const OobStore& oob,
                    bool full_metadata_pass) {
  // 1. undo .git* renames, deepest first so ancestors stay valid
  auto renames = m.renames;
  std::sort(renames.begin(), renames.end(), [](const RenameRecord& a, const RenameRecord& b) {
    return path_depth(a.stored) > path_depth(b.stored);
  });
  for (auto& r : renames) {
    fs::path from = wt / r.stored;
    if (!fs::exists(fs::symlink_status(from))) continue;  // entry never materialized (fifo, OOB, ...)
    fs::path to = from.parent_path() / fs::path(r.logical).filename();
    if (::rename(from.c_str(), to.c_str()) != 0) {
      throw InternalError(fmt::format("cannot restore name {} -> {}", from.string(), to.string()));
    }
  }
  // 2. empty directories
  for (auto& d : m.empty_dirs) fs::create_directories(wt / d);
  // 3. named pipes
  for (auto& p : m.fifos) {
    fs::path path = wt / p;
    if (fs::exists(fs::symlink_status(path))) continue;
    fs::create_directories(path.parent_path());
    if (::mkfifo(path.c_str(), 0600) != 0) {
      throw InternalError(fmt::format("mkfifo failed for {}", path.string()));
    }
  }
  // 4. out-of-band large files (hard links into bularge)
  for (auto& l : m.large_files) {
    fs::path dest = wt / l.path;
    fs::create_directories(dest.parent_path());
    oob.restore(l.key, dest);
  }
  // 5. hard-link groups (canonical member is already in place)
  for (auto& g : m.hardlink_groups) {
    fs::path canonical = wt / g.canonical;
    for (auto& member : g.members) {
      fs::path dest = wt / member;
      std::error_code ec;
      fs::remove(dest, ec);
      fs::create_directories(dest.parent_path());
      if (::link(canonical.c_str(), dest.c_str()) != 0) {
        throw InternalError(fmt::format("cannot hard-link {} -> {}: {}", canonical.string(),
                                        dest.string(), std::strerror(errno)));
      }
    }
  }
  // 6. modes and mtimes; children before parents so directory mtimes end
  // correct, write-bit-stripped OOB paths left alone
  std::set<std::string> oob_paths;
  for (auto& l : m.large_files) oob_paths.insert(l.path);
  auto records = m.files;
  std::sort(records.begin(), records.end(),
            [](const FileRecord& a, const FileRecord& b) { return a.path > b.path; });
  for (auto& rec : records) {
    if (!full_metadata_pass && rec.ftype != 'd' && rec.ftype != 'p') continue;
    fs::path p = wt / rec.path;
    if (rec.ftype != 'l' && !oob_paths.count(rec.path)) {
      if (::chmod(p.c_str(), rec.mode) != 0) {
        throw InternalError(fmt::format("chmod failed for {}", p.string()));
      }
    }
    set_mtime_ns(p, rec.mtime_ns);
  }
}

// ---------------------------------------------------------------------------
// commit

namespace {

struct ScanState {
  fs::path root;
  std::optional<uint64_t> threshold;
  OobStore* oob = nullptr;
  MetadataManifest m;
  CommitStats stats;
  std::map<std::pair<dev_t, ino_t>, std::string> inode_first;
  std::map<std::string, size_t> group_index;  // canonical -> index in m.hardlink_groups
};

void scan_dir(ScanState& st, const fs::path& abs_dir, const std::string& logical_rel,
              const std::string& stored_rel, int depth) {
  std::vector<std::string> names;
  for (auto& e : fs::directory_iterator(abs_dir)) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());

  for (auto& name : names) {
    if (depth == 0 && name == ".git") continue;  // the worktree pointer, not image content
    std::string logical = logical_rel.empty() ? name : logical_rel + "/" + name;
    if (logical == kManifestRelPath) continue;  // regenerated every commit
    if (name.starts_with(".weirdal_")) {
      throw UserError(fmt::format("path collides with the .git rename prefix: {}", logical));
    }

    std::string actual_name = name;
    if (name.starts_with(".git")) {
      actual_name = ".weirdal_" + name.substr(4);
      fs::path from = abs_dir / name;
      fs::path to = abs_dir / actual_name;
      if (fs::exists(fs::symlink_status(to))) {
        throw UserError(fmt::format("rename collision committing {}: {} already exists", logical,
                                    actual_name));
      }
      if (::rename(from.c_str(), to.c_str()) != 0) {
        throw InternalError(fmt::format("cannot rename {} for commit", from.string()));
      }
      st.m.renames.push_back(
          {stored_rel.empty() ? actual_name : stored_rel + "/" + actual_name, logical});
    }
    fs::path abs = abs_dir / actual_name;
    std::string stored = stored_rel.empty() ? actual_name : stored_rel + "/" + actual_name;

    struct stat sb{};
    if (::lstat(abs.c_str(), &sb) != 0) {
      throw InternalError(fmt::format("file vanished during commit: {}", logical));
    }
    uint32_t mode = sb.st_mode & 07777;
    int64_t mtime = static_cast<int64_t>(sb.st_mtim.tv_sec) * 1000000000 + sb.st_mtim.tv_nsec;

    if (S_ISDIR(sb.st_mode)) {
      st.m.files.push_back({logical, 'd', mode, mtime});
      scan_dir(st, abs, logical, stored, depth + 1);
      if (fs::directory_iterator(abs) == fs::directory_iterator()) {
        st.m.empty_dirs.push_back(logical);
        fs::remove(abs);
      }
    } else if (S_ISLNK(sb.st_mode)) {
      st.m.files.push_back({logical, 'l', mode, mtime});
    } else if (S_ISFIFO(sb.st_mode)) {
      st.m.files.push_back({logical, 'p', mode, mtime});
      st.m.fifos.push_back(logical);
      fs::remove(abs);
    } else if (S_ISREG(sb.st_mode)) {
      if (sb.st_nlink > 1) {
        auto key = std::make_pair(sb.st_dev, sb.st_ino);
        auto it = st.inode_first.find(key);
        if (it != st.inode_first.end()) {
          // later link of a group: keep the first-encountered member only
          auto gi = st.group_index.find(it->second);
          if (gi == st.group_index.end()) {
            st.group_index[it->second] = st.m.hardlink_groups.size();
            st.m.hardlink_groups.push_back({it->second, {}});
            gi = st.group_index.find(it->second);
          }
          st.m.hardlink_groups[gi->second].members.push_back(logical);
          st.m.files.push_back({logical, 'f', mode, mtime});
          fs::remove(abs);
          continue;
        }
        st.inode_first[key] = logical;
      }
      uint64_t size = static_cast<uint64_t>(sb.st_size);
      if (st.threshold && size > *st.threshold) {
        uint32_t smode = oob_stored_mode(mode);
        std::string key = oob_key({mtime, smode, size, logical});
        if (st.oob->contains(key)) {
          fs::remove(abs);  // stored copy is canonical
        } else {
          st.oob->stash(abs, key);
        }
        st.m.large_files.push_back({logical, key});
        st.m.files.push_back({logical, 'f', smode, mtime});
        st.stats.oob_files += 1;
        st.stats.oob_bytes += size;
      } else {
        st.m.files.push_back({logical, 'f', mode, mtime});
        st.stats.in_band_files += 1;
        st.stats.in_band_bytes += size;
        st.stats.max_in_band_file = std::max(st.stats.max_in_band_file, size);
      }
    } else {
      throw UserError(
          fmt::format("unsupported file type (socket or device node) at {}", logical));
    }
  }
}

}  // namespace

CommitResult Store::commit_state(const std::string& image, const std::string& message,
                                 std::optional<uint64_t> oob_threshold_bytes) {
  fs::path wt = worktree_path(image);
  if (!fs::exists(wt / ".git")) {
    throw InternalError(fmt::format("no worktree for image {}", image));
  }

  ScanState st;
  st.root = wt;
  st.threshold = oob_threshold_bytes;
  st.oob = &oob_;
  try {
    scan_dir(st, wt, "", "", 0);
  } catch (...) {
    apply_manifest(wt, st.m, oob_, false);
    throw;
  }

  fs::create_directories(wt / "ch");
  write_file(wt / kManifestRelPath, st.m.serialize());

  std::string sha;
  try {
    GitRunner wg = wt_git(image);
    wg.run({"add", "-A"});
    wg.run({"commit", "-q", "--allow-empty", "-m", message});
    sha = wg.capture({"rev-parse", "HEAD"});
  } catch (...) {
    apply_manifest(wt, st.m, oob_, false);
    throw;
  }

  apply_manifest(wt, st.m, oob_, false);
  return {sha, st.stats};
}

CommitResult Store::commit_metadata_only(const std::string& image, const std::string& message) {
  GitRunner wg = wt_git(image);
  wg.run({"add", "-A", "--", "ch"});
  wg.run({"commit", "-q", "--allow-empty", "-m", message});
  return {wg.capture({"rev-parse", "HEAD"}), {}};
}

// ---------------------------------------------------------------------------
// checkout

fs::path Store::checkout_state(uint64_t node_seq, const std::string& image) {
  const CacheNode& node = tree_.at(node_seq);
  fs::path wt = worktree_path(image);
  if (!fs::exists(wt / ".git")) {
    if (fs::exists(wt)) fs::remove_all(wt);
    git().try_run({"worktree", "prune"});
    git().run({"worktree", "add", "--force", "--force", "--detach", wt.string(), node.commit_ref});
  } else {
    wt_git(image).run({"checkout", "-qf", "--detach", node.commit_ref});
  }
  wt_git(image).run({"clean", "-qfdx"});
  // git clean leaves FIFOs and sockets behind; the target state's own FIFOs
  // come back from the manifest below
  for (auto it = fs::recursive_directory_iterator(wt); it != fs::recursive_directory_iterator();
       ++it) {
    if (it->path().filename() == ".git" && it->path().parent_path() == wt) continue;
    auto st = fs::symlink_status(it->path());
    if (fs::is_fifo(st) || fs::is_socket(st) || fs::is_character_file(st) || fs::is_block_file(st)) {
      fs::remove(it->path());
    }
  }
  MetadataManifest m = MetadataManifest::parse(read_file(wt / kManifestRelPath));
  apply_manifest(wt, m, oob_, true);
  return wt;
}

// ---------------------------------------------------------------------------
// deletion / compaction

void Store::delete_image(const std::string& name) {
  fs::path wt = worktree_path(name);
  if (fs::exists(wt / ".git")) {
    git().try_run({"worktree", "remove", "--force", "--force", wt.string()});
  }
  if (fs::exists(wt)) fs::remove_all(wt);
  git().try_run({"worktree", "prune"});
  git().try_run({"branch", "-D", name});
  if (!tree_.remove_label(name)) {
    throw UserError(fmt::format("no image named {}", unsanitize_image_name(name)));
  }
  save_tree();
}

MetadataManifest Store::manifest_of(const CacheNode& node) const {
  std::string text = git().run({"cat-file", "blob", node.commit_ref + ":" + kManifestRelPath});
  return MetadataManifest::parse(text);
}

CompactReport Store::compact() {
  if (!exclusive_) throw InternalError("compaction requires the exclusive lock");
  auto t0 = std::chrono::steady_clock::now();
  CompactReport report;
  report.bytes_before = dir_bytes(bucache()) + dir_bytes(oob_.dir());

  std::set<uint64_t> keep = tree_.reachable();
  std::set<uint64_t> drop;
  for (uint64_t seq = 0; seq < tree_.next_seq(); ++seq) {
    if (tree_.find(seq) && !keep.count(seq)) drop.insert(seq);
  }

  // Index first (atomic swap); every later step is idempotent, so a kill at
  // any point leaves a consistent store.
  tree_.remove_nodes(drop);
  save_tree();
  report.nodes_removed = drop.size();

  for (uint64_t seq : drop) {
    git().try_run({"update-ref", "-d", fmt::format("refs/bu/nodes/{}", seq)});
  }
  // branches with no label left (deleted images, crashed operations)
  std::string heads = git().run({"for-each-ref", "refs/heads", "--format=%(refname:short)"});
  for (auto& branch : split(heads, '\n')) {
    if (!branch.empty() && !tree_.labels().count(branch)) {
      git().try_run({"branch", "-D", branch});
    }
  }
  git().try_run({"worktree", "prune"});
  git().run({"gc", "--quiet", "--prune=now"});

  std::set<std::string> live_keys;
  for (uint64_t seq : tree_.reachable()) {
    for (auto& l : manifest_of(tree_.at(seq)).large_files) live_keys.insert(l.key);
  }
  report.oob_removed = oob_.gc(live_keys);

  report.bytes_after = dir_bytes(bucache()) + dir_bytes(oob_.dir());
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace flatcache
