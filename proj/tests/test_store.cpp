#include <doctest.h>

#include <sys/socket.h>
#include <sys/stat.h>
#include <sys/un.h>
#include <unistd.h>

#include <random>

#include "flatcache/errors.hpp"
#include "flatcache/store.hpp"
#include "flatcache/util.hpp"
#include "test_support.hpp"

using namespace flatcache;
using namespace fctest;
namespace fs = std::filesystem;

namespace {

// commit the current worktree of `image` as a child of `parent`
const CacheNode& commit_as_node(Store& store, const std::string& image, const std::string& text,
                                uint64_t parent, std::optional<uint64_t> threshold = std::nullopt,
                                CommitStats* stats_out = nullptr) {
  CommitResult res = store.commit_state(image, text, threshold);
  if (stats_out) *stats_out = res.stats;
  return store.add_node(parent, state_id(store.tree().at(parent).state_id,
                                         {DigestKind::Instr, text, ""}),
                        text, res.commit_sha);
}

std::vector<std::string> git_tree_paths(Store& store, const CacheNode& node) {
  std::string out = store.git().run({"ls-tree", "-r", "--name-only", node.commit_ref});
  std::vector<std::string> paths;
  for (auto& l : split(out, '\n')) {
    if (!l.empty()) paths.push_back(l);
  }
  return paths;
}

}  // namespace

TEST_CASE("store: initialization") {
  TempDir tmp;
  fs::path storage = tmp.path / "storage";

  SUBCASE("fresh directory initializes to the empty tree") {
    Store store = Store::open(storage);
    CHECK(store.tree().render() == "4A6F [root]\nROOT\n");
    CHECK(fs::exists(storage / "bucache"));
    CHECK(fs::exists(storage / "img"));
    CHECK(fs::exists(storage / "dlcache"));
    CHECK(fs::exists(storage / "bularge"));
  }
  SUBCASE("re-opening is a no-op with the same root") {
    std::string sha1, sha2;
    {
      Store s = Store::open(storage);
      sha1 = s.tree().root().commit_ref;
    }
    {
      Store s = Store::open(storage);
      sha2 = s.tree().root().commit_ref;
    }
    CHECK(sha1 == sha2);
  }
  SUBCASE("a file in the way is an error") {
    write_file(tmp.path / "afile", "x");
    CHECK_THROWS_AS(Store::open(tmp.path / "afile"), UserError);
  }
  SUBCASE("foreign directories are refused with guidance") {
    fs::create_directories(tmp.path / "foreign");
    write_file(tmp.path / "foreign" / "something.txt", "hi");
    try {
      Store::open(tmp.path / "foreign");
      FAIL("expected refusal");
    } catch (const UserError& e) {
      CHECK(std::string(e.what()).find("reset") != std::string::npos);
    }
  }
}

TEST_CASE("store: the lock is exclusive and names the holder") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  try {
    Store::open(tmp.path / "s", LockMode::Exclusive, 200);
    FAIL("second open should time out");
  } catch (const UserError& e) {
    CHECK(std::string(e.what()).find("PID") != std::string::npos);
  }
}

TEST_CASE("store: hard-link groups commit as one file") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  fs::path wt = store.checkout_state(0, "img1");

  write_file(wt / "one", "shared-content");
  REQUIRE(::link((wt / "one").c_str(), (wt / "two").c_str()) == 0);

  const CacheNode& node = commit_as_node(store, "img1", "RUN make links", 0);

  auto paths = git_tree_paths(store, node);
  CHECK(std::count(paths.begin(), paths.end(), "one") == 1);
  CHECK(std::count(paths.begin(), paths.end(), "two") == 0);  // member deleted for Git

  MetadataManifest m = store.manifest_of(node);
  REQUIRE(m.hardlink_groups.size() == 1);
  CHECK(m.hardlink_groups[0].canonical == "one");
  CHECK(m.hardlink_groups[0].members == std::vector<std::string>{"two"});

  // step 4 restored the link: both names, one inode
  struct stat a{}, b{};
  REQUIRE(::lstat((wt / "one").c_str(), &a) == 0);
  REQUIRE(::lstat((wt / "two").c_str(), &b) == 0);
  CHECK(a.st_ino == b.st_ino);

  // and checkout reproduces it
  fs::path wt2 = store.checkout_state(node.seq, "img2");
  struct stat c{}, d{};
  REQUIRE(::lstat((wt2 / "one").c_str(), &c) == 0);
  REQUIRE(::lstat((wt2 / "two").c_str(), &d) == 0);
  CHECK(c.st_ino == d.st_ino);
  CHECK(read_file(wt2 / "two") == "shared-content");
}

TEST_CASE("store: .git names are renamed in Git and restored in worktrees") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  fs::path wt = store.checkout_state(0, "img1");

  write_file(wt / ".gitignore", "*.o\n");
  fs::create_directories(wt / "repo" / ".git");
  write_file(wt / "repo" / ".git" / "config", "[core]\n");

  const CacheNode& node = commit_as_node(store, "img1", "RUN add git stuff", 0);

  auto paths = git_tree_paths(store, node);
  CHECK(std::count(paths.begin(), paths.end(), ".weirdal_ignore") == 1);
  CHECK(std::count(paths.begin(), paths.end(), ".gitignore") == 0);
  CHECK(std::count(paths.begin(), paths.end(), "repo/.weirdal_/config") == 1);

  CHECK(read_file(wt / ".gitignore") == "*.o\n");  // step 4 restored the names
  CHECK(fs::exists(wt / "repo" / ".git" / "config"));
  CHECK(!fs::exists(wt / ".weirdal_ignore"));

  fs::path wt2 = store.checkout_state(node.seq, "img2");
  CHECK(read_file(wt2 / ".gitignore") == "*.o\n");
  CHECK(read_file(wt2 / "repo" / ".git" / "config") == "[core]\n");
  CHECK(!fs::exists(wt2 / ".weirdal_ignore"));

  SUBCASE("pre-existing .weirdal_ names are a commit error") {
    write_file(wt / ".weirdal_boom", "x");
    CHECK_THROWS_AS(commit_as_node(store, "img1", "RUN boom", node.seq), UserError);
  }
}

TEST_CASE("store: empty dirs and FIFOs skip Git but survive the round trip") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  fs::path wt = store.checkout_state(0, "img1");

  fs::create_directories(wt / "a");
  REQUIRE(::mkfifo((wt / "pipe").c_str(), 0640) == 0);
  set_mtime_ns(wt / "a", 1357924680000000000);

  const CacheNode& node = commit_as_node(store, "img1", "RUN mkdir a; mkfifo pipe", 0);

  auto paths = git_tree_paths(store, node);
  for (auto& p : paths) {
    CHECK(p.find("a/") != 0);
    CHECK(p != "a");
    CHECK(p != "pipe");
  }
  MetadataManifest m = store.manifest_of(node);
  CHECK(m.empty_dirs == std::vector<std::string>{"a"});
  CHECK(m.fifos == std::vector<std::string>{"pipe"});

  // both present after step 4 and after a fresh checkout
  CHECK(fs::is_directory(wt / "a"));
  CHECK(mtime_ns(wt / "a") == 1357924680000000000);
  struct stat sb{};
  REQUIRE(::lstat((wt / "pipe").c_str(), &sb) == 0);
  CHECK(S_ISFIFO(sb.st_mode));
  CHECK((sb.st_mode & 07777) == 0640);

  fs::path wt2 = store.checkout_state(node.seq, "img2");
  CHECK(fs::is_directory(wt2 / "a"));
  CHECK(mtime_ns(wt2 / "a") == 1357924680000000000);
  REQUIRE(::lstat((wt2 / "pipe").c_str(), &sb) == 0);
  CHECK(S_ISFIFO(sb.st_mode));
}

TEST_CASE("store: after step 4 the worktree equals its pre-commit state") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  fs::path wt = store.checkout_state(0, "img1");

  std::mt19937 rng(99);
  TreeSpec spec = random_tree(rng, 25);
  materialize(spec, wt);
  commit_as_node(store, "img1", "RUN generate", 0);
  CHECK(compare_tree(spec, wt) == "");
}

TEST_CASE("store: commit/checkout round trip over randomized trees") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  std::mt19937 rng(4242);
  uint64_t parent = 0;
  for (int iter = 0; iter < 12; ++iter) {
    fs::path wt = store.checkout_state(0, "gen");
    TreeSpec spec = random_tree(rng, 8 + static_cast<int>(rng() % 30));
    materialize(spec, wt);
    const CacheNode& node =
        commit_as_node(store, "gen", fmt::format("RUN generation {}", iter), parent);
    parent = node.seq;
    fs::path out = store.checkout_state(node.seq, "check");
    std::string diff = compare_tree(spec, out);
    INFO("iteration ", iter, ": ", diff);
    CHECK(diff == "");
  }
}

TEST_CASE("store: sockets are rejected and the worktree is restored") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  fs::path wt = store.checkout_state(0, "img1");

  write_file(wt / ".gitignore", "keep\n");
  REQUIRE(::mkfifo((wt / "pipe").c_str(), 0600) == 0);
  int sock = ::socket(AF_UNIX, SOCK_STREAM, 0);
  REQUIRE(sock >= 0);
  struct sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  std::string sock_path = (wt / "zz.sock").string();
  std::strncpy(addr.sun_path, sock_path.c_str(), sizeof(addr.sun_path) - 1);
  REQUIRE(::bind(sock, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  ::close(sock);

  try {
    store.commit_state("img1", "RUN bad", std::nullopt);
    FAIL("socket should be rejected");
  } catch (const UserError& e) {
    CHECK(std::string(e.what()).find("zz.sock") != std::string::npos);
  }
  // prep steps were undone: the rename is back, the fifo restored
  CHECK(fs::exists(wt / ".gitignore"));
  CHECK(!fs::exists(wt / ".weirdal_ignore"));
  struct stat sb{};
  REQUIRE(::lstat((wt / "pipe").c_str(), &sb) == 0);
  CHECK(S_ISFIFO(sb.st_mode));
}

TEST_CASE("store: metadata-only commits touch only the ch files") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  fs::path wt = store.checkout_state(0, "img1");

  write_file(wt / "payload", "data");
  const CacheNode& run_node = commit_as_node(store, "img1", "RUN payload", 0);

  write_file(wt / "ch" / "environment", "A=1\n");
  CommitResult meta = store.commit_metadata_only("img1", "ENV A=1");
  std::string changed = trim(store.git().run(
      {"diff", "--name-only", run_node.commit_ref, meta.commit_sha}));
  CHECK(changed == "ch/environment");
}

TEST_CASE("store: identical files in sibling states are stored once") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");

  std::string content(1 << 20, 'q');
  fs::path wt = store.checkout_state(0, "b1");
  write_file(wt / "big", content);
  const CacheNode& n1 = commit_as_node(store, "b1", "RUN b1", 0);

  wt = store.checkout_state(0, "b2");
  write_file(wt / "big", content);
  const CacheNode& n2 = commit_as_node(store, "b2", "RUN b2", 0);

  auto blob_of = [&](const CacheNode& n) {
    for (auto& line : split(store.git().run({"ls-tree", "-r", n.commit_ref}), '\n')) {
      if (line.ends_with("\tbig")) return line.substr(12, 40);
    }
    return std::string();
  };
  std::string b1 = blob_of(n1), b2 = blob_of(n2);
  REQUIRE(b1.size() == 40);
  CHECK(b1 == b2);  // content addressing: one blob for both branches
}

TEST_CASE("store: unknown manifest versions are rejected") {
  CHECK_THROWS_AS(MetadataManifest::parse("flatcache-meta 99\n"), InternalError);
  CHECK_THROWS_AS(MetadataManifest::parse("something else\n"), InternalError);
  MetadataManifest m;
  m.files.push_back({"a b/c d", 'f', 0644, 123});
  m.renames.push_back({".weirdal_x", ".gitx"});
  MetadataManifest back = MetadataManifest::parse(m.serialize());
  CHECK(back.files[0].path == "a b/c d");  // escaping round-trips
  CHECK(back.renames[0].logical == ".gitx");
}

TEST_CASE("store: compaction of a fresh store is a no-op with a real report") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");
  CompactReport r = store.compact();
  CHECK(r.nodes_removed == 0);
  CHECK(r.oob_removed == 0);
  CHECK(r.bytes_before > 0);
  CHECK(r.bytes_after > 0);
  CHECK(r.seconds > 0);
  CHECK(store.tree().render() == "4A6F [root]\nROOT\n");
}

TEST_CASE("store: compaction drops unreachable nodes and their refs") {
  TempDir tmp;
  Store store = Store::open(tmp.path / "s");

  fs::path wt = store.checkout_state(0, "keep");
  write_file(wt / "k", "keep");
  const CacheNode& keep = commit_as_node(store, "keep", "RUN keep", 0);
  store.move_label("keep", keep.seq);

  wt = store.checkout_state(0, "drop");
  write_file(wt / "d", "drop");
  const CacheNode& drop = commit_as_node(store, "drop", "RUN drop", 0);
  uint64_t drop_seq = drop.seq;
  store.move_label("drop", drop_seq);
  // image deleted: branch gone, nodes remain until compaction
  store.delete_image("drop");
  CHECK(store.tree().find(drop_seq));

  CompactReport report = store.compact();
  CHECK(report.nodes_removed == 1);
  CHECK(!store.tree().find(drop_seq));
  CHECK(store.tree().find(keep.seq));
  RunResult ref = store.git().try_run(
      {"show-ref", "--verify", fmt::format("refs/bu/nodes/{}", drop_seq)});
  CHECK(!ref.ok());

  // the kept image still checks out fine
  fs::path out = store.checkout_state(keep.seq, "keep");
  CHECK(read_file(out / "k") == "keep");
}
