#include "flatcache/builder.hpp"

#include <sys/stat.h>

#include <algorithm>
#include <chrono>
#include <cstdlib>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/hash.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// image metadata

ImageMetadata ImageMetadata::load(const fs::path& worktree) {
  ImageMetadata meta;
  fs::path env_file = worktree / "ch" / "environment";
  if (fs::exists(env_file)) {
    for (auto& line : split(read_file(env_file), '\n')) {
      if (line.empty()) continue;
      size_t eq = line.find('=');
      if (eq == std::string::npos) continue;
      meta.environment.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
  }
  fs::path wd_file = worktree / "ch" / "workdir";
  if (fs::exists(wd_file)) {
    std::string wd = trim(read_file(wd_file));
    if (!wd.empty()) meta.workdir = wd;
  }
  return meta;
}

void ImageMetadata::persist(const fs::path& worktree) const {
  fs::create_directories(worktree / "ch");
  std::string env_text;
  for (auto& [k, v] : environment) env_text += fmt::format("{}={}\n", k, v);
  fs::path env_file = worktree / "ch" / "environment";
  if (!fs::exists(env_file) || read_file(env_file) != env_text) write_file(env_file, env_text);
  std::string wd_text = workdir + "\n";
  fs::path wd_file = worktree / "ch" / "workdir";
  if (!fs::exists(wd_file) || read_file(wd_file) != wd_text) write_file(wd_file, wd_text);
}

void ImageMetadata::set_env(const std::string& name, const std::string& value) {
  for (auto& [k, v] : environment) {
    if (k == name) {
      v = value;
      return;
    }
  }
  environment.emplace_back(name, value);
}

// ---------------------------------------------------------------------------
// pull

uint64_t Builder::pull(const std::string& ref, ImageSource& source,
                       std::optional<uint64_t> threshold_bytes) {
  std::string manifest_raw = source.fetch_manifest(ref);
  StateId id = state_id(root_id(), {DigestKind::Pull, manifest_raw, ""});
  std::string name = sanitize_image_name(ref);
  std::string text = "PULL " + ref;

  if (const CacheNode* hit = store_.tree().find_hit(id, name, false)) {
    // registry image unchanged: the pull is aborted, no layer downloads
    store_.move_label(name, hit->seq);
    store_.checkout_state(hit->seq, name);
    return hit->seq;
  }

  OciManifest manifest = OciManifest::parse(manifest_raw);
  fs::path config_blob = source.fetch_blob(manifest.config_digest);
  std::vector<fs::path> layer_blobs;
  layer_blobs.reserve(manifest.layer_digests.size());
  for (auto& d : manifest.layer_digests) layer_blobs.push_back(source.fetch_blob(d));

  fs::path wt = store_.checkout_state(0, name);
  for (auto& blob : layer_blobs) apply_layer(blob, wt);

  ImageConfig config = ImageConfig::parse(read_file(config_blob));
  ImageMetadata meta;
  meta.environment = config.env;
  meta.workdir = config.workdir;
  meta.persist(wt);

  CommitResult commit = store_.commit_state(name, text, threshold_bytes);
  const CacheNode& node = store_.add_node(0, id, text, commit.commit_sha);
  store_.move_label(name, node.seq);
  return node.seq;
}

uint64_t Builder::import_tar(const fs::path& tarball, const std::string& image_name,
                             std::optional<uint64_t> threshold_bytes) {
  if (!fs::exists(tarball)) throw UserError(fmt::format("no such file: {}", tarball.string()));
  std::string payload = "import:sha256:" + sha256_hex_file(tarball);
  StateId id = state_id(root_id(), {DigestKind::Pull, payload, ""});
  std::string name = sanitize_image_name(image_name);
  std::string text = fmt::format("IMPORT {}", tarball.filename().string());

  if (const CacheNode* hit = store_.tree().find_hit(id, name, false)) {
    store_.move_label(name, hit->seq);
    store_.checkout_state(hit->seq, name);
    return hit->seq;
  }
  fs::path wt = store_.checkout_state(0, name);
  apply_layer(tarball, wt);
  CommitResult commit = store_.commit_state(name, text, threshold_bytes);
  const CacheNode& node = store_.add_node(0, id, text, commit.commit_sha);
  store_.move_label(name, node.seq);
  return node.seq;
}

// ---------------------------------------------------------------------------
// planning

uint64_t Builder::resolve_base(const std::vector<Instruction>& instructions,
                               const BuildOptions& opts) {
  if (instructions.empty() || instructions[0].kind != InstructionKind::From) {
    return 0;  // no FROM: build on the empty root image
  }
  const std::string& ref = instructions[0].from_ref;
  std::string name = sanitize_image_name(ref);
  auto& labels = store_.tree().labels();
  if (auto it = labels.find(name); it != labels.end()) {
    return it->second;  // cached base; freshness deliberately not re-checked
  }
  if (opts.base_source) {
    return pull(ref, *opts.base_source, opts.threshold_bytes);
  }
  throw UserError(fmt::format(
      "base image {} is not in the cache and no registry is configured; pull or import it first",
      ref));
}

Plan Builder::plan(const std::vector<Instruction>& instructions, uint64_t base_seq,
                   const std::string& image, const BuildOptions& opts) const {
  Plan out;
  out.last_hit_seq = base_seq;

  DigestContext ctx;
  ctx.excluded_vars = opts.excluded_vars;
  ctx.copy_context = opts.context_dir;

  StateId parent = store_.tree().at(base_seq).state_id;
  for (auto& ins : instructions) {
    if (ins.kind == InstructionKind::From) continue;
    PlanStep step;
    step.ins = &ins;
    if (!opts.no_cache) {
      if (auto input = digest_input_for(ins, ctx)) {
        step.id = state_id(parent, *input);
        parent = *step.id;
      }
    }
    out.steps.push_back(step);
  }

  // a build is a run of hits followed by a run of misses: stop consulting
  // the cache at the first miss
  out.first_miss = out.steps.size();
  if (opts.no_cache) {
    out.first_miss = 0;
    return out;
  }
  for (size_t i = 0; i < out.steps.size(); ++i) {
    auto& step = out.steps[i];
    if (!step.id) continue;  // ignored instructions interleave freely
    const CacheNode* node = store_.tree().find_hit(*step.id, image, opts.rebuild);
    if (!node) {
      out.first_miss = i;
      break;
    }
    step.hit = node;
    out.last_hit_seq = node->seq;
  }
  return out;
}

// ---------------------------------------------------------------------------
// execution

namespace {

std::string default_path() {
  const char* p = std::getenv("PATH");
  return p ? p : "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";
}

fs::path in_image_path(const fs::path& worktree, const std::string& image_path) {
  fs::path p = fs::path(image_path).lexically_normal();
  fs::path joined = p.is_absolute() ? worktree / p.relative_path() : worktree / p;
  std::string j = joined.lexically_normal().string();
  std::string w = worktree.string();
  if (j != w && !j.starts_with(w + "/")) {
    throw UserError(fmt::format("path escapes the image root: {}", image_path));
  }
  return joined;
}

void copy_preserving(const fs::path& src, const fs::path& dst) {
  struct stat sb{};
  if (::lstat(src.c_str(), &sb) != 0) {
    throw UserError(fmt::format("COPY source missing: {}", src.string()));
  }
  int64_t mtime = static_cast<int64_t>(sb.st_mtim.tv_sec) * 1000000000 + sb.st_mtim.tv_nsec;
  if (S_ISREG(sb.st_mode)) {
    std::error_code ec;
    fs::remove_all(dst, ec);
    fs::copy_file(src, dst);
    ::chmod(dst.c_str(), sb.st_mode & 07777);
    set_mtime_ns(dst, mtime);
  } else if (S_ISDIR(sb.st_mode)) {
    fs::create_directories(dst);
    std::vector<std::string> names;
    for (auto& e : fs::directory_iterator(src)) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    for (auto& n : names) copy_preserving(src / n, dst / n);
    ::chmod(dst.c_str(), sb.st_mode & 07777);
    set_mtime_ns(dst, mtime);
  } else if (S_ISLNK(sb.st_mode)) {
    std::error_code ec;
    fs::remove_all(dst, ec);
    fs::copy_symlink(src, dst);
    set_mtime_ns(dst, mtime);
  } else {
    throw UserError(fmt::format("COPY source has unsupported file type: {}", src.string()));
  }
}

}  // namespace

void Builder::execute_instruction(const Instruction& ins, const fs::path& worktree,
                                  ImageMetadata& meta, const BuildOptions& opts) const {
  switch (ins.kind) {
    case InstructionKind::Run: {
      fs::path cwd = in_image_path(worktree, meta.workdir);
      fs::create_directories(cwd);
      std::map<std::string, std::string> env;
      for (auto& [k, v] : meta.arg_values) env[k] = v;
      for (auto& [k, v] : meta.environment) env[k] = v;
      env["IMAGE_ROOT"] = worktree.string();
      if (!env.count("PATH")) env["PATH"] = default_path();

      std::vector<std::string> argv = opts.runner;
      argv.push_back(ins.run_command);
      RunOptions ro;
      ro.cwd = cwd;
      ro.env = env;
      ro.echo = opts.echo;
      RunResult r = run_command(argv, ro);
      if (!r.ok()) {
        throw UserError(fmt::format("{} failed with exit code {}\n{}", ins.text, r.exit_code,
                                    trim(r.output)));
      }
      break;
    }
    case InstructionKind::Copy: {
      std::string dest = ins.copy_dest;
      fs::path dest_abs = dest.starts_with("/")
                              ? in_image_path(worktree, dest)
                              : in_image_path(worktree, meta.workdir + "/" + dest);
      bool dest_is_dir = dest.ends_with("/") || fs::is_directory(dest_abs) ||
                         ins.copy_sources.size() > 1;
      for (auto& src : ins.copy_sources) {
        fs::path rel = fs::path(src).lexically_normal();
        if (rel.is_absolute() || rel.string().starts_with("..")) {
          throw UserError(fmt::format("COPY source escapes context: {}", src));
        }
        fs::path src_abs = opts.context_dir / rel;
        struct stat sb{};
        if (::lstat(src_abs.c_str(), &sb) != 0) {
          throw UserError(fmt::format("COPY source missing: {}", src));
        }
        fs::path target;
        if (S_ISDIR(sb.st_mode)) {
          target = dest_abs;  // directory sources pour their contents into dest
          fs::create_directories(target);
          std::vector<std::string> names;
          for (auto& e : fs::directory_iterator(src_abs)) {
            names.push_back(e.path().filename().string());
          }
          std::sort(names.begin(), names.end());
          for (auto& n : names) copy_preserving(src_abs / n, target / n);
        } else {
          target = dest_is_dir ? dest_abs / fs::path(src).filename() : dest_abs;
          fs::create_directories(target.parent_path());
          copy_preserving(src_abs, target);
        }
      }
      break;
    }
    case InstructionKind::Arg:
      meta.arg_values[ins.var_name] = ins.var_value;
      break;
    case InstructionKind::Env:
      meta.set_env(ins.var_name, ins.var_value);
      break;
    case InstructionKind::Workdir: {
      std::string wd = ins.workdir;
      if (!wd.starts_with("/")) {
        wd = (meta.workdir == "/" ? "" : meta.workdir) + "/" + wd;
      }
      meta.workdir = fs::path(wd).lexically_normal().string();
      break;
    }
    case InstructionKind::From:
    case InstructionKind::Ignored:
      break;
  }
}

// ---------------------------------------------------------------------------
// build

BuildReport Builder::build(const std::string& recipe_text, const std::string& image_name,
                           const BuildOptions& opts) {
  auto instructions = parse_recipe(recipe_text, opts.build_args);
  std::string image = sanitize_image_name(image_name);

  uint64_t base_seq = resolve_base(instructions, opts);
  Plan p = plan(instructions, base_seq, image, opts);

  fs::path wt = store_.checkout_state(p.last_hit_seq, image);
  ImageMetadata meta = ImageMetadata::load(wt);

  BuildReport report;
  uint64_t parent_seq = p.last_hit_seq;

  for (auto& step : p.steps) {
    const Instruction& ins = *step.ins;
    if (ins.kind == InstructionKind::Ignored) {
      report.instructions.push_back({ins.text, "", Outcome::Ignored, 0});
      ++report.ignored;
      continue;
    }
    if (step.hit) {
      if (ins.kind == InstructionKind::Arg) {
        meta.arg_values[ins.var_name] = ins.var_value;  // ARG is build-scoped
      }
      report.instructions.push_back({ins.text, step.hit->state_id.hex(), Outcome::Hit, 0});
      ++report.hits;
      parent_seq = step.hit->seq;
      continue;
    }

    auto t0 = std::chrono::steady_clock::now();
    execute_instruction(ins, wt, meta, opts);

    std::string hexid = step.id ? step.id->hex() : "";
    if (!opts.no_cache) {
      CommitResult res;
      if (ins.kind == InstructionKind::Run || ins.kind == InstructionKind::Copy) {
        res = store_.commit_state(image, ins.text, opts.threshold_bytes);
      } else {
        meta.persist(wt);
        res = store_.commit_metadata_only(image, ins.text);
      }
      const CacheNode& node = store_.add_node(parent_seq, *step.id, ins.text, res.commit_sha,
                                              opts.rebuild);
      parent_seq = node.seq;
      report.stats.accumulate(res.stats);
    } else if (ins.kind == InstructionKind::Arg || ins.kind == InstructionKind::Env ||
               ins.kind == InstructionKind::Workdir) {
      meta.persist(wt);
    }
    double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    report.instructions.push_back({ins.text, hexid, Outcome::MissExecuted, dt});
    ++report.misses_executed;
  }

  if (!opts.no_cache) store_.move_label(image, parent_seq);
  report.final_node = parent_seq;
  return report;
}

}  // namespace flatcache
