#ifndef FLATCACHE_BUILDER_HPP
#define FLATCACHE_BUILDER_HPP

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flatcache/digest.hpp"
#include "flatcache/layers.hpp"
#include "flatcache/recipe.hpp"
#include "flatcache/store.hpp"

namespace flatcache {

// Container-level metadata that travels with every committed state under
// ch/ — plus the build-scoped ARG values, which deliberately do not.
struct ImageMetadata {
  std::vector<std::pair<std::string, std::string>> environment;  // ordered
  std::string workdir = "/";
  std::map<std::string, std::string> arg_values;

  static ImageMetadata load(const std::filesystem::path& worktree);
  // Rewrites ch/environment and ch/workdir (only when their content changed).
  void persist(const std::filesystem::path& worktree) const;
  void set_env(const std::string& name, const std::string& value);
};

enum class Outcome { Hit, MissExecuted, Ignored };

struct InstructionReport {
  std::string text;
  std::string state_hex;  // empty for ignored / --no-cache
  Outcome outcome = Outcome::Ignored;
  double seconds = 0;
};

struct BuildReport {
  std::vector<InstructionReport> instructions;
  uint64_t final_node = 0;  // seq; meaningless under --no-cache
  int hits = 0;
  int misses_executed = 0;
  int ignored = 0;
  CommitStats stats;  // totals over this build's commits
};

struct BuildOptions {
  bool rebuild = false;
  bool no_cache = false;
  std::optional<uint64_t> threshold_bytes;  // nullopt = OOB disabled
  std::map<std::string, std::string> build_args;
  std::filesystem::path context_dir = ".";
  std::set<std::string> excluded_vars;
  std::vector<std::string> runner = {"/bin/sh", "-c"};
  ImageSource* base_source = nullptr;  // consulted when FROM's base is not cached
  bool echo = false;                   // stream RUN output
};

struct PlanStep {
  const Instruction* ins = nullptr;
  std::optional<StateId> id;  // absent for ignored instructions
  const CacheNode* hit = nullptr;
};

struct Plan {
  std::vector<PlanStep> steps;  // excludes FROM
  size_t first_miss = 0;        // index into steps where execution starts
  uint64_t last_hit_seq = 0;    // node to check out before executing
};

class Builder {
 public:
  explicit Builder(Store& store) : store_(store) {}

  // Resolves and ingests a base image; a cache hit on the manifest skips the
  // layer downloads entirely. Returns the node's seq.
  uint64_t pull(const std::string& ref, ImageSource& source,
                std::optional<uint64_t> threshold_bytes);

  // Flat tarball as a base image, content-addressed by the tarball bytes.
  uint64_t import_tar(const std::filesystem::path& tarball, const std::string& image_name,
                      std::optional<uint64_t> threshold_bytes);

  // The hit/miss plan for a recipe against the current tree: a run of hits,
  // then misses to execute. Never consults the cache past the first miss.
  Plan plan(const std::vector<Instruction>& instructions, uint64_t base_seq,
            const std::string& image, const BuildOptions& opts) const;

  BuildReport build(const std::string& recipe_text, const std::string& image_name,
                    const BuildOptions& opts);

  // One instruction against a checked-out worktree (misses only).
  void execute_instruction(const Instruction& ins, const std::filesystem::path& worktree,
                           ImageMetadata& meta, const BuildOptions& opts) const;

 private:
  uint64_t resolve_base(const std::vector<Instruction>& instructions, const BuildOptions& opts);

  Store& store_;
};

}  // namespace flatcache

#endif
