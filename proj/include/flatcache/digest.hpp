#ifndef FLATCACHE_DIGEST_HPP
#define FLATCACHE_DIGEST_HPP

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flatcache/recipe.hpp"

namespace flatcache {

// 128-bit state identifier. Not globally unique: rebuild mode deliberately
// produces duplicate IDs on sibling branches; IDs are unique within any
// single root-to-tip path.
struct StateId {
  std::array<unsigned char, 16> bytes{};

  std::string hex() const;     // 32 lowercase hex digits
  std::string abbrev() const;  // first 4 hex digits, uppercased
  static StateId from_hex(std::string_view hex);

  auto operator<=>(const StateId&) const = default;
};

// The empty root image has a fixed, non-digested ID.
StateId root_id();

enum class DigestKind { Pull, Instr };

struct DigestInput {
  DigestKind kind = DigestKind::Instr;
  std::string payload;  // normalized instruction text, or raw manifest bytes for PULL
  std::string extra;    // COPY source-metadata serialization; empty otherwise
};

// MD5(parent ‖ 0x00 ‖ kind-tag ‖ 0x00 ‖ payload ‖ 0x00 ‖ extra).
// The image reference never enters a PULL digest; renaming an image leaves
// its state ID unchanged.
StateId state_id(const StateId& parent, const DigestInput& input);

struct FileStatSummary {
  std::string path;   // context-relative, normalized
  std::string ftype;  // "regular" | "directory" | "symlink"
  uint32_t mode = 0;  // permission bits
  uint64_t size = 0;  // 0 for directories
  int64_t mtime_ns = 0;

  std::string record() const;  // path\0ftype\0mode\0size\0mtime\n
};

// Stats for every COPY source, recursing into directories, sorted by path.
// Content is deliberately not read: a changed file whose metadata is
// restored still hits the cache.
std::vector<FileStatSummary> copy_source_stats(const std::filesystem::path& context_dir,
                                               const std::vector<std::string>& sources);

std::string serialize_stats(const std::vector<FileStatSummary>& stats);

struct DigestContext {
  std::set<std::string> excluded_vars;  // values of these never enter a digest
  std::filesystem::path copy_context;
};

// Maps an instruction to its digest input. FROM and ignored instructions are
// never digested (no return value).
std::optional<DigestInput> digest_input_for(const Instruction& ins, const DigestContext& ctx);

std::set<std::string> default_excluded_vars();

}  // namespace flatcache

#endif
