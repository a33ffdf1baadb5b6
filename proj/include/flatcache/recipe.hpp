#ifndef FLATCACHE_RECIPE_HPP
#define FLATCACHE_RECIPE_HPP

#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace flatcache {

enum class InstructionKind { From, Run, Copy, Arg, Env, Workdir, Ignored };

const char* kind_keyword(InstructionKind k);

struct Instruction {
  InstructionKind kind = InstructionKind::Ignored;
  std::string text;  // normalized: uppercased keyword + canonical argument spacing
  int line = 1;      // first physical line of the instruction

  // kind-specific payloads
  std::string from_ref;                   // FROM
  std::string run_command;                // RUN (normalized argument string)
  std::vector<std::string> copy_sources;  // COPY
  std::string copy_dest;
  std::string var_name;  // ARG / ENV; value already resolved against build args
  std::string var_value;
  std::string workdir;  // WORKDIR
  std::string keyword;  // as written (used for ignored-instruction warnings)
};

// Whitespace canonicalization: trims, collapses runs of spaces/tabs outside
// quotes to one space. Quoted regions and backslash-escaped characters pass
// through byte-for-byte; '#' is ordinary content here (a recipe comment must
// start its own line).
std::string normalize_args(std::string_view raw);

// "run", " echo   foo " -> "RUN echo foo"
std::string normalize_text(std::string_view keyword, std::string_view raw_args);

// Parses a recipe into instructions in source order. Full-line comments and
// blank lines are dropped, backslash-newline continuations folded. Harmless
// unsupported instructions (LABEL, EXPOSE, ...) come back flagged Ignored;
// content-changing ones (ADD, unknown keywords) raise UserError.
std::vector<Instruction> parse_recipe(std::string_view source,
                                      const std::map<std::string, std::string>& build_args);

// Image references: [host[:port]/]repository[:tag], default tag "latest".
struct ImageRef {
  std::string original;
  std::string registry;  // optional host[:port]
  std::string repository;
  std::string tag = "latest";
  static ImageRef parse(std::string_view ref);
};

// Branch-name form: ':' -> '+', '/' -> '%'. Reversible.
std::string sanitize_image_name(std::string_view name);
std::string unsanitize_image_name(std::string_view name);

}  // namespace flatcache

#endif
