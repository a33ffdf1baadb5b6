#include "flatcache/recipe.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

namespace {

const std::set<std::string>& harmless_keywords() {
  // No effect on image content; the cache ignores them.
  static const std::set<std::string> kws = {
      "LABEL",  "EXPOSE",     "MAINTAINER", "CMD",   "ENTRYPOINT",
      "VOLUME", "STOPSIGNAL", "SHELL",      "USER",  "HEALTHCHECK",
  };
  return kws;
}

std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return out;
}

struct LogicalLine {
  std::string text;
  int line;  // first physical line number
};

// Comment lines are stripped before continuations are folded, so a comment
// may interrupt a continuation; blank lines inside a continuation are
// skipped as well.
std::vector<LogicalLine> logical_lines(std::string_view source) {
  std::vector<std::pair<std::string, int>> physical;
  {
    int n = 1;
    size_t start = 0;
    while (start <= source.size()) {
      size_t eol = source.find('\n', start);
      std::string line(source.substr(start, eol == std::string_view::npos ? std::string_view::npos
                                                                          : eol - start));
      if (!line.empty() && line.back() == '\r') line.pop_back();
      physical.emplace_back(std::move(line), n++);
      if (eol == std::string_view::npos) break;
      start = eol + 1;
    }
  }

  std::vector<LogicalLine> out;
  std::string pending;
  int pending_line = 0;
  bool continuing = false;
  for (auto& [line, lineno] : physical) {
    std::string trimmed = trim(line);
    if (trimmed.empty() || trimmed[0] == '#') continue;
    bool cont = line.ends_with("\\");
    std::string body = cont ? line.substr(0, line.size() - 1) : line;
    if (!continuing) {
      pending = body;
      pending_line = lineno;
    } else {
      pending += " " + body;
    }
    continuing = cont;
    if (!continuing) {
      out.push_back({pending, pending_line});
      pending.clear();
    }
  }
  if (continuing && !trim(pending).empty()) out.push_back({pending, pending_line});
  return out;
}

}  // namespace

const char* kind_keyword(InstructionKind k) {
  switch (k) {
    case InstructionKind::From: return "FROM";
    case InstructionKind::Run: return "RUN";
    case InstructionKind::Copy: return "COPY";
    case InstructionKind::Arg: return "ARG";
    case InstructionKind::Env: return "ENV";
    case InstructionKind::Workdir: return "WORKDIR";
    case InstructionKind::Ignored: return "IGNORED";
  }
  return "?";
}

std::string normalize_args(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  bool in_single = false, in_double = false;
  bool pending_space = false;
  for (size_t i = 0; i < raw.size(); ++i) {
    char c = raw[i];
    if (!in_single && !in_double && (c == ' ' || c == '\t')) {
      pending_space = true;
      continue;
    }
    if (pending_space) {
      if (!out.empty()) out.push_back(' ');
      pending_space = false;
    }
    if (c == '\\' && !in_single && i + 1 < raw.size()) {
      out.push_back(c);
      out.push_back(raw[++i]);
      continue;
    }
    if (c == '\'' && !in_double) in_single = !in_single;
    if (c == '"' && !in_single) in_double = !in_double;
    out.push_back(c);
  }
  return out;
}

std::string normalize_text(std::string_view keyword, std::string_view raw_args) {
  std::string args = normalize_args(raw_args);
  std::string kw = upper(keyword);
  if (args.empty()) return kw;
  return kw + " " + args;
}

namespace {

Instruction parse_one(const LogicalLine& ll,
                      const std::map<std::string, std::string>& build_args) {
  std::string text = trim(ll.text);
  size_t kw_end = text.find_first_of(" \t");
  std::string keyword = text.substr(0, kw_end);
  std::string raw_args = kw_end == std::string::npos ? "" : text.substr(kw_end + 1);
  std::string kw = upper(keyword);

  Instruction ins;
  ins.line = ll.line;
  ins.keyword = kw;
  ins.text = normalize_text(kw, raw_args);
  std::string args = normalize_args(raw_args);

  auto require_args = [&](const char* what) {
    if (args.empty()) {
      throw UserError(fmt::format("line {}: {} requires {}", ll.line, kw, what));
    }
  };

  if (kw == "FROM") {
    ins.kind = InstructionKind::From;
    require_args("an image reference");
    ins.from_ref = args;
  } else if (kw == "RUN") {
    ins.kind = InstructionKind::Run;
    require_args("a command");
    ins.run_command = args;
  } else if (kw == "COPY") {
    ins.kind = InstructionKind::Copy;
    auto parts = split(args, ' ');
    if (parts.size() < 2) {
      throw UserError(fmt::format("line {}: COPY requires at least one source and a destination",
                                  ll.line));
    }
    ins.copy_dest = parts.back();
    parts.pop_back();
    ins.copy_sources = std::move(parts);
  } else if (kw == "ARG" || kw == "ENV") {
    ins.kind = kw == "ARG" ? InstructionKind::Arg : InstructionKind::Env;
    require_args("NAME or NAME=value");
    size_t eq = args.find('=');
    if (eq == std::string::npos) {
      ins.var_name = args;
    } else {
      ins.var_name = args.substr(0, eq);
      ins.var_value = args.substr(eq + 1);
    }
    if (ins.var_name.empty() || ins.var_name.find(' ') != std::string::npos) {
      throw UserError(fmt::format("line {}: {} requires NAME or NAME=value", ll.line, kw));
    }
    if (ins.kind == InstructionKind::Arg) {
      auto it = build_args.find(ins.var_name);
      if (it != build_args.end()) ins.var_value = it->second;
    }
  } else if (kw == "WORKDIR") {
    ins.kind = InstructionKind::Workdir;
    require_args("a path");
    ins.workdir = args;
  } else if (harmless_keywords().count(kw)) {
    ins.kind = InstructionKind::Ignored;
  } else {
    throw UserError(fmt::format("line {}: unsupported instruction {}", ll.line, keyword));
  }
  return ins;
}

}  // namespace

std::vector<Instruction> parse_recipe(std::string_view source,
                                      const std::map<std::string, std::string>& build_args) {
  auto lines = logical_lines(source);
  if (lines.empty()) throw UserError("no instructions");

  std::vector<Instruction> out;
  out.reserve(lines.size());
  for (auto& ll : lines) {
    Instruction ins = parse_one(ll, build_args);
    if (ins.kind == InstructionKind::From && !out.empty()) {
      throw UserError(fmt::format("line {}: FROM must be the first instruction", ins.line));
    }
    out.push_back(std::move(ins));
  }
  return out;
}

ImageRef ImageRef::parse(std::string_view ref) {
  ImageRef out;
  out.original = std::string(ref);
  std::string rest(ref);
  // A leading component containing '.' or ':' before the first '/' is a
  // registry host.
  size_t slash = rest.find('/');
  if (slash != std::string::npos) {
    std::string head = rest.substr(0, slash);
    if (head.find('.') != std::string::npos || head.find(':') != std::string::npos ||
        head == "localhost") {
      out.registry = head;
      rest = rest.substr(slash + 1);
    }
  }
  size_t colon = rest.rfind(':');
  if (colon != std::string::npos) {
    out.repository = rest.substr(0, colon);
    out.tag = rest.substr(colon + 1);
  } else {
    out.repository = rest;
  }
  if (out.repository.empty()) throw UserError(fmt::format("bad image reference: {}", ref));
  return out;
}

std::string sanitize_image_name(std::string_view name) {
  // the result doubles as a git branch name and a directory name, and the
  // mapping must stay reversible, so raw '+' and '%' are rejected too
  auto bad = [&](const std::string& why) {
    return UserError(fmt::format("invalid image name '{}': {}", name, why));
  };
  if (name.empty()) throw bad("empty");
  std::string out(name);
  for (auto& c : out) {
    if (c == ':') c = '+';
    else if (c == '/') c = '%';
    else if (!std::isalnum(static_cast<unsigned char>(c)) && c != '.' && c != '_' && c != '-') {
      throw bad("allowed characters are letters, digits, '.', '_', '-', ':' and '/'");
    }
  }
  if (out[0] == '.' || out[0] == '-') throw bad("must not start with '.' or '-'");
  if (out.find("..") != std::string::npos) throw bad("must not contain '..'");
  if (out.ends_with(".lock")) throw bad("must not end with '.lock'");
  return out;
}

std::string unsanitize_image_name(std::string_view name) {
  std::string out(name);
  for (auto& c : out) {
    if (c == '+') c = ':';
    else if (c == '%') c = '/';
  }
  return out;
}

}  // namespace flatcache
