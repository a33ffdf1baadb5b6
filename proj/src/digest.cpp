#include "flatcache/digest.hpp"

#include <sys/stat.h>

#include <algorithm>
#include <cctype>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/hash.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

namespace fs = std::filesystem;

std::string StateId::hex() const { return to_hex(bytes.data(), bytes.size()); }

std::string StateId::abbrev() const {
  std::string h = hex().substr(0, 4);
  for (auto& c : h) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return h;
}

StateId StateId::from_hex(std::string_view hex) {
  if (hex.size() != 32) throw InternalError(fmt::format("bad state ID: {}", hex));
  StateId id;
  for (size_t i = 0; i < 16; ++i) {
    id.bytes[i] = static_cast<unsigned char>(std::stoi(std::string(hex.substr(i * 2, 2)), nullptr, 16));
  }
  return id;
}

StateId root_id() {
  // "José Capablanca" in UTF-8; an arbitrary constant since the root has no
  // parent and no instruction.
  static const std::array<unsigned char, 16> kRoot = {0x4a, 0x6f, 0x73, 0xc3, 0xa9, 0x20, 0x43, 0x61,
                                                      0x70, 0x61, 0x62, 0x6c, 0x61, 0x6e, 0x63, 0x61};
  StateId id;
  id.bytes = kRoot;
  return id;
}

StateId state_id(const StateId& parent, const DigestInput& input) {
  std::string buf;
  buf.reserve(16 + input.payload.size() + input.extra.size() + 16);
  buf.append(reinterpret_cast<const char*>(parent.bytes.data()), parent.bytes.size());
  buf.push_back('\0');
  buf.append(input.kind == DigestKind::Pull ? "PULL" : "INSTR");
  buf.push_back('\0');
  buf.append(input.payload);
  buf.push_back('\0');
  buf.append(input.extra);
  StateId id;
  id.bytes = md5_raw(buf);
  return id;
}

std::string FileStatSummary::record() const {
  std::string out = path;
  out.push_back('\0');
  out += ftype;
  out.push_back('\0');
  out += fmt::format("{:o}", mode);
  out.push_back('\0');
  out += fmt::format("{}", size);
  out.push_back('\0');
  out += fmt::format("{}", mtime_ns);
  out.push_back('\n');
  return out;
}

namespace {

FileStatSummary stat_summary(const fs::path& abs, const std::string& rel) {
  struct stat st{};
  if (::lstat(abs.c_str(), &st) != 0) {
    throw UserError(fmt::format("COPY source missing: {}", rel));
  }
  FileStatSummary s;
  s.path = rel;
  s.mode = st.st_mode & 07777;
  s.mtime_ns = static_cast<int64_t>(st.st_mtim.tv_sec) * 1000000000 + st.st_mtim.tv_nsec;
  if (S_ISREG(st.st_mode)) {
    s.ftype = "regular";
    s.size = static_cast<uint64_t>(st.st_size);
  } else if (S_ISDIR(st.st_mode)) {
    s.ftype = "directory";
    s.size = 0;
  } else if (S_ISLNK(st.st_mode)) {
    s.ftype = "symlink";
    s.size = static_cast<uint64_t>(st.st_size);
  } else {
    throw UserError(fmt::format("COPY source has unsupported file type: {}", rel));
  }
  return s;
}

void collect(const fs::path& abs, const std::string& rel, std::vector<FileStatSummary>& out) {
  FileStatSummary s = stat_summary(abs, rel);
  bool is_dir = s.ftype == "directory";
  out.push_back(std::move(s));
  if (!is_dir) return;
  std::vector<std::string> names;
  for (auto& e : fs::directory_iterator(abs)) {
    names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  for (auto& n : names) {
    collect(abs / n, rel == "." ? n : rel + "/" + n, out);
  }
}

std::string normalize_rel(std::string_view src) {
  // literal context-relative paths; no globs, no escaping the context
  fs::path p(src);
  if (p.is_absolute()) throw UserError(fmt::format("COPY source must be relative: {}", src));
  fs::path clean = p.lexically_normal();
  std::string s = clean.generic_string();
  if (s == "." || s.empty()) return ".";
  if (s.starts_with("..")) throw UserError(fmt::format("COPY source escapes context: {}", src));
  return s;
}

}  // namespace

std::vector<FileStatSummary> copy_source_stats(const fs::path& context_dir,
                                               const std::vector<std::string>& sources) {
  std::vector<FileStatSummary> out;
  for (auto& src : sources) {
    std::string rel = normalize_rel(src);
    collect(context_dir / rel, rel, out);
  }
  std::sort(out.begin(), out.end(),
            [](const FileStatSummary& a, const FileStatSummary& b) { return a.path < b.path; });
  return out;
}

std::string serialize_stats(const std::vector<FileStatSummary>& stats) {
  std::string out;
  for (auto& s : stats) out += s.record();
  return out;
}

std::optional<DigestInput> digest_input_for(const Instruction& ins, const DigestContext& ctx) {
  switch (ins.kind) {
    case InstructionKind::From:
    case InstructionKind::Ignored:
      return std::nullopt;  // FROM never appears in the cache
    case InstructionKind::Run:
    case InstructionKind::Workdir:
      return DigestInput{DigestKind::Instr, ins.text, ""};
    case InstructionKind::Arg:
    case InstructionKind::Env: {
      const char* kw = ins.kind == InstructionKind::Arg ? "ARG" : "ENV";
      std::string payload;
      if (ctx.excluded_vars.count(ins.var_name)) {
        payload = fmt::format("{} {}", kw, ins.var_name);
      } else {
        payload = fmt::format("{} {}={}", kw, ins.var_name, ins.var_value);
      }
      return DigestInput{DigestKind::Instr, std::move(payload), ""};
    }
    case InstructionKind::Copy: {
      auto stats = copy_source_stats(ctx.copy_context, ins.copy_sources);
      return DigestInput{DigestKind::Instr, ins.text, serialize_stats(stats)};
    }
  }
  return std::nullopt;
}

std::set<std::string> default_excluded_vars() {
  return {"HTTP_PROXY", "http_proxy", "HTTPS_PROXY", "https_proxy", "FTP_PROXY", "ftp_proxy",
          "ALL_PROXY",  "all_proxy",  "NO_PROXY",    "no_proxy",    "SSH_AUTH_SOCK"};
}

}  // namespace flatcache
