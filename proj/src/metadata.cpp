#include "flatcache/metadata.hpp"

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

std::string MetadataManifest::serialize() const {
  std::string out = fmt::format("flatcache-meta {}\n", version);
  for (auto& f : files) {
    out += fmt::format("f\t{}\t{}\t{:o}\t{}\n", escape_field(f.path), f.ftype, f.mode, f.mtime_ns);
  }
  for (auto& g : hardlink_groups) {
    for (auto& m : g.members) {
      out += fmt::format("h\t{}\t{}\n", escape_field(g.canonical), escape_field(m));
    }
  }
  for (auto& d : empty_dirs) out += fmt::format("d\t{}\n", escape_field(d));
  for (auto& p : fifos) out += fmt::format("p\t{}\n", escape_field(p));
  for (auto& r : renames) {
    out += fmt::format("r\t{}\t{}\n", escape_field(r.stored), escape_field(r.logical));
  }
  for (auto& l : large_files) {
    out += fmt::format("l\t{}\t{}\n", escape_field(l.path), l.key);
  }
  return out;
}

MetadataManifest MetadataManifest::parse(std::string_view text) {
  auto lines = split(text, '\n');
  if (lines.empty() || !lines[0].starts_with("flatcache-meta ")) {
    throw InternalError("unrecognized metadata manifest header");
  }
  MetadataManifest m;
  m.version = std::stoi(lines[0].substr(15));
  if (m.version != 1) {
    throw InternalError(fmt::format("unknown metadata manifest version {}", m.version));
  }
  for (size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto f = split(lines[i], '\t');
    if (f[0] == "f" && f.size() == 5) {
      FileRecord rec;
      rec.path = unescape_field(f[1]);
      rec.ftype = f[2].empty() ? 'f' : f[2][0];
      rec.mode = static_cast<uint32_t>(std::stoul(f[3], nullptr, 8));
      rec.mtime_ns = std::stoll(f[4]);
      m.files.push_back(std::move(rec));
    } else if (f[0] == "h" && f.size() == 3) {
      std::string canonical = unescape_field(f[1]);
      if (!m.hardlink_groups.empty() && m.hardlink_groups.back().canonical == canonical) {
        m.hardlink_groups.back().members.push_back(unescape_field(f[2]));
      } else {
        m.hardlink_groups.push_back({canonical, {unescape_field(f[2])}});
      }
    } else if (f[0] == "d" && f.size() == 2) {
      m.empty_dirs.push_back(unescape_field(f[1]));
    } else if (f[0] == "p" && f.size() == 2) {
      m.fifos.push_back(unescape_field(f[1]));
    } else if (f[0] == "r" && f.size() == 3) {
      m.renames.push_back({unescape_field(f[1]), unescape_field(f[2])});
    } else if (f[0] == "l" && f.size() == 3) {
      m.large_files.push_back({unescape_field(f[1]), f[2]});
    } else {
      throw InternalError(fmt::format("corrupt metadata manifest line: {}", lines[i]));
    }
  }
  return m;
}

}  // namespace flatcache
