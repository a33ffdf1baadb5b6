#ifndef FLATCACHE_UTIL_HPP
#define FLATCACHE_UTIL_HPP

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace flatcache {

std::string to_hex(const unsigned char* data, size_t len);

// Percent-encodes bytes that would break line/field oriented formats:
// control characters, space, '%' and DEL. Everything else passes through.
std::string escape_field(std::string_view s);
std::string unescape_field(std::string_view s);

std::vector<std::string> split(std::string_view s, char sep);
std::string trim(std::string_view s);

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, std::string_view content);
// write-temp-then-rename so readers never observe a partial file
void write_file_atomic(const std::filesystem::path& p, std::string_view content);

// Sum of regular-file sizes under a directory tree.
uint64_t dir_bytes(const std::filesystem::path& p);

int64_t mtime_ns(const std::filesystem::path& p);
void set_mtime_ns(const std::filesystem::path& p, int64_t ns);

}  // namespace flatcache

#endif
