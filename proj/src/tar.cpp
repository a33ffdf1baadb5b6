#include "flatcache/tar.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>
#include <vector>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

namespace {

constexpr size_t kBlock = 512;

class FileSource : public ByteSource {
 public:
  explicit FileSource(const std::filesystem::path& p) : in_(p, std::ios::binary) {
    if (!in_) throw InternalError(fmt::format("cannot open {}", p.string()));
  }
  size_t read(void* buf, size_t len) override {
    in_.read(static_cast<char*>(buf), static_cast<std::streamsize>(len));
    return static_cast<size_t>(in_.gcount());
  }

 private:
  std::ifstream in_;
};

class GzipSource : public ByteSource {
 public:
  explicit GzipSource(std::unique_ptr<ByteSource> inner) : inner_(std::move(inner)) {
    std::memset(&strm_, 0, sizeof(strm_));
    if (inflateInit2(&strm_, 16 + MAX_WBITS) != Z_OK) {
      throw InternalError("inflateInit2 failed");
    }
  }
  ~GzipSource() override { inflateEnd(&strm_); }

  size_t read(void* buf, size_t len) override {
    if (finished_) return 0;
    strm_.next_out = static_cast<Bytef*>(buf);
    strm_.avail_out = static_cast<uInt>(len);
    while (strm_.avail_out > 0) {
      if (strm_.avail_in == 0) {
        size_t n = inner_->read(inbuf_, sizeof(inbuf_));
        if (n == 0) {
          if (strm_.avail_out == len) throw InternalError("truncated gzip stream");
          break;
        }
        strm_.next_in = reinterpret_cast<Bytef*>(inbuf_);
        strm_.avail_in = static_cast<uInt>(n);
      }
      int rc = inflate(&strm_, Z_NO_FLUSH);
      if (rc == Z_STREAM_END) {
        finished_ = true;
        break;
      }
      if (rc != Z_OK) throw InternalError(fmt::format("gzip decompression failed ({})", rc));
    }
    return len - strm_.avail_out;
  }

 private:
  std::unique_ptr<ByteSource> inner_;
  z_stream strm_;
  char inbuf_[1 << 16];
  bool finished_ = false;
};

uint64_t parse_numeric(const unsigned char* field, size_t len) {
  // GNU base-256 extension when the high bit of the first byte is set
  if (field[0] & 0x80) {
    uint64_t v = field[0] & 0x7f;
    for (size_t i = 1; i < len; ++i) v = (v << 8) | field[i];
    return v;
  }
  uint64_t v = 0;
  for (size_t i = 0; i < len; ++i) {
    unsigned char c = field[i];
    if (c == '\0' || c == ' ') {
      if (v != 0 || i > 0) break;
      continue;
    }
    if (c < '0' || c > '7') break;
    v = (v << 3) | static_cast<uint64_t>(c - '0');
  }
  return v;
}

std::string field_string(const unsigned char* field, size_t len) {
  size_t n = 0;
  while (n < len && field[n] != '\0') ++n;
  return std::string(reinterpret_cast<const char*>(field), n);
}

}  // namespace

std::unique_ptr<ByteSource> open_file_source(const std::filesystem::path& p) {
  return std::make_unique<FileSource>(p);
}

std::unique_ptr<ByteSource> open_possibly_gzipped(const std::filesystem::path& p) {
  unsigned char magic[2] = {0, 0};
  {
    std::ifstream probe(p, std::ios::binary);
    if (!probe) throw InternalError(fmt::format("cannot open {}", p.string()));
    probe.read(reinterpret_cast<char*>(magic), 2);
  }
  auto file = std::make_unique<FileSource>(p);
  if (magic[0] == 0x1f && magic[1] == 0x8b) {
    return std::make_unique<GzipSource>(std::move(file));
  }
  return file;
}

TarReader::TarReader(std::unique_ptr<ByteSource> src) : src_(std::move(src)) {}

void TarReader::read_exact(void* buf, size_t len) {
  size_t off = 0;
  while (off < len) {
    size_t n = src_->read(static_cast<char*>(buf) + off, len - off);
    if (n == 0) throw InternalError("unexpected end of tar stream");
    off += n;
  }
}

bool TarReader::read_block(unsigned char* block) {
  size_t off = 0;
  while (off < kBlock) {
    size_t n = src_->read(block + off, kBlock - off);
    if (n == 0) {
      if (off == 0) return false;  // clean EOF on a block boundary
      throw InternalError("unexpected end of tar stream");
    }
    off += n;
  }
  return true;
}

std::optional<TarEntry> TarReader::next() {
  skip_content();

  std::string gnu_longname, gnu_longlink;
  std::string pax_path, pax_linkpath;
  std::optional<uint64_t> pax_size;
  std::optional<int64_t> pax_mtime;

  while (true) {
    unsigned char block[kBlock];
    if (!read_block(block)) return std::nullopt;

    bool all_zero = true;
    for (size_t i = 0; i < kBlock; ++i) {
      if (block[i] != 0) {
        all_zero = false;
        break;
      }
    }
    if (all_zero) return std::nullopt;  // end-of-archive marker

    std::string magic = field_string(block + 257, 6);
    if (magic != "ustar" && magic != "ustar ") {
      throw InternalError("bad tar header magic");
    }

    char type = block[156] == '\0' ? '0' : static_cast<char>(block[156]);
    uint64_t size = parse_numeric(block + 124, 12);

    auto read_all_content = [&]() {
      std::string content;
      content.reserve(size);
      uint64_t padded = (size + kBlock - 1) / kBlock * kBlock;
      std::vector<char> buf(padded);
      read_exact(buf.data(), padded);
      content.assign(buf.data(), size);
      return content;
    };

    if (type == 'L') {  // GNU long name
      gnu_longname = read_all_content();
      while (!gnu_longname.empty() && gnu_longname.back() == '\0') gnu_longname.pop_back();
      continue;
    }
    if (type == 'K') {  // GNU long link target
      gnu_longlink = read_all_content();
      while (!gnu_longlink.empty() && gnu_longlink.back() == '\0') gnu_longlink.pop_back();
      continue;
    }
    if (type == 'x' || type == 'g') {  // pax extended header
      std::string content = read_all_content();
      if (type == 'g') continue;  // global defaults ignored
      size_t pos = 0;
      while (pos < content.size()) {
        size_t sp = content.find(' ', pos);
        if (sp == std::string::npos) break;
        size_t reclen = std::stoul(content.substr(pos, sp - pos));
        if (reclen == 0 || pos + reclen > content.size()) break;
        std::string rec = content.substr(sp + 1, pos + reclen - sp - 2);  // drop trailing \n
        size_t eq = rec.find('=');
        if (eq != std::string::npos) {
          std::string key = rec.substr(0, eq), value = rec.substr(eq + 1);
          if (key == "path") pax_path = value;
          else if (key == "linkpath") pax_linkpath = value;
          else if (key == "size") pax_size = std::stoull(value);
          else if (key == "mtime") pax_mtime = static_cast<int64_t>(std::stod(value));
        }
        pos += reclen;
      }
      continue;
    }

    TarEntry e;
    e.type = type;
    e.mode = static_cast<uint32_t>(parse_numeric(block + 100, 8)) & 07777;
    e.mtime_s = static_cast<int64_t>(parse_numeric(block + 136, 12));
    e.size = size;
    e.linkname = field_string(block + 157, 100);

    std::string name = field_string(block, 100);
    std::string prefix = field_string(block + 345, 155);
    if (!prefix.empty()) name = prefix + "/" + name;
    if (!gnu_longname.empty()) name = gnu_longname;
    if (!pax_path.empty()) name = pax_path;
    if (!gnu_longlink.empty()) e.linkname = gnu_longlink;
    if (!pax_linkpath.empty()) e.linkname = pax_linkpath;
    if (pax_size) e.size = *pax_size;
    if (pax_mtime) e.mtime_s = *pax_mtime;
    e.path = name;

    // only regular files carry content blocks
    pending_content_ = (e.type == '0' || e.type == '7') ? e.size : 0;
    return e;
  }
}

void TarReader::read_content(const std::function<void(const char*, size_t)>& sink) {
  uint64_t remaining = pending_content_;
  char buf[1 << 16];
  while (remaining > 0) {
    size_t want = static_cast<size_t>(std::min<uint64_t>(remaining, sizeof(buf)));
    read_exact(buf, want);
    sink(buf, want);
    remaining -= want;
  }
  uint64_t pad = (kBlock - pending_content_ % kBlock) % kBlock;
  if (pad > 0) {
    char padbuf[kBlock];
    read_exact(padbuf, static_cast<size_t>(pad));
  }
  pending_content_ = 0;
}

void TarReader::skip_content() {
  if (pending_content_ == 0) return;
  read_content([](const char*, size_t) {});
}

}  // namespace flatcache
