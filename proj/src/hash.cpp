#include "flatcache/hash.hpp"

#include <openssl/evp.h>

#include <fstream>

#include <fmt/format.h>

#include "flatcache/errors.hpp"
#include "flatcache/util.hpp"

namespace flatcache {

static void digest_once(const EVP_MD* md, std::string_view data, unsigned char* out, unsigned* outlen) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, md, nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data.data(), data.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, out, outlen) != 1) {
    EVP_MD_CTX_free(ctx);
    throw InternalError("digest computation failed");
  }
  EVP_MD_CTX_free(ctx);
}

std::array<unsigned char, 16> md5_raw(std::string_view data) {
  std::array<unsigned char, 16> out{};
  unsigned len = 0;
  digest_once(EVP_md5(), data, out.data(), &len);
  return out;
}

std::string md5_hex(std::string_view data) {
  auto raw = md5_raw(data);
  return to_hex(raw.data(), raw.size());
}

Sha256::Sha256() {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw InternalError("sha256 init failed");
  }
  ctx_ = ctx;
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

void Sha256::update(const void* data, size_t len) {
  if (EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), data, len) != 1) {
    throw InternalError("sha256 update failed");
  }
}

std::string Sha256::hex_final() {
  unsigned char out[32];
  unsigned len = 0;
  if (EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), out, &len) != 1) {
    throw InternalError("sha256 final failed");
  }
  return to_hex(out, len);
}

std::string sha256_hex(std::string_view data) {
  Sha256 h;
  h.update(data.data(), data.size());
  return h.hex_final();
}

std::string sha256_hex_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InternalError(fmt::format("cannot read {}", p.string()));
  Sha256 h;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h.update(buf, static_cast<size_t>(in.gcount()));
  }
  return h.hex_final();
}

}  // namespace flatcache
