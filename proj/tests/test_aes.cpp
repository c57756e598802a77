#include <openssl/evp.h>

#include "cacheout/aes.hpp"
#include "cacheout/rng.hpp"
#include "doctest.h"

using namespace cacheout;

namespace {

std::vector<std::uint8_t> hex(std::string_view s) {
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i + 1 < s.size(); i += 2) {
    out.push_back(static_cast<std::uint8_t>(std::stoul(std::string(s.substr(i, 2)), nullptr, 16)));
  }
  return out;
}

aes::Block block(std::string_view s) {
  aes::Block b{};
  const auto v = hex(s);
  std::copy(v.begin(), v.end(), b.begin());
  return b;
}

aes::Block openssl_encrypt(const std::vector<std::uint8_t>& key, const aes::Block& in) {
  const EVP_CIPHER* cipher = key.size() == 16   ? EVP_aes_128_ecb()
                             : key.size() == 24 ? EVP_aes_192_ecb()
                                                : EVP_aes_256_ecb();
  EVP_CIPHER_CTX* ctx = EVP_CIPHER_CTX_new();
  EVP_EncryptInit_ex(ctx, cipher, nullptr, key.data(), nullptr);
  EVP_CIPHER_CTX_set_padding(ctx, 0);
  aes::Block out{};
  int len = 0;
  EVP_EncryptUpdate(ctx, out.data(), &len, in.data(), 16);
  EVP_CIPHER_CTX_free(ctx);
  return out;
}

}  // namespace

TEST_CASE("FIPS-197 appendix C vectors") {
  const auto pt = block("00112233445566778899aabbccddeeff");
  struct V {
    const char* key;
    const char* ct;
  };
  const V vectors[] = {
      {"000102030405060708090a0b0c0d0e0f", "69c4e0d86a7b0430d8cdb78070b4c55a"},
      {"000102030405060708090a0b0c0d0e0f1011121314151617", "dda97ca4864cdfe06eaf70a0ec0d7191"},
      {"000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f",
       "8ea2b7ca516745bfeafc49904b496089"},
  };
  for (const auto& v : vectors) {
    const auto rk = aes::expand_key(hex(v.key));
    CHECK(aes::encrypt_block(rk, pt) == block(v.ct));
    CHECK(aes::decrypt_block(rk, block(v.ct)) == pt);
  }
}

TEST_CASE("FIPS-197 appendix A.1 key expansion tail") {
  const auto rk = aes::expand_key(hex("2b7e151628aed2a6abf7158809cf4f3c"));
  REQUIRE(rk.size() == 176);
  CHECK(std::vector<std::uint8_t>(rk.end() - 16, rk.end()) ==
        hex("d014f9a8c9ee2589e13f0cc8b6630ca6"));
}

TEST_CASE("expanded schedule sizes and bad keys") {
  CHECK(aes::expand_key(std::vector<std::uint8_t>(16)).size() == 176);
  CHECK(aes::expand_key(std::vector<std::uint8_t>(24)).size() == 208);
  CHECK(aes::expand_key(std::vector<std::uint8_t>(32)).size() == 240);
  CHECK_THROWS(aes::expand_key(std::vector<std::uint8_t>(15)));
}

TEST_CASE("property: agrees with an independent implementation on random keys") {
  Rng rng(1);
  for (int i = 0; i < 300; ++i) {
    const std::size_t len = std::array<std::size_t, 3>{16, 24, 32}[rng.below(3)];
    std::vector<std::uint8_t> key(len);
    for (auto& b : key) b = rng.byte();
    aes::Block pt{};
    for (auto& b : pt) b = rng.byte();
    const auto rk = aes::expand_key(key);
    REQUIRE(aes::encrypt_block(rk, pt) == openssl_encrypt(key, pt));
    REQUIRE(aes::decrypt_block(rk, aes::encrypt_block(rk, pt)) == pt);
  }
}
