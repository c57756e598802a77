#include "cacheout/aes.hpp"

#include <stdexcept>

namespace cacheout::aes {
namespace {

std::uint8_t xtime(std::uint8_t x) {
  return static_cast<std::uint8_t>((x << 1) ^ ((x & 0x80) ? 0x1b : 0x00));
}

std::uint8_t gmul(std::uint8_t a, std::uint8_t b) {
  std::uint8_t p = 0;
  while (b) {
    if (b & 1) p ^= a;
    a = xtime(a);
    b >>= 1;
  }
  return p;
}

struct Tables {
  std::array<std::uint8_t, 256> sbox{};
  std::array<std::uint8_t, 256> inv_sbox{};

  Tables() {
    for (int x = 0; x < 256; ++x) {
      // Multiplicative inverse in GF(2^8), then the affine map.
      std::uint8_t inv = 0;
      if (x != 0) {
        for (int y = 1; y < 256; ++y) {
          if (gmul(static_cast<std::uint8_t>(x), static_cast<std::uint8_t>(y)) == 1) {
            inv = static_cast<std::uint8_t>(y);
            break;
          }
        }
      }
      std::uint8_t s = inv;
      for (int r = 1; r <= 4; ++r) {
        s ^= static_cast<std::uint8_t>((inv << r) | (inv >> (8 - r)));
      }
      s ^= 0x63;
      sbox[x] = s;
      inv_sbox[s] = static_cast<std::uint8_t>(x);
    }
  }
};

const Tables& tables() {
  static const Tables t;
  return t;
}

void add_round_key(Block& s, const std::uint8_t* rk) {
  for (int i = 0; i < 16; ++i) s[i] ^= rk[i];
}

void shift_rows(Block& s) {
  Block t = s;
  for (int c = 0; c < 4; ++c) {
    for (int r = 0; r < 4; ++r) s[4 * c + r] = t[4 * ((c + r) % 4) + r];
  }
}

void inv_shift_rows(Block& s) {
  Block t = s;
  for (int c = 0; c < 4; ++c) {
    for (int r = 0; r < 4; ++r) s[4 * ((c + r) % 4) + r] = t[4 * c + r];
  }
}

void mix_columns(Block& s) {
  for (int c = 0; c < 4; ++c) {
    std::uint8_t* col = &s[4 * c];
    const std::uint8_t a0 = col[0], a1 = col[1], a2 = col[2], a3 = col[3];
    col[0] = gmul(a0, 2) ^ gmul(a1, 3) ^ a2 ^ a3;
    col[1] = a0 ^ gmul(a1, 2) ^ gmul(a2, 3) ^ a3;
    col[2] = a0 ^ a1 ^ gmul(a2, 2) ^ gmul(a3, 3);
    col[3] = gmul(a0, 3) ^ a1 ^ a2 ^ gmul(a3, 2);
  }
}

void inv_mix_columns(Block& s) {
  for (int c = 0; c < 4; ++c) {
    std::uint8_t* col = &s[4 * c];
    const std::uint8_t a0 = col[0], a1 = col[1], a2 = col[2], a3 = col[3];
    col[0] = gmul(a0, 14) ^ gmul(a1, 11) ^ gmul(a2, 13) ^ gmul(a3, 9);
    col[1] = gmul(a0, 9) ^ gmul(a1, 14) ^ gmul(a2, 11) ^ gmul(a3, 13);
    col[2] = gmul(a0, 13) ^ gmul(a1, 9) ^ gmul(a2, 14) ^ gmul(a3, 11);
    col[3] = gmul(a0, 11) ^ gmul(a1, 13) ^ gmul(a2, 9) ^ gmul(a3, 14);
  }
}

}  // namespace

int rounds_for_key(std::size_t key_bytes) {
  switch (key_bytes) {
    case 16: return 10;
    case 24: return 12;
    case 32: return 14;
    default: throw std::invalid_argument("AES key must be 16, 24 or 32 bytes");
  }
}

std::vector<std::uint8_t> expand_key(std::span<const std::uint8_t> key) {
  const int nr = rounds_for_key(key.size());
  const std::size_t nk = key.size() / 4;
  const std::size_t total_words = 4 * static_cast<std::size_t>(nr + 1);
  const auto& sbox = tables().sbox;

  std::vector<std::uint8_t> w(total_words * 4);
  std::copy(key.begin(), key.end(), w.begin());
  std::uint8_t rcon = 1;
  for (std::size_t i = nk; i < total_words; ++i) {
    std::array<std::uint8_t, 4> temp{w[4 * (i - 1)], w[4 * (i - 1) + 1], w[4 * (i - 1) + 2],
                                     w[4 * (i - 1) + 3]};
    if (i % nk == 0) {
      temp = {static_cast<std::uint8_t>(sbox[temp[1]] ^ rcon), sbox[temp[2]], sbox[temp[3]],
              sbox[temp[0]]};
      rcon = xtime(rcon);
    } else if (nk > 6 && i % nk == 4) {
      for (auto& b : temp) b = sbox[b];
    }
    for (int j = 0; j < 4; ++j) w[4 * i + j] = w[4 * (i - nk) + j] ^ temp[j];
  }
  return w;
}

Block encrypt_block(std::span<const std::uint8_t> round_keys, const Block& in) {
  const int nr = static_cast<int>(round_keys.size() / 16) - 1;
  const auto& sbox = tables().sbox;
  Block s = in;
  add_round_key(s, round_keys.data());
  for (int round = 1; round <= nr; ++round) {
    for (auto& b : s) b = sbox[b];
    shift_rows(s);
    if (round != nr) mix_columns(s);
    add_round_key(s, round_keys.data() + 16 * round);
  }
  return s;
}

Block decrypt_block(std::span<const std::uint8_t> round_keys, const Block& in) {
  const int nr = static_cast<int>(round_keys.size() / 16) - 1;
  const auto& inv = tables().inv_sbox;
  Block s = in;
  add_round_key(s, round_keys.data() + 16 * nr);
  for (int round = nr - 1; round >= 0; --round) {
    inv_shift_rows(s);
    for (auto& b : s) b = inv[b];
    add_round_key(s, round_keys.data() + 16 * round);
    if (round != 0) inv_mix_columns(s);
  }
  return s;
}

}  // namespace cacheout::aes
