#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

namespace cacheout::aes {

using Block = std::array<std::uint8_t, 16>;

// Number of rounds for a 16/24/32-byte key. Throws for other sizes.
int rounds_for_key(std::size_t key_bytes);

// Full expanded key schedule, (rounds + 1) * 16 bytes. The first key_bytes
// bytes are the key itself.
std::vector<std::uint8_t> expand_key(std::span<const std::uint8_t> key);

Block encrypt_block(std::span<const std::uint8_t> round_keys, const Block& in);
Block decrypt_block(std::span<const std::uint8_t> round_keys, const Block& in);

}  // namespace cacheout::aes
