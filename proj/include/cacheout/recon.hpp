#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <gmpxx.h>

#include "cacheout/attack.hpp"

namespace cacheout {

// ----------------------------------------------------------------------- RSA

// Unordered candidate chunks of p and q (little-endian words of
// `chunk_bytes` bytes) and the public modulus.
struct ChunkPool {
  std::vector<std::uint64_t> chunks;
  mpz_class n;
  unsigned chunk_bytes = 8;
};

struct RsaOptions {
  // Maximum live branches per level; 0 keeps all.
  std::size_t beam = 0;
};

struct RsaResult {
  bool ok = false;
  mpz_class p, q;
  // Levels (chunks per prime) fully matched by at least one branch.
  unsigned deepest_level = 0;
  unsigned levels = 0;
  std::uint64_t pairs_tested = 0;
  std::string error;
};

// Rebuilds p and q chunk by chunk from the least significant end, keeping
// every pair whose partial product agrees with N on the low chunks.
RsaResult rsa_reconstruct(const ChunkPool& pool, unsigned bits, const RsaOptions& opts = {});

// Every 8-aligned 8-byte word of the known bytes of a dump, deduplicated.
ChunkPool chunk_pool_from_dump(const PageDump& dump, const mpz_class& n);

// ----------------------------------------------------------------------- AES

struct ByteDump {
  std::vector<std::uint8_t> bytes;
  std::vector<bool> known;

  static ByteDump from(std::span<const std::uint8_t> bytes);
  static ByteDump from(const PageDump& dump);
};

struct AesKeyCandidate {
  std::size_t offset = 0;
  std::vector<std::uint8_t> key;
  double match_score = 0.0;
};

inline constexpr double kDefaultAesThreshold = 0.75;

// Treats every window of key_bits/8 known bytes as a key, expands it and
// scores how many of the following schedule bytes the dump reproduces.
// Sorted by score, then offset.
std::vector<AesKeyCandidate> aes_locate(const ByteDump& dump, unsigned key_bits,
                                        double threshold = kDefaultAesThreshold);

// ------------------------------------------------------------------- weights

struct WeightCandidate {
  std::size_t offset = 0;
  std::uint32_t value = 0;
  std::uint64_t frequency = 1;
  double score = 0.0;
};

struct WeightFilterOptions {
  double penalty = 0.25;
  bool band = true;
  bool penalize_zero_ff = true;
};

struct WeightSlot {
  std::size_t offset = 0;
  std::vector<WeightCandidate> ranked;  // best first

  std::optional<std::uint32_t> top() const;
  bool in_top(std::uint32_t value, std::size_t k) const;
};

// Exponent byte of a small float stays within 3 of 0x40 (positive) or 0xc0.
bool in_exponent_band(std::uint32_t value);
bool has_zero_or_ff_byte(std::uint32_t value);

// Per slot: drop out-of-band candidates, scale the score of candidates with a
// 0x00 or 0xff byte by the penalty, rank by adjusted frequency.
std::vector<WeightSlot> weight_filter(const std::vector<std::vector<WeightCandidate>>& slots,
                                      const WeightFilterOptions& opts = {});

// Highest raw frequency, ties to the lower value. Baseline without filtering.
std::optional<std::uint32_t> naive_weight(const std::vector<WeightCandidate>& slot);

// 4-byte candidates at page offset `offset` from chains of sampled pairs
// whose shared bytes agree. Frequency is the weakest link's count.
std::vector<WeightCandidate> chain_candidates(const Histogram& h, std::size_t offset,
                                              std::size_t top_pairs = 6);

// --------------------------------------------------------------------- image

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

enum class ColorDistance { squared_difference, product };

struct ImageOptions {
  ColorDistance distance = ColorDistance::squared_difference;
  Rgb sentinel{255, 0, 255};
};

struct Image {
  unsigned width = 0, height = 0;
  std::vector<Rgb> pixels;
  std::vector<bool> filled;
};

std::uint64_t color_distance(Rgb a, Rgb b, ColorDistance kind);

// One raster pass: each pixel takes the candidate closest to the current
// choice of its 4-neighbours. Pixels without candidates get the sentinel.
Image image_reconstruct(const std::vector<std::vector<Rgb>>& candidates, unsigned width,
                        unsigned height, const ImageOptions& opts = {});

void write_ppm(std::ostream& out, const Image& img);

// --------------------------------------------------------------- static slots

struct StaticLocation {
  unsigned line = 0;
  unsigned offset = 0;
  // Value seen in each run where the slot was consistent.
  std::vector<std::uint64_t> values;
  // Same value in every run.
  bool stable = false;
};

struct StaticOptions {
  std::size_t min_runs = 2;
  // Minimum modal share of each byte within a run.
  double consistency = 0.5;
};

// 8-aligned slots holding a consistent nonzero value in at least min_runs
// dumps. Values that survive a guest reboot unchanged are `stable`
// (hypervisor-owned); values that change are per-boot secrets.
std::vector<StaticLocation> find_static_locations(const std::vector<PageDump>& dumps,
                                                  const StaticOptions& opts = {});

// Consistent 8-byte value of one slot in one dump, if any.
std::optional<std::uint64_t> consistent_word(const PageDump& dump, std::size_t pos,
                                             double consistency = 0.5);

}  // namespace cacheout
