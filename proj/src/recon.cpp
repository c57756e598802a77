#include "cacheout/recon.hpp"

#include <algorithm>
#include <map>
#include <ostream>

#include "cacheout/aes.hpp"

namespace cacheout {

// ----------------------------------------------------------------------- RSA

namespace {

struct Branch {
  mpz_class p, q;
  std::uint64_t p0 = 0, q0 = 0;
  bool tied = true;
};

std::uint64_t low_word(const mpz_class& v, unsigned shift_bits, std::uint64_t mask) {
  mpz_class w = v >> shift_bits;
  // mpz_get_ui is 64-bit on LP64 targets.
  return static_cast<std::uint64_t>(mpz_get_ui(w.get_mpz_t())) & mask;
}

}  // namespace

RsaResult rsa_reconstruct(const ChunkPool& pool, unsigned bits, const RsaOptions& opts) {
  RsaResult res;
  const unsigned cb = pool.chunk_bytes;
  if (cb < 1 || cb > 8) {
    res.error = "chunk size must be 1..8 bytes";
    return res;
  }
  const unsigned wbits = 8 * cb;
  if (bits % (2 * wbits) != 0) {
    res.error = "modulus size is not a whole number of chunks per prime";
    return res;
  }
  if (pool.chunks.empty() || pool.n <= 0 || mpz_even_p(pool.n.get_mpz_t())) {
    res.error = "need a nonempty pool and an odd positive modulus";
    return res;
  }
  const std::uint64_t mask = cb == 8 ? ~std::uint64_t{0} : (std::uint64_t{1} << wbits) - 1;
  res.levels = bits / 2 / wbits;

  std::vector<std::uint64_t> chunks;
  for (auto c : pool.chunks) chunks.push_back(c & mask);
  std::sort(chunks.begin(), chunks.end());
  chunks.erase(std::unique(chunks.begin(), chunks.end()), chunks.end());

  // Level 0: a*b must agree with N on the lowest chunk. Symmetric pairs are
  // kept once by requiring a <= b while both partial primes are equal.
  std::vector<Branch> live;
  const std::uint64_t n0 = low_word(pool.n, 0, mask);
  for (const auto a : chunks) {
    for (const auto b : chunks) {
      ++res.pairs_tested;
      if (b < a || ((a * b) & mask) != n0) continue;
      Branch br;
      br.p = a;
      br.q = b;
      br.p0 = a;
      br.q0 = b;
      br.tied = a == b;
      live.push_back(std::move(br));
    }
  }

  for (unsigned k = 1; k <= res.levels; ++k) {
    if (live.empty()) {
      res.deepest_level = k - 1;
      res.error = "no chunk pair matches N at level " + std::to_string(k - 1);
      return res;
    }
    if (opts.beam && live.size() > opts.beam) live.resize(opts.beam);
    if (k == res.levels) break;
    // (P + a B^k)(Q + b B^k) mod B^(k+1) = P*Q + B^k (a*q0 + b*p0), so only
    // the k-th chunk of P*Q is needed per branch.
    const std::uint64_t nk = low_word(pool.n, k * wbits, mask);
    std::vector<Branch> next;
    for (const auto& br : live) {
      const mpz_class pq = br.p * br.q;
      const std::uint64_t c = low_word(pq, k * wbits, mask);
      for (const auto a : chunks) {
        const std::uint64_t partial = c + a * br.q0;
        for (const auto b : chunks) {
          ++res.pairs_tested;
          if (((partial + b * br.p0) & mask) != nk) continue;
          if (br.tied && b < a) continue;
          Branch nb;
          nb.p = br.p + (mpz_class(a) << (k * wbits));
          nb.q = br.q + (mpz_class(b) << (k * wbits));
          nb.p0 = br.p0;
          nb.q0 = br.q0;
          nb.tied = br.tied && a == b;
          next.push_back(std::move(nb));
        }
      }
    }
    live = std::move(next);
  }

  res.deepest_level = res.levels;
  for (const auto& br : live) {
    if (br.p * br.q == pool.n) {
      res.ok = true;
      res.p = br.p;
      res.q = br.q;
      return res;
    }
  }
  res.error = "no full-width candidate satisfies p*q == N";
  return res;
}

ChunkPool chunk_pool_from_dump(const PageDump& dump, const mpz_class& n) {
  ChunkPool pool;
  pool.n = n;
  for (std::size_t pos = 0; pos + 8 <= kPageSize; pos += 8) {
    bool all = true;
    for (std::size_t i = 0; i < 8; ++i) all = all && dump.known[pos + i];
    if (all) pool.chunks.push_back(load_le64(dump.bytes.data() + pos));
  }
  std::sort(pool.chunks.begin(), pool.chunks.end());
  pool.chunks.erase(std::unique(pool.chunks.begin(), pool.chunks.end()), pool.chunks.end());
  return pool;
}

// ----------------------------------------------------------------------- AES

ByteDump ByteDump::from(std::span<const std::uint8_t> bytes) {
  return ByteDump{{bytes.begin(), bytes.end()}, std::vector<bool>(bytes.size(), true)};
}

ByteDump ByteDump::from(const PageDump& dump) { return ByteDump{dump.bytes, dump.known}; }

std::vector<AesKeyCandidate> aes_locate(const ByteDump& dump, unsigned key_bits, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0)) throw SimulationError("threshold must be in (0, 1]");
  const std::size_t kb = key_bits / 8;
  const std::size_t total = 16 * static_cast<std::size_t>(aes::rounds_for_key(kb) + 1);
  const std::size_t need = total - kb;
  const std::size_t size = dump.bytes.size();
  std::vector<AesKeyCandidate> out;
  if (size < kb + 16) return out;
  const auto allowed = static_cast<std::size_t>((1.0 - threshold) * static_cast<double>(need) + 1e-9);

  for (std::size_t i = 0; i + kb <= size; ++i) {
    bool complete = true;
    for (std::size_t j = 0; j < kb && complete; ++j) complete = dump.known[i + j];
    if (!complete) continue;
    const auto schedule =
        aes::expand_key(std::span<const std::uint8_t>(dump.bytes.data() + i, kb));
    std::size_t misses = 0;
    for (std::size_t j = kb; j < total && misses <= allowed; ++j) {
      const std::size_t pos = i + j;
      if (pos >= size || !dump.known[pos] || dump.bytes[pos] != schedule[j]) ++misses;
    }
    if (misses > allowed) continue;
    const double score = static_cast<double>(need - misses) / static_cast<double>(need);
    if (score + 1e-12 < threshold) continue;
    out.push_back({i, {schedule.begin(), schedule.begin() + static_cast<std::ptrdiff_t>(kb)}, score});
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.match_score > b.match_score;
  });
  return out;
}

// ------------------------------------------------------------------- weights

bool in_exponent_band(std::uint32_t value) {
  const unsigned msb = value >> 24;
  return (msb >= 0x3d && msb <= 0x43) || (msb >= 0xbd && msb <= 0xc3);
}

bool has_zero_or_ff_byte(std::uint32_t value) {
  for (int i = 0; i < 4; ++i) {
    const unsigned b = (value >> (8 * i)) & 0xff;
    if (b == 0x00 || b == 0xff) return true;
  }
  return false;
}

std::optional<std::uint32_t> WeightSlot::top() const {
  if (ranked.empty()) return std::nullopt;
  return ranked.front().value;
}

bool WeightSlot::in_top(std::uint32_t value, std::size_t k) const {
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (ranked[i].value == value) return true;
  }
  return false;
}

std::vector<WeightSlot> weight_filter(const std::vector<std::vector<WeightCandidate>>& slots,
                                      const WeightFilterOptions& opts) {
  std::vector<WeightSlot> out;
  out.reserve(slots.size());
  for (const auto& cands : slots) {
    WeightSlot slot;
    if (!cands.empty()) slot.offset = cands.front().offset;
    for (auto c : cands) {
      if (opts.band && !in_exponent_band(c.value)) continue;
      c.score = static_cast<double>(c.frequency);
      if (opts.penalize_zero_ff && has_zero_or_ff_byte(c.value)) c.score *= opts.penalty;
      slot.ranked.push_back(c);
    }
    std::sort(slot.ranked.begin(), slot.ranked.end(), [](const auto& a, const auto& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.frequency != b.frequency) return a.frequency > b.frequency;
      return a.value < b.value;
    });
    out.push_back(std::move(slot));
  }
  return out;
}

std::optional<std::uint32_t> naive_weight(const std::vector<WeightCandidate>& slot) {
  const WeightCandidate* best = nullptr;
  for (const auto& c : slot) {
    if (!best || c.frequency > best->frequency ||
        (c.frequency == best->frequency && c.value < best->value)) {
      best = &c;
    }
  }
  if (!best) return std::nullopt;
  return best->value;
}

std::vector<WeightCandidate> chain_candidates(const Histogram& h, std::size_t offset,
                                              std::size_t top_pairs) {
  const unsigned set = static_cast<unsigned>(offset / kLineSize);
  const unsigned o = static_cast<unsigned>(offset % kLineSize);
  if (o + 2 >= kPairsPerLine) throw SimulationError("weight slot crosses a cache line");

  auto top = [&](unsigned off) {
    auto s = h.samples_for(set, off);
    std::sort(s.begin(), s.end(), [](const auto& a, const auto& b) {
      return a.count != b.count ? a.count > b.count : a.pair < b.pair;
    });
    if (s.size() > top_pairs) s.resize(top_pairs);
    return s;
  };
  const auto l0 = top(o), l1 = top(o + 1), l2 = top(o + 2);
  std::map<std::uint32_t, std::uint64_t> found;
  for (const auto& a : l0) {
    for (const auto& b : l1) {
      if (b.pair.first != a.pair.second) continue;
      for (const auto& c : l2) {
        if (c.pair.first != b.pair.second) continue;
        const std::uint32_t v = a.pair.first | (std::uint32_t{a.pair.second} << 8) |
                                (std::uint32_t{b.pair.second} << 16) |
                                (std::uint32_t{c.pair.second} << 24);
        const std::uint64_t f = std::min({a.count, b.count, c.count});
        auto& slot = found[v];
        slot = std::max(slot, f);
      }
    }
  }
  std::vector<WeightCandidate> out;
  for (const auto& [v, f] : found) out.push_back({offset, v, f, 0.0});
  return out;
}

// --------------------------------------------------------------------- image

std::uint64_t color_distance(Rgb a, Rgb b, ColorDistance kind) {
  auto term = [kind](std::uint8_t x, std::uint8_t y) -> std::uint64_t {
    const std::int64_t v = kind == ColorDistance::product ? std::int64_t{x} * y : std::int64_t{x} - y;
    return static_cast<std::uint64_t>(v * v);
  };
  return term(a.r, b.r) + term(a.g, b.g) + term(a.b, b.b);
}

Image image_reconstruct(const std::vector<std::vector<Rgb>>& candidates, unsigned width,
                        unsigned height, const ImageOptions& opts) {
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (candidates.size() != n) throw SimulationError("candidate list does not match image size");
  Image img{width, height, std::vector<Rgb>(n, opts.sentinel), std::vector<bool>(n, false)};
  for (std::size_t i = 0; i < n; ++i) {
    if (candidates[i].empty()) continue;
    img.pixels[i] = candidates[i].front();
    img.filled[i] = true;
  }
  for (unsigned y = 0; y < height; ++y) {
    for (unsigned x = 0; x < width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * width + x;
      const auto& cands = candidates[i];
      if (cands.size() < 2) continue;
      std::vector<std::size_t> neighbours;
      if (x > 0) neighbours.push_back(i - 1);
      if (x + 1 < width) neighbours.push_back(i + 1);
      if (y > 0) neighbours.push_back(i - width);
      if (y + 1 < height) neighbours.push_back(i + width);
      std::erase_if(neighbours, [&](std::size_t j) { return !img.filled[j]; });
      if (neighbours.empty()) continue;
      std::uint64_t best_score = ~std::uint64_t{0};
      for (const Rgb c : cands) {
        std::uint64_t s = 0;
        for (const auto j : neighbours) s += color_distance(c, img.pixels[j], opts.distance);
        if (s < best_score) {
          best_score = s;
          img.pixels[i] = c;
        }
      }
    }
  }
  return img;
}

void write_ppm(std::ostream& out, const Image& img) {
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  for (const Rgb p : img.pixels) {
    const char px[3] = {static_cast<char>(p.r), static_cast<char>(p.g), static_cast<char>(p.b)};
    out.write(px, 3);
  }
}

// --------------------------------------------------------------- static slots

std::optional<std::uint64_t> consistent_word(const PageDump& dump, std::size_t pos,
                                             double consistency) {
  std::uint8_t bytes[8];
  for (std::size_t j = 0; j < 8; ++j) {
    const auto m = dump.modal(pos + j);
    if (!m || m->second < consistency) return std::nullopt;
    bytes[j] = m->first;
  }
  const std::uint64_t v = load_le64(bytes);
  if (v == 0) return std::nullopt;
  return v;
}

std::vector<StaticLocation> find_static_locations(const std::vector<PageDump>& dumps,
                                                  const StaticOptions& opts) {
  if (dumps.size() < 2) throw SimulationError("need dumps from at least two runs");
  std::vector<StaticLocation> out;
  for (std::size_t pos = 0; pos + 8 <= kPageSize; pos += 8) {
    StaticLocation loc;
    loc.line = static_cast<unsigned>(pos / kLineSize);
    loc.offset = static_cast<unsigned>(pos % kLineSize);
    for (const auto& d : dumps) {
      if (const auto v = consistent_word(d, pos, opts.consistency)) loc.values.push_back(*v);
    }
    if (loc.values.size() < opts.min_runs) continue;
    loc.stable = std::all_of(loc.values.begin(), loc.values.end(),
                             [&](std::uint64_t v) { return v == loc.values.front(); });
    out.push_back(std::move(loc));
  }
  return out;
}

}  // namespace cacheout
