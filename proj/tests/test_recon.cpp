#include <bit>
#include <cmath>
#include <set>
#include <sstream>

#include "cacheout/aes.hpp"
#include "cacheout/recon.hpp"
#include "cacheout/victims.hpp"
#include "doctest.h"

using namespace cacheout;

namespace {

ChunkPool shred(const RsaKey& k, unsigned bits, Rng& rng) {
  ChunkPool pool;
  pool.n = k.n;
  for (const auto* prime : {&k.p, &k.q}) {
    const auto bytes = to_le_bytes(*prime, bits / 16);
    for (std::size_t i = 0; i < bytes.size(); i += 8) pool.chunks.push_back(load_le64(bytes.data() + i));
  }
  for (std::size_t i = pool.chunks.size(); i > 1; --i) std::swap(pool.chunks[i - 1], pool.chunks[rng.below(i)]);
  return pool;
}

// Pair samples of every (line, offset) of a page with optional noise pairs.
Histogram sample_page(std::span<const std::uint8_t> page, Rng& rng, unsigned true_count,
                      unsigned noise_pairs) {
  Histogram h;
  for (unsigned s = 0; s < kNumSets; ++s) {
    for (unsigned o = 0; o < kPairsPerLine; ++o) {
      h.add(s, o, {page[s * 64 + o], page[s * 64 + o + 1]}, true_count);
      for (unsigned k = 0; k < noise_pairs; ++k) h.add(s, o, {rng.byte(), rng.byte()}, 1);
    }
  }
  return h;
}

}  // namespace

TEST_CASE("rsa: one-byte toy") {
  ChunkPool pool;
  pool.n = 3233;
  pool.chunks = {0x3d, 0x35};
  pool.chunk_bytes = 1;
  const auto r = rsa_reconstruct(pool, 16);
  REQUIRE(r.ok);
  CHECK(std::set<mpz_class>{r.p, r.q} == std::set<mpz_class>{61, 53});
}

TEST_CASE("rsa: clean shuffled pools of 512-bit keys are always recovered") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const RsaKey k = generate_rsa_key(512, rng);
    const auto r = rsa_reconstruct(shred(k, 512, rng), 512);
    REQUIRE(r.ok);
    REQUIRE(r.p * r.q == k.n);
    REQUIRE(std::set<mpz_class>{r.p, r.q} == std::set<mpz_class>{k.p, k.q});
  }
}

TEST_CASE("rsa: junk chunks do not break soundness") {
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    const RsaKey k = generate_rsa_key(1024, rng);
    ChunkPool pool = shred(k, 1024, rng);
    for (int j = 0; j < 100; ++j) pool.chunks.push_back(rng.next());
    const auto r = rsa_reconstruct(pool, 1024);
    REQUIRE(r.ok);
    CHECK(r.p * r.q == k.n);
  }
}

TEST_CASE("rsa: a missing chunk is reported at its level") {
  Rng rng(3);
  const RsaKey k = generate_rsa_key(1024, rng);
  const auto pbytes = to_le_bytes(k.p, 64);
  const std::uint64_t missing = load_le64(pbytes.data() + 8 * 3);
  ChunkPool pool = shred(k, 1024, rng);
  std::erase(pool.chunks, missing);
  const auto r = rsa_reconstruct(pool, 1024);
  CHECK_FALSE(r.ok);
  CHECK(r.deepest_level == 3);
  CHECK(r.error.find("level 3") != std::string::npos);
}

TEST_CASE("rsa: bad inputs") {
  ChunkPool pool;
  pool.n = 15;
  CHECK_FALSE(rsa_reconstruct(pool, 128).ok);
  pool.chunks = {3};
  pool.n = 16;
  CHECK_FALSE(rsa_reconstruct(pool, 128).ok);
}

TEST_CASE("aes_locate: clean schedule scores 1.0 at its offset") {
  Rng rng(4);
  for (unsigned bits : {128u, 192u, 256u}) {
    std::vector<std::uint8_t> key(bits / 8);
    for (auto& b : key) b = rng.byte();
    const auto sched = aes::expand_key(key);
    std::vector<std::uint8_t> dump(kPageSize);
    for (auto& b : dump) b = rng.byte();
    const std::size_t at = 200 + rng.below(3000);
    std::copy(sched.begin(), sched.end(), dump.begin() + static_cast<std::ptrdiff_t>(at));
    const auto c = aes_locate(ByteDump::from(dump), bits, 1.0);
    REQUIRE(c.size() == 1);
    CHECK(c[0].offset == at);
    CHECK(c[0].key == key);
    CHECK(c[0].match_score == 1.0);
  }
}

TEST_CASE("aes_locate: random dumps give no candidates at 0.9") {
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed);
    std::vector<std::uint8_t> dump(kPageSize);
    for (auto& b : dump) b = rng.byte();
    REQUIRE(aes_locate(ByteDump::from(dump), 128, 0.9).empty());
  }
}

TEST_CASE("aes_locate: 10% corruption still ranks the true offset first at 0.8") {
  Rng rng(5);
  std::vector<std::uint8_t> key(16);
  for (auto& b : key) b = rng.byte();
  const auto sched = aes::expand_key(key);
  std::vector<std::uint8_t> dump(1024);
  for (auto& b : dump) b = rng.byte();
  std::copy(sched.begin(), sched.end(), dump.begin() + 300);
  for (std::size_t j = 16; j < sched.size(); ++j) {
    if (rng.chance(0.1)) dump[300 + j] ^= 0x5a;
  }
  const auto c = aes_locate(ByteDump::from(dump), 128, 0.8);
  REQUIRE_FALSE(c.empty());
  CHECK(c[0].offset == 300);
  CHECK(c[0].match_score < 1.0);
}

TEST_CASE("aes_locate: unknown bytes count as mismatch; short dumps are empty") {
  std::vector<std::uint8_t> key(16, 7);
  const auto sched = aes::expand_key(key);
  ByteDump d = ByteDump::from(sched);
  for (std::size_t j = 16; j < 16 + 16; ++j) d.known[j] = false;
  const auto c = aes_locate(d, 128, 0.5);
  REQUIRE_FALSE(c.empty());
  CHECK(c[0].match_score == doctest::Approx(144.0 / 160.0));
  CHECK(aes_locate(ByteDump::from(std::vector<std::uint8_t>(31)), 128, 0.5).empty());
  CHECK_THROWS(aes_locate(d, 128, 0.0));
}

TEST_CASE("weight filter: exponent band and penalty") {
  CHECK(in_exponent_band(0x40490fdb));
  CHECK_FALSE(in_exponent_band(0x7f800000));
  CHECK(in_exponent_band(0xbf000001));
  const std::vector<std::vector<WeightCandidate>> slots{
      {{0, 0x40490fdb, 3}, {0, 0x7f800000, 9}},
      {{4, 0x3f00ff11, 5}, {4, 0x3f123456, 5}},
  };
  const auto out = weight_filter(slots);
  REQUIRE(out.size() == 2);
  CHECK(out[0].ranked.size() == 1);
  CHECK(out[0].top() == 0x40490fdbu);
  CHECK(out[1].top() == 0x3f123456u);
  CHECK(naive_weight(slots[0]) == 0x7f800000u);
}

TEST_CASE("weight filter never drops an in-band value the victim stored") {
  Rng rng(6);
  for (int i = 0; i < 10000; ++i) {
    const float mag = 0.04f + static_cast<float>(rng.uniform()) * 7.0f;
    const float w = rng.chance(0.5) ? mag : -mag;
    const auto v = std::bit_cast<std::uint32_t>(w);
    if (!in_exponent_band(v)) continue;
    const auto out = weight_filter({{{0, v, 1}}});
    REQUIRE(out[0].top() == v);
  }
}

TEST_CASE("chain_candidates rebuilds a 4-byte value from pair samples") {
  Histogram h;
  const std::uint8_t v[4] = {0xdb, 0x0f, 0x49, 0x40};
  for (unsigned k = 0; k < 3; ++k) h.add(2, 8 + k, {v[k], v[k + 1]}, 10 - k);
  h.add(2, 9, {0x0f, 0xff}, 4);
  h.add(2, 10, {0xff, 0x40}, 4);
  const auto c = chain_candidates(h, 2 * 64 + 8);
  REQUIRE(c.size() == 2);
  CHECK(naive_weight(c) == 0x40490fdbu);
  CHECK(c[0].frequency + c[1].frequency == 8 + 4);
  CHECK_THROWS(chain_candidates(h, 62));
}

TEST_CASE("image: identity, neighbour choice and ppm output") {
  const unsigned w = 5, h = 4;
  std::vector<std::vector<Rgb>> cands(w * h, std::vector<Rgb>{{10, 20, 30}});
  auto img = image_reconstruct(cands, w, h);
  CHECK(std::all_of(img.pixels.begin(), img.pixels.end(), [](Rgb p) { return p == Rgb{10, 20, 30}; }));

  cands[7] = {{250, 250, 250}, {12, 21, 29}};
  img = image_reconstruct(cands, w, h);
  CHECK(img.pixels[7] == Rgb{12, 21, 29});

  cands[3].clear();
  img = image_reconstruct(cands, w, h);
  CHECK(img.pixels[3] == Rgb{255, 0, 255});
  CHECK_FALSE(img.filled[3]);

  std::ostringstream os;
  write_ppm(os, img);
  CHECK(os.str().substr(0, 11) == "P6\n5 4\n255\n");
  CHECK(os.str().size() == 11 + 3 * w * h);
  CHECK(color_distance({1, 2, 3}, {2, 2, 2}, ColorDistance::product) == 4 + 16 + 36);
}

TEST_CASE("image: neighbour scoring beats random choice at 71% coverage") {
  Rng rng(7);
  const unsigned w = 64, h = 48;
  std::vector<Rgb> truth(w * h);
  for (unsigned y = 0; y < h; ++y) {
    for (unsigned x = 0; x < w; ++x) {
      truth[y * w + x] = {static_cast<std::uint8_t>(x * 4), static_cast<std::uint8_t>(y * 5),
                          static_cast<std::uint8_t>((x + y) * 2)};
    }
  }
  std::vector<std::vector<Rgb>> cands(w * h);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (!rng.chance(0.71)) continue;
    cands[i].push_back(truth[i]);
    for (int k = 0; k < 2; ++k) cands[i].push_back({rng.byte(), rng.byte(), rng.byte()});
    for (std::size_t j = cands[i].size(); j > 1; --j) std::swap(cands[i][j - 1], cands[i][rng.below(j)]);
  }
  const auto img = image_reconstruct(cands, w, h);
  auto psnr = [&](const std::vector<Rgb>& px) {
    double se = 0;
    for (std::size_t i = 0; i < px.size(); ++i) se += double(color_distance(px[i], truth[i], ColorDistance::squared_difference));
    return 10 * std::log10(255.0 * 255.0 / (se / (3.0 * px.size())));
  };
  std::vector<Rgb> random_pick(w * h, Rgb{255, 0, 255});
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (!cands[i].empty()) random_pick[i] = cands[i][rng.below(cands[i].size())];
  }
  CHECK(psnr(img.pixels) > psnr(random_pick));
}

TEST_CASE("static locations: planted pointer found, noise excluded, stability labelled") {
  Rng rng(8);
  std::vector<PageDump> dumps;
  const std::uint64_t stable_value = 0x1122334455667788ULL;
  for (int run = 0; run < 3; ++run) {
    std::vector<std::uint8_t> page(kPageSize);
    for (auto& b : page) b = static_cast<std::uint8_t>(1 + rng.below(255));
    store_le64(page.data() + 0x148, kKernelTextBase + run * kKaslrAlign + kHrtickOffset);
    store_le64(page.data() + 0x40, stable_value);
    Histogram hist = sample_page(page, rng, 5, 0);
    // Most of the page is noisy: replace its true pairs with random ones.
    Histogram noisy;
    for (const auto& s : hist.samples()) {
      const bool keep = s.set == 5 || s.set == 1;
      for (int k = 0; k < 6; ++k) {
        noisy.add(s.set, s.offset, keep ? s.pair : BytePair{rng.byte(), rng.byte()}, 1);
      }
    }
    dumps.push_back(assemble_page_dump(noisy));
  }
  const auto locs = find_static_locations(dumps, {3, 0.5});
  std::set<std::pair<unsigned, unsigned>> where;
  for (const auto& l : locs) where.insert({l.line, l.offset});
  CHECK(where.count({5, 8}));
  CHECK(where.count({1, 0}));
  for (const auto& l : locs) {
    CHECK((l.line == 1 || l.line == 5));
    if (l.line == 5 && l.offset == 8) CHECK_FALSE(l.stable);
    if (l.line == 1 && l.offset == 0) CHECK(l.stable);
  }
  CHECK_THROWS(find_static_locations({dumps[0]}));
}
