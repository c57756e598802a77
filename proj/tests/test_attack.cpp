#include <sstream>

#include "cacheout/attack.hpp"
#include "doctest.h"

using namespace cacheout;

namespace {

constexpr std::uint64_t kVictimPage = 0x300000;

struct Scene {
  MachineState m;
  TransactionalCore core{m};
  ContextId victim_ctx;
  ContextId attacker_ctx;
  Attacker attacker;
  Line secret{};

  explicit Scene(ThreadMode mode = ThreadMode::cross_thread, NoiseConfig noise = NoiseConfig::off(),
                 std::uint64_t seed = 1)
      : m(seed, noise),
        victim_ctx(m.create_context(Domain::process, "victim")),
        attacker_ctx(m.create_context(Domain::process, "attacker")),
        attacker(core, 0, attacker_ctx, mode) {
    m.map_region(victim_ctx, kVictimPage, kPageSize);
    m.set_thread_context(1, victim_ctx);
    for (unsigned i = 0; i < kLineSize; ++i) secret[i] = static_cast<std::uint8_t>('a' + (i * 7) % 26);
  }

  // Writes the secret into line `set` of the victim page each step.
  VictimStep writer(unsigned set) {
    return [this, set] {
      for (unsigned o = 0; o < kLineSize; o += 8) {
        m.store(1, Address{kVictimPage + set * kLineSize + o},
                std::span<const std::uint8_t>(secret.data() + o, 8));
      }
    };
  }
};

std::vector<LeakSample> pairs(std::initializer_list<std::pair<char, char>> ps,
                              std::uint64_t count = 1) {
  std::vector<LeakSample> out;
  unsigned off = 0;
  for (auto [a, b] : ps) {
    out.push_back({0, off++, BytePair{static_cast<std::uint8_t>(a), static_cast<std::uint8_t>(b)}, count});
  }
  return out;
}

}  // namespace

TEST_CASE("eviction set addresses share the target set on distinct pages") {
  const auto es = build_eviction_set(17, 12);
  REQUIRE(es.addrs.size() == 12);
  for (std::size_t i = 0; i < es.addrs.size(); ++i) {
    CHECK(es.addrs[i].set_index() == 17);
    for (std::size_t j = 0; j < i; ++j) CHECK(es.addrs[i].vaddr / kPageSize != es.addrs[j].vaddr / kPageSize);
  }
  CHECK_THROWS_AS(build_eviction_set(0, 0), SimulationError);
  CHECK_THROWS_AS(build_eviction_set(0, 17), SimulationError);
  CHECK_THROWS_AS(build_eviction_set(64, 4), SimulationError);
}

TEST_CASE("stitching consistent pairs") {
  const auto r = stitch(pairs({{'A', 'B'}, {'B', 'C'}, {'C', 'D'}}));
  CHECK(render(r) == "ABCD");
  CHECK(r.confidence == 1.0);
}

TEST_CASE("stitching marks a disagreeing overlap") {
  const auto r = stitch(pairs({{'A', 'B'}, {'X', 'C'}}));
  CHECK(render(r) == "AB?C");
  CHECK(r.mismatch[1]);
  CHECK(r.confidence == 0.0);
}

TEST_CASE("stitching prefers the better supported overlap") {
  auto s = pairs({{'A', 'B'}});
  s.push_back({0, 1, BytePair{'X', 'C'}, 5});
  const auto r = stitch(s);
  CHECK(r.bytes[1] == 'X');
  CHECK(r.mismatch[1]);
}

TEST_CASE("modal pair ties break toward the lower pair") {
  std::vector<LeakSample> s{{0, 3, BytePair{9, 9}, 4}, {0, 3, BytePair{2, 7}, 4}, {0, 3, BytePair{1, 1}, 2}};
  const auto m = modal_sample(s, 3);
  REQUIRE(m);
  CHECK(m->pair == BytePair{2, 7});
  CHECK_FALSE(modal_sample(s, 4));
}

TEST_CASE("histogram csv round trip") {
  Histogram h;
  h.add(3, 5, {1, 2}, 4);
  h.add(63, 62, {255, 0}, 1);
  h.add(0, 0, {0, 0}, 9);
  std::stringstream ss;
  write_histogram_csv(ss, h);
  CHECK(read_histogram_csv(ss) == h);
  std::stringstream bad("set,offset,b0,b1,count\n1,2,3\n");
  CHECK_THROWS_AS(read_histogram_csv(bad), SimulationError);
  std::stringstream nohdr("1,2,3,4,5\n");
  CHECK_THROWS_AS(read_histogram_csv(nohdr), SimulationError);
  CHECK(h.total(3, 5) == 4);
}

TEST_CASE("write attack leaks the modified line") {
  Scene s;
  const unsigned set = 9;
  for (unsigned off = 0; off < kPairsPerLine; off += 13) {
    const Histogram h = s.attacker.attack_write(s.writer(set), set, off, 20);
    CHECK(h.count(set, off, {s.secret[off], s.secret[off + 1]}) == 20);
  }
}

TEST_CASE("eviction sets below the associativity do not evict") {
  Scene s;
  AttackOptions o;
  o.eviction_size = 7;
  const Histogram h = s.attacker.attack_write(s.writer(4), 4, 0, 50, o);
  CHECK(h.count(4, 0, {s.secret[0], s.secret[1]}) == 0);
}

TEST_CASE("verw after eviction scrubs the residue") {
  Scene s;
  AttackOptions o;
  o.verw = VerwPlacement::after_evict;
  const Histogram h = s.attacker.attack_write(s.writer(4), 4, 10, 50, o);
  CHECK(h.count(4, 10, {s.secret[10], s.secret[11]}) == 0);
}

TEST_CASE("read attacks need a sibling thread") {
  Scene s(ThreadMode::same_thread);
  CHECK_THROWS_AS(s.attacker.attack_read(s.writer(1), 1, 0, 1), SimulationError);
}

TEST_CASE("page dump of a single modified line") {
  Scene s;
  const unsigned set = 30;
  const unsigned lines[] = {set};
  const PageDump d = s.attacker.dump_page(s.writer(set), 10, AttackKind::write, {}, lines);
  CHECK(d.coverage() == doctest::Approx(64.0 / 4096));
  for (unsigned i = 0; i < kLineSize; ++i) {
    CHECK(d.known[set * kLineSize + i]);
    CHECK(d.bytes[set * kLineSize + i] == s.secret[i]);
  }
}

TEST_CASE("attacks are deterministic under a seed") {
  auto run = [](std::uint64_t seed) {
    Scene s(ThreadMode::cross_thread, NoiseConfig::defaults(), seed);
    Histogram h;
    for (unsigned off = 0; off < 8; ++off) h.merge(s.attacker.attack_write(s.writer(2), 2, off, 40));
    return h;
  };
  CHECK(run(4) == run(4));
  CHECK_FALSE(run(4) == run(5));
}
