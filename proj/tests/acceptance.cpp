#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <set>
#include <sstream>

#include "cacheout/aes.hpp"
#include "cacheout/harness.hpp"

using namespace cacheout;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;  // 0 = none
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ScenarioConfig noiseless() {
  ScenarioConfig c;
  c.set_noise_preset("off");
  return c;
}

// ------------------------------------------------------------ small rigs

constexpr std::uint64_t kPage = kVictimBase;

VictimProgram reader(unsigned set, const Line& data) {
  VictimProgram p;
  p.id = "reader";
  p.base = kPage;
  const std::uint64_t at = kPage + set * kLineSize;
  p.initial.push_back({"line", at, std::vector<std::uint8_t>(data.begin(), data.end())});
  p.secrets = p.initial;
  VictimOp op;
  op.kind = VictimOp::Kind::load;
  op.addr = Address{at};
  p.script.push_back(op);
  return p;
}

struct Scene {
  MachineState m;
  TransactionalCore core{m};
  VictimProgram program;
  VictimRunner victim;
  Attacker attacker;

  Scene(VictimProgram p, ThreadMode mode, std::uint64_t seed = 1, NoiseConfig noise = NoiseConfig::off())
      : m(seed, noise),
        program(std::move(p)),
        victim(m, program, mode, 0),
        attacker(core, 0, m.create_context(Domain::process, "attacker"), mode) {}
};

Line random_line(Rng& rng) {
  Line l;
  for (auto& b : l) b = rng.byte();
  return l;
}

Line distinct_line(Rng& rng) {
  std::vector<std::uint8_t> v(255);
  for (unsigned i = 0; i < 255; ++i) v[i] = static_cast<std::uint8_t>(i + 1);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  Line l;
  std::copy_n(v.begin(), kLineSize, l.begin());
  return l;
}

// Samples that carry the planted pair, and samples other than (0, 0).
std::pair<std::uint64_t, std::uint64_t> tally(const Histogram& h, unsigned set, unsigned off, BytePair want) {
  std::uint64_t hit = 0, signal = 0;
  for (const auto& s : h.samples_for(set, off)) {
    if (s.pair == want) hit += s.count;
    if (s.pair != BytePair{0, 0}) signal += s.count;
  }
  return {hit, signal};
}

// ------------------------------------------------------------- criteria

Outcome c1_eviction_step() {
  const Heatmap h = sweep_eviction_size(noiseless());
  bool ok = h.cells.size() == 12;
  std::string row;
  for (const auto& c : h.cells) {
    ok = ok && c.correct == (c.x >= kNumWays ? 1.0 : 0.0);
    row += fmt("%g ", c.correct);
  }
  return {ok, "correct by size 1..12: " + row};
}

Outcome c2_set_diagonal() {
  const Heatmap h = sweep_set_matrix(noiseless());
  std::size_t nonzero = 0, off_diag = 0;
  for (const auto& c : h.cells) {
    if (c.correct > 0 || c.incorrect > 0) {
      ++nonzero;
      off_diag += c.x != c.y;
    }
  }
  bool ok = nonzero == kNumSets && off_diag == 0;
  unsigned bad_rows = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ScenarioConfig c;
    c.seed = seed;
    const Heatmap n = sweep_set_matrix(c);
    for (unsigned x = 0; x < kNumSets; ++x) {
      for (unsigned y = 0; y < kNumSets; ++y) {
        // Row and column argmax both on the diagonal, strictly.
        if (y != x && (n.at(x, y).correct >= n.at(x, x).correct || n.at(y, x).correct >= n.at(x, x).correct)) {
          ++bad_rows;
          x = kNumSets;
          break;
        }
      }
    }
  }
  ok = ok && bad_rows == 0;
  return {ok, fmt("noiseless nonzero cells %zu (off-diagonal %zu); default-noise rows off diagonal over seeds 1-20: %u",
                  nonzero, off_diag, bad_rows)};
}

Outcome c3_offset_diagonal() {
  Rng rng(33);
  const Line line = distinct_line(rng);
  const unsigned set = 21;
  Scene s(victim_line_writer(set, line), ThreadMode::cross_thread);
  unsigned right = 0;
  for (unsigned k = 0; k < kPairsPerLine; ++k) {
    const Histogram h = s.attacker.attack_write(s.victim.as_step(), set, k, 10);
    auto samples = h.samples_for(set);
    const auto m = modal_sample(samples, k);
    right += m && m->pair == BytePair{line[k], line[k + 1]} && h.samples_for(set, k).size() == 1;
  }
  return {right == kPairsPerLine, fmt("offsets recovering exactly (k, k+1): %u/63", right)};
}

Outcome c4_triad() {
  Rng rng(44);
  const Line line = distinct_line(rng);
  const unsigned set = 9, off = 5;
  const BytePair want{line[off], line[off + 1]};
  const unsigned iters = 50;
  auto write = [&](ThreadMode mode, AttackOptions o) {
    Scene s(victim_line_writer(set, line), mode);
    return tally(s.attacker.attack_write(s.victim.as_step(), set, off, iters, o), set, off, want);
  };
  auto read = [&](AttackOptions o) {
    Scene s(reader(set, line), ThreadMode::cross_thread);
    return tally(s.attacker.attack_read(s.victim.as_step(), set, off, iters, o), set, off, want);
  };
  AttackOptions none, before, after, flush;
  before.verw = VerwPlacement::before_evict;
  after.verw = VerwPlacement::after_evict;
  flush.l1d_flush_before_evict = true;

  const auto w0 = write(ThreadMode::cross_thread, none), r0 = read(none);
  const auto wa = write(ThreadMode::cross_thread, after), ra = read(after);
  const auto wb = write(ThreadMode::cross_thread, before), rb = read(before);
  const auto s0 = write(ThreadMode::same_thread, none), sf = write(ThreadMode::same_thread, flush);
  // The first victim load after warm-up hits L1 and bypasses the fill buffer.
  const bool base = w0.first == iters && r0.first == iters - 1 && s0.first == iters;
  const bool a = wa.second == 0 && ra.second == 0;
  const bool b = wb.first == iters && rb.second == 0;
  const bool c = sf.second == 0;
  return {base && a && b && c,
          fmt("baseline write/read/same-thread %llu/%llu/%llu of %u; (a) verw after evict write %llu read %llu; "
              "(b) verw before evict write %llu read %llu; (c) l1d_flush same-thread write %llu",
              (unsigned long long)w0.first, (unsigned long long)r0.first, (unsigned long long)s0.first, iters,
              (unsigned long long)wa.second, (unsigned long long)ra.second, (unsigned long long)wb.first,
              (unsigned long long)rb.second, (unsigned long long)sf.second)};
}

constexpr std::uint64_t kRegion = 0x400000;
constexpr std::uint64_t kRegionPages = 8;
constexpr std::uint64_t kLeakPage = 0x800000;

Address random_addr(Rng& rng) {
  return Address{kRegion + rng.below(kRegionPages * kPageSize / 8) * 8};
}

Instruction random_op(Rng& rng, bool in_tx) {
  switch (rng.below(in_tx ? 4 : 6)) {
    case 0: return isa::Load{static_cast<unsigned>(rng.below(kNumRegisters)), random_addr(rng)};
    case 1: return isa::Store{random_addr(rng), static_cast<unsigned>(rng.below(kNumRegisters))};
    case 2: return isa::MovImm{static_cast<unsigned>(rng.below(kNumRegisters)), rng.next()};
    case 3:
      return isa::Add{static_cast<unsigned>(rng.below(kNumRegisters)), static_cast<unsigned>(rng.below(kNumRegisters))};
    case 4: return isa::Clflush{random_addr(rng)};
    default: return isa::Verw{};
  }
}

struct Machine {
  MachineState m;
  TransactionalCore core{m};
  explicit Machine(std::uint64_t seed) : m(seed) {
    const ContextId ctx = m.create_context(Domain::process, "prog");
    m.map_region(ctx, kRegion, kRegionPages * kPageSize);
    m.map_region(ctx, kLeakPage, kPageSize);
    m.set_thread_context(0, ctx);
    core.set_leak_page(0, Address{kLeakPage});
  }
};

Outcome c5_isolation() {
  Rng rng(55);
  unsigned bad = 0, probe_changes = 0, leak_form = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    Program base;
    const std::size_t len = 5 + rng.below(30);
    for (std::size_t i = 0; i < len; ++i) base.push_back(random_op(rng, false));
    Program tx;
    if (rng.chance(0.5)) {
      tx.push_back(isa::XBegin{});
      for (std::size_t i = rng.below(8); i > 0; --i) tx.push_back(random_op(rng, true));
      tx.push_back(isa::Load{static_cast<unsigned>(rng.below(kNumRegisters)), Address{0xdead0000}});
      for (std::size_t i = rng.below(3); i > 0; --i) tx.push_back(random_op(rng, true));
      tx.push_back(isa::XEnd{});
    } else {
      ++leak_form;
      tx.push_back(isa::Leak{static_cast<unsigned>(rng.below(kLineSize))});
    }
    Program with = base;
    with.insert(with.begin() + static_cast<std::ptrdiff_t>(rng.below(base.size() + 1)), tx.begin(), tx.end());

    const std::uint64_t seed = rng.next();
    Machine a(seed), b(seed);
    run_program(a.core, 0, base);
    run_program(b.core, 0, with);
    bool same = a.m.thread(0) == b.m.thread(0) && a.m.thread(1) == b.m.thread(1) && a.m.l2() == b.m.l2();
    for (std::uint64_t addr = kRegion; same && addr < kRegion + kRegionPages * kPageSize; ++addr) {
      same = a.m.debug_read(Address{addr}) == b.m.debug_read(Address{addr});
    }
    bad += !same;
    probe_changes += !(a.core.probes(0) == b.core.probes(0) && a.core.probes(1) == b.core.probes(1));
  }
  return {bad == 0, fmt("programs with architectural divergence: %u/10000 (probing arrays differed in %u; "
                        "%u used the leak instruction)",
                        bad, probe_changes, leak_form)};
}

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

Outcome c6_rsa() {
  Rng rng(66);
  std::string detail;
  bool ok = true;
  double worst4096 = 0;
  for (const auto& [bits, count] : {std::pair{512u, 100}, {1024u, 100}, {2048u, 10}, {4096u, 10}}) {
    int good = 0;
    for (int i = 0; i < count; ++i) {
      const RsaKey k = generate_rsa_key(bits, rng);
      const ChunkPool pool = shred(k, bits, rng);
      const auto t0 = std::chrono::steady_clock::now();
      const RsaResult r = rsa_reconstruct(pool, bits);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (bits == 4096) worst4096 = std::max(worst4096, dt);
      good += r.ok && r.p * r.q == k.n && std::set<mpz_class>{r.p, r.q} == std::set<mpz_class>{k.p, k.q};
    }
    ok = ok && good == count;
    detail += fmt("%u-bit %d/%d; ", bits, good, count);
  }
  ok = ok && worst4096 < 60.0;
  return {ok, detail + fmt("slowest 4096-bit reconstruction %.3f s", worst4096)};
}

Outcome c7_aes() {
  Rng rng(77);
  std::string detail;
  bool ok = true;
  for (unsigned bits : {128u, 192u, 256u}) {
    int rank1 = 0;
    for (int i = 0; i < 30; ++i) {
      std::vector<std::uint8_t> key(bits / 8);
      for (auto& b : key) b = rng.byte();
      const auto sched = aes::expand_key(key);
      std::vector<std::uint8_t> dump(kPageSize);
      for (auto& b : dump) b = rng.byte();
      const std::size_t at = rng.below(kPageSize - sched.size() + 1);
      std::copy(sched.begin(), sched.end(), dump.begin() + static_cast<std::ptrdiff_t>(at));
      const auto c = aes_locate(ByteDump::from(dump), bits);
      rank1 += !c.empty() && c[0].offset == at && c[0].key == key && c[0].match_score == 1.0;
    }
    ok = ok && rank1 == 30;
    detail += fmt("%u-bit rank-1 %d/30; ", bits, rank1);
  }
  std::size_t windows = 0, fp = 0;
  Rng noise(78);
  for (unsigned bits : {128u, 192u, 256u}) {
    std::size_t w = 0;
    while (w < 1000000) {
      std::vector<std::uint8_t> dump(kPageSize);
      for (auto& b : dump) b = noise.byte();
      fp += aes_locate(ByteDump::from(dump), bits, 0.9).size();
      w += kPageSize;
    }
    windows += w;
  }
  ok = ok && fp == 0;
  return {ok, detail + fmt("false positives at 0.9: %zu over %zu random windows", fp, windows)};
}

std::vector<LeakSample> pairs_of(const Line& l, unsigned set = 0) {
  std::vector<LeakSample> v;
  for (unsigned o = 0; o < kPairsPerLine; ++o) v.push_back({set, o, {l[o], l[o + 1]}, 1});
  return v;
}

Outcome c8_stitch() {
  Rng rng(88);
  unsigned exact = 0, wrong_agreed = 0;
  std::size_t agreed = 0;
  for (int i = 0; i < 1000; ++i) {
    const Line l = random_line(rng);
    const StitchResult r = stitch(pairs_of(l));
    bool ok = r.bytes.size() == kLineSize;
    for (unsigned j = 0; ok && j < kLineSize; ++j) ok = r.known[j] && r.bytes[j] == l[j];
    exact += ok;

    auto partial = pairs_of(l);
    std::erase_if(partial, [&](const LeakSample&) { return rng.chance(0.1); });
    const StitchResult p = stitch(partial);
    for (std::size_t j = 0; j < p.bytes.size(); ++j) {
      if (p.agree[j]) {
        ++agreed;
        wrong_agreed += p.bytes[j] != l[j];
      }
    }
  }
  return {exact == 1000 && wrong_agreed == 0 && agreed > 0,
          fmt("exact lines %u/1000; with 10%% dropped, agreed bytes %zu, wrong %u", exact, agreed, wrong_agreed)};
}

Outcome c9_weights() {
  unsigned better = 0;
  double naive = 0, band = 0, filtered = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    ScenarioConfig c;
    c.scenario = "fann";
    c.seed = seed;
    c.set_noise_preset("harsh");
    c.iterations = 40;
    const auto m = run_attack_scenario(c).report["metrics"];
    const double n = m["naive_top1_accuracy"], b = m["band_top1_accuracy"], f = m["filtered_top1_accuracy"];
    better += f > n;
    naive += n / 20;
    band += b / 20;
    filtered += f / 20;
  }
  return {better == 20, fmt("filtered beats naive on %u/20 models; mean top-1 naive %.3f, band %.3f, "
                            "band+penalty %.3f",
                            better, naive, band, filtered)};
}

Outcome c10_end_to_end() {
  std::vector<std::future<std::pair<std::string, int>>> jobs;
  for (const char* s : {"aes-128", "rsa-1024", "kaslr", "canary"}) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      jobs.push_back(std::async(std::launch::async, [s, seed] {
        ScenarioConfig c;
        c.scenario = s;
        c.seed = seed;
        return std::pair{fmt("%s/%llu", s, (unsigned long long)seed), run_attack_scenario(c).exit_code};
      }));
    }
  }
  auto image = std::async(std::launch::async, [] {
    ScenarioConfig c;
    c.scenario = "image";
    return run_attack_scenario(c);
  });
  unsigned ok = 0;
  std::string failed;
  for (auto& j : jobs) {
    const auto [name, code] = j.get();
    if (code == kExitOk) ++ok;
    else failed += " " + name;
  }
  const AttackRun img = image.get();
  const double nb = img.report["metrics"]["pixel_exact_neighbour"], rnd = img.report["metrics"]["pixel_exact_random"];
  const double cov = img.report["metrics"]["coverage"];
  return {ok == jobs.size() && nb > rnd,
          fmt("attacks verified %u/%zu%s%s; image 128x194 coverage %.3f pixel-exact neighbour %.3f vs random %.3f", ok,
              jobs.size(), failed.empty() ? "" : ", failed:", failed.c_str(), cov, nb, rnd)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

Outcome c11_determinism() {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "cacheout_acceptance_determinism";
  fs::remove_all(root);
  std::vector<ScenarioConfig> attacks;
  for (const char* s : {"aes-128", "rsa-512", "fann", "kaslr", "canary", "image"}) {
    ScenarioConfig c;
    c.scenario = s;
    c.seed = 7;
    if (c.scenario == "aes-128") c.iterations = 60;
    if (c.scenario == "image") c.image_width = c.image_height = 48;
    attacks.push_back(c);
  }
  unsigned compared = 0, differ = 0;
  for (int run = 0; run < 2; ++run) {
    for (auto c : attacks) {
      c.out_dir = (root / std::to_string(run)).string();
      write_artifacts(c, run_attack_scenario(c));
    }
    for (const char* kind : {"eviction-size", "set-matrix", "offset-matrix"}) {
      ScenarioConfig c;
      c.seed = 7;
      const fs::path dir = root / std::to_string(run) / kind;
      fs::create_directories(dir);
      std::ofstream f(dir / "heatmap.csv");
      write_heatmap_csv(f, run_sweep(kind, c));
    }
  }
  for (const auto& e : fs::recursive_directory_iterator(root / "0")) {
    if (!e.is_regular_file()) continue;
    const auto other = root / "1" / fs::relative(e.path(), root / "0");
    ++compared;
    differ += !fs::exists(other) || slurp(e.path()) != slurp(other);
  }
  fs::remove_all(root);
  return {compared >= 15 && differ == 0, fmt("files compared %u, differing %u", compared, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, "eviction-size step", 5, c1_eviction_step},
      {2, "set-selection diagonal", 60, c2_set_diagonal},
      {3, "offset-selection diagonal", 5, c3_offset_diagonal},
      {4, "leakage-source triad", 0, c4_triad},
      {5, "aborted-transaction isolation", 30, c5_isolation},
      {6, "rsa reconstruction", 0, c6_rsa},
      {7, "aes key location", 0, c7_aes},
      {8, "line stitching", 0, c8_stitch},
      {9, "weight filter vs naive", 0, c9_weights},
      {10, "end-to-end scenarios", 0, c10_end_to_end},
      {11, "determinism", 0, c11_determinism},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && !only.contains(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0 && dt >= c.budget_s) {
      o.pass = false;
      o.detail += fmt("; over the %.0f s budget", c.budget_s);
    }
    failed += !o.pass;
    std::printf("[%s] %2d %s: %s (%.2f s)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), dt);
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
