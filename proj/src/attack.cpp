#include "cacheout/attack.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <sstream>

namespace cacheout {

EvictionSet build_eviction_set(unsigned target_set, unsigned size, std::uint64_t base) {
  if (target_set >= kNumSets) throw SimulationError("eviction set: target set out of range");
  if (size < 1 || size > kMaxEvictionSize) throw SimulationError("eviction set: size must be 1..16");
  EvictionSet es;
  es.target_set = target_set;
  for (unsigned i = 0; i < size; ++i) {
    es.addrs.push_back(Address{base + i * kPageSize + target_set * kLineSize});
  }
  return es;
}

// ---------------------------------------------------------------- Histogram

void Histogram::add(unsigned set, unsigned offset, BytePair pair, std::uint64_t count) {
  if (count == 0) return;
  cells_[key(set, offset, pair)] += count;
}

void Histogram::merge(const Histogram& other) {
  for (const auto& [k, c] : other.cells_) cells_[k] += c;
}

std::uint64_t Histogram::count(unsigned set, unsigned offset, BytePair pair) const {
  auto it = cells_.find(key(set, offset, pair));
  return it == cells_.end() ? 0 : it->second;
}

std::uint64_t Histogram::total(unsigned set, unsigned offset) const {
  std::uint64_t n = 0;
  for (auto it = cells_.lower_bound(key(set, offset, {0, 0}));
       it != cells_.end() && it->first <= key(set, offset, {255, 255}); ++it) {
    n += it->second;
  }
  return n;
}

namespace {
LeakSample unpack(std::uint32_t k, std::uint64_t c) {
  return LeakSample{k >> 24, (k >> 16) & 0xff,
                    BytePair{static_cast<std::uint8_t>(k >> 8), static_cast<std::uint8_t>(k)}, c};
}
}  // namespace

std::vector<LeakSample> Histogram::samples() const {
  std::vector<LeakSample> out;
  out.reserve(cells_.size());
  for (const auto& [k, c] : cells_) out.push_back(unpack(k, c));
  return out;
}

std::vector<LeakSample> Histogram::samples_for(unsigned set, std::optional<unsigned> offset) const {
  const std::uint32_t lo = offset ? key(set, *offset, {0, 0}) : key(set, 0, {0, 0});
  const std::uint32_t hi = offset ? key(set, *offset, {255, 255}) : key(set, 255, {255, 255});
  std::vector<LeakSample> out;
  for (auto it = cells_.lower_bound(lo); it != cells_.end() && it->first <= hi; ++it) {
    out.push_back(unpack(it->first, it->second));
  }
  return out;
}

void write_histogram_csv(std::ostream& out, const Histogram& h) {
  out << "set,offset,b0,b1,count\n";
  for (const auto& s : h.samples()) {
    out << s.set << ',' << s.offset << ',' << unsigned{s.pair.first} << ','
        << unsigned{s.pair.second} << ',' << s.count << '\n';
  }
}

Histogram read_histogram_csv(std::istream& in) {
  Histogram h;
  std::string line;
  if (!std::getline(in, line) || line.rfind("set,offset,b0,b1,count", 0) != 0) {
    throw SimulationError("histogram csv: missing header");
  }
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    unsigned long long f[5];
    char comma = 0;
    row >> f[0];
    for (int i = 1; i < 5; ++i) {
      row >> comma >> f[i];
      if (comma != ',') break;
    }
    if (!row || comma != ',' || f[0] >= kNumSets || f[1] >= kLineSize || f[2] > 255 || f[3] > 255) {
      throw SimulationError("histogram csv: malformed row " + std::to_string(lineno));
    }
    h.add(static_cast<unsigned>(f[0]), static_cast<unsigned>(f[1]),
          BytePair{static_cast<std::uint8_t>(f[2]), static_cast<std::uint8_t>(f[3])}, f[4]);
  }
  return h;
}

// ----------------------------------------------------------------- stitching

std::optional<LeakSample> modal_sample(std::span<const LeakSample> samples, unsigned offset) {
  std::optional<LeakSample> best;
  for (const auto& s : samples) {
    if (s.offset != offset || s.count == 0) continue;
    if (!best || s.count > best->count || (s.count == best->count && s.pair < best->pair)) best = s;
  }
  return best;
}

StitchResult stitch(std::span<const LeakSample> samples) {
  StitchResult r;
  if (samples.empty()) return r;
  std::array<std::optional<LeakSample>, kPairsPerLine> modal;
  unsigned max_offset = 0;
  bool any = false;
  for (unsigned k = 0; k < kPairsPerLine; ++k) {
    modal[k] = modal_sample(samples, k);
    if (modal[k]) {
      max_offset = k;
      any = true;
    }
  }
  if (!any) return r;

  const std::size_t n = max_offset + 2;
  r.bytes.assign(n, 0);
  r.known.assign(n, false);
  r.agree.assign(n, false);
  r.mismatch.assign(n, false);
  unsigned links = 0;
  unsigned agreeing = 0;
  for (std::size_t j = 0; j < n; ++j) {
    // Byte j is the leading byte of pair j and the trailing byte of pair j-1.
    std::optional<std::pair<std::uint8_t, std::uint64_t>> lead;
    std::optional<std::pair<std::uint8_t, std::uint64_t>> trail;
    if (j < kPairsPerLine && modal[j]) lead = {{modal[j]->pair.first, modal[j]->count}};
    if (j >= 1 && modal[j - 1]) trail = {{modal[j - 1]->pair.second, modal[j - 1]->count}};
    if (lead && trail) {
      ++links;
      r.known[j] = true;
      if (lead->first == trail->first) {
        ++agreeing;
        r.agree[j] = true;
        r.bytes[j] = lead->first;
      } else {
        r.mismatch[j] = true;
        if (lead->second != trail->second) {
          r.bytes[j] = lead->second > trail->second ? lead->first : trail->first;
        } else {
          r.bytes[j] = std::min(lead->first, trail->first);
        }
      }
    } else if (lead || trail) {
      r.known[j] = true;
      r.bytes[j] = lead ? lead->first : trail->first;
    }
  }
  r.confidence = links ? static_cast<double>(agreeing) / links : 0.0;
  return r;
}

std::string render(const StitchResult& r) {
  std::string out;
  for (std::size_t j = 0; j < r.bytes.size(); ++j) {
    if (!r.known[j]) {
      out += '.';
      continue;
    }
    out += (r.bytes[j] >= 0x20 && r.bytes[j] < 0x7f) ? static_cast<char>(r.bytes[j]) : '.';
    if (r.mismatch[j]) out += '?';
  }
  return out;
}

// ----------------------------------------------------------------- PageDump

double PageDump::coverage() const {
  std::size_t covered = 0;
  for (const auto& c : candidates) {
    if (std::any_of(c.begin(), c.end(), [](std::uint32_t n) { return n > 0; })) ++covered;
  }
  return static_cast<double>(covered) / kPageSize;
}

std::optional<std::pair<std::uint8_t, double>> PageDump::modal(std::size_t pos) const {
  const auto& c = candidates.at(pos);
  std::uint64_t total = 0;
  unsigned best = 0;
  for (unsigned v = 0; v < 256; ++v) {
    total += c[v];
    if (c[v] > c[best]) best = v;
  }
  if (total == 0) return std::nullopt;
  return std::pair<std::uint8_t, double>{static_cast<std::uint8_t>(best),
                                         static_cast<double>(c[best]) / total};
}

PageDump assemble_page_dump(const Histogram& samples) {
  PageDump d;
  d.samples = samples;
  for (unsigned set = 0; set < kNumSets; ++set) {
    auto line_samples = samples.samples_for(set);
    std::erase_if(line_samples, [](const LeakSample& s) {
      return s.pair == BytePair{0, 0} || s.offset >= kPairsPerLine;
    });
    if (line_samples.empty()) continue;
    const std::size_t base = set * kLineSize;
    for (const auto& s : line_samples) {
      d.candidates[base + s.offset][s.pair.first] += static_cast<std::uint32_t>(s.count);
      d.candidates[base + s.offset + 1][s.pair.second] += static_cast<std::uint32_t>(s.count);
    }
    const StitchResult r = stitch(line_samples);
    for (std::size_t j = 0; j < r.bytes.size(); ++j) {
      d.bytes[base + j] = r.bytes[j];
      d.known[base + j] = r.known[j];
      d.agree[base + j] = r.agree[j];
    }
  }
  return d;
}

// ------------------------------------------------------------------ Attacker

Attacker::Attacker(TransactionalCore& core, ThreadId thread, ContextId context, ThreadMode mode)
    : core_(core), thread_(thread), context_(context), mode_(mode) {
  MachineState& m = core_.machine();
  const std::uint64_t evict_base = kEvictionBase;
  if (!m.is_mapped(Address{evict_base})) {
    m.map_region(context_, evict_base, kMaxEvictionSize * kPageSize);
  }
  const Address leak_page{kLeakPageBase + thread * kPageSize};
  if (!m.is_mapped(leak_page)) m.map_region(context_, leak_page.vaddr, kPageSize);
  core_.set_leak_page(thread_, leak_page);
  m.set_thread_context(thread_, context_);
}

void Attacker::access(const EvictionSet& set) {
  for (const Address a : set.addrs) core_.machine().load(thread_, a);
}

TaaResult Attacker::sample(unsigned offset) {
  core_.flush_probing_arrays();
  return core_.taa_leak(thread_, offset);
}

Histogram Attacker::run_attack(const VictimStep& victim, unsigned target_set, unsigned offset,
                               unsigned iterations, const AttackOptions& opts) {
  MachineState& m = core_.machine();
  const EvictionSet es = build_eviction_set(target_set, opts.eviction_size);
  if (opts.warm_up) {
    victim();
    m.verw(thread_);
  }
  Histogram h;
  for (unsigned i = 0; i < iterations; ++i) {
    victim();
    if (opts.verw == VerwPlacement::before_evict) m.verw(thread_);
    if (opts.l1d_flush_before_evict) m.l1d_flush();
    access(es);
    if (opts.verw == VerwPlacement::after_evict) m.verw(thread_);
    const TaaResult r = sample(offset);
    if (r.recovered) h.add(target_set, offset, *r.recovered);
  }
  return h;
}

Histogram Attacker::attack_write(const VictimStep& victim, unsigned target_set, unsigned offset,
                                 unsigned iterations, const AttackOptions& opts) {
  return run_attack(victim, target_set, offset, iterations, opts);
}

Histogram Attacker::attack_read(const VictimStep& victim, unsigned target_set, unsigned offset,
                                unsigned iterations, const AttackOptions& opts) {
  if (mode_ != ThreadMode::cross_thread) {
    throw SimulationError("read attacks require a co-resident victim thread (cross-thread mode)");
  }
  return run_attack(victim, target_set, offset, iterations, opts);
}

PageDump Attacker::dump_page(const VictimStep& victim, unsigned iterations_per_offset,
                             AttackKind kind, const AttackOptions& opts,
                             std::span<const unsigned> lines) {
  std::vector<unsigned> all;
  if (lines.empty()) {
    for (unsigned s = 0; s < kNumSets; ++s) all.push_back(s);
    lines = all;
  }
  Histogram h;
  for (const unsigned set : lines) {
    for (unsigned off = 0; off < kPairsPerLine; ++off) {
      h.merge(kind == AttackKind::write
                  ? attack_write(victim, set, off, iterations_per_offset, opts)
                  : attack_read(victim, set, off, iterations_per_offset, opts));
    }
  }
  return assemble_page_dump(h);
}

}  // namespace cacheout
