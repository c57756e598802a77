#include "cacheout/sim_core.hpp"

#include <algorithm>
#include <cstdio>
#include <map>

namespace cacheout {

std::string_view to_string(Domain d) {
  switch (d) {
    case Domain::process: return "process";
    case Domain::kernel: return "kernel";
    case Domain::vm_guest: return "vm-guest";
    case Domain::hypervisor: return "hypervisor";
    case Domain::enclave: return "enclave";
    case Domain::system: return "system";
  }
  return "unknown";
}

Domain domain_from_string(std::string_view s) {
  for (Domain d : {Domain::process, Domain::kernel, Domain::vm_guest, Domain::hypervisor,
                   Domain::enclave, Domain::system}) {
    if (to_string(d) == s) return d;
  }
  throw SimulationError("unknown domain: " + std::string(s));
}

std::string to_hex(const std::uint8_t* data, std::size_t n) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(2 * n, '0');
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = kDigits[data[i] >> 4];
    out[2 * i + 1] = kDigits[data[i] & 15];
  }
  return out;
}

std::uint64_t load_le64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

void store_le64(std::uint8_t* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) p[i] = static_cast<std::uint8_t>(v >> (8 * i));
}

// ---------------------------------------------------------------- L1DCache

CacheLine* L1DCache::find(std::uint64_t tag) {
  auto& s = sets_[line_address(tag).set_index()];
  for (auto& line : s) {
    if (line.valid && line.tag == tag) return &line;
  }
  return nullptr;
}

const CacheLine* L1DCache::find(std::uint64_t tag) const {
  return const_cast<L1DCache*>(this)->find(tag);
}

unsigned L1DCache::victim_way(unsigned set_index) const {
  const auto& s = sets_.at(set_index);
  unsigned lru = 0;
  for (unsigned w = 0; w < kNumWays; ++w) {
    if (!s[w].valid) return w;
    if (s[w].lru_rank > s[lru].lru_rank) lru = w;
  }
  return lru;
}

void L1DCache::touch(unsigned set_index, unsigned way) {
  auto& s = sets_.at(set_index);
  const auto rank = s[way].lru_rank;
  for (auto& line : s) {
    if (line.valid && line.lru_rank < rank) ++line.lru_rank;
  }
  s[way].lru_rank = 0;
}

void L1DCache::install(unsigned set_index, unsigned way, const CacheLine& line) {
  auto& s = sets_.at(set_index);
  if (s[way].valid) invalidate(set_index, way);
  for (auto& other : s) {
    if (other.valid) ++other.lru_rank;
  }
  s[way] = line;
  s[way].valid = true;
  s[way].lru_rank = 0;
}

void L1DCache::invalidate(unsigned set_index, unsigned way) {
  auto& s = sets_.at(set_index);
  if (!s[way].valid) return;
  const auto rank = s[way].lru_rank;
  for (auto& line : s) {
    if (line.valid && line.lru_rank > rank) --line.lru_rank;
  }
  s[way] = CacheLine{};
}

void L1DCache::clear() { sets_ = {}; }

std::size_t L1DCache::valid_lines() const {
  std::size_t n = 0;
  for (const auto& s : sets_) {
    n += static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](const CacheLine& l) { return l.valid; }));
  }
  return n;
}

// -------------------------------------------------------------- FillBuffer

std::size_t FillBuffer::allocate(std::uint64_t tag, const Line& data, ContextId owner,
                                 FillKind kind) {
  std::size_t slot = kLfbEntries;
  for (std::size_t i = 0; i < kLfbEntries; ++i) {
    if (!entries_[i].valid) {
      slot = i;
      break;
    }
  }
  if (slot == kLfbEntries) {
    slot = 0;
    for (std::size_t i = 1; i < kLfbEntries; ++i) {
      if (entries_[i].age < entries_[slot].age) slot = i;
    }
  }
  entries_[slot] = FillBufferEntry{tag, data, true, next_age_++, owner, kind};
  return slot;
}

void FillBuffer::clear() {
  for (auto& e : entries_) e = FillBufferEntry{};
}

std::size_t FillBuffer::valid_count() const {
  return static_cast<std::size_t>(
      std::count_if(entries_.begin(), entries_.end(), [](const FillBufferEntry& e) { return e.valid; }));
}

std::optional<std::size_t> FillBuffer::youngest_valid() const {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < kLfbEntries; ++i) {
    if (entries_[i].valid && (!best || entries_[i].age > entries_[*best].age)) best = i;
  }
  return best;
}

// ------------------------------------------------------------- NoiseConfig

void NoiseConfig::validate() const {
  auto check = [](double p, const char* name) {
    if (!(p >= 0.0 && p <= 1.0)) {
      throw SimulationError(std::string("noise probability out of [0,1]: ") + name);
    }
  };
  check(taa_success_prob, "taa_success_prob");
  check(spurious_entry_prob, "spurious_entry_prob");
  check(zero_ff_inflation, "zero_ff_inflation");
}

// ------------------------------------------------------------ MachineState

MachineState::MachineState(std::uint64_t seed, NoiseConfig noise, Mitigations mitigations)
    : noise_(noise), mitigations_(mitigations), rng_(seed) {
  noise_.validate();
  contexts_.push_back(ContextInfo{Domain::system, "system"});
}

ContextId MachineState::create_context(Domain domain, std::string name) {
  contexts_.push_back(ContextInfo{domain, std::move(name)});
  return static_cast<ContextId>(contexts_.size() - 1);
}

void MachineState::map_region(ContextId owner, std::uint64_t base, std::size_t size) {
  if (owner >= contexts_.size()) throw SimulationError("map_region: unknown context");
  if (base % kLineSize != 0 || size % kLineSize != 0) {
    throw SimulationError("map_region: region must be line aligned");
  }
  for (std::uint64_t a = base; a < base + size; a += kLineSize) {
    auto [it, inserted] = l2_.try_emplace(Address{a}.line_tag(), BackingLine{{}, owner, false});
    if (!inserted) throw SimulationError("map_region: line already mapped");
  }
}

bool MachineState::is_mapped(Address addr) const { return l2_.contains(addr.line_tag()); }

ContextId MachineState::owner_of(Address addr) const {
  auto it = l2_.find(addr.line_tag());
  if (it == l2_.end()) throw Fault(addr, "unmapped address");
  return it->second.owner;
}

BackingLine& MachineState::backing(Address addr) {
  auto it = l2_.find(addr.line_tag());
  if (it == l2_.end()) throw Fault(addr, "unmapped address");
  return it->second;
}

void MachineState::poke(Address addr, std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const Address a = addr + i;
    backing(a).data[a.line_offset()] = bytes[i];
    if (auto* line = l1d_.find(a.line_tag())) line->data[a.line_offset()] = bytes[i];
  }
}

std::uint8_t MachineState::debug_read(Address addr) const {
  if (const auto* line = l1d_.find(addr.line_tag())) return line->data[addr.line_offset()];
  auto it = l2_.find(addr.line_tag());
  if (it == l2_.end()) throw Fault(addr, "unmapped address");
  return it->second.data[addr.line_offset()];
}

void MachineState::context_switch(ThreadId t, ContextId ctx) {
  if (mitigations_.l1d_flush_on_switch) l1d_flush();
  if (mitigations_.verw_on_switch) verw(t);
  threads_.at(t).context = ctx;
}

void MachineState::check_access(ThreadId t, Address addr) const {
  if (addr.line_offset() + 8 > kLineSize) {
    throw SimulationError("access crosses a cache line boundary");
  }
  auto it = l2_.find(addr.line_tag());
  if (it == l2_.end()) throw Fault(addr, "unmapped address");
  if (it->second.owner != threads_.at(t).context) throw Fault(addr, "cross-domain access");
}

Word MachineState::peek(Address addr) const {
  Word w{};
  const Line* src = nullptr;
  if (const auto* line = l1d_.find(addr.line_tag())) {
    src = &line->data;
  } else {
    auto it = l2_.find(addr.line_tag());
    if (it == l2_.end()) throw Fault(addr, "unmapped address");
    src = &it->second.data;
  }
  std::copy_n(src->begin() + addr.line_offset(), std::min<std::size_t>(8, kLineSize - addr.line_offset()),
              w.begin());
  return w;
}

void MachineState::writeback_to_l2(const CacheLine& line) {
  auto& b = backing(line_address(line.tag));
  b.data = line.data;
  b.modified = true;
}

// Miss path: the line transits a fresh LFB entry, which stays valid after the
// fill. A dirty victim is written back through its own LFB entry.
CacheLine& MachineState::fill_line(ThreadId t, Address addr) {
  const unsigned set = addr.set_index();
  if (auto* hit = l1d_.find(addr.line_tag())) {
    for (unsigned w = 0; w < kNumWays; ++w) {
      if (&l1d_.set(set)[w] == hit) l1d_.touch(set, w);
    }
    return *hit;
  }
  const auto& src = backing(addr);
  lfb_.allocate(addr.line_tag(), src.data, src.owner, FillKind::fill);

  const unsigned way = l1d_.victim_way(set);
  const CacheLine& old = l1d_.set(set)[way];
  if (old.valid && old.dirty) {
    lfb_.allocate(old.tag, old.data, old.owner, FillKind::writeback);
    writeback_to_l2(old);
  }
  l1d_.install(set, way, CacheLine{addr.line_tag(), src.data, false, true, 0, src.owner});
  flush_marked_.erase(addr.line_tag());
  (void)t;
  return *l1d_.find(addr.line_tag());
}

Word MachineState::load(ThreadId t, Address addr) {
  check_access(t, addr);
  const CacheLine& line = fill_line(t, addr);
  lfb_.set_read_offset(addr.line_offset());
  Word w{};
  std::copy_n(line.data.begin() + addr.line_offset(), 8, w.begin());
  return w;
}

void MachineState::store(ThreadId t, Address addr, std::span<const std::uint8_t> bytes) {
  if (bytes.size() > 8) throw SimulationError("store wider than 8 bytes");
  check_access(t, addr);
  CacheLine& line = fill_line(t, addr);
  std::copy(bytes.begin(), bytes.end(), line.data.begin() + addr.line_offset());
  line.dirty = true;
  lfb_.set_read_offset(addr.line_offset());
}

void MachineState::store_u64(ThreadId t, Address addr, std::uint64_t value) {
  Word w{};
  store_le64(w.data(), value);
  store(t, addr, w);
}

void MachineState::store_line(ThreadId t, Address addr, const Line& data) {
  if (addr.line_offset() != 0) throw SimulationError("store_line needs a line-aligned address");
  check_access(t, addr);
  CacheLine& line = fill_line(t, addr);
  line.data = data;
  line.dirty = true;
  lfb_.set_read_offset(0);
}

void MachineState::clflush(ThreadId, Address addr) {
  flush_marked_.insert(addr.line_tag());
  const unsigned set = addr.set_index();
  for (unsigned w = 0; w < kNumWays; ++w) {
    const CacheLine& line = l1d_.set(set)[w];
    if (line.valid && line.tag == addr.line_tag()) {
      if (line.dirty) {
        lfb_.allocate(line.tag, line.data, line.owner, FillKind::writeback);
        writeback_to_l2(line);
      }
      l1d_.invalidate(set, w);
      return;
    }
  }
}

void MachineState::verw(ThreadId) { lfb_.clear(); }

// Dirty lines go straight to L2. The flush command also overwrites the fill
// buffers, as it does on parts that enumerate MD_CLEAR.
void MachineState::l1d_flush() {
  for (unsigned s = 0; s < kNumSets; ++s) {
    for (const auto& line : l1d_.set(s)) {
      if (line.valid && line.dirty) writeback_to_l2(line);
    }
  }
  l1d_.clear();
  lfb_.clear();
}

void MachineState::background_activity() {
  for (unsigned i = 0; i < noise_.background_fills; ++i) {
    Line junk{};
    for (auto& b : junk) b = rng_.byte();
    const std::uint64_t tag = (0xfff0000000000ULL >> 6) + rng_.below(1u << 20);
    lfb_.allocate(tag, junk, kSystemContext, FillKind::background);
  }
}

nlohmann::ordered_json MachineState::snapshot() const {
  nlohmann::ordered_json j;
  j["read_offset"] = lfb_.read_offset();
  auto l1 = nlohmann::ordered_json::array();
  for (unsigned s = 0; s < kNumSets; ++s) {
    for (unsigned w = 0; w < kNumWays; ++w) {
      const auto& line = l1d_.set(s)[w];
      if (!line.valid) continue;
      nlohmann::ordered_json e;
      e["set"] = s;
      e["way"] = w;
      e["tag"] = line.tag;
      e["dirty"] = line.dirty;
      e["lru_rank"] = line.lru_rank;
      e["owner"] = line.owner;
      e["data"] = to_hex(line.data);
      l1.push_back(std::move(e));
    }
  }
  j["l1d"] = std::move(l1);
  auto lfb = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < kLfbEntries; ++i) {
    const auto& e = lfb_.entry(i);
    nlohmann::ordered_json o;
    o["index"] = i;
    o["valid"] = e.valid;
    o["tag"] = e.tag;
    o["age"] = e.age;
    o["owner"] = e.owner;
    o["data"] = to_hex(e.data);
    lfb.push_back(std::move(o));
  }
  j["lfb"] = std::move(lfb);
  std::map<std::uint64_t, const BackingLine*> modified;
  for (const auto& [tag, line] : l2_) {
    if (line.modified) modified.emplace(tag, &line);
  }
  auto l2 = nlohmann::ordered_json::array();
  for (const auto& [tag, line] : modified) {
    nlohmann::ordered_json o;
    o["line"] = tag << 6;
    o["owner"] = line->owner;
    o["data"] = to_hex(line->data);
    l2.push_back(std::move(o));
  }
  j["l2_deltas"] = std::move(l2);
  return j;
}

}  // namespace cacheout
