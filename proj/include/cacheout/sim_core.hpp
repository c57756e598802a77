#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "cacheout/rng.hpp"
#include "cacheout/types.hpp"
#include "json.hpp"

namespace cacheout {

struct CacheLine {
  std::uint64_t tag = 0;
  Line data{};
  bool dirty = false;
  bool valid = false;
  std::uint8_t lru_rank = 0;  // 0 = most recently used
  ContextId owner = kSystemContext;

  friend bool operator==(const CacheLine&, const CacheLine&) = default;
};

// True-LRU, 64 x 8 virtually indexed cache.
class L1DCache {
 public:
  using Set = std::array<CacheLine, kNumWays>;

  const Set& set(unsigned index) const { return sets_.at(index); }

  CacheLine* find(std::uint64_t tag);
  const CacheLine* find(std::uint64_t tag) const;

  // Way that the next fill into `set_index` replaces: the lowest invalid way,
  // otherwise the least recently used one.
  unsigned victim_way(unsigned set_index) const;

  void touch(unsigned set_index, unsigned way);
  // Installs a line into `way` (which must be invalid or the victim) as MRU.
  void install(unsigned set_index, unsigned way, const CacheLine& line);
  void invalidate(unsigned set_index, unsigned way);
  void clear();

  std::size_t valid_lines() const;

  friend bool operator==(const L1DCache&, const L1DCache&) = default;

 private:
  std::array<Set, kNumSets> sets_{};
};

enum class FillKind : std::uint8_t { none, fill, writeback, background };

struct FillBufferEntry {
  std::uint64_t tag = 0;
  Line data{};
  bool valid = false;
  std::uint64_t age = 0;  // fill counter value at allocation; larger = younger
  ContextId owner = kSystemContext;
  FillKind kind = FillKind::none;

  friend bool operator==(const FillBufferEntry&, const FillBufferEntry&) = default;
};

// 12-entry line fill buffer with FIFO replacement and the core-global read
// offset register that a faulting load reuses.
class FillBuffer {
 public:
  const std::array<FillBufferEntry, kLfbEntries>& entries() const { return entries_; }
  const FillBufferEntry& entry(std::size_t i) const { return entries_.at(i); }

  // Takes an invalid slot if one exists, otherwise displaces the oldest.
  std::size_t allocate(std::uint64_t tag, const Line& data, ContextId owner, FillKind kind);

  void clear();  // invalidate and zero-fill every entry
  std::size_t valid_count() const;
  std::optional<std::size_t> youngest_valid() const;

  unsigned read_offset() const { return read_offset_; }
  void set_read_offset(unsigned off) { read_offset_ = off & 63; }

  friend bool operator==(const FillBuffer&, const FillBuffer&) = default;

 private:
  std::array<FillBufferEntry, kLfbEntries> entries_{};
  std::uint64_t next_age_ = 1;
  unsigned read_offset_ = 0;
};

struct NoiseConfig {
  // Probability that one TAA iteration forwards the targeted LFB entry.
  double taa_success_prob = 1.0;
  // Given no success, probability of forwarding a random other entry instead
  // of zeros.
  double spurious_entry_prob = 0.0;
  // Per-byte probability that a spurious read reports 0x00 or 0xFF.
  double zero_ff_inflation = 0.0;
  // Unrelated fills injected by other system activity per victim step.
  unsigned background_fills = 0;

  static NoiseConfig off() { return {}; }
  static NoiseConfig defaults() { return {0.6, 0.5, 0.3, 2}; }
  // Weak forwarding drowned in spurious, 0x00/0xFF-heavy reads.
  static NoiseConfig harsh() { return {0.15, 0.9, 0.3, 2}; }
  void validate() const;

  friend bool operator==(const NoiseConfig&, const NoiseConfig&) = default;
};

struct Mitigations {
  bool verw_on_switch = false;
  bool l1d_flush_on_switch = false;
  bool tsx_disabled = false;

  friend bool operator==(const Mitigations&, const Mitigations&) = default;
};

struct ThreadContext {
  std::array<std::uint64_t, kNumRegisters> regs{};
  ContextId context = kSystemContext;

  friend bool operator==(const ThreadContext&, const ThreadContext&) = default;
};

struct ContextInfo {
  Domain domain = Domain::system;
  std::string name;

  friend bool operator==(const ContextInfo&, const ContextInfo&) = default;
};

struct BackingLine {
  Line data{};
  ContextId owner = kSystemContext;
  bool modified = false;  // written since mapping

  friend bool operator==(const BackingLine&, const BackingLine&) = default;
};

// One physical core's memory subsystem: L1-D, LFB, sparse L2 backing store
// and two logical threads. Deterministic for a given seed and op sequence.
class MachineState {
 public:
  explicit MachineState(std::uint64_t seed = 1, NoiseConfig noise = NoiseConfig::off(),
                        Mitigations mitigations = {});

  ContextId create_context(Domain domain, std::string name);
  const ContextInfo& context_info(ContextId id) const { return contexts_.at(id); }

  // Maps [base, base + size) into `owner`, zero-filled. Line granular.
  void map_region(ContextId owner, std::uint64_t base, std::size_t size);
  bool is_mapped(Address addr) const;
  ContextId owner_of(Address addr) const;

  // Loader path: writes L2 directly with no cache traffic.
  void poke(Address addr, std::span<const std::uint8_t> bytes);
  // Logical memory value (L1 copy if resident, else L2). No state change.
  std::uint8_t debug_read(Address addr) const;

  ThreadContext& thread(ThreadId t) { return threads_.at(t); }
  const ThreadContext& thread(ThreadId t) const { return threads_.at(t); }
  void set_thread_context(ThreadId t, ContextId ctx) { threads_.at(t).context = ctx; }
  // Scheduler switch: applies the configured switch-time mitigations.
  void context_switch(ThreadId t, ContextId ctx);

  Word load(ThreadId t, Address addr);
  void store(ThreadId t, Address addr, std::span<const std::uint8_t> bytes);
  void store_u64(ThreadId t, Address addr, std::uint64_t value);
  // Full-line write (string copy); `addr` must be line aligned.
  void store_line(ThreadId t, Address addr, const Line& data);
  void clflush(ThreadId t, Address addr);
  void verw(ThreadId t);
  void l1d_flush();

  // Throws Fault if `t` may not access the 8 bytes at `addr`.
  void check_access(ThreadId t, Address addr) const;
  // Current value without touching cache state (transactional reads).
  Word peek(Address addr) const;
  bool flush_marked(Address addr) const { return flush_marked_.contains(addr.line_tag()); }
  void set_read_offset(unsigned off) { lfb_.set_read_offset(off); }

  // Injects NoiseConfig::background_fills random fills owned by the system.
  void background_activity();

  const L1DCache& l1d() const { return l1d_; }
  const FillBuffer& lfb() const { return lfb_; }
  const std::unordered_map<std::uint64_t, BackingLine>& l2() const { return l2_; }
  const NoiseConfig& noise() const { return noise_; }
  const Mitigations& mitigations() const { return mitigations_; }
  Mitigations& mitigations() { return mitigations_; }
  Rng& rng() { return rng_; }

  // L1/LFB contents plus L2 lines modified since mapping. Field order is
  // fixed; byte arrays are lowercase hex.
  nlohmann::ordered_json snapshot() const;

  friend bool operator==(const MachineState&, const MachineState&) = default;

 private:
  BackingLine& backing(Address addr);
  CacheLine& fill_line(ThreadId t, Address addr);
  void writeback_to_l2(const CacheLine& line);

  L1DCache l1d_;
  FillBuffer lfb_;
  std::unordered_map<std::uint64_t, BackingLine> l2_;
  std::unordered_set<std::uint64_t> flush_marked_;
  std::array<ThreadContext, kNumThreads> threads_{};
  std::vector<ContextInfo> contexts_;
  NoiseConfig noise_;
  Mitigations mitigations_;
  Rng rng_;
};

}  // namespace cacheout
