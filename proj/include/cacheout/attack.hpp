#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cacheout/tsx.hpp"

namespace cacheout {

inline constexpr std::uint64_t kEvictionBase = 0x7f0000000000ULL;
inline constexpr std::uint64_t kLeakPageBase = 0x7e0000000000ULL;
inline constexpr unsigned kMaxEvictionSize = 16;
inline constexpr unsigned kPairsPerLine = kLineSize - 1;  // offsets 0..62

struct EvictionSet {
  unsigned target_set = 0;
  std::vector<Address> addrs;
};

// `size` addresses congruent to `target_set`, one per 4 KiB page.
EvictionSet build_eviction_set(unsigned target_set, unsigned size,
                               std::uint64_t base = kEvictionBase);

struct LeakSample {
  unsigned set = 0;
  unsigned offset = 0;
  BytePair pair{};
  std::uint64_t count = 0;

  friend bool operator==(const LeakSample&, const LeakSample&) = default;
};

// Count of each (set, offset, byte pair) observed. Iteration order is
// (set, offset, b0, b1) ascending.
class Histogram {
 public:
  void add(unsigned set, unsigned offset, BytePair pair, std::uint64_t count = 1);
  void merge(const Histogram& other);

  std::uint64_t count(unsigned set, unsigned offset, BytePair pair) const;
  std::uint64_t total(unsigned set, unsigned offset) const;
  std::vector<LeakSample> samples() const;
  std::vector<LeakSample> samples_for(unsigned set, std::optional<unsigned> offset = {}) const;
  bool empty() const { return cells_.empty(); }

  friend bool operator==(const Histogram&, const Histogram&) = default;

 private:
  static std::uint32_t key(unsigned set, unsigned offset, BytePair pair) {
    return (set << 24) | (offset << 16) | (unsigned{pair.first} << 8) | pair.second;
  }
  std::map<std::uint32_t, std::uint64_t> cells_;
};

// `set,offset,b0,b1,count` rows with a header line.
void write_histogram_csv(std::ostream& out, const Histogram& h);
Histogram read_histogram_csv(std::istream& in);

// Modal pair at one (set, offset): highest count, ties to the lower pair.
std::optional<LeakSample> modal_sample(std::span<const LeakSample> samples, unsigned offset);

struct StitchResult {
  std::vector<std::uint8_t> bytes;
  std::vector<bool> known;
  // Byte was reported identically by both overlapping pairs.
  std::vector<bool> agree;
  // Both overlapping pairs were present and reported different values.
  std::vector<bool> mismatch;
  // Fraction of links between adjacent sampled pairs whose shared byte matched.
  double confidence = 0.0;
};

// Chains the modal pair of each offset of one line into line bytes.
StitchResult stitch(std::span<const LeakSample> samples);

// Printable rendering; '?' follows a byte whose overlapping pairs disagreed
// and '.' stands for an unknown or non-printable byte.
std::string render(const StitchResult& r);

struct PageDump {
  // Per page offset: byte value -> count, from every sampled pair covering it.
  std::vector<std::array<std::uint32_t, 256>> candidates =
      std::vector<std::array<std::uint32_t, 256>>(kPageSize);
  Histogram samples;
  std::vector<std::uint8_t> bytes = std::vector<std::uint8_t>(kPageSize, 0);
  std::vector<bool> known = std::vector<bool>(kPageSize, false);
  std::vector<bool> agree = std::vector<bool>(kPageSize, false);

  double coverage() const;
  // Most frequent candidate at `pos` and its share of all candidates there.
  std::optional<std::pair<std::uint8_t, double>> modal(std::size_t pos) const;
};

// Builds candidate histograms and stitched lines from raw samples. The (0, 0)
// pair is what an empty or scrubbed buffer forwards and carries no signal, so
// it is dropped.
PageDump assemble_page_dump(const Histogram& samples);

enum class ThreadMode { same_thread, cross_thread };
enum class VerwPlacement { none, before_evict, after_evict };
enum class AttackKind { write, read };

struct AttackOptions {
  unsigned eviction_size = 8;
  VerwPlacement verw = VerwPlacement::none;
  bool l1d_flush_before_evict = false;
  // Run one victim step and scrub the LFB with verw before sampling, so a
  // batch starts without residue from earlier batches.
  bool warm_up = true;
};

using VictimStep = std::function<void()>;

// Attacker-side driver. Owns the attacker's eviction pages and leak page in
// its context; victims are only reachable through the callback.
class Attacker {
 public:
  Attacker(TransactionalCore& core, ThreadId thread, ContextId context, ThreadMode mode);

  ThreadMode mode() const { return mode_; }
  ThreadId thread() const { return thread_; }

  void access(const EvictionSet& set);
  // Flush probing arrays, run the leak primitive once, read the channel.
  TaaResult sample(unsigned offset);

  Histogram attack_write(const VictimStep& victim, unsigned target_set, unsigned offset,
                         unsigned iterations, const AttackOptions& opts = {});
  // Cross-thread only.
  Histogram attack_read(const VictimStep& victim, unsigned target_set, unsigned offset,
                        unsigned iterations, const AttackOptions& opts = {});

  // Sweeps every listed line (default all 64) over offsets 0..62.
  PageDump dump_page(const VictimStep& victim, unsigned iterations_per_offset, AttackKind kind,
                     const AttackOptions& opts = {}, std::span<const unsigned> lines = {});

 private:
  Histogram run_attack(const VictimStep& victim, unsigned target_set, unsigned offset,
                       unsigned iterations, const AttackOptions& opts);

  TransactionalCore& core_;
  ThreadId thread_;
  ContextId context_;
  ThreadMode mode_;
};

}  // namespace cacheout
