#pragma once

#include <array>
#include <bitset>
#include <cstdint>
#include <optional>
#include <utility>
#include <variant>
#include <vector>

#include "cacheout/sim_core.hpp"

namespace cacheout {

enum class TxStatus { active, aborted, committed };

struct Transaction {
  ThreadId thread = 0;
  std::array<std::uint64_t, kNumRegisters> saved_regs{};
  // Buffered stores, applied in order on commit.
  std::vector<std::pair<Address, Word>> write_log;
  TxStatus status = TxStatus::active;
};

// 256 probe lines, one per byte value, 4 KiB apart. Flush+Reload timing is
// collapsed to an exact presence bit per slot.
class ProbingArray {
 public:
  static constexpr std::size_t kSlots = 256;
  static constexpr std::uint64_t kStride = kPageSize;

  void flush() { present_.reset(); }
  void touch(std::uint8_t slot) { present_.set(slot); }
  bool present(std::uint8_t slot) const { return present_.test(slot); }
  // Distinct (page, set) location of a slot relative to the array base.
  static std::uint64_t slot_offset(std::uint8_t slot) { return slot * kStride; }

  friend bool operator==(const ProbingArray&, const ProbingArray&) = default;

 private:
  std::bitset<kSlots> present_;
};

std::vector<std::uint8_t> probe(const ProbingArray& array);

using BytePair = std::pair<std::uint8_t, std::uint8_t>;

struct TaaResult {
  std::optional<BytePair> recovered;
  std::optional<std::size_t> source_entry;
};

// Transactional execution, asynchronous abort and the dual-port leak
// primitive on top of a MachineState.
class TransactionalCore {
 public:
  explicit TransactionalCore(MachineState& machine) : machine_(machine) {}

  MachineState& machine() { return machine_; }
  const MachineState& machine() const { return machine_; }

  void xbegin(ThreadId t);
  TxStatus xend(ThreadId t);
  void abort(ThreadId t);
  bool in_transaction(ThreadId t) const { return tx_.at(t).has_value(); }

  // Inside a transaction a fault or a read of a clflush-marked line aborts
  // and returns nullopt. Outside, behaves like MachineState::load.
  std::optional<Word> tx_load(ThreadId t, Address addr);
  bool tx_store(ThreadId t, Address addr, const Word& value);

  // Registers the page whose lines the leak primitive flushes and reads.
  void set_leak_page(ThreadId t, Address page);

  // One iteration of the leak primitive. Forwarded bytes come from the
  // targeted LFB entry at (offset, offset + 1), wrapping within the line,
  // and are transmitted through the two probing arrays before rollback.
  // The caller flushes the probing arrays beforehand.
  TaaResult taa_leak(ThreadId t, unsigned offset);

  ProbingArray& probes(unsigned channel) { return probes_.at(channel); }
  const ProbingArray& probes(unsigned channel) const { return probes_.at(channel); }
  void flush_probing_arrays();

 private:
  struct Forwarding {
    std::size_t index;
    bool spurious;
  };
  // Entry a faulting load of thread `t` forwards from, after noise. nullopt
  // means zeros are forwarded.
  std::optional<Forwarding> pick_forwarding_entry(ThreadId t);

  MachineState& machine_;
  std::array<std::optional<Transaction>, kNumThreads> tx_;
  std::array<std::optional<Address>, kNumThreads> leak_page_;
  std::array<ProbingArray, 2> probes_;
};

// Minimal instruction set for driving the core from tests and tools.
namespace isa {
struct Load { unsigned reg; Address addr; };
struct Store { Address addr; unsigned reg; };
struct MovImm { unsigned reg; std::uint64_t imm; };
struct Add { unsigned dst; unsigned src; };
struct Clflush { Address addr; };
struct Verw {};
struct XBegin {};
struct XEnd {};
struct Leak { unsigned offset; };
}  // namespace isa

using Instruction = std::variant<isa::Load, isa::Store, isa::MovImm, isa::Add, isa::Clflush,
                                 isa::Verw, isa::XBegin, isa::XEnd, isa::Leak>;
using Program = std::vector<Instruction>;

// Executes `program` on thread `t`. An abort inside a transaction resumes
// after the matching XEnd. Faults outside a transaction propagate.
void run_program(TransactionalCore& core, ThreadId t, const Program& program);

}  // namespace cacheout
