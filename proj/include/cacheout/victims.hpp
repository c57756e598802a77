#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <gmpxx.h>

#include "cacheout/attack.hpp"

namespace cacheout {

// Ground-truth placement of one secret. Only the harness looks at these.
struct Secret {
  std::string name;
  std::uint64_t addr = 0;
  std::vector<std::uint8_t> bytes;
};

struct VictimOp {
  enum class Kind { load, store, store_line, yield };
  Kind kind = Kind::load;
  Address addr{};
  std::uint64_t value = 0;
  // Stored value becomes value + step number, for state that changes every
  // iteration (counters, timestamps).
  bool per_step = false;
  // store_line: index into VictimProgram::lines.
  std::size_t line = 0;
};

struct VictimProgram {
  std::string id;
  Domain domain = Domain::process;
  std::uint64_t base = 0;
  std::size_t size = kPageSize;
  // Memory image written by the loader before the first step.
  std::vector<Secret> initial;
  std::vector<Secret> secrets;
  std::vector<VictimOp> script;
  std::vector<Line> lines;

  const Secret& secret(const std::string& name) const;
};

inline constexpr std::uint64_t kVictimBase = 0x10000000ULL;

// Process that rewrites one line of its page every step.
VictimProgram victim_line_writer(unsigned set, const Line& data);

// AES: plaintext at +0x100, followed directly by the expanded key schedule
// (which begins with the key), ciphertext at +0x80.
inline constexpr std::uint64_t kAesPlaintextOffset = 0x100;
inline constexpr std::uint64_t kAesScheduleOffset = 0x110;
inline constexpr std::uint64_t kAesCiphertextOffset = 0x80;

VictimProgram victim_aes(unsigned key_bits, const std::string& message, Rng& rng);

struct RsaKey {
  mpz_class n, e, d, p, q, dp, dq;
};

// Random key of `bits` with two bits/2-bit primes.
RsaKey generate_rsa_key(unsigned bits, Rng& rng);

// Little-endian bytes of `v`, zero padded to `len`.
std::vector<std::uint8_t> to_le_bytes(const mpz_class& v, std::size_t len);
mpz_class from_le_bytes(std::span<const std::uint8_t> bytes);

// p and q line aligned from the page start, then d, dp, dq. Only p and q
// are loaded by the script.
VictimProgram victim_rsa(unsigned bits, Rng& rng);
VictimProgram victim_rsa(const RsaKey& key, unsigned bits);

inline constexpr std::size_t kFannWeights = 376;
inline constexpr std::uint64_t kFannDefaultOffset = 0x20;

VictimProgram victim_fann(const std::vector<float>& weights,
                          std::uint64_t page_offset = kFannDefaultOffset);

inline constexpr std::uint64_t kKernelTextBase = 0xffffffff81000000ULL;
inline constexpr std::uint64_t kKaslrAlign = 0x200000;
inline constexpr std::uint64_t kKaslrSlots = 488;
// Offset of the leaked symbol from the kernel text base.
inline constexpr std::uint64_t kHrtickOffset = 0x0e3a40;
inline constexpr std::uint64_t kKernelPointerOffset = 0x148;
inline constexpr std::uint64_t kCanaryOffsets[] = {0x2c8, 0x6d0, 0xa58};

// Kernel data page with a symbol pointer and the stack canary stored on
// every syscall. `boot_seed` fixes the randomized slide and canary.
VictimProgram victim_kernel(std::uint64_t boot_seed, Domain domain = Domain::kernel,
                            std::uint64_t base = kVictimBase);

inline constexpr unsigned kEnclaveFrames = kNumWays;

// Enclave page load: the decrypted page is written to kEnclaveFrames
// physical frames, one copy in every way of every set.
VictimProgram victim_enclave(std::span<const std::uint8_t> page, std::uint64_t base = kVictimBase);

// Drives a victim program on the machine, as a sibling thread or by
// switching the attacker's thread into the victim's context.
class VictimRunner {
 public:
  VictimRunner(MachineState& m, const VictimProgram& program, ThreadMode mode,
               ThreadId attacker_thread = 0);

  ContextId context() const { return ctx_; }
  ThreadId thread() const { return thread_; }
  std::uint64_t steps() const { return steps_; }

  void step();
  VictimStep as_step() {
    return [this] { step(); };
  }

 private:
  MachineState& m_;
  const VictimProgram& program_;
  ThreadMode mode_;
  ThreadId thread_;
  ContextId ctx_;
  std::uint64_t steps_ = 0;
};

}  // namespace cacheout
