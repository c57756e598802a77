#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cacheout {

// L1-D geometry: 64 sets x 8 ways x 64-byte lines, virtually indexed by bits 6-11.
inline constexpr std::size_t kLineSize = 64;
inline constexpr std::size_t kNumSets = 64;
inline constexpr std::size_t kNumWays = 8;
inline constexpr std::size_t kPageSize = 4096;
inline constexpr std::size_t kLfbEntries = 12;
inline constexpr std::size_t kNumRegisters = 16;
inline constexpr std::size_t kNumThreads = 2;

using Line = std::array<std::uint8_t, kLineSize>;
using Word = std::array<std::uint8_t, 8>;
using ThreadId = unsigned;

struct Address {
  std::uint64_t vaddr = 0;

  constexpr Address() = default;
  constexpr explicit Address(std::uint64_t v) : vaddr(v) {}

  constexpr unsigned set_index() const { return static_cast<unsigned>((vaddr >> 6) & 63); }
  constexpr unsigned line_offset() const { return static_cast<unsigned>(vaddr & 63); }
  constexpr unsigned page_offset() const { return static_cast<unsigned>(vaddr & (kPageSize - 1)); }
  constexpr std::uint64_t line_tag() const { return vaddr >> 6; }
  constexpr std::uint64_t line_base() const { return vaddr & ~std::uint64_t{63}; }
  constexpr Address operator+(std::uint64_t delta) const { return Address{vaddr + delta}; }
  friend constexpr bool operator==(Address, Address) = default;
  friend constexpr auto operator<=>(Address, Address) = default;
};

constexpr Address line_address(std::uint64_t tag) { return Address{tag << 6}; }

// Security-domain label of a context. Domains are labels, not page tables.
enum class Domain { process, kernel, vm_guest, hypervisor, enclave, system };

std::string_view to_string(Domain d);
Domain domain_from_string(std::string_view s);

// Identifies an address-space owner. Context 0 is the "system" pseudo-context
// that owns background activity.
using ContextId = std::uint32_t;
inline constexpr ContextId kSystemContext = 0;

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Architectural fault: unmapped or cross-domain access.
class Fault : public SimulationError {
 public:
  Fault(Address addr, const std::string& why)
      : SimulationError(why), addr_(addr) {}
  Address address() const { return addr_; }

 private:
  Address addr_;
};

class TsxUnavailable : public SimulationError {
 public:
  TsxUnavailable() : SimulationError("TSX is disabled; leak primitive unavailable") {}
};

std::string to_hex(const std::uint8_t* data, std::size_t n);

template <std::size_t N>
std::string to_hex(const std::array<std::uint8_t, N>& a) {
  return to_hex(a.data(), N);
}

std::uint64_t load_le64(const std::uint8_t* p);
void store_le64(std::uint8_t* p, std::uint64_t v);

}  // namespace cacheout
