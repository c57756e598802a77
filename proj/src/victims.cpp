#include "cacheout/victims.hpp"

#include <bit>
#include <cstring>

#include "cacheout/aes.hpp"

namespace cacheout {

const Secret& VictimProgram::secret(const std::string& name) const {
  for (const auto& s : secrets) {
    if (s.name == name) return s;
  }
  throw SimulationError("victim " + id + " has no secret named " + name);
}

namespace {

void store_bytes(std::vector<VictimOp>& script, std::uint64_t addr,
                 std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < bytes.size(); i += 8) {
    std::uint8_t w[8] = {};
    std::memcpy(w, bytes.data() + i, std::min<std::size_t>(8, bytes.size() - i));
    script.push_back({VictimOp::Kind::store, Address{addr + i}, load_le64(w)});
  }
}

void load_range(std::vector<VictimOp>& script, std::uint64_t addr, std::size_t len) {
  for (std::size_t i = 0; i < len; i += 8) script.push_back({VictimOp::Kind::load, Address{addr + i}});
}

std::vector<std::uint8_t> u64_bytes(std::uint64_t v) {
  std::vector<std::uint8_t> out(8);
  store_le64(out.data(), v);
  return out;
}

std::size_t round_up(std::size_t n, std::size_t to) { return (n + to - 1) / to * to; }

}  // namespace

VictimProgram victim_line_writer(unsigned set, const Line& data) {
  if (set >= kNumSets) throw SimulationError("line writer: set out of range");
  VictimProgram p;
  p.id = "writer";
  p.base = kVictimBase;
  p.secrets.push_back({"line", p.base + set * kLineSize, {data.begin(), data.end()}});
  store_bytes(p.script, p.base + set * kLineSize, data);
  return p;
}

VictimProgram victim_aes(unsigned key_bits, const std::string& message, Rng& rng) {
  if (key_bits != 128 && key_bits != 192 && key_bits != 256) {
    throw SimulationError("AES key size must be 128, 192 or 256");
  }
  std::vector<std::uint8_t> key(key_bits / 8);
  for (auto& b : key) b = rng.byte();
  aes::Block plaintext{};
  std::memcpy(plaintext.data(), message.data(), std::min<std::size_t>(16, message.size()));

  const auto schedule = aes::expand_key(key);
  const aes::Block ciphertext = aes::encrypt_block(schedule, plaintext);
  if (aes::decrypt_block(schedule, ciphertext) != plaintext) {
    throw SimulationError("AES self-check failed");
  }

  VictimProgram p;
  p.id = "aes-" + std::to_string(key_bits);
  p.base = kVictimBase;
  p.initial.push_back({"ciphertext", p.base + kAesCiphertextOffset,
                       {ciphertext.begin(), ciphertext.end()}});
  p.secrets.push_back({"plaintext", p.base + kAesPlaintextOffset, {plaintext.begin(), plaintext.end()}});
  p.secrets.push_back({"key", p.base + kAesScheduleOffset, key});
  p.secrets.push_back({"round_keys", p.base + kAesScheduleOffset, schedule});

  // Each decryption reads the ciphertext, expands the key and writes the result.
  load_range(p.script, p.base + kAesCiphertextOffset, 16);
  store_bytes(p.script, p.base + kAesScheduleOffset, schedule);
  store_bytes(p.script, p.base + kAesPlaintextOffset, plaintext);
  p.script.push_back({VictimOp::Kind::yield});
  return p;
}

std::vector<std::uint8_t> to_le_bytes(const mpz_class& v, std::size_t len) {
  std::vector<std::uint8_t> out(len, 0);
  std::size_t count = 0;
  std::vector<std::uint8_t> tmp((mpz_sizeinbase(v.get_mpz_t(), 2) + 7) / 8 + 1);
  mpz_export(tmp.data(), &count, -1, 1, 0, 0, v.get_mpz_t());
  if (count > len) throw SimulationError("integer does not fit in the requested width");
  std::copy_n(tmp.begin(), count, out.begin());
  return out;
}

mpz_class from_le_bytes(std::span<const std::uint8_t> bytes) {
  mpz_class v;
  mpz_import(v.get_mpz_t(), bytes.size(), -1, 1, 0, 0, bytes.data());
  return v;
}

RsaKey generate_rsa_key(unsigned bits, Rng& rng) {
  if (bits < 64 || bits % 64 != 0) throw SimulationError("RSA size must be a multiple of 64 bits");
  gmp_randclass gen(gmp_randinit_mt);
  gen.seed(static_cast<unsigned long>(rng.next()));
  const mpz_class e = 65537;
  auto prime = [&] {
    for (;;) {
      mpz_class c = gen.get_z_bits(bits / 2);
      // Top two bits set: p*q has exactly `bits` bits.
      mpz_setbit(c.get_mpz_t(), bits / 2 - 1);
      mpz_setbit(c.get_mpz_t(), bits / 2 - 2);
      mpz_nextprime(c.get_mpz_t(), c.get_mpz_t());
      if (mpz_sizeinbase(c.get_mpz_t(), 2) != bits / 2) continue;
      mpz_class g;
      const mpz_class cm1 = c - 1;
      mpz_gcd(g.get_mpz_t(), cm1.get_mpz_t(), e.get_mpz_t());
      if (g == 1) return c;
    }
  };
  RsaKey k;
  k.e = e;
  do {
    k.p = prime();
    k.q = prime();
  } while (k.p == k.q);
  k.n = k.p * k.q;
  const mpz_class phi = (k.p - 1) * (k.q - 1);
  mpz_invert(k.d.get_mpz_t(), e.get_mpz_t(), phi.get_mpz_t());
  k.dp = k.d % (k.p - 1);
  k.dq = k.d % (k.q - 1);
  return k;
}

VictimProgram victim_rsa(unsigned bits, Rng& rng) {
  if (bits != 512 && bits != 1024 && bits != 2048 && bits != 4096) {
    throw SimulationError("RSA size must be 512, 1024, 2048 or 4096");
  }
  return victim_rsa(generate_rsa_key(bits, rng), bits);
}

VictimProgram victim_rsa(const RsaKey& key, unsigned bits) {
  const std::size_t half = bits / 16;
  const std::size_t slot = round_up(half, kLineSize);
  VictimProgram p;
  p.id = "rsa-" + std::to_string(bits);
  p.base = kVictimBase;
  std::uint64_t at = p.base;
  auto place = [&](const char* name, const mpz_class& v, std::size_t len) {
    p.secrets.push_back({name, at, to_le_bytes(v, len)});
    p.initial.push_back(p.secrets.back());
    at += round_up(len, kLineSize);
  };
  place("p", key.p, half);
  place("q", key.q, half);
  place("d", key.d, bits / 8);
  place("dp", key.dp, half);
  place("dq", key.dq, half);
  p.secrets.push_back({"n", 0, to_le_bytes(key.n, bits / 8)});
  if (at - p.base > kPageSize) throw SimulationError("RSA key does not fit in one page");

  // CRT decryption walks both primes.
  load_range(p.script, p.base, half);
  load_range(p.script, p.base + slot, half);
  p.script.push_back({VictimOp::Kind::yield});
  return p;
}

VictimProgram victim_fann(const std::vector<float>& weights, std::uint64_t page_offset) {
  if (weights.size() != kFannWeights) {
    throw SimulationError("FANN model must have " + std::to_string(kFannWeights) + " weights");
  }
  const std::size_t len = weights.size() * 4;
  if (page_offset % 8 != 0 || page_offset + len > kPageSize) {
    throw SimulationError("weight array offset must be 8-aligned and fit in the page");
  }
  std::vector<std::uint8_t> bytes(len);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const auto bits = std::bit_cast<std::uint32_t>(weights[i]);
    for (int b = 0; b < 4; ++b) bytes[4 * i + b] = static_cast<std::uint8_t>(bits >> (8 * b));
  }
  VictimProgram p;
  p.id = "fann";
  p.base = kVictimBase;
  p.secrets.push_back({"weights", p.base + page_offset, bytes});
  p.initial = p.secrets;
  // One classification touches every weight.
  load_range(p.script, p.base + page_offset, len);
  p.script.push_back({VictimOp::Kind::yield});
  return p;
}

VictimProgram victim_kernel(std::uint64_t boot_seed, Domain domain, std::uint64_t base) {
  Rng boot(boot_seed);
  const std::uint64_t text = kKernelTextBase + boot.below(kKaslrSlots) * kKaslrAlign;
  const std::uint64_t pointer = text + kHrtickOffset;
  const std::uint64_t canary = boot.next() & ~std::uint64_t{0xff};

  VictimProgram p;
  p.id = "kernel";
  p.domain = domain;
  p.base = base;
  p.secrets.push_back({"text_base", 0, u64_bytes(text)});
  p.secrets.push_back({"pointer", base + kKernelPointerOffset, u64_bytes(pointer)});
  for (const auto off : kCanaryOffsets) p.secrets.push_back({"canary", base + off, u64_bytes(canary)});

  // Syscall path: timer state, a build-time constant, a tick counter and
  // the canary of each frame it walks through.
  p.script.push_back({VictimOp::Kind::store, Address{base + kKernelPointerOffset}, pointer});
  p.script.push_back({VictimOp::Kind::store, Address{base + 0x40}, 0x00000000c0ffee11ULL});
  p.script.push_back({VictimOp::Kind::store, Address{base + 0x388}, 0x1000, true});
  for (const auto off : kCanaryOffsets) {
    p.script.push_back({VictimOp::Kind::store, Address{base + off}, canary});
  }
  return p;
}

VictimProgram victim_enclave(std::span<const std::uint8_t> page, std::uint64_t base) {
  if (page.size() != kPageSize) throw SimulationError("enclave page must be 4096 bytes");
  VictimProgram p;
  p.id = "enclave";
  p.domain = Domain::enclave;
  p.base = base;
  p.size = kEnclaveFrames * kPageSize;
  p.secrets.push_back({"page", base, {page.begin(), page.end()}});
  for (std::size_t l = 0; l < kNumSets; ++l) {
    Line line;
    std::copy_n(page.begin() + static_cast<std::ptrdiff_t>(l * kLineSize), kLineSize, line.begin());
    p.lines.push_back(line);
  }
  for (unsigned f = 0; f < kEnclaveFrames; ++f) {
    for (std::size_t l = 0; l < kNumSets; ++l) {
      VictimOp op{VictimOp::Kind::store_line, Address{base + f * kPageSize + l * kLineSize}};
      op.line = l;
      p.script.push_back(op);
    }
  }
  return p;
}

VictimRunner::VictimRunner(MachineState& m, const VictimProgram& program, ThreadMode mode,
                           ThreadId attacker_thread)
    : m_(m), program_(program), mode_(mode) {
  thread_ = mode == ThreadMode::cross_thread ? (attacker_thread + 1) % kNumThreads : attacker_thread;
  ctx_ = m_.create_context(program.domain, program.id);
  m_.map_region(ctx_, program.base, program.size);
  for (const auto& s : program.initial) m_.poke(Address{s.addr}, s.bytes);
  if (mode_ == ThreadMode::cross_thread) m_.set_thread_context(thread_, ctx_);
}

void VictimRunner::step() {
  m_.background_activity();
  ContextId caller = ctx_;
  if (mode_ == ThreadMode::same_thread) {
    caller = m_.thread(thread_).context;
    m_.context_switch(thread_, ctx_);
  }
  for (const auto& op : program_.script) {
    switch (op.kind) {
      case VictimOp::Kind::load:
        m_.load(thread_, op.addr);
        break;
      case VictimOp::Kind::store:
        m_.store_u64(thread_, op.addr, op.value + (op.per_step ? steps_ : 0));
        break;
      case VictimOp::Kind::store_line:
        m_.store_line(thread_, op.addr, program_.lines.at(op.line));
        break;
      case VictimOp::Kind::yield:
        // sched_yield enters and leaves the kernel.
        m_.context_switch(thread_, m_.thread(thread_).context);
        break;
    }
  }
  if (mode_ == ThreadMode::same_thread) m_.context_switch(thread_, caller);
  ++steps_;
}

}  // namespace cacheout
