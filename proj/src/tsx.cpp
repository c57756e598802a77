#include "cacheout/tsx.hpp"

#include <algorithm>

namespace cacheout {

std::vector<std::uint8_t> probe(const ProbingArray& array) {
  std::vector<std::uint8_t> hits;
  for (unsigned s = 0; s < ProbingArray::kSlots; ++s) {
    if (array.present(static_cast<std::uint8_t>(s))) hits.push_back(static_cast<std::uint8_t>(s));
  }
  return hits;
}

void TransactionalCore::xbegin(ThreadId t) {
  if (tx_.at(t)) throw SimulationError("nested transactions are not supported");
  Transaction tx;
  tx.thread = t;
  tx.saved_regs = machine_.thread(t).regs;
  tx_[t] = std::move(tx);
}

TxStatus TransactionalCore::xend(ThreadId t) {
  auto& tx = tx_.at(t);
  if (!tx) throw SimulationError("xend outside a transaction");
  auto log = std::move(tx->write_log);
  tx.reset();
  for (const auto& [addr, value] : log) machine_.store(t, addr, value);
  return TxStatus::committed;
}

void TransactionalCore::abort(ThreadId t) {
  auto& tx = tx_.at(t);
  if (!tx) return;
  machine_.thread(t).regs = tx->saved_regs;
  tx.reset();
}

std::optional<Word> TransactionalCore::tx_load(ThreadId t, Address addr) {
  if (!tx_.at(t)) return machine_.load(t, addr);
  try {
    machine_.check_access(t, addr);
  } catch (const Fault&) {
    abort(t);
    return std::nullopt;
  }
  if (machine_.flush_marked(addr)) {
    abort(t);
    return std::nullopt;
  }
  Word value = machine_.peek(addr);
  for (const auto& [a, w] : tx_[t]->write_log) {
    // Overlay buffered stores byte by byte.
    for (unsigned i = 0; i < 8; ++i) {
      const std::uint64_t byte_addr = a.vaddr + i;
      if (byte_addr >= addr.vaddr && byte_addr < addr.vaddr + 8) value[byte_addr - addr.vaddr] = w[i];
    }
  }
  machine_.set_read_offset(addr.line_offset());
  return value;
}

bool TransactionalCore::tx_store(ThreadId t, Address addr, const Word& value) {
  if (!tx_.at(t)) {
    machine_.store(t, addr, value);
    return true;
  }
  try {
    machine_.check_access(t, addr);
  } catch (const Fault&) {
    abort(t);
    return false;
  }
  tx_[t]->write_log.emplace_back(addr, value);
  return true;
}

void TransactionalCore::set_leak_page(ThreadId t, Address page) {
  leak_page_.at(t) = Address{page.vaddr & ~std::uint64_t{kPageSize - 1}};
}

void TransactionalCore::flush_probing_arrays() {
  for (auto& p : probes_) p.flush();
}

// The faulting load never sees fills of its own context; among the rest the
// youngest entry is the target. Noise may substitute another foreign entry or
// forward zeros.
std::optional<TransactionalCore::Forwarding> TransactionalCore::pick_forwarding_entry(ThreadId t) {
  const ContextId self = machine_.thread(t).context;
  const auto& entries = machine_.lfb().entries();
  std::vector<std::size_t> foreign;
  std::optional<std::size_t> target;
  for (std::size_t i = 0; i < kLfbEntries; ++i) {
    if (!entries[i].valid || entries[i].owner == self) continue;
    foreign.push_back(i);
    if (!target || entries[i].age > entries[*target].age) target = i;
  }
  if (!target) return std::nullopt;
  const NoiseConfig& noise = machine_.noise();
  Rng& rng = machine_.rng();
  if (rng.chance(noise.taa_success_prob)) return Forwarding{*target, false};
  if (rng.chance(noise.spurious_entry_prob)) {
    if (foreign.size() == 1) return Forwarding{*target, false};
    std::size_t pick = foreign[rng.below(foreign.size() - 1)];
    if (pick == *target) pick = foreign.back();
    return Forwarding{pick, true};
  }
  return std::nullopt;
}

TaaResult TransactionalCore::taa_leak(ThreadId t, unsigned offset) {
  if (machine_.mitigations().tsx_disabled) throw TsxUnavailable();
  if (offset > 63) throw SimulationError("taa_leak: offset out of range");
  const auto& page = leak_page_.at(t);
  if (!page) throw SimulationError("taa_leak: no leak page registered for thread");

  const Address leak_line = *page;
  if (!in_transaction(t)) {
    machine_.clflush(t, leak_line);
    xbegin(t);
  }

  // The trailing loads retire their offsets into the read-offset register
  // before the faulting load completes.
  const unsigned off0 = offset;
  const unsigned off1 = (offset + 1) & 63;
  machine_.set_read_offset(off0);

  TaaResult result;
  std::uint8_t b0 = 0;
  std::uint8_t b1 = 0;
  if (const auto fwd = pick_forwarding_entry(t)) {
    const auto& entry = machine_.lfb().entry(fwd->index);
    b0 = entry.data[off0];
    b1 = entry.data[off1];
    if (fwd->spurious) {
      Rng& rng = machine_.rng();
      const double z = machine_.noise().zero_ff_inflation;
      if (rng.chance(z)) b0 = rng.chance(0.5) ? 0x00 : 0xff;
      if (rng.chance(z)) b1 = rng.chance(0.5) ? 0x00 : 0xff;
    }
    result.source_entry = fwd->index;
  }
  machine_.set_read_offset(off1);
  probes_[0].touch(b0);
  probes_[1].touch(b1);

  // The load at the flushed leak line aborts; architectural effects roll back.
  (void)tx_load(t, leak_line);
  abort(t);

  const auto ch0 = probe(probes_[0]);
  const auto ch1 = probe(probes_[1]);
  if (!ch0.empty() && !ch1.empty()) result.recovered = BytePair{ch0.front(), ch1.front()};
  return result;
}

void run_program(TransactionalCore& core, ThreadId t, const Program& program) {
  MachineState& m = core.machine();
  auto& regs = m.thread(t).regs;
  std::size_t pc = 0;
  auto skip_to_xend = [&] {
    while (pc < program.size() && !std::holds_alternative<isa::XEnd>(program[pc])) ++pc;
  };
  while (pc < program.size()) {
    const Instruction& ins = program[pc];
    bool aborted = false;
    std::visit(
        [&](const auto& op) {
          using T = std::decay_t<decltype(op)>;
          if constexpr (std::is_same_v<T, isa::Load>) {
            const auto v = core.tx_load(t, op.addr);
            if (v) regs.at(op.reg) = load_le64(v->data());
            else aborted = true;
          } else if constexpr (std::is_same_v<T, isa::Store>) {
            Word w{};
            store_le64(w.data(), regs.at(op.reg));
            aborted = !core.tx_store(t, op.addr, w);
          } else if constexpr (std::is_same_v<T, isa::MovImm>) {
            regs.at(op.reg) = op.imm;
          } else if constexpr (std::is_same_v<T, isa::Add>) {
            regs.at(op.dst) += regs.at(op.src);
          } else if constexpr (std::is_same_v<T, isa::Clflush>) {
            if (core.in_transaction(t)) {
              // clflush inside a transaction aborts it.
              core.abort(t);
              aborted = true;
            } else {
              m.clflush(t, op.addr);
            }
          } else if constexpr (std::is_same_v<T, isa::Verw>) {
            m.verw(t);
          } else if constexpr (std::is_same_v<T, isa::XBegin>) {
            core.xbegin(t);
          } else if constexpr (std::is_same_v<T, isa::XEnd>) {
            core.xend(t);
          } else if constexpr (std::is_same_v<T, isa::Leak>) {
            const bool inside = core.in_transaction(t);
            core.taa_leak(t, op.offset);
            aborted = inside;
          }
        },
        ins);
    if (aborted) {
      skip_to_xend();
    }
    ++pc;
  }
  if (core.in_transaction(t)) core.abort(t);
}

}  // namespace cacheout
