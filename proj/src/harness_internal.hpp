#pragma once

#include "cacheout/harness.hpp"

namespace cacheout::detail {

// One machine with a victim and an attacker on thread 0.
struct Rig {
  Rig(const ScenarioConfig& cfg, std::uint64_t seed, VictimProgram prog, ThreadMode mode);
  Rig(const Rig&) = delete;
  Rig& operator=(const Rig&) = delete;

  // Harness-only view of the victim's first page.
  std::vector<std::uint8_t> victim_page() const;

  MachineState m;
  TransactionalCore core;
  VictimProgram program;
  VictimRunner victim;
  ContextId attacker_ctx;
  Attacker attacker;
};

// 64 distinct nonzero bytes.
Line distinct_line(Rng& rng);

}  // namespace cacheout::detail
