#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cacheout/recon.hpp"
#include "cacheout/victims.hpp"

namespace cacheout {

using ordered_json = nlohmann::ordered_json;

struct ScenarioConfig {
  std::string scenario;
  std::uint64_t seed = 1;
  std::string noise_preset = "default";
  NoiseConfig noise = NoiseConfig::defaults();
  Mitigations mitigations;
  // 0 selects the scenario's default.
  unsigned iterations = 0;
  std::string out_dir = "out";

  // Sweeps.
  unsigned eviction_max = 12;
  unsigned sweep_set = 10;

  // Kernel scenarios.
  Domain domain = Domain::kernel;
  unsigned training_boots = 3;
  unsigned online_iterations = 300;

  // AES victim.
  std::string message = "CacheOut leaks!!";

  // FANN victim.
  std::uint64_t fann_offset = kFannDefaultOffset;

  // Image scenario.
  unsigned image_width = 128;
  unsigned image_height = 194;
  double image_coverage = 0.71;
  ColorDistance image_distance = ColorDistance::squared_difference;

  // Overrides fields present in `j`; unknown keys are an error.
  void apply_json(const nlohmann::json& j);
  void set_noise_preset(const std::string& name);
  ordered_json to_json() const;
  unsigned iterations_or(unsigned fallback) const { return iterations ? iterations : fallback; }
};

// ------------------------------------------------------------------ sweeps

struct HeatCell {
  unsigned x = 0, y = 0;
  double correct = 0.0, incorrect = 0.0;
};

struct Heatmap {
  std::string kind;
  std::vector<HeatCell> cells;

  const HeatCell& at(unsigned x, unsigned y) const;
};

// x = eviction set size, y = 0.
Heatmap sweep_eviction_size(const ScenarioConfig& cfg);
// x = set written by the victim, y = set targeted by the attacker.
Heatmap sweep_set_matrix(const ScenarioConfig& cfg);
// x = sampled offset, y = byte position in the line.
Heatmap sweep_offset_matrix(const ScenarioConfig& cfg);
Heatmap run_sweep(const std::string& kind, const ScenarioConfig& cfg);

void write_heatmap_csv(std::ostream& out, const Heatmap& h);

// ----------------------------------------------------------------- attacks

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitOnline = 2, kExitOffline = 3 };

struct AttackRun {
  ordered_json report;
  Histogram histogram;
  std::optional<Image> image;
  int exit_code = kExitOk;
};

const std::vector<std::string>& attack_scenarios();
AttackRun run_attack_scenario(const ScenarioConfig& cfg);

// Offline phase only, from a saved histogram and the public part of a report.
AttackRun replay(const ordered_json& report, const Histogram& histogram);

// Write or read dump of a victim page, as used by the dump-page command.
struct DumpRun {
  PageDump dump;
  std::vector<std::uint8_t> truth;
  ordered_json report;
};
DumpRun dump_victim_page(const ScenarioConfig& cfg, const std::string& victim, AttackKind kind);

// report.json, histograms.csv and image.ppm under out/<scenario>/<seed>/.
// Returns the directory.
std::string write_artifacts(const ScenarioConfig& cfg, const AttackRun& run);

}  // namespace cacheout
