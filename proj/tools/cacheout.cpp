#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "cacheout/harness.hpp"

namespace fs = std::filesystem;
using namespace cacheout;

namespace {

struct CommonFlags {
  std::uint64_t seed = 1;
  std::string noise = "default";
  std::vector<std::string> mitigations;
  unsigned iterations = 0;
  std::string out = "out";
  std::string config;
  std::string domain;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--seed", f.seed, "RNG seed");
  cmd->add_option("--noise", f.noise, "Noise preset")->check(CLI::IsMember({"default", "off", "harsh"}));
  cmd->add_option("--mitigation", f.mitigations, "Enable a mitigation (repeatable)")
      ->check(CLI::IsMember({"verw", "l1dflush", "tsx-off"}));
  cmd->add_option("--iterations", f.iterations, "Iterations per offset (0 = scenario default)");
  cmd->add_option("--out", f.out, "Output root directory");
  cmd->add_option("--domain", f.domain, "Victim domain for kernel scenarios")
      ->check(CLI::IsMember({"kernel", "vm_guest", "hypervisor"}));
  cmd->add_option("--config", f.config, "JSON config; its fields override flags")->check(CLI::ExistingFile);
}

// Flags first, then the config file on top.
ScenarioConfig resolve(const CommonFlags& f, const std::string& scenario) {
  ScenarioConfig cfg;
  cfg.scenario = scenario;
  cfg.seed = f.seed;
  cfg.set_noise_preset(f.noise);
  cfg.iterations = f.iterations;
  cfg.out_dir = f.out;
  if (!f.domain.empty()) cfg.domain = domain_from_string(f.domain);
  nlohmann::json mit = nlohmann::json::array();
  for (const auto& m : f.mitigations) mit.push_back(m);
  cfg.apply_json({{"mitigations", mit}});
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    cfg.apply_json(nlohmann::json::parse(in));
  }
  return cfg;
}

void write_timing(const fs::path& dir, double seconds) {
  std::ofstream f(dir / "timing.json");
  f << ordered_json{{"wall_seconds", seconds}}.dump(2) << '\n';
}

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CacheOut simulator harness"};
  app.require_subcommand(1);

  CommonFlags sweep_flags, attack_flags, dump_flags;

  std::string sweep_kind;
  auto* sweep = app.add_subcommand("sweep", "Run a parameter sweep and write a heatmap CSV");
  sweep->add_option("kind", sweep_kind)->required()->check(
      CLI::IsMember({"eviction-size", "set-matrix", "offset-matrix"}));
  add_common(sweep, sweep_flags);

  std::string scenario;
  auto* attack = app.add_subcommand("attack", "Run an end-to-end attack scenario");
  attack->add_option("scenario", scenario)->required();
  add_common(attack, attack_flags);

  std::string victim, kind = "write";
  auto* dump = app.add_subcommand("dump-page", "Dump one victim page with the write or read attack");
  dump->add_option("victim", victim)->required()->check(CLI::IsMember({"aes", "rsa", "fann", "kernel", "enclave"}));
  dump->add_option("--attack", kind, "write or read")->check(CLI::IsMember({"write", "read"}));
  add_common(dump, dump_flags);

  std::string replay_dir;
  auto* rep = app.add_subcommand("replay", "Rerun the offline phase from a saved run directory");
  rep->add_option("dir", replay_dir)->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kExitUsage;
  }

  try {
    const auto t0 = std::chrono::steady_clock::now();
    if (*sweep) {
      const ScenarioConfig cfg = resolve(sweep_flags, sweep_kind);
      const Heatmap h = run_sweep(sweep_kind, cfg);
      const fs::path dir = fs::path(cfg.out_dir) / ("sweep-" + sweep_kind) / std::to_string(cfg.seed);
      fs::create_directories(dir);
      std::ofstream f(dir / "heatmap.csv");
      write_heatmap_csv(f, h);
      write_timing(dir, since(t0));
      std::cout << (dir / "heatmap.csv").string() << '\n';
      return kExitOk;
    }
    if (*attack) {
      const ScenarioConfig cfg = resolve(attack_flags, scenario);
      const AttackRun run = run_attack_scenario(cfg);
      ScenarioConfig named = cfg;
      named.scenario = run.report["scenario"].get<std::string>();
      const fs::path dir = write_artifacts(named, run);
      write_timing(dir, since(t0));
      std::cout << run.report["scenario"].get<std::string>() << " seed " << cfg.seed << ": "
                << run.report["status"].get<std::string>() << " (" << dir.string() << ")\n";
      return run.exit_code;
    }
    if (*dump) {
      const ScenarioConfig cfg = resolve(dump_flags, "dump-" + victim);
      const DumpRun run = dump_victim_page(cfg, victim, kind == "read" ? AttackKind::read : AttackKind::write);
      const fs::path dir = fs::path(cfg.out_dir) / cfg.scenario / std::to_string(cfg.seed);
      fs::create_directories(dir);
      std::ofstream(dir / "report.json") << run.report.dump(2) << '\n';
      std::ofstream hist(dir / "histograms.csv");
      write_histogram_csv(hist, run.dump.samples);
      std::ofstream page(dir / "page.bin", std::ios::binary);
      page.write(reinterpret_cast<const char*>(run.dump.bytes.data()),
                 static_cast<std::streamsize>(run.dump.bytes.size()));
      write_timing(dir, since(t0));
      std::cout << run.report["metrics"].dump() << '\n';
      return kExitOk;
    }
    const fs::path dir(replay_dir);
    std::ifstream rin(dir / "report.json"), hin(dir / "histograms.csv");
    if (!rin || !hin) throw SimulationError("replay needs report.json and histograms.csv in " + dir.string());
    const ordered_json report = ordered_json::parse(rin);
    const AttackRun run = replay(report, read_histogram_csv(hin));
    std::cout << run.report.dump(2) << '\n';
    return run.exit_code;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: bad config: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SimulationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
}
