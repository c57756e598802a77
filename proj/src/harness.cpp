#include "cacheout/harness.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>

#include "harness_internal.hpp"

namespace cacheout {

// ------------------------------------------------------------------ config

void ScenarioConfig::set_noise_preset(const std::string& name) {
  if (name == "default") noise = NoiseConfig::defaults();
  else if (name == "off") noise = NoiseConfig::off();
  else if (name == "harsh") noise = NoiseConfig::harsh();
  else throw SimulationError("unknown noise preset '" + name + "' (expected default, off or harsh)");
  noise_preset = name;
}

namespace {

ColorDistance distance_from_string(const std::string& s) {
  if (s == "squared") return ColorDistance::squared_difference;
  if (s == "product") return ColorDistance::product;
  throw SimulationError("image distance must be squared or product");
}

const char* to_string(ColorDistance d) {
  return d == ColorDistance::product ? "product" : "squared";
}

void apply_mitigation_name(Mitigations& m, const std::string& name) {
  if (name == "verw") m.verw_on_switch = true;
  else if (name == "l1dflush") m.l1d_flush_on_switch = true;
  else if (name == "tsx-off") m.tsx_disabled = true;
  else throw SimulationError("unknown mitigation '" + name + "' (expected verw, l1dflush or tsx-off)");
}

}  // namespace

void ScenarioConfig::apply_json(const nlohmann::json& j) {
  if (!j.is_object()) throw SimulationError("config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "scenario") scenario = v.get<std::string>();
    else if (key == "seed") seed = v.get<std::uint64_t>();
    else if (key == "iterations") iterations = v.get<unsigned>();
    else if (key == "out") out_dir = v.get<std::string>();
    else if (key == "noise") {
      if (v.is_string()) {
        set_noise_preset(v.get<std::string>());
      } else {
        for (const auto& [nk, nv] : v.items()) {
          if (nk == "taa_success_prob") noise.taa_success_prob = nv.get<double>();
          else if (nk == "spurious_entry_prob") noise.spurious_entry_prob = nv.get<double>();
          else if (nk == "zero_ff_inflation") noise.zero_ff_inflation = nv.get<double>();
          else if (nk == "background_fills") noise.background_fills = nv.get<unsigned>();
          else throw SimulationError("unknown noise field '" + nk + "'");
        }
        noise_preset = "custom";
      }
      noise.validate();
    } else if (key == "mitigations") {
      if (v.is_array()) {
        mitigations = {};
        for (const auto& name : v) apply_mitigation_name(mitigations, name.get<std::string>());
      } else {
        mitigations.verw_on_switch = v.value("verw_on_switch", false);
        mitigations.l1d_flush_on_switch = v.value("l1d_flush_on_switch", false);
        mitigations.tsx_disabled = v.value("tsx_disabled", false);
      }
    } else if (key == "eviction_max") eviction_max = v.get<unsigned>();
    else if (key == "sweep_set") sweep_set = v.get<unsigned>();
    else if (key == "domain") domain = domain_from_string(v.get<std::string>());
    else if (key == "training_boots") training_boots = v.get<unsigned>();
    else if (key == "online_iterations") online_iterations = v.get<unsigned>();
    else if (key == "message") message = v.get<std::string>();
    else if (key == "fann_offset") fann_offset = v.get<std::uint64_t>();
    else if (key == "image") {
      image_width = v.value("width", image_width);
      image_height = v.value("height", image_height);
      image_coverage = v.value("coverage", image_coverage);
      if (v.contains("distance")) image_distance = distance_from_string(v["distance"].get<std::string>());
    } else {
      throw SimulationError("unknown config key '" + key + "'");
    }
  }
  if (eviction_max < 1 || eviction_max > kMaxEvictionSize) throw SimulationError("eviction_max must be 1..16");
  if (sweep_set >= kNumSets) throw SimulationError("sweep_set must be 0..63");
  if (training_boots < 2) throw SimulationError("training_boots must be at least 2");
  if (!(image_coverage > 0.0 && image_coverage <= 1.0)) throw SimulationError("image coverage must be in (0, 1]");
}

ordered_json ScenarioConfig::to_json() const {
  ordered_json j;
  j["scenario"] = scenario;
  j["seed"] = seed;
  j["iterations"] = iterations;
  j["noise"] = {{"preset", noise_preset},
                {"taa_success_prob", noise.taa_success_prob},
                {"spurious_entry_prob", noise.spurious_entry_prob},
                {"zero_ff_inflation", noise.zero_ff_inflation},
                {"background_fills", noise.background_fills}};
  j["mitigations"] = {{"verw_on_switch", mitigations.verw_on_switch},
                      {"l1d_flush_on_switch", mitigations.l1d_flush_on_switch},
                      {"tsx_disabled", mitigations.tsx_disabled}};
  j["eviction_max"] = eviction_max;
  j["sweep_set"] = sweep_set;
  j["domain"] = to_string(domain);
  j["training_boots"] = training_boots;
  j["online_iterations"] = online_iterations;
  j["message"] = message;
  j["fann_offset"] = fann_offset;
  j["image"] = {{"width", image_width},
                {"height", image_height},
                {"coverage", image_coverage},
                {"distance", to_string(image_distance)}};
  return j;
}

// ------------------------------------------------------------------- rigs

namespace detail {

Rig::Rig(const ScenarioConfig& cfg, std::uint64_t seed, VictimProgram prog, ThreadMode mode)
    : m(seed, cfg.noise, cfg.mitigations),
      core(m),
      program(std::move(prog)),
      victim(m, program, mode, 0),
      attacker_ctx(m.create_context(Domain::process, "attacker")),
      attacker(core, 0, attacker_ctx, mode) {}

std::vector<std::uint8_t> Rig::victim_page() const {
  std::vector<std::uint8_t> out(kPageSize);
  for (std::size_t i = 0; i < kPageSize; ++i) out[i] = m.debug_read(Address{program.base + i});
  return out;
}

Line distinct_line(Rng& rng) {
  std::array<std::uint8_t, 255> values;
  std::iota(values.begin(), values.end(), std::uint8_t{1});
  for (std::size_t i = values.size(); i > 1; --i) std::swap(values[i - 1], values[rng.below(i)]);
  Line l;
  std::copy_n(values.begin(), kLineSize, l.begin());
  return l;
}

}  // namespace detail

// ------------------------------------------------------------------ sweeps

const HeatCell& Heatmap::at(unsigned x, unsigned y) const {
  for (const auto& c : cells) {
    if (c.x == x && c.y == y) return c;
  }
  throw SimulationError("heatmap has no cell (" + std::to_string(x) + ", " + std::to_string(y) + ")");
}

namespace {

struct Tally {
  std::uint64_t correct = 0, incorrect = 0, total = 0;

  void add(const Histogram& h, unsigned set, unsigned off, BytePair truth, unsigned iterations) {
    for (const auto& s : h.samples_for(set, off)) {
      if (s.pair == truth) correct += s.count;
      else if (s.pair != BytePair{0, 0}) incorrect += s.count;
    }
    total += iterations;
  }
  HeatCell cell(unsigned x, unsigned y) const {
    const double t = total ? static_cast<double>(total) : 1.0;
    return {x, y, static_cast<double>(correct) / t, static_cast<double>(incorrect) / t};
  }
};

}  // namespace

Heatmap sweep_eviction_size(const ScenarioConfig& cfg) {
  Heatmap out{"eviction-size", {}};
  const unsigned iters = cfg.iterations_or(20);
  Rng rng(derive_seed(cfg.seed, 1));
  const Line line = detail::distinct_line(rng);
  for (unsigned size = 1; size <= cfg.eviction_max; ++size) {
    detail::Rig rig(cfg, derive_seed(cfg.seed, 100 + size), victim_line_writer(cfg.sweep_set, line),
                    ThreadMode::cross_thread);
    AttackOptions opts;
    opts.eviction_size = size;
    Tally t;
    for (unsigned off = 0; off < kPairsPerLine; ++off) {
      const Histogram h = rig.attacker.attack_write(rig.victim.as_step(), cfg.sweep_set, off, iters, opts);
      t.add(h, cfg.sweep_set, off, {line[off], line[off + 1]}, iters);
    }
    out.cells.push_back(t.cell(size, 0));
  }
  return out;
}

Heatmap sweep_set_matrix(const ScenarioConfig& cfg) {
  Heatmap out{"set-matrix", {}};
  const unsigned iters = cfg.iterations_or(10);
  Rng rng(derive_seed(cfg.seed, 2));
  const Line line = detail::distinct_line(rng);
  for (unsigned x = 0; x < kNumSets; ++x) {
    for (unsigned y = 0; y < kNumSets; ++y) {
      // Fresh machine per cell so no residue crosses cells.
      detail::Rig rig(cfg, derive_seed(cfg.seed, 1000 + x * kNumSets + y), victim_line_writer(x, line),
                      ThreadMode::cross_thread);
      Tally t;
      t.add(rig.attacker.attack_write(rig.victim.as_step(), y, 0, iters), y, 0, {line[0], line[1]}, iters);
      out.cells.push_back(t.cell(x, y));
    }
  }
  return out;
}

Heatmap sweep_offset_matrix(const ScenarioConfig& cfg) {
  Heatmap out{"offset-matrix", {}};
  const unsigned iters = cfg.iterations_or(20);
  Rng rng(derive_seed(cfg.seed, 3));
  const Line line = detail::distinct_line(rng);
  detail::Rig rig(cfg, derive_seed(cfg.seed, 300), victim_line_writer(cfg.sweep_set, line),
                  ThreadMode::cross_thread);
  for (unsigned k = 0; k < kPairsPerLine; ++k) {
    const Histogram h = rig.attacker.attack_write(rig.victim.as_step(), cfg.sweep_set, k, iters);
    Tally row;
    row.add(h, cfg.sweep_set, k, {line[k], line[k + 1]}, iters);
    for (unsigned j = 0; j < kLineSize; ++j) {
      std::uint64_t hits = 0;
      for (const auto& s : h.samples_for(cfg.sweep_set, k)) {
        if (s.pair.first == line[j] || s.pair.second == line[j]) hits += s.count;
      }
      HeatCell c = row.cell(k, j);
      c.correct = static_cast<double>(hits) / iters;
      out.cells.push_back(c);
    }
  }
  return out;
}

Heatmap run_sweep(const std::string& kind, const ScenarioConfig& cfg) {
  if (kind == "eviction-size") return sweep_eviction_size(cfg);
  if (kind == "set-matrix") return sweep_set_matrix(cfg);
  if (kind == "offset-matrix") return sweep_offset_matrix(cfg);
  throw SimulationError("unknown sweep '" + kind + "' (expected eviction-size, set-matrix or offset-matrix)");
}

void write_heatmap_csv(std::ostream& out, const Heatmap& h) {
  out << "x,y,correct,incorrect\n";
  char buf[96];
  for (const auto& c : h.cells) {
    std::snprintf(buf, sizeof buf, "%u,%u,%.6f,%.6f\n", c.x, c.y, c.correct, c.incorrect);
    out << buf;
  }
}

// --------------------------------------------------------------- artifacts

std::string write_artifacts(const ScenarioConfig& cfg, const AttackRun& run) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(cfg.out_dir) / cfg.scenario / std::to_string(cfg.seed);
  fs::create_directories(dir);
  {
    std::ofstream f(dir / "report.json");
    f << run.report.dump(2) << '\n';
  }
  {
    std::ofstream f(dir / "histograms.csv");
    write_histogram_csv(f, run.histogram);
  }
  if (run.image) {
    std::ofstream f(dir / "image.ppm", std::ios::binary);
    write_ppm(f, *run.image);
  }
  return dir.string();
}

}  // namespace cacheout
