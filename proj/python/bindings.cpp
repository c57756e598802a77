#include <sstream>

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cacheout/aes.hpp"
#include "cacheout/harness.hpp"

namespace py = pybind11;
using namespace cacheout;

namespace {

py::object to_py(const ordered_json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_py(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

ScenarioConfig make_config(const std::string& scenario, const py::object& config) {
  ScenarioConfig c;
  c.scenario = scenario;
  if (!config.is_none()) c.apply_json(from_py(config));
  return c;
}

py::bytes as_bytes(const std::uint8_t* p, std::size_t n) { return {reinterpret_cast<const char*>(p), n}; }

std::vector<std::uint8_t> from_bytes(const py::bytes& b) {
  const std::string s = b;
  return {s.begin(), s.end()};
}

mpz_class to_mpz(const py::int_& v) {
  return mpz_class(py::module_::import("builtins").attr("format")(v, "x").cast<std::string>(), 16);
}

py::int_ to_pyint(const mpz_class& v) { return py::int_(py::module_::import("builtins").attr("int")(v.get_str(16), 16)); }

AttackKind attack_kind(const std::string& s) {
  if (s == "write") return AttackKind::write;
  if (s == "read") return AttackKind::read;
  throw SimulationError("attack must be write or read");
}

std::string histogram_csv(const Histogram& h) {
  std::ostringstream s;
  write_histogram_csv(s, h);
  return s.str();
}

py::dict run_dict(const AttackRun& run) {
  py::dict d;
  d["report"] = to_py(run.report);
  d["exit_code"] = run.exit_code;
  d["histogram_csv"] = histogram_csv(run.histogram);
  if (run.image) {
    std::ostringstream ppm;
    write_ppm(ppm, *run.image);
    const std::string s = ppm.str();
    d["image_ppm"] = py::bytes(s);
  }
  return d;
}

// Single-core machine with the transactional front end, for scripting.
struct Machine {
  MachineState m;
  TransactionalCore core{m};

  explicit Machine(std::uint64_t seed, const std::string& noise)
      : m(seed, noise == "default" ? NoiseConfig::defaults()
                : noise == "harsh" ? NoiseConfig::harsh()
                : noise == "off"   ? NoiseConfig::off()
                                   : throw SimulationError("noise must be default, off or harsh")) {}
};

}  // namespace

PYBIND11_MODULE(_cacheout, m) {
  m.doc() = "Deterministic CacheOut simulator: cache/LFB model, leak primitive, attacks and recovery.";

  py::register_exception<SimulationError>(m, "SimulationError", PyExc_RuntimeError);

  m.attr("LINE_SIZE") = kLineSize;
  m.attr("NUM_SETS") = kNumSets;
  m.attr("NUM_WAYS") = kNumWays;
  m.attr("LFB_ENTRIES") = kLfbEntries;
  m.attr("PAGE_SIZE") = kPageSize;

  m.def("scenarios", &attack_scenarios, "Names accepted by attack().");

  m.def(
      "sweep",
      [](const std::string& kind, const py::object& config) {
        const Heatmap h = run_sweep(kind, make_config(kind, config));
        py::list cells;
        for (const auto& c : h.cells) {
          py::dict d;
          d["x"] = c.x;
          d["y"] = c.y;
          d["correct"] = c.correct;
          d["incorrect"] = c.incorrect;
          cells.append(d);
        }
        return cells;
      },
      py::arg("kind"), py::arg("config") = py::none(),
      "Run eviction-size, set-matrix or offset-matrix; returns heatmap cells.");

  m.def(
      "sweep_csv",
      [](const std::string& kind, const py::object& config) {
        std::ostringstream s;
        write_heatmap_csv(s, run_sweep(kind, make_config(kind, config)));
        return s.str();
      },
      py::arg("kind"), py::arg("config") = py::none());

  m.def(
      "attack",
      [](const std::string& scenario, const py::object& config) {
        return run_dict(run_attack_scenario(make_config(scenario, config)));
      },
      py::arg("scenario"), py::arg("config") = py::none(),
      "Run an end-to-end scenario; returns report, exit_code, histogram_csv and optional image_ppm.");

  m.def(
      "replay",
      [](const py::object& report, const std::string& csv) {
        std::istringstream in(csv);
        const auto json_text = py::module_::import("json").attr("dumps")(report).cast<std::string>();
        const auto r = replay(ordered_json::parse(json_text), read_histogram_csv(in));
        py::dict d;
        d["report"] = to_py(r.report);
        d["exit_code"] = r.exit_code;
        return d;
      },
      py::arg("report"), py::arg("histogram_csv"));

  m.def(
      "dump_page",
      [](const std::string& victim, const std::string& attack, const py::object& config) {
        const DumpRun r = dump_victim_page(make_config("dump-" + victim, config), victim, attack_kind(attack));
        py::dict d;
        d["report"] = to_py(r.report);
        d["bytes"] = as_bytes(r.dump.bytes.data(), r.dump.bytes.size());
        d["known"] = std::vector<bool>(r.dump.known.begin(), r.dump.known.end());
        return d;
      },
      py::arg("victim"), py::arg("attack") = "write", py::arg("config") = py::none());

  m.def(
      "aes_expand_key",
      [](const py::bytes& key) {
        const auto s = aes::expand_key(from_bytes(key));
        return as_bytes(s.data(), s.size());
      },
      py::arg("key"));

  m.def(
      "aes_locate",
      [](const py::bytes& dump, unsigned key_bits, double threshold) {
        py::list out;
        for (const auto& c : aes_locate(ByteDump::from(from_bytes(dump)), key_bits, threshold)) {
          py::dict d;
          d["offset"] = c.offset;
          d["key"] = as_bytes(c.key.data(), c.key.size());
          d["match_score"] = c.match_score;
          out.append(d);
        }
        return out;
      },
      py::arg("dump"), py::arg("key_bits"), py::arg("threshold") = kDefaultAesThreshold);

  m.def(
      "generate_rsa_key",
      [](unsigned bits, std::uint64_t seed) {
        Rng rng(seed);
        const RsaKey k = generate_rsa_key(bits, rng);
        py::dict d;
        for (const auto& [name, v] : {std::pair{"n", &k.n}, {"e", &k.e}, {"d", &k.d}, {"p", &k.p}, {"q", &k.q}}) {
          d[name] = to_pyint(*v);
        }
        return d;
      },
      py::arg("bits"), py::arg("seed") = 1);

  m.def(
      "rsa_reconstruct",
      [](const std::vector<std::uint64_t>& chunks, const py::int_& n, unsigned bits, std::size_t beam) {
        ChunkPool pool;
        pool.chunks = chunks;
        pool.n = to_mpz(n);
        RsaOptions opts;
        opts.beam = beam;
        const RsaResult r = rsa_reconstruct(pool, bits, opts);
        py::dict d;
        d["ok"] = r.ok;
        d["p"] = r.ok ? py::object(to_pyint(r.p)) : py::none();
        d["q"] = r.ok ? py::object(to_pyint(r.q)) : py::none();
        d["levels"] = r.levels;
        d["deepest_level"] = r.deepest_level;
        d["error"] = r.error;
        return d;
      },
      py::arg("chunks"), py::arg("n"), py::arg("bits"), py::arg("beam") = 0,
      "Factor N from an unordered pool of 8-byte little-endian chunks of p and q.");

  m.def(
      "stitch",
      [](const std::vector<std::tuple<unsigned, std::uint8_t, std::uint8_t, std::uint64_t>>& pairs) {
        std::vector<LeakSample> samples;
        for (const auto& [off, a, b, count] : pairs) samples.push_back({0, off, {a, b}, count});
        const StitchResult r = stitch(samples);
        py::dict d;
        d["bytes"] = as_bytes(r.bytes.data(), r.bytes.size());
        d["known"] = std::vector<bool>(r.known.begin(), r.known.end());
        d["agree"] = std::vector<bool>(r.agree.begin(), r.agree.end());
        d["text"] = render(r);
        return d;
      },
      py::arg("pairs"), "Stitch (offset, byte0, byte1, count) samples of one line.");

  py::class_<Machine>(m, "Machine", "One core: L1-D, fill buffer, L2 and two hyperthreads.")
      .def(py::init<std::uint64_t, const std::string&>(), py::arg("seed") = 1, py::arg("noise") = "off")
      .def(
          "create_context",
          [](Machine& s, const std::string& domain, const std::string& name) {
            return s.m.create_context(domain_from_string(domain), name);
          },
          py::arg("domain"), py::arg("name"))
      .def(
          "map_region", [](Machine& s, ContextId c, std::uint64_t base, std::size_t size) { s.m.map_region(c, base, size); },
          py::arg("context"), py::arg("base"), py::arg("size"))
      .def(
          "set_thread_context", [](Machine& s, ThreadId t, ContextId c) { s.m.set_thread_context(t, c); },
          py::arg("thread"), py::arg("context"))
      .def(
          "context_switch", [](Machine& s, ThreadId t, ContextId c) { s.m.context_switch(t, c); }, py::arg("thread"),
          py::arg("context"))
      .def(
          "load",
          [](Machine& s, ThreadId t, std::uint64_t addr) {
            const Word w = s.m.load(t, Address{addr});
            return as_bytes(w.data(), w.size());
          },
          py::arg("thread"), py::arg("addr"))
      .def(
          "store",
          [](Machine& s, ThreadId t, std::uint64_t addr, const py::bytes& data) {
            s.m.store(t, Address{addr}, from_bytes(data));
          },
          py::arg("thread"), py::arg("addr"), py::arg("data"))
      .def(
          "clflush", [](Machine& s, ThreadId t, std::uint64_t addr) { s.m.clflush(t, Address{addr}); },
          py::arg("thread"), py::arg("addr"))
      .def(
          "verw", [](Machine& s, ThreadId t) { s.m.verw(t); }, py::arg("thread"))
      .def("l1d_flush", [](Machine& s) { s.m.l1d_flush(); })
      .def(
          "debug_read", [](const Machine& s, std::uint64_t addr) { return s.m.debug_read(Address{addr}); },
          py::arg("addr"))
      .def(
          "set_leak_page", [](Machine& s, ThreadId t, std::uint64_t page) { s.core.set_leak_page(t, Address{page}); },
          py::arg("thread"), py::arg("page"))
      .def(
          "taa_leak",
          [](Machine& s, ThreadId t, unsigned offset) -> py::object {
            s.core.flush_probing_arrays();
            const TaaResult r = s.core.taa_leak(t, offset);
            if (!r.recovered) return py::none();
            return py::make_tuple(r.recovered->first, r.recovered->second);
          },
          py::arg("thread"), py::arg("offset"),
          "One iteration of the leak primitive; returns the forwarded byte pair or None.")
      .def(
          "registers", [](const Machine& s, ThreadId t) { return s.m.thread(t).regs; }, py::arg("thread"))
      .def("snapshot", [](const Machine& s) { return to_py(s.m.snapshot()); });
}
