#pragma once

// Experiment drivers behind the command-line tool: a JSON configuration with
// compiled-in presets, and the simulate / sweep / samples / drift / network
// commands writing CSV and JSON results into an output directory.

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpsig/analysis.hpp"
#include "bpsig/control.hpp"
#include "bpsig/dynamics.hpp"
#include "bpsig/errors.hpp"
#include "bpsig/network.hpp"
#include "bpsig/rng.hpp"

namespace bpsig {

using nlohmann::json;

struct ExperimentConfig {
  // network
  std::int32_t rows = 21;
  std::int32_t cols = 21;
  std::int32_t saturation = 10;
  std::string network_file;  // overrides the grid when non-empty

  std::string controller = "bp_star";
  double pressure_slope = 1.0;
  std::vector<double> movement_slopes;  // optional, overrides pressure_slope for BP*
  std::vector<double> node_slopes;      // optional, overrides pressure_slope for BP

  // arrivals: lambda_a = lambda * base_a, base_a = 1 unless given or sampled
  double lambda = 0.7;
  std::vector<double> base_rates;
  double batch_probability = 0.05;
  std::int32_t batch_size = 10;

  // routing: turn probabilities, or explicit [a, b, r] triples
  double straight = 0.5;
  double left = 0.2;
  double right = 0.2;
  std::vector<std::tuple<NodeId, NodeId, double>> routing_rates;

  // routing and base rates drawn at random instead
  std::optional<std::uint64_t> sample_seed;

  std::int64_t cycle_period = 4;
  std::int64_t cycle_offset = 0;

  std::int64_t slots = 50'000;
  double warmup_fraction = 0.25;
  double slope_fraction = 0.01;
  std::int64_t queue_dump_every = 0;

  double x_lo = 0.5;
  double x_hi = 0.9;
  double resolution = 0.0125;
  std::int32_t replications = 1;  // per probe; verdicts are majority-voted

  std::int32_t sample_count = 10;
  double sample_x_lo = 0.05;
  double sample_x_hi = 0.8;

  std::vector<double> drift_lambdas{0.0, 0.4, 2.0};
  std::vector<std::string> drift_controllers{"bp_star", "bp"};
  std::int64_t heavy_init = 100;
  std::int32_t drift_replications = 200;

  std::uint64_t seed = 1;
  std::string out = "out";
  std::int32_t workers = 0;  // 0: available parallelism
};

// JSON round trip. Unknown keys are rejected so typos do not silently fall
// back to defaults.

namespace detail {

template <class T>
void read_field(const json& doc, const char* key, T& dst) {
  auto it = doc.find(key);
  if (it == doc.end()) return;
  try {
    dst = it->template get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

inline void check_keys(const json& doc, std::initializer_list<const char*> known,
                       const std::string& where) {
  if (!doc.is_object()) throw ConfigError("config " + where + " must be an object");
  for (const auto& [k, v] : doc.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw ConfigError("unknown config field '" + where + k + "'");
  }
}

}  // namespace detail

inline json to_json(const ExperimentConfig& c) {
  json routing = {{"straight", c.straight}, {"left", c.left}, {"right", c.right}};
  if (!c.routing_rates.empty()) {
    json rates = json::array();
    for (const auto& [a, b, r] : c.routing_rates) rates.push_back({a, b, r});
    routing["rates"] = rates;
  }
  json doc = {
      {"rows", c.rows},
      {"cols", c.cols},
      {"saturation", c.saturation},
      {"network_file", c.network_file},
      {"controller", c.controller},
      {"pressure", {{"slope", c.pressure_slope},
                    {"movement_slopes", c.movement_slopes},
                    {"node_slopes", c.node_slopes}}},
      {"lambda", c.lambda},
      {"base_rates", c.base_rates},
      {"batch_probability", c.batch_probability},
      {"batch_size", c.batch_size},
      {"routing", routing},
      {"sample_seed", c.sample_seed ? json(*c.sample_seed) : json(nullptr)},
      {"cycle", {{"period", c.cycle_period}, {"offset", c.cycle_offset}}},
      {"slots", c.slots},
      {"warmup_fraction", c.warmup_fraction},
      {"slope_fraction", c.slope_fraction},
      {"queue_dump_every", c.queue_dump_every},
      {"bisection", {{"x_lo", c.x_lo},
                     {"x_hi", c.x_hi},
                     {"resolution", c.resolution},
                     {"replications", c.replications}}},
      {"samples", {{"count", c.sample_count}, {"x_lo", c.sample_x_lo}, {"x_hi", c.sample_x_hi}}},
      {"drift", {{"lambdas", c.drift_lambdas},
                 {"controllers", c.drift_controllers},
                 {"heavy_init", c.heavy_init},
                 {"replications", c.drift_replications}}},
      {"seed", c.seed},
      {"out", c.out},
      {"workers", c.workers},
  };
  return doc;
}

/// Applies the fields present in `doc` on top of `c`.
inline void apply_json(ExperimentConfig& c, const json& doc) {
  using detail::check_keys;
  using detail::read_field;
  check_keys(doc,
             {"rows", "cols", "saturation", "network_file", "controller", "pressure", "lambda",
              "base_rates", "batch_probability", "batch_size", "routing", "sample_seed", "cycle",
              "slots", "warmup_fraction", "slope_fraction", "queue_dump_every", "bisection",
              "samples", "drift", "seed", "out", "workers"},
             "");
  read_field(doc, "rows", c.rows);
  read_field(doc, "cols", c.cols);
  read_field(doc, "saturation", c.saturation);
  read_field(doc, "network_file", c.network_file);
  read_field(doc, "controller", c.controller);
  if (auto it = doc.find("pressure"); it != doc.end()) {
    check_keys(*it, {"slope", "movement_slopes", "node_slopes"}, "pressure.");
    read_field(*it, "slope", c.pressure_slope);
    read_field(*it, "movement_slopes", c.movement_slopes);
    read_field(*it, "node_slopes", c.node_slopes);
  }
  read_field(doc, "lambda", c.lambda);
  read_field(doc, "base_rates", c.base_rates);
  read_field(doc, "batch_probability", c.batch_probability);
  read_field(doc, "batch_size", c.batch_size);
  if (auto it = doc.find("routing"); it != doc.end()) {
    check_keys(*it, {"straight", "left", "right", "rates"}, "routing.");
    read_field(*it, "straight", c.straight);
    read_field(*it, "left", c.left);
    read_field(*it, "right", c.right);
    if (auto r = it->find("rates"); r != it->end()) {
      c.routing_rates.clear();
      try {
        for (const auto& t : *r)
          c.routing_rates.emplace_back(t.at(0).get<NodeId>(), t.at(1).get<NodeId>(),
                                       t.at(2).get<double>());
      } catch (const json::exception&) {
        throw ConfigError("config field 'routing.rates' must hold [from, to, rate] triples");
      }
    }
  }
  if (auto it = doc.find("sample_seed"); it != doc.end()) {
    if (it->is_null())
      c.sample_seed.reset();
    else {
      std::uint64_t s = 0;
      read_field(doc, "sample_seed", s);
      c.sample_seed = s;
    }
  }
  if (auto it = doc.find("cycle"); it != doc.end()) {
    check_keys(*it, {"period", "offset"}, "cycle.");
    read_field(*it, "period", c.cycle_period);
    read_field(*it, "offset", c.cycle_offset);
  }
  read_field(doc, "slots", c.slots);
  read_field(doc, "warmup_fraction", c.warmup_fraction);
  read_field(doc, "slope_fraction", c.slope_fraction);
  read_field(doc, "queue_dump_every", c.queue_dump_every);
  if (auto it = doc.find("bisection"); it != doc.end()) {
    check_keys(*it, {"x_lo", "x_hi", "resolution", "replications"}, "bisection.");
    read_field(*it, "x_lo", c.x_lo);
    read_field(*it, "x_hi", c.x_hi);
    read_field(*it, "resolution", c.resolution);
    read_field(*it, "replications", c.replications);
  }
  if (auto it = doc.find("samples"); it != doc.end()) {
    check_keys(*it, {"count", "x_lo", "x_hi"}, "samples.");
    read_field(*it, "count", c.sample_count);
    read_field(*it, "x_lo", c.sample_x_lo);
    read_field(*it, "x_hi", c.sample_x_hi);
  }
  if (auto it = doc.find("drift"); it != doc.end()) {
    check_keys(*it, {"lambdas", "controllers", "heavy_init", "replications"}, "drift.");
    read_field(*it, "lambdas", c.drift_lambdas);
    read_field(*it, "controllers", c.drift_controllers);
    read_field(*it, "heavy_init", c.heavy_init);
    read_field(*it, "replications", c.drift_replications);
  }
  read_field(doc, "seed", c.seed);
  read_field(doc, "out", c.out);
  read_field(doc, "workers", c.workers);
}

inline ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c;
  apply_json(c, doc);
  return c;
}

inline bool known_controller(const std::string& name) {
  return name == "bp_star" || name == "bp" || name == "fixed";
}

/// Field-level checks that need no network.
inline void check_config(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("config field '" + field + "' " + why);
  };
  if (c.network_file.empty()) {
    if (c.rows < 1) fail("rows", "must be >= 1");
    if (c.cols < 1) fail("cols", "must be >= 1");
    if (c.saturation < 1) fail("saturation", "must be >= 1");
  }
  if (!known_controller(c.controller)) fail("controller", "must be bp_star, bp or fixed");
  if (!(c.pressure_slope > 0.0)) fail("pressure.slope", "must be > 0");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) fail("lambda", "must be finite and >= 0");
  if (!(c.batch_probability >= 0.0 && c.batch_probability <= 1.0))
    fail("batch_probability", "must lie in [0,1]");
  if (c.batch_size < 1) fail("batch_size", "must be >= 1");
  for (double p : {c.straight, c.left, c.right})
    if (!(p >= 0.0 && p <= 1.0)) fail("routing", "turn probabilities must lie in [0,1]");
  if (c.cycle_period < 1) fail("cycle.period", "must be >= 1");
  if (c.slots < 1) fail("slots", "must be >= 1");
  if (!(c.warmup_fraction >= 0.0 && c.warmup_fraction < 1.0))
    fail("warmup_fraction", "must lie in [0,1)");
  if (!(c.slope_fraction > 0.0)) fail("slope_fraction", "must be > 0");
  if (c.queue_dump_every < 0) fail("queue_dump_every", "must be >= 0");
  if (!(c.resolution > 0.0)) fail("bisection.resolution", "must be > 0");
  if (!(c.x_lo < c.x_hi)) fail("bisection", "needs x_lo < x_hi");
  if (c.replications < 1) fail("bisection.replications", "must be >= 1");
  if (c.sample_count < 1) fail("samples.count", "must be >= 1");
  if (!(c.sample_x_lo < c.sample_x_hi)) fail("samples", "needs x_lo < x_hi");
  for (const auto& name : c.drift_controllers)
    if (!known_controller(name)) fail("drift.controllers", "has unknown controller '" + name + "'");
  if (c.drift_replications < kMinDriftReplications)
    fail("drift.replications", "must be >= " + std::to_string(kMinDriftReplications));
  if (c.workers < 0) fail("workers", "must be >= 0");
}

// Presets.

inline std::vector<std::string> preset_names() {
  return {"uniform-0.4", "uniform-0.5",  "uniform-0.6", "uniform-0.65", "uniform-0.7",
          "uniform-0.75", "uniform-0.8", "uniform-0.9", "samples",      "drift-3x3"};
}

/// The grid experiment defaults: 21x21, s = 10, routing 0.5/0.2/0.2 with 0.1
/// exiting, batches of 10 with probability 0.05, unit slopes.
inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  if (name.rfind("uniform-", 0) == 0) {
    const std::string tail = name.substr(8);
    for (const auto& known : preset_names())
      if (known == name) {
        c.lambda = std::stod(tail);
        return c;
      }
  } else if (name == "samples") {
    c.sample_seed = 1;
    return c;
  } else if (name == "drift-3x3") {
    c.rows = c.cols = 3;
    c.controller = "bp";
    return c;
  }
  std::string list;
  for (const auto& n : preset_names()) list += " " + n;
  throw ConfigError("unknown preset '" + name + "'; available:" + list);
}

// Experiment setup built from a config.

struct Setup {
  Topology topo;
  RoutingMatrix routing;
  std::vector<double> base_rate;  // lambda_a^0
  PressureSpec pressure;
};

inline Network load_network_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read network file '" + path + "'");
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ConfigError("network file '" + path + "': " + e.what());
  }
  return network_from_json(doc);
}

inline Setup make_setup(const ExperimentConfig& c) {
  check_config(c);
  Network net = c.network_file.empty() ? build_grid_network(c.rows, c.cols, c.saturation)
                                       : load_network_file(c.network_file);
  std::optional<Topology> topo_holder;
  try {
    topo_holder.emplace(std::move(net));
  } catch (const StructuralError& e) {
    throw ConfigError(std::string("network: ") + e.what());
  }
  Topology& topo = *topo_holder;

  RoutingMatrix routing;
  std::vector<double> base(topo.node_count(), 1.0);
  if (c.sample_seed) {
    auto s = generate_sample(topo, *c.sample_seed);
    routing = s.routing_matrix();
    base = s.base_rate;
  } else if (!c.routing_rates.empty()) {
    std::map<Movement, double> rates;
    for (const auto& [a, b, r] : c.routing_rates) rates[{a, b}] = r;
    routing = make_routing(topo, rates);
  } else {
    routing = turn_routing(topo, c.straight, c.left, c.right);
  }
  if (!c.base_rates.empty()) {
    if (c.base_rates.size() != topo.node_count())
      throw ConfigError("config field 'base_rates' needs one entry per node (" +
                        std::to_string(topo.node_count()) + ")");
    base = c.base_rates;
  }

  PressureSpec pressure = PressureSpec::uniform(topo, c.pressure_slope);
  if (!c.movement_slopes.empty()) pressure.movement_slope = c.movement_slopes;
  if (!c.node_slopes.empty()) pressure.node_slope = c.node_slopes;
  check_pressure(topo, pressure);

  ArrivalConfig probe{base, c.batch_probability, c.batch_size};
  check_arrivals(topo, probe);
  return {std::move(topo), std::move(routing), std::move(base), std::move(pressure)};
}

inline ArrivalConfig scaled_arrivals(const ExperimentConfig& c, const Setup& s, double x) {
  ArrivalConfig a{s.base_rate, c.batch_probability, c.batch_size};
  for (auto& l : a.rate) l *= x;
  return a;
}

inline AnyController make_controller(const std::string& name, const ExperimentConfig& c,
                                     const Setup& s, const RoutingMatrix& routing) {
  if (name == "bp_star") return BpStarController(s.pressure, routing);
  if (name == "bp") return BpController(s.pressure);
  if (name == "fixed") return FixedCycleController::uniform(s.topo, c.cycle_period, c.cycle_offset);
  throw ConfigError("unknown controller '" + name + "'");
}

inline Trajectory run_any(const Setup& s, const ArrivalConfig& arrivals, const RoutingMatrix& routing,
                          AnyController& controller, const RunOptions& opt) {
  return std::visit(
      [&](auto& ctl) { return run_simulation(s.topo, arrivals, routing, ctl, opt); }, controller);
}

inline StabilityCriteria criteria(const ExperimentConfig& c) {
  StabilityCriteria k;
  k.warmup_fraction = c.warmup_fraction;
  k.slope_fraction = c.slope_fraction;
  return k;
}

inline double total_rate(const ArrivalConfig& a) {
  double s = 0.0;
  for (double l : a.rate) s += l;
  return s;
}

// Output helpers. Numbers go through to_chars: shortest round-trip form,
// no locale.

inline std::string num(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string num(std::int64_t v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string num(std::uint64_t v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::filesystem::path prepare_out(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir + "': " + ec.message());
  return dir;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out.flush()) throw std::runtime_error("write failed for '" + path.string() + "'");
}

inline void write_json(const std::filesystem::path& path, const json& doc) {
  write_file(path, doc.dump(2) + "\n");
}

// Worker pool: runs task(i) for i in [0, n) on up to `workers` threads.
// Each task writes only its own result slot, so output order never depends on
// scheduling. The first exception is rethrown after all threads finish.

template <class Task>
void parallel_for(std::size_t n, std::int32_t workers, Task&& task) {
  std::size_t threads = workers > 0 ? static_cast<std::size_t>(workers)
                                    : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < n;) {
          try {
            task(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
          }
        }
      });
  }
  if (error) std::rethrow_exception(error);
}

// simulate

struct SimulateResult {
  StabilityVerdict verdict;
  Trajectory trajectory;
  double runtime_seconds = 0.0;
};

inline std::string trajectory_csv(const Trajectory& t) {
  std::string s = "slot,total_queue,arrivals,exits,lyapunov_full,lyapunov_aggregated\n";
  s.reserve(t.rows.size() * 48);
  for (const auto& r : t.rows) {
    s += num(r.slot);
    s += ',';
    s += num(r.total_queue);
    s += ',';
    s += num(r.arrivals);
    s += ',';
    s += num(r.exits);
    s += ',';
    s += num(r.lyapunov_full);
    s += ',';
    s += num(r.lyapunov_aggregated);
    s += '\n';
  }
  return s;
}

inline json queue_json(const Topology& topo, const QueueState& q) {
  json entries = json::array();
  for (std::size_t k = 0; k < topo.movement_count(); ++k)
    if (q.q[k] != 0) entries.push_back({topo.movement(k).pair.from, topo.movement(k).pair.to, q.q[k]});
  return {{"slot", q.slot}, {"queues", entries}};
}

/// One run. Writes trajectory.csv, summary.json and, when queue_dump_every > 0,
/// queues.jsonl with the nonzero queues every k slots.
inline SimulateResult cmd_simulate(const ExperimentConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  const Setup s = make_setup(c);
  const auto arrivals = scaled_arrivals(c, s, c.lambda);
  auto controller = make_controller(c.controller, c, s, s.routing);
  const auto dir = prepare_out(c.out);

  RunOptions opt;
  opt.slots = c.slots;
  opt.seed = c.seed;
  opt.lyapunov = &s.pressure;
  std::string dump;
  if (c.queue_dump_every > 0)
    opt.on_slot = [&](const QueueState& q) {
      if (q.slot % c.queue_dump_every == 0) dump += queue_json(s.topo, q).dump() + "\n";
    };

  SimulateResult res;
  res.trajectory = run_any(s, arrivals, s.routing, controller, opt);
  const auto totals = res.trajectory.totals();
  json verdict = nullptr;
  if (static_cast<std::size_t>(c.slots) >= criteria(c).min_length) {
    res.verdict = detect_stability(totals, total_rate(arrivals), criteria(c));
    verdict = {{"stable", res.verdict.stable},
               {"slope", res.verdict.slope},
               {"threshold", c.slope_fraction * total_rate(arrivals)},
               {"peak_queue", res.verdict.peak_queue},
               {"window", {res.verdict.window.first, res.verdict.window.second}}};
  }
  res.runtime_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_file(dir / "trajectory.csv", trajectory_csv(res.trajectory));
  if (c.queue_dump_every > 0) write_file(dir / "queues.jsonl", dump);
  const auto& t = res.trajectory;
  write_json(dir / "summary.json",
             {{"command", "simulate"},
              {"config", to_json(c)},
              {"verdict", verdict},
              {"initial_total", t.initial_total},
              {"final_total", t.final_state.total()},
              {"arrivals", t.arrivals_sum()},
              {"exits", t.exits_sum()},
              {"conserved", t.conserved()},
              {"runtime_seconds", res.runtime_seconds}});
  return res;
}

// sweep / samples

/// Verdict at scaling x; with several replications the majority wins and the
/// reported slope is the median.
inline StabilityVerdict probe_verdict(const ExperimentConfig& c, const Setup& s,
                                      const RoutingMatrix& routing,
                                      const std::vector<double>& base_rate,
                                      const std::string& controller_name, double x,
                                      std::uint64_t seed) {
  ArrivalConfig arrivals{base_rate, c.batch_probability, c.batch_size};
  for (auto& l : arrivals.rate) l *= x;
  std::vector<StabilityVerdict> votes;
  for (std::int32_t r = 0; r < c.replications; ++r) {
    auto controller = make_controller(controller_name, c, s, routing);
    RunOptions opt;
    opt.slots = c.slots;
    opt.seed = r == 0 ? seed : derive_seed(seed, {static_cast<std::uint64_t>(r)});
    const auto traj = run_any(s, arrivals, routing, controller, opt);
    if (!traj.conserved()) throw std::runtime_error("conservation violated in probe");
    votes.push_back(detect_stability(traj.totals(), total_rate(arrivals), criteria(c)));
  }
  if (votes.size() == 1) return votes.front();
  std::sort(votes.begin(), votes.end(),
            [](const auto& a, const auto& b) { return a.slope < b.slope; });
  const auto stable = std::count_if(votes.begin(), votes.end(), [](const auto& v) { return v.stable; });
  StabilityVerdict v = votes[votes.size() / 2];
  v.stable = 2 * stable > static_cast<std::ptrdiff_t>(votes.size());
  return v;
}

struct SweepOutcome {
  std::int32_t sample_id = 0;
  std::uint64_t seed = 0;
  Frontier star;
  Frontier bp;
  double ratio = 0.0;
  std::string error;  // non-empty if either frontier failed
};

/// Seed for the simulations of sample i; also seeds the sample draw itself.
inline std::uint64_t sample_seed(std::uint64_t master, std::int32_t i) {
  return derive_seed(master, {static_cast<std::uint64_t>(Stream::sample), static_cast<std::uint64_t>(i)});
}

inline std::string sweep_csv(const std::vector<SweepOutcome>& rows) {
  std::string s = "sample_id,controller,x_max,slope_at_frontier,seed\n";
  for (const auto& r : rows) {
    if (!r.error.empty()) continue;
    for (const auto* f : {&r.star, &r.bp}) {
      s += num(static_cast<std::int64_t>(r.sample_id)) + ',' + (f == &r.star ? "bp_star" : "bp") +
           ',' + num(f->x_max) + ',' + num(f->slope_at_frontier) + ',' + num(r.seed) + '\n';
    }
  }
  return s;
}

inline std::string probes_csv(const std::vector<SweepOutcome>& rows) {
  std::string s = "sample_id,controller,x,stable,slope\n";
  for (const auto& r : rows)
    for (const auto* f : {&r.star, &r.bp})
      for (const auto& p : f->probes)
        s += num(static_cast<std::int64_t>(r.sample_id)) + ',' +
             (f == &r.star ? "bp_star" : "bp") + ',' + num(p.x) + ',' +
             (p.verdict.stable ? "1" : "0") + ',' + num(p.verdict.slope) + '\n';
  return s;
}

/// Both frontiers for one (routing, base rate) pair. The two controllers share
/// the probe seed, so they face the same arrival and routing draws.
inline void sweep_frontiers(const ExperimentConfig& c, const Setup& s, const RoutingMatrix& routing,
                            const std::vector<double>& base, double x_lo, double x_hi,
                            SweepOutcome& out, std::int32_t workers) {
  std::vector<Frontier> f(2);
  std::vector<std::string> err(2);
  parallel_for(2, workers, [&](std::size_t i) {
    const std::string name = i == 0 ? "bp_star" : "bp";
    try {
      f[i] = find_x_max(
          [&](double x) { return probe_verdict(c, s, routing, base, name, x, out.seed); }, x_lo,
          x_hi, c.resolution);
    } catch (const BracketError& e) {
      err[i] = name + ": " + e.what();
    }
  });
  out.star = std::move(f[0]);
  out.bp = std::move(f[1]);
  for (const auto& e : err)
    if (!e.empty()) out.error += (out.error.empty() ? "" : " | ") + e;
  if (out.error.empty()) out.ratio = performance_ratio(out.bp.x_max, out.star.x_max);
}

inline json frontier_json(const Frontier& f) {
  json probes = json::array();
  for (const auto& p : f.probes)
    probes.push_back({{"x", p.x}, {"stable", p.verdict.stable}, {"slope", p.verdict.slope}});
  return {{"x_max", f.x_max}, {"slope_at_frontier", f.slope_at_frontier}, {"probes", probes}};
}

/// x_max for BP* and BP on the configured (or sampled) parameters and the
/// ratio between them. Writes sweep.csv, probes.csv and summary.json.
inline SweepOutcome cmd_sweep(const ExperimentConfig& c) {
  const Setup s = make_setup(c);
  const auto dir = prepare_out(c.out);
  SweepOutcome out;
  out.sample_id = 0;
  out.seed = c.seed;
  sweep_frontiers(c, s, s.routing, s.base_rate, c.x_lo, c.x_hi, out, c.workers);
  if (!out.error.empty()) throw BracketError(out.error);

  write_file(dir / "sweep.csv", sweep_csv({out}));
  write_file(dir / "probes.csv", probes_csv({out}));
  write_json(dir / "summary.json", {{"command", "sweep"},
                                    {"config", to_json(c)},
                                    {"bp_star", frontier_json(out.star)},
                                    {"bp", frontier_json(out.bp)},
                                    {"ratio", out.ratio},
                                    {"mean_ratio", out.ratio},
                                    {"stddev_ratio", 0.0}});
  return out;
}

struct SamplesOutcome {
  std::vector<SweepOutcome> samples;
  std::vector<double> ratios;  // completed samples, in sample order
  double mean = 0.0;
  double stddev = 0.0;  // population convention
};

inline std::pair<double, double> mean_stddev(const std::vector<double>& v) {
  if (v.empty()) return {0.0, 0.0};
  const double n = static_cast<double>(v.size());
  double m = 0.0;
  for (double x : v) m += x;
  m /= n;
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / n)};
}

/// Random samples: routing and base rates from generate_sample, both frontiers
/// per sample. A failing sample is recorded and the study carries on.
/// Writes sweep.csv, probes.csv, samples.csv and summary.json.
inline SamplesOutcome cmd_samples(const ExperimentConfig& c) {
  const Setup s = make_setup(c);
  const auto dir = prepare_out(c.out);
  const auto n = static_cast<std::size_t>(c.sample_count);

  SamplesOutcome res;
  res.samples.resize(n);
  std::vector<SampleSpec> specs(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& o = res.samples[i];
    o.sample_id = static_cast<std::int32_t>(i);
    o.seed = sample_seed(c.seed, o.sample_id);
    specs[i] = generate_sample(s.topo, o.seed);
  }
  // One task per (sample, controller); frontiers of one sample share seeds.
  std::vector<Frontier> frontier(2 * n);
  std::vector<std::string> error(2 * n);
  parallel_for(2 * n, c.workers, [&](std::size_t t) {
    const std::size_t i = t / 2;
    const std::string name = t % 2 == 0 ? "bp_star" : "bp";
    const auto routing = specs[i].routing_matrix();
    try {
      frontier[t] = find_x_max(
          [&](double x) {
            return probe_verdict(c, s, routing, specs[i].base_rate, name, x, res.samples[i].seed);
          },
          c.sample_x_lo, c.sample_x_hi, c.resolution);
    } catch (const std::exception& e) {
      error[t] = name + ": " + e.what();
    }
  });

  json failures = json::array();
  std::string table = "sample_id,seed,x_max_bp_star,x_max_bp,ratio\n";
  for (std::size_t i = 0; i < n; ++i) {
    auto& o = res.samples[i];
    o.star = std::move(frontier[2 * i]);
    o.bp = std::move(frontier[2 * i + 1]);
    for (const auto& e : {error[2 * i], error[2 * i + 1]})
      if (!e.empty()) o.error += (o.error.empty() ? "" : " | ") + e;
    if (o.error.empty()) {
      try {
        o.ratio = performance_ratio(o.bp.x_max, o.star.x_max);
      } catch (const std::exception& e) {
        o.error = e.what();
      }
    }
    if (!o.error.empty()) {
      failures.push_back({{"sample_id", o.sample_id}, {"seed", o.seed}, {"error", o.error}});
      continue;
    }
    res.ratios.push_back(o.ratio);
    table += num(static_cast<std::int64_t>(o.sample_id)) + ',' + num(o.seed) + ',' +
             num(o.star.x_max) + ',' + num(o.bp.x_max) + ',' + num(o.ratio) + '\n';
  }
  std::tie(res.mean, res.stddev) = mean_stddev(res.ratios);

  write_file(dir / "sweep.csv", sweep_csv(res.samples));
  write_file(dir / "probes.csv", probes_csv(res.samples));
  write_file(dir / "samples.csv", table);
  write_json(dir / "summary.json", {{"command", "samples"},
                                    {"config", to_json(c)},
                                    {"samples", c.sample_count},
                                    {"completed", res.ratios.size()},
                                    {"ratios", res.ratios},
                                    {"mean_ratio", res.mean},
                                    {"stddev_ratio", res.stddev},
                                    {"failures", failures}});
  return res;
}

// drift

struct DriftRow {
  double lambda = 0.0;
  std::string controller;
  DriftEstimate estimate;
};

/// estimate_drift over the lambda grid for each configured controller.
/// Writes drift.csv and summary.json.
inline std::vector<DriftRow> cmd_drift(const ExperimentConfig& c) {
  const Setup s = make_setup(c);
  for (const auto& m : s.topo.movements())
    if (c.heavy_init < m.saturation)
      throw ConfigError("config field 'drift.heavy_init' (" + std::to_string(c.heavy_init) +
                        ") is below the saturation rate " + std::to_string(m.saturation));
  const auto dir = prepare_out(c.out);

  std::vector<DriftRow> rows;
  for (double l : c.drift_lambdas)
    for (const auto& name : c.drift_controllers) rows.push_back({l, name, {}});
  parallel_for(rows.size(), c.workers, [&](std::size_t i) {
    auto& row = rows[i];
    const auto arrivals = scaled_arrivals(c, s, row.lambda);
    // Same seed for every row: controllers and lambdas share the draws.
    row.estimate = std::visit(
        [&](const auto& proto) {
          return estimate_drift(
              s.topo, [&] { return proto; }, arrivals, s.routing, s.pressure.node_slope,
              c.heavy_init, c.drift_replications, c.seed);
        },
        make_controller(row.controller, c, s, s.routing));
  });

  std::string csv = "lambda,controller,mean_drift,halfwidth\n";
  json table = json::array();
  for (const auto& r : rows) {
    csv += num(r.lambda) + ',' + r.controller + ',' + num(r.estimate.mean_drift) + ',' +
           num(r.estimate.confidence_halfwidth) + '\n';
    table.push_back({{"lambda", r.lambda},
                     {"controller", r.controller},
                     {"mean_drift", r.estimate.mean_drift},
                     {"halfwidth", r.estimate.confidence_halfwidth},
                     {"queue_mass", r.estimate.queue_mass_at_eval},
                     {"replications", r.estimate.num_replications}});
  }
  write_file(dir / "drift.csv", csv);
  write_json(dir / "summary.json", {{"command", "drift"}, {"config", to_json(c)}, {"rows", table}});
  return rows;
}

// gen-network

/// Writes the configured grid as network.json.
inline Network cmd_gen_network(const ExperimentConfig& c) {
  check_config(c);
  Network net = build_grid_network(c.rows, c.cols, c.saturation);
  const auto dir = prepare_out(c.out);
  write_json(dir / "network.json", to_json(net));
  return net;
}

}  // namespace bpsig
