#pragma once

// Stability diagnostics and the experiment building blocks: Lyapunov values,
// one-slot drift under heavy load, slope-based stability verdicts, bisection
// for the stability frontier x_max, and random parameter samples.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bpsig/control.hpp"
#include "bpsig/dynamics.hpp"
#include "bpsig/errors.hpp"
#include "bpsig/network.hpp"
#include "bpsig/rng.hpp"

namespace bpsig {

/// sum_ab th_ab Q_ab^2
inline double lyapunov_full(const QueueState& state, std::span<const double> movement_slope) {
  double v = 0.0;
  for (std::size_t k = 0; k < state.q.size(); ++k) {
    const auto q = static_cast<double>(state.q[k]);
    v += movement_slope[k] * q * q;
  }
  return v;
}

/// sum_a th_a (sum_b Q_ab)^2
inline double lyapunov_aggregated(const Topology& topo, const QueueState& state,
                                  std::span<const double> node_slope) {
  double v = 0.0;
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a) {
    const auto qa = static_cast<double>(aggregate(topo, state, a));
    v += node_slope[static_cast<std::size_t>(a)] * qa * qa;
  }
  return v;
}

// Trajectories.

struct TrajectoryRow {
  std::int64_t slot = 0;         // slot index t; totals are taken at the end of the slot
  std::int64_t total_queue = 0;  // sum_ab Q_ab(t+1)
  std::int64_t arrivals = 0;
  std::int64_t exits = 0;
  double lyapunov_full = 0.0;
  double lyapunov_aggregated = 0.0;
};

struct Trajectory {
  std::int64_t initial_total = 0;
  std::vector<TrajectoryRow> rows;
  QueueState final_state;

  std::int64_t arrivals_sum() const {
    std::int64_t s = 0;
    for (const auto& r : rows) s += r.arrivals;
    return s;
  }
  std::int64_t exits_sum() const {
    std::int64_t s = 0;
    for (const auto& r : rows) s += r.exits;
    return s;
  }

  /// The recounted final queue mass matches the arrival/exit ledger exactly.
  /// Row totals are kept from that ledger, so the recount is the real check.
  bool conserved() const {
    const std::int64_t ledger = initial_total + arrivals_sum() - exits_sum();
    return final_state.total() == ledger && (rows.empty() || rows.back().total_queue == ledger);
  }

  std::vector<double> totals() const {
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(static_cast<double>(r.total_queue));
    return out;
  }
};

struct RunOptions {
  std::int64_t slots = 50'000;
  std::uint64_t seed = 1;
  std::optional<QueueState> initial;
  /// When set, rows carry both Lyapunov values under these slopes.
  const PressureSpec* lyapunov = nullptr;
  /// Called with the state at the end of each slot.
  std::function<void(const QueueState&)> on_slot;
};

template <PhaseController C>
Trajectory run_simulation(const Topology& topo, const ArrivalConfig& arrivals,
                          const RoutingMatrix& routing, C& controller, const RunOptions& opt) {
  Simulator sim(topo, arrivals, routing, opt.seed);
  if (opt.initial) sim.set_state(*opt.initial);

  Trajectory traj;
  traj.initial_total = sim.state().total();
  std::int64_t total = traj.initial_total;
  traj.rows.reserve(static_cast<std::size_t>(std::max<std::int64_t>(opt.slots, 0)));
  GlobalPhase phase;
  for (std::int64_t t = 0; t < opt.slots; ++t) {
    controller.select(topo, sim.state(), sim.state().slot, phase);
    const auto& rec = sim.step(phase);
    TrajectoryRow row;
    row.slot = rec.slot;
    row.arrivals = rec.arrivals_total;
    row.exits = rec.exits();
    total += row.arrivals - row.exits;
    row.total_queue = total;
    if (opt.lyapunov) {
      row.lyapunov_full = lyapunov_full(sim.state(), opt.lyapunov->movement_slope);
      row.lyapunov_aggregated = lyapunov_aggregated(topo, sim.state(), opt.lyapunov->node_slope);
    }
    traj.rows.push_back(row);
    if (opt.on_slot) opt.on_slot(sim.state());
  }
  traj.final_state = sim.state();
  return traj;
}

// Stability verdicts.

struct StabilityCriteria {
  double warmup_fraction = 0.25;
  double slope_fraction = 0.01;
  std::size_t min_length = 10'000;
};

struct StabilityVerdict {
  bool stable = true;
  double slope = 0.0;  // vehicles/slot over the evaluation window
  double peak_queue = 0.0;
  std::pair<std::size_t, std::size_t> window{0, 0};  // [start, end)
};

/// Least-squares slope of ys against their index.
inline double ols_slope(std::span<const double> ys) {
  const auto n = static_cast<double>(ys.size());
  if (ys.size() < 2) return 0.0;
  const double xbar = (n - 1.0) / 2.0;
  double ybar = 0.0;
  for (double y : ys) ybar += y;
  ybar /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < ys.size(); ++i) {
    const double dx = static_cast<double>(i) - xbar;
    sxy += dx * (ys[i] - ybar);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

/// Discards the warmup, fits a line to the rest of the total-queue series and
/// calls the run stable when the slope stays below slope_fraction times the
/// network's total arrival rate.
inline StabilityVerdict detect_stability(std::span<const double> total_queue,
                                         double total_arrival_rate,
                                         const StabilityCriteria& c = {}) {
  if (total_queue.size() < c.min_length)
    throw PreconditionError("trajectory has " + std::to_string(total_queue.size()) +
                            " slots; stability detection needs at least " +
                            std::to_string(c.min_length));
  if (!(c.warmup_fraction >= 0.0 && c.warmup_fraction < 1.0))
    throw ConfigError("warmup fraction must lie in [0,1)");

  StabilityVerdict v;
  const auto start =
      static_cast<std::size_t>(c.warmup_fraction * static_cast<double>(total_queue.size()));
  v.window = {start, total_queue.size()};
  const auto tail = total_queue.subspan(start);
  v.slope = ols_slope(tail);
  v.peak_queue = *std::max_element(total_queue.begin(), total_queue.end());
  const double threshold = c.slope_fraction * total_arrival_rate;
  v.stable = v.slope <= 0.0 || v.slope < threshold;
  return v;
}

// Heavy-load drift.

struct DriftEstimate {
  double mean_drift = 0.0;
  std::int64_t queue_mass_at_eval = 0;
  std::int32_t num_replications = 0;
  double confidence_halfwidth = 0.0;  // 95%, normal approximation
};

inline constexpr std::int32_t kMinDriftReplications = 30;

/// Mean one-slot change of the aggregated Lyapunov function from the state
/// Q_ab = heavy_init everywhere. `make_controller` builds a fresh controller
/// per replication.
template <class MakeController>
DriftEstimate estimate_drift(const Topology& topo, MakeController&& make_controller,
                             const ArrivalConfig& arrivals, const RoutingMatrix& routing,
                             std::span<const double> node_slope, std::int64_t heavy_init,
                             std::int32_t replications, std::uint64_t seed) {
  if (replications < kMinDriftReplications)
    throw PreconditionError("drift estimate needs at least " +
                            std::to_string(kMinDriftReplications) + " replications, got " +
                            std::to_string(replications));
  for (const auto& m : topo.movements())
    if (heavy_init < m.saturation)
      throw PreconditionError("heavy_init " + std::to_string(heavy_init) +
                              " is below the saturation rate " + std::to_string(m.saturation) +
                              " of movement " + detail::pair_str(m.pair));

  QueueState start{std::vector<std::int64_t>(topo.movement_count(), heavy_init), 0};
  const double v0 = lyapunov_aggregated(topo, start, node_slope);

  std::vector<double> drifts;
  drifts.reserve(static_cast<std::size_t>(replications));
  GlobalPhase phase;
  for (std::int32_t rep = 0; rep < replications; ++rep) {
    Simulator sim(topo, arrivals, routing,
                  derive_seed(seed, {static_cast<std::uint64_t>(Stream::drift),
                                     static_cast<std::uint64_t>(rep)}));
    sim.set_state(start);
    auto controller = make_controller();
    controller.select(topo, sim.state(), 0, phase);
    sim.step(phase);
    drifts.push_back(lyapunov_aggregated(topo, sim.state(), node_slope) - v0);
  }

  const double n = static_cast<double>(replications);
  const double mean = std::accumulate(drifts.begin(), drifts.end(), 0.0) / n;
  double ss = 0.0;
  for (double d : drifts) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  return {mean, start.total(), replications, 1.96 * sd / std::sqrt(n)};
}

// Random samples of routing/arrival parameters.

struct SampleSpec {
  std::vector<double> routing;    // r_ab per movement, topology order
  std::vector<double> exit;       // normalized exit share per node
  std::vector<double> base_rate;  // lambda_a^0 per node
  std::uint64_t seed = 0;

  RoutingMatrix routing_matrix() const { return {routing}; }

  ArrivalConfig arrivals(double x, double batch_probability, std::int32_t batch_size) const {
    ArrivalConfig cfg{base_rate, batch_probability, batch_size};
    for (auto& l : cfg.rate) l *= x;
    return cfg;
  }
};

/// Per node: y ~ U[0,1] for each onward movement and y_exit ~ U[0,0.1], rates
/// are the normalized values; lambda_a^0 ~ U[0,1].
inline SampleSpec generate_sample(const Topology& topo, std::uint64_t seed) {
  auto rng = make_stream(seed, Stream::sample);
  SampleSpec s;
  s.seed = seed;
  s.routing.assign(topo.movement_count(), 0.0);
  s.exit.assign(topo.node_count(), 0.0);
  s.base_rate.assign(topo.node_count(), 0.0);
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a) {
    const auto [lo, hi] = topo.outgoing(a);
    double sum = 0.0;
    for (auto k = lo; k < hi; ++k) sum += (s.routing[k] = rng.uniform01());
    const double y_exit = 0.1 * rng.uniform01();
    sum += y_exit;
    for (auto k = lo; k < hi; ++k) s.routing[k] /= sum;
    s.exit[static_cast<std::size_t>(a)] = y_exit / sum;
    s.base_rate[static_cast<std::size_t>(a)] = rng.uniform01();
  }
  return s;
}

/// Uniform rates recast as a sample: lambda_a^0 = 1 so x is the per-node rate.
inline SampleSpec uniform_sample(const Topology& topo, const RoutingMatrix& routing,
                                 std::uint64_t seed) {
  std::vector<double> exit(topo.node_count());
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a)
    exit[static_cast<std::size_t>(a)] = routing.exit_rate(topo, a);
  return {routing.rate, std::move(exit), std::vector<double>(topo.node_count(), 1.0), seed};
}

// Frontier search.

struct Probe {
  double x = 0.0;
  StabilityVerdict verdict;
};

struct Frontier {
  double x_max = 0.0;
  double slope_at_frontier = 0.0;
  std::vector<Probe> probes;  // in evaluation order
};

/// Bisection for the largest stable arrival scaling. `probe(x)` must return
/// the verdict of a fresh run at scaling x. The bracket ends are probed first;
/// a stable x_hi is an error, an unstable x_lo means nothing in the bracket is
/// stable and x_lo is returned as the frontier.
template <class ProbeFn>
Frontier find_x_max(ProbeFn&& probe, double x_lo, double x_hi, double resolution) {
  if (!(resolution > 0.0)) throw ConfigError("bisection resolution must be positive");
  if (!(x_lo < x_hi)) throw ConfigError("bisection bracket must satisfy x_lo < x_hi");

  Frontier f;
  auto run = [&](double x) {
    StabilityVerdict v = probe(x);
    f.probes.push_back({x, v});
    return v;
  };

  const auto lo_v = run(x_lo);
  const auto hi_v = run(x_hi);
  if (hi_v.stable) {
    std::string log;
    for (const auto& p : f.probes)
      log += " x=" + std::to_string(p.x) + (p.verdict.stable ? " stable" : " unstable") +
             " slope=" + std::to_string(p.verdict.slope) + ";";
    throw BracketError("bracket [" + std::to_string(x_lo) + ", " + std::to_string(x_hi) +
                       "] does not straddle the frontier:" + log);
  }
  f.x_max = x_lo;
  f.slope_at_frontier = lo_v.slope;
  if (!lo_v.stable) return f;

  double lo = x_lo;
  double hi = x_hi;
  while (hi - lo > resolution) {
    const double mid = 0.5 * (lo + hi);
    const auto v = run(mid);
    if (v.stable) {
      lo = mid;
      f.slope_at_frontier = v.slope;
    } else {
      hi = mid;
    }
  }
  f.x_max = lo;
  return f;
}

/// performance(BP) = x_max(BP) / x_max(BP*)
inline double performance_ratio(double x_max_bp, double x_max_star) {
  if (!(x_max_star > 0.0))
    throw PreconditionError("performance ratio needs a positive BP* frontier");
  return x_max_bp / x_max_star;
}

}  // namespace bpsig
