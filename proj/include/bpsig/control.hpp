#pragma once

// Phase selection.
//
// Both back-pressure rules are max-weight rules evaluated junction by
// junction: every movement (a,b) gets a weight W_ab >= 0 and the junction
// activates the phase maximizing sum W_ab * s_ab over its served movements.
// They differ only in what they may observe:
//
//   BP*  sees per-direction queues Q_ab and the routing rows of its outputs:
//        W_ab = max(th_ab Q_ab - sum_c r_bc th_bc Q_bc, 0)
//   BP   sees aggregated queues Q_a and stop-line detectors d_ab:
//        W_ab = d_ab * max(th_a Q_a - th_b Q_b, 0)
//
// The observation types carry exactly that information and nothing more.
// The routing rates live in BP*'s observation; BP never receives them.
// Ties: among maximizing phases prefer one that serves no zero-weight
// movement; remaining ties go to the lowest phase index.

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "bpsig/dynamics.hpp"
#include "bpsig/errors.hpp"
#include "bpsig/network.hpp"

namespace bpsig {

/// Linear pressure slopes: th_ab per movement (BP*) and th_a per node (BP).
struct PressureSpec {
  std::vector<double> movement_slope;
  std::vector<double> node_slope;

  static PressureSpec uniform(const Topology& topo, double slope = 1.0) {
    return {std::vector<double>(topo.movement_count(), slope),
            std::vector<double>(topo.node_count(), slope)};
  }

  PressureSpec scaled(double factor) const {
    PressureSpec out = *this;
    for (auto& s : out.movement_slope) s *= factor;
    for (auto& s : out.node_slope) s *= factor;
    return out;
  }
};

inline void check_pressure(const Topology& topo, const PressureSpec& ps) {
  if (ps.movement_slope.size() != topo.movement_count() || ps.node_slope.size() != topo.node_count())
    throw ConfigError("pressure slopes do not match the network");
  for (double s : ps.movement_slope)
    if (!(s > 0.0)) throw ConfigError("pressure slopes must be strictly positive");
  for (double s : ps.node_slope)
    if (!(s > 0.0)) throw ConfigError("pressure slopes must be strictly positive");
}

// Observations.
//
// Observations are snapshots of the whole network taken once per slot; the
// local rules read only the entries of the junction they decide for.

/// What BP* may read: the per-direction queue matrix and the routing rates.
struct FullObservation {
  std::span<const std::int64_t> queue;  // Q_ab per movement
  std::span<const double> routing;      // r_ab per movement
};

inline FullObservation observe_full(const QueueState& state, const RoutingMatrix& r) {
  return {state.q, r.rate};
}

/// What BP may read: aggregated queue lengths and stop-line detectors.
/// No per-direction count is reachable from here.
struct AggregatedObservation {
  std::vector<std::int64_t> node_total;  // Q_a per node
  std::vector<Detector> detector;        // d_ab per movement
};

inline void observe_aggregated(const Topology& topo, const QueueState& state,
                               AggregatedObservation& obs) {
  obs.node_total.resize(topo.node_count());
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a)
    obs.node_total[static_cast<std::size_t>(a)] = aggregate(topo, state, a);
  obs.detector.resize(topo.movement_count());
  for (std::size_t k = 0; k < topo.movement_count(); ++k)
    obs.detector[k] = detector(state.q[k], topo.movement(k).saturation);
}

inline AggregatedObservation observe_aggregated(const Topology& topo, const QueueState& state) {
  AggregatedObservation obs;
  observe_aggregated(topo, state, obs);
  return obs;
}

// Max-weight phase choice.

/// Differences within this relative margin count as equal.
inline constexpr double kTieTolerance = 1e-9;

inline double tie_scale(double x, double y) {
  return kTieTolerance * std::max(1.0, std::max(std::abs(x), std::abs(y)));
}

inline bool near_equal(double x, double y) { return std::abs(x - y) <= tie_scale(x, y); }

/// max(up - down, 0), snapping rounding residue of a balanced difference to 0.
inline double clamped_difference(double up, double down) {
  const double diff = up - down;
  return diff <= tie_scale(up, down) ? 0.0 : diff;
}

/// Picks the phase of junction j maximizing sum W_k * s_k; `weight` is indexed
/// by local movement position (global id minus the junction's first id).
inline std::int32_t choose_phase(const Topology& topo, std::size_t j,
                                 const std::vector<double>& weight) {
  const auto first = topo.junction_movements(j).first;
  const auto nphases = topo.phase_count(j);

  double best = -1.0;
  std::int32_t best_any = 0;
  std::int32_t best_clean = -1;
  for (std::size_t p = 0; p < nphases; ++p) {
    double score = 0.0;
    bool clean = true;  // serves no zero-weight movement
    for (std::size_t k : topo.phase_movements(j, p)) {
      const double w = weight[k - first];
      if (w == 0.0)
        clean = false;
      else
        score += w * topo.movement(k).saturation;
    }
    if (p == 0 || (!near_equal(score, best) && score > best)) {
      best = score;
      best_any = static_cast<std::int32_t>(p);
      best_clean = clean ? static_cast<std::int32_t>(p) : -1;
    } else if (near_equal(score, best) && clean && best_clean < 0) {
      best_clean = static_cast<std::int32_t>(p);
    }
  }
  return best_clean >= 0 ? best_clean : best_any;
}

/// BP* weights for junction j, by local movement position.
inline void bp_star_weights(const FullObservation& obs, const Topology& topo,
                            const PressureSpec& pressure, std::size_t j,
                            std::vector<double>& weight) {
  if (obs.queue.size() != topo.movement_count())
    throw StructuralError("observation does not match the network");
  if (obs.routing.size() != topo.movement_count())
    throw ConfigError("missing routing rows: " + std::to_string(obs.routing.size()) + " of " +
                      std::to_string(topo.movement_count()) + " movements covered");

  const auto [lo, hi] = topo.junction_movements(j);
  const auto& outputs = topo.network().junctions[j].outputs;
  // Routing-weighted downstream pressure sum_c r_bc th_bc Q_bc per output;
  // exit sinks have none.
  std::array<double, 16> small{};
  std::vector<double> large;
  double* downstream = small.data();
  if (outputs.size() > small.size()) {
    large.resize(outputs.size());
    downstream = large.data();
  }
  for (std::size_t o = 0; o < outputs.size(); ++o) {
    double sum = 0.0;
    if (!topo.network().is_sink(outputs[o])) {
      const auto [blo, bhi] = topo.outgoing(outputs[o]);
      for (auto c = blo; c < bhi; ++c)
        sum += obs.routing[c] * pressure.movement_slope[c] * static_cast<double>(obs.queue[c]);
    }
    downstream[o] = sum;
  }

  weight.resize(hi - lo);
  for (auto k = lo; k < hi; ++k) {
    const double up = pressure.movement_slope[k] * static_cast<double>(obs.queue[k]);
    weight[k - lo] = clamped_difference(up, downstream[topo.output_slot(k)]);
  }
}

inline std::int32_t bp_star_local(const FullObservation& obs, const Topology& topo,
                                  const PressureSpec& pressure, std::size_t j) {
  std::vector<double> w;
  bp_star_weights(obs, topo, pressure, j, w);
  return choose_phase(topo, j, w);
}

/// BP weights for junction j, by local movement position. Exit sinks exert no
/// downstream pressure.
inline void bp_weights(const AggregatedObservation& obs, const Topology& topo,
                       const PressureSpec& pressure, std::size_t j, std::vector<double>& weight) {
  if (obs.node_total.size() != topo.node_count() || obs.detector.size() != topo.movement_count())
    throw StructuralError("observation does not match the network");

  const auto [lo, hi] = topo.junction_movements(j);
  weight.resize(hi - lo);
  for (auto k = lo; k < hi; ++k) {
    const auto& d = obs.detector[k];
    if (d.numerator == 0) {
      weight[k - lo] = 0.0;
      continue;
    }
    const auto& mv = topo.movement(k).pair;
    const auto a = static_cast<std::size_t>(mv.from);
    const double up = pressure.node_slope[a] * static_cast<double>(obs.node_total[a]);
    double down = 0.0;
    if (!topo.network().is_sink(mv.to)) {
      const auto b = static_cast<std::size_t>(mv.to);
      down = pressure.node_slope[b] * static_cast<double>(obs.node_total[b]);
    }
    weight[k - lo] = d.value() * clamped_difference(up, down);
  }
}

inline std::int32_t bp_local(const AggregatedObservation& obs, const Topology& topo,
                             const PressureSpec& pressure, std::size_t j) {
  std::vector<double> w;
  bp_weights(obs, topo, pressure, j, w);
  return choose_phase(topo, j, w);
}

// Controllers.

/// Anything that can pick a global phase for the current slot.
template <class C>
concept PhaseController = requires(C c, const Topology& topo, const QueueState& s, GlobalPhase& out) {
  c.select(topo, s, std::int64_t{0}, out);
};

class BpStarController {
 public:
  BpStarController(PressureSpec pressure, RoutingMatrix routing)
      : pressure_(std::move(pressure)), routing_(std::move(routing)) {}

  void select(const Topology& topo, const QueueState& state, std::int64_t /*slot*/,
              GlobalPhase& out) {
    out.per_junction.resize(topo.junction_count());
    const auto obs = observe_full(state, routing_);
    for (std::size_t j = 0; j < topo.junction_count(); ++j) {
      bp_star_weights(obs, topo, pressure_, j, weight_);
      out.per_junction[j] = choose_phase(topo, j, weight_);
    }
  }

  static constexpr const char* name() { return "bp_star"; }

 private:
  PressureSpec pressure_;
  RoutingMatrix routing_;
  std::vector<double> weight_;
};

class BpController {
 public:
  explicit BpController(PressureSpec pressure) : pressure_(std::move(pressure)) {}

  void select(const Topology& topo, const QueueState& state, std::int64_t /*slot*/,
              GlobalPhase& out) {
    out.per_junction.resize(topo.junction_count());
    observe_aggregated(topo, state, obs_);
    for (std::size_t j = 0; j < topo.junction_count(); ++j) {
      bp_weights(obs_, topo, pressure_, j, weight_);
      out.per_junction[j] = choose_phase(topo, j, weight_);
    }
  }

  static constexpr const char* name() { return "bp"; }

 private:
  PressureSpec pressure_;
  AggregatedObservation obs_;
  std::vector<double> weight_;
};

/// Pre-timed schedule for one junction: each phase in `order` holds for
/// period / order.size() slots.
struct CycleSpec {
  std::int64_t period = 4;
  std::vector<std::int32_t> order;
  std::int64_t offset = 0;
};

inline void check_cycle(const CycleSpec& c, std::size_t nphases) {
  std::vector<std::int32_t> sorted = c.order;
  std::sort(sorted.begin(), sorted.end());
  bool permutation = sorted.size() == nphases;
  for (std::size_t i = 0; permutation && i < sorted.size(); ++i)
    permutation = sorted[i] == static_cast<std::int32_t>(i);
  if (!permutation)
    throw ConfigError("cycle order must be a permutation of the junction's phase indices");
  if (c.period < static_cast<std::int64_t>(nphases))
    throw ConfigError("cycle period shorter than the number of phases");
}

inline std::int32_t cycle_phase(const CycleSpec& c, std::int64_t slot) {
  const auto n = static_cast<std::int64_t>(c.order.size());
  const std::int64_t dwell = c.period / n;
  const std::int64_t pos = (((slot + c.offset) / dwell) % n + n) % n;
  return c.order[static_cast<std::size_t>(pos)];
}

class FixedCycleController {
 public:
  FixedCycleController(const Topology& topo, std::vector<CycleSpec> cycles)
      : cycles_(std::move(cycles)) {
    if (cycles_.size() != topo.junction_count())
      throw ConfigError("one cycle spec per junction required");
    for (std::size_t j = 0; j < cycles_.size(); ++j) check_cycle(cycles_[j], topo.phase_count(j));
  }

  /// Same period and offset everywhere, phases in index order.
  static FixedCycleController uniform(const Topology& topo, std::int64_t period,
                                      std::int64_t offset = 0) {
    std::vector<CycleSpec> cycles;
    for (std::size_t j = 0; j < topo.junction_count(); ++j) {
      CycleSpec c{period, {}, offset};
      for (std::size_t p = 0; p < topo.phase_count(j); ++p)
        c.order.push_back(static_cast<std::int32_t>(p));
      cycles.push_back(std::move(c));
    }
    return FixedCycleController(topo, std::move(cycles));
  }

  void select(const Topology& topo, const QueueState& /*state*/, std::int64_t slot,
              GlobalPhase& out) const {
    out.per_junction.resize(topo.junction_count());
    for (std::size_t j = 0; j < cycles_.size(); ++j) out.per_junction[j] = cycle_phase(cycles_[j], slot);
  }

  static constexpr const char* name() { return "fixed"; }

 private:
  std::vector<CycleSpec> cycles_;
};

using AnyController = std::variant<BpStarController, BpController, FixedCycleController>;

inline void select_global(AnyController& c, const Topology& topo, const QueueState& state,
                          std::int64_t slot, GlobalPhase& out) {
  std::visit([&](auto& ctl) { ctl.select(topo, state, slot, out); }, c);
}

template <PhaseController C>
GlobalPhase select_global(C& c, const Topology& topo, const QueueState& state, std::int64_t slot) {
  GlobalPhase out;
  c.select(topo, state, slot, out);
  return out;
}

}  // namespace bpsig
