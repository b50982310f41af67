#pragma once

// Slotted stochastic evolution of the queuing network.
//
// One slot: the active global phase serves min(Q_ab, s_ab) vehicles on every
// allowed movement; served vehicles either leave through an exit sink or
// arrive at the downstream node. Exogenous arrivals are then sampled, and all
// vehicles entering a node during the slot are split into its per-direction
// queues (or exit, with the row's deficit probability). Vehicles that enter
// during slot t are not eligible for service before slot t+1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bpsig/errors.hpp"
#include "bpsig/network.hpp"
#include "bpsig/rng.hpp"

namespace bpsig {

/// Routing probabilities r_ab, stored per movement in topology order.
/// Each node's exit probability is 1 - sum_b r_ab.
struct RoutingMatrix {
  std::vector<double> rate;

  double exit_rate(const Topology& topo, NodeId a) const {
    const auto [lo, hi] = topo.outgoing(a);
    double sum = 0.0;
    for (auto k = lo; k < hi; ++k) sum += rate[k];
    return 1.0 - sum;
  }
};

inline constexpr double kRowTolerance = 1e-12;

/// Throws ConfigError if any probability is outside [0,1] or a row sums above 1.
inline void check_routing(const Topology& topo, const RoutingMatrix& r) {
  if (r.rate.size() != topo.movement_count())
    throw ConfigError("routing matrix has " + std::to_string(r.rate.size()) + " entries for " +
                      std::to_string(topo.movement_count()) + " movements");
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a) {
    const auto [lo, hi] = topo.outgoing(a);
    double sum = 0.0;
    for (auto k = lo; k < hi; ++k) {
      if (!(r.rate[k] >= 0.0 && r.rate[k] <= 1.0))
        throw ConfigError("routing rate out of [0,1] on movement " +
                          detail::pair_str(topo.movement(k).pair));
      sum += r.rate[k];
    }
    if (sum > 1.0 + kRowTolerance)
      throw ConfigError("routing row of node " + std::to_string(a) + " sums to " +
                        std::to_string(sum) + " > 1");
  }
}

/// Routing from an explicit (from,to) -> probability map; absent pairs get 0.
inline RoutingMatrix make_routing(const Topology& topo, const std::map<Movement, double>& rates) {
  RoutingMatrix r{std::vector<double>(topo.movement_count(), 0.0)};
  for (const auto& [m, p] : rates) {
    auto k = topo.find(m);
    if (!k) throw ConfigError("routing rate for unknown movement " + detail::pair_str(m));
    r.rate[*k] = p;
  }
  check_routing(topo, r);
  return r;
}

/// Same turn probabilities at every node; needs the network's turn labels.
inline RoutingMatrix turn_routing(const Topology& topo, double straight, double left, double right) {
  const auto& turns = topo.network().turns;
  RoutingMatrix r{std::vector<double>(topo.movement_count(), 0.0)};
  for (std::size_t k = 0; k < topo.movement_count(); ++k) {
    auto it = turns.find(topo.movement(k).pair);
    if (it == turns.end())
      throw ConfigError("turn routing needs a turn label on movement " +
                        detail::pair_str(topo.movement(k).pair));
    switch (it->second) {
      case Turn::straight: r.rate[k] = straight; break;
      case Turn::left: r.rate[k] = left; break;
      case Turn::right: r.rate[k] = right; break;
    }
  }
  check_routing(topo, r);
  return r;
}

struct ArrivalConfig {
  std::vector<double> rate;  // lambda_a per node
  double batch_probability = 0.05;
  std::int32_t batch_size = 10;

  double mean_event_size() const {
    return (1.0 - batch_probability) + batch_probability * batch_size;
  }
};

inline void check_arrivals(const Topology& topo, const ArrivalConfig& cfg) {
  if (cfg.rate.size() != topo.node_count())
    throw ConfigError("arrival rates given for " + std::to_string(cfg.rate.size()) +
                      " nodes, network has " + std::to_string(topo.node_count()));
  for (double l : cfg.rate)
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("arrival rate must be finite and >= 0");
  if (!(cfg.batch_probability >= 0.0 && cfg.batch_probability <= 1.0))
    throw ConfigError("batch_probability must lie in [0,1]");
  if (cfg.batch_size < 1) throw ConfigError("batch_size must be positive");
}

/// Poisson variate. Sequential inversion for small means, the standard
/// library's sampler otherwise.
class PoissonSampler {
 public:
  explicit PoissonSampler(double mean)
      : mean_(mean), exp_neg_mean_(std::exp(-mean)), large_(mean > kInversionLimit ? mean : 1.0) {}

  std::int64_t operator()(Xoshiro256& rng) {
    if (mean_ <= 0.0) return 0;
    if (mean_ > kInversionLimit) return large_(rng);
    const double u = rng.uniform01();
    std::int64_t k = 0;
    double p = exp_neg_mean_;
    double cdf = p;
    while (u >= cdf && p > 0.0) {
      ++k;
      p *= mean_ / static_cast<double>(k);
      cdf += p;
    }
    return k;
  }

 private:
  static constexpr double kInversionLimit = 10.0;

  double mean_;
  double exp_neg_mean_;
  std::poisson_distribution<std::int64_t> large_;
};

/// Draws A_a(t) for one node: K ~ Poisson(lambda/m) events, each a batch of
/// batch_size with probability batch_probability, else a single vehicle.
class ArrivalSampler {
 public:
  ArrivalSampler(double rate, double batch_probability, std::int32_t batch_size)
      : events_(rate > 0.0
                    ? rate / ((1.0 - batch_probability) + batch_probability * batch_size)
                    : 0.0),
        batch_probability_(batch_probability),
        batch_size_(batch_size) {}

  std::int64_t operator()(Xoshiro256& rng) {
    const std::int64_t k = events_(rng);
    std::int64_t total = 0;
    for (std::int64_t e = 0; e < k; ++e)
      total += (batch_probability_ > 0.0 && rng.uniform01() < batch_probability_) ? batch_size_ : 1;
    return total;
  }

 private:
  PoissonSampler events_;
  double batch_probability_;
  std::int32_t batch_size_;
};

inline std::int64_t sample_arrivals(const ArrivalConfig& cfg, NodeId node, Xoshiro256& rng) {
  ArrivalSampler sampler(cfg.rate.at(static_cast<std::size_t>(node)), cfg.batch_probability,
                         cfg.batch_size);
  return sampler(rng);
}

/// Per-node cumulative routing thresholds for categorical draws.
///
/// Thresholds are 32-bit fixed point, so one 64-bit draw routes two vehicles.
class Router {
 public:
  Router(const Topology& topo, const RoutingMatrix& r) {
    check_routing(topo, r);
    cumulative_.resize(topo.movement_count());
    for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a) {
      const auto [lo, hi] = topo.outgoing(a);
      double sum = 0.0;
      for (auto k = lo; k < hi; ++k) {
        sum += r.rate[k];
        cumulative_[k] = static_cast<std::uint64_t>(std::llround(std::min(sum, 1.0) * kOne));
      }
      // A conservative row never exits, whatever the rounding of the partial sums.
      if (hi > lo && std::abs(sum - 1.0) <= kRowTolerance) cumulative_[hi - 1] = kOne;
    }
  }

  /// Assigns `count` vehicles entering `a`; calls on_queue(k) per vehicle
  /// joining movement k's queue and returns the number that exit.
  template <class OnQueue>
  std::int64_t route(const Topology& topo, NodeId a, std::int64_t count, Xoshiro256& rng,
                     OnQueue&& on_queue) const {
    const auto [lo, hi] = topo.outgoing(a);
    std::int64_t exited = 0;
    auto place = [&](std::uint64_t u) {
      auto k = lo;
      while (k < hi && u >= cumulative_[k]) ++k;
      if (k < hi)
        on_queue(k);
      else
        ++exited;
    };
    std::int64_t v = 0;
    for (; v + 1 < count; v += 2) {
      const std::uint64_t bits = rng();
      place(bits >> 32);
      place(bits & 0xffffffffULL);
    }
    if (v < count) place(rng() >> 32);
    return exited;
  }

 private:
  static constexpr double kOne = 4294967296.0;  // 2^32

  std::vector<std::uint64_t> cumulative_;
};

struct RouteResult {
  std::map<NodeId, std::int64_t> split;  // downstream node -> vehicles
  std::int64_t exited = 0;
};

/// Splits `count` vehicles entering `node` between its downstream options and the exit.
inline RouteResult route_vehicles(std::int64_t count, NodeId node, const Topology& topo,
                                  const RoutingMatrix& r, Xoshiro256& rng) {
  if (count < 0) throw PreconditionError("negative vehicle count");
  Router router(topo, r);
  RouteResult out;
  out.exited = router.route(topo, node, count, rng,
                            [&](std::size_t k) { ++out.split[topo.movement(k).pair.to]; });
  return out;
}

/// Ground-truth per-direction queues Q_ab, indexed by movement.
struct QueueState {
  std::vector<std::int64_t> q;
  std::int64_t slot = 0;

  static QueueState empty(const Topology& topo) {
    return {std::vector<std::int64_t>(topo.movement_count(), 0), 0};
  }

  std::int64_t total() const { return std::accumulate(q.begin(), q.end(), std::int64_t{0}); }

  friend bool operator==(const QueueState&, const QueueState&) = default;
};

/// Q_a: vehicles waiting at node a over all directions.
inline std::int64_t aggregate(const Topology& topo, const QueueState& state, NodeId a) {
  const auto [lo, hi] = topo.outgoing(a);
  std::int64_t sum = 0;
  for (auto k = lo; k < hi; ++k) sum += state.q[k];
  return sum;
}

/// d_ab = min(Q_ab / s_ab, 1), kept as an exact fraction.
struct Detector {
  std::int64_t numerator = 0;    // min(Q_ab, s_ab)
  std::int64_t denominator = 1;  // s_ab

  double value() const { return static_cast<double>(numerator) / static_cast<double>(denominator); }

  friend bool operator==(const Detector&, const Detector&) = default;
};

inline Detector detector(std::int64_t queue, std::int32_t saturation) {
  return {std::min<std::int64_t>(queue, saturation), saturation};
}

inline std::vector<Detector> detectors(const Topology& topo, const QueueState& state) {
  std::vector<Detector> d(topo.movement_count());
  for (std::size_t k = 0; k < d.size(); ++k) d[k] = detector(state.q[k], topo.movement(k).saturation);
  return d;
}

/// What happened during one slot.
struct FlowRecord {
  std::int64_t slot = 0;
  std::vector<std::int64_t> arrivals;  // per node
  std::vector<std::pair<std::size_t, std::int64_t>> served;  // (movement, count), nonzero only
  std::int64_t arrivals_total = 0;
  std::int64_t routing_exits = 0;
  std::int64_t sink_exits = 0;

  std::int64_t exits() const { return routing_exits + sink_exits; }
};

/// Independent per-node arrival and routing streams.
class RandomStreams {
 public:
  RandomStreams(const Topology& topo, const ArrivalConfig& cfg, std::uint64_t seed) {
    check_arrivals(topo, cfg);
    for (std::size_t a = 0; a < topo.node_count(); ++a) {
      arrival_rng_.push_back(make_stream(seed, Stream::arrivals, a));
      routing_rng_.push_back(make_stream(seed, Stream::routing, a));
      samplers_.emplace_back(cfg.rate[a], cfg.batch_probability, cfg.batch_size);
    }
  }

  std::int64_t arrivals(std::size_t a) { return samplers_[a](arrival_rng_[a]); }
  Xoshiro256& routing(std::size_t a) { return routing_rng_[a]; }

 private:
  std::vector<Xoshiro256> arrival_rng_;
  std::vector<Xoshiro256> routing_rng_;
  std::vector<ArrivalSampler> samplers_;
};

/// Advances `state` by one slot under phase `p`, filling `rec`.
inline void step(QueueState& state, const Topology& topo, const GlobalPhase& p,
                 const Router& router, RandomStreams& streams, FlowRecord& rec,
                 std::vector<std::int64_t>& inflow) {
  topo.check_phase(p);
  const auto n = topo.node_count();
  rec.slot = state.slot;
  rec.arrivals.resize(n);
  rec.served.clear();
  rec.arrivals_total = rec.routing_exits = rec.sink_exits = 0;
  inflow.assign(n, 0);

  for (std::size_t j = 0; j < topo.junction_count(); ++j) {
    for (std::size_t k : topo.phase_movements(j, static_cast<std::size_t>(p.per_junction[j]))) {
      const auto& mv = topo.movement(k);
      const std::int64_t served = std::min<std::int64_t>(state.q[k], mv.saturation);
      if (served == 0) continue;
      state.q[k] -= served;
      rec.served.emplace_back(k, served);
      if (mv.exits)
        rec.sink_exits += served;
      else
        inflow[static_cast<std::size_t>(mv.pair.to)] += served;
    }
  }

  for (std::size_t a = 0; a < n; ++a) {
    const std::int64_t arrived = streams.arrivals(a);
    rec.arrivals[a] = arrived;
    rec.arrivals_total += arrived;
    const std::int64_t entering = inflow[a] + arrived;
    if (entering == 0) continue;
    rec.routing_exits += router.route(topo, static_cast<NodeId>(a), entering, streams.routing(a),
                                      [&](std::size_t k) { ++state.q[k]; });
  }
  ++state.slot;
}

/// Owns the evolving state and randomness of one simulation run.
class Simulator {
 public:
  Simulator(const Topology& topo, const ArrivalConfig& arrivals, const RoutingMatrix& routing,
            std::uint64_t seed)
      : topo_(&topo),
        router_(topo, routing),
        streams_(topo, arrivals, seed),
        state_(QueueState::empty(topo)) {}

  const QueueState& state() const noexcept { return state_; }

  void set_state(QueueState s) {
    if (s.q.size() != topo_->movement_count())
      throw StructuralError("queue state does not match the network");
    for (auto v : s.q)
      if (v < 0) throw PreconditionError("negative queue count");
    state_ = std::move(s);
  }

  const FlowRecord& step(const GlobalPhase& p) {
    bpsig::step(state_, *topo_, p, router_, streams_, record_, inflow_);
    return record_;
  }

 private:
  const Topology* topo_;
  Router router_;
  RandomStreams streams_;
  QueueState state_;
  FlowRecord record_;
  std::vector<std::int64_t> inflow_;
};

}  // namespace bpsig
