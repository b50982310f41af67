#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "bpsig/analysis.hpp"

using namespace bpsig;

namespace {

struct Grid {
  Topology topo;
  RoutingMatrix routing;
  PressureSpec pressure;

  explicit Grid(int n, double s = 0.5, double l = 0.2, double r = 0.2)
      : topo(build_grid_network(n, n, 10)),
        routing(turn_routing(topo, s, l, r)),
        pressure(PressureSpec::uniform(topo)) {}

  ArrivalConfig uniform(double lambda) const {
    return {std::vector<double>(topo.node_count(), lambda), 0.05, 10};
  }
};

/// Phase with no movements; selecting it serves nothing.
struct AllRed {
  void select(const Topology& topo, const QueueState&, std::int64_t, GlobalPhase& out) const {
    out.per_junction.assign(topo.junction_count(), 4);
  }
};

Network with_all_red_phase(Network net) {
  for (auto& jn : net.junctions) jn.phases.push_back(Phase{});
  return net;
}

}  // namespace

TEST(Lyapunov, Examples) {
  const Grid g(1);
  auto s = QueueState::empty(g.topo);
  EXPECT_EQ(lyapunov_full(s, g.pressure.movement_slope), 0.0);
  EXPECT_EQ(lyapunov_aggregated(g.topo, s, g.pressure.node_slope), 0.0);
  const auto [lo, hi] = g.topo.outgoing(1);
  s.q[lo] = 3;
  s.q[lo + 1] = 4;
  EXPECT_EQ(lyapunov_full(s, g.pressure.movement_slope), 25.0);
  EXPECT_EQ(lyapunov_aggregated(g.topo, s, g.pressure.node_slope), 49.0);
}

TEST(Lyapunov, HomogeneityAdditivityAndOrdering) {
  const Grid g(3);
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = QueueState::empty(g.topo);
    for (auto& q : s.q) q = static_cast<std::int64_t>(rng() % 100);
    const double full = lyapunov_full(s, g.pressure.movement_slope);
    const double agg = lyapunov_aggregated(g.topo, s, g.pressure.node_slope);
    EXPECT_GE(agg, full);

    auto doubled = s;
    for (auto& q : doubled.q) q *= 2;
    EXPECT_EQ(lyapunov_full(doubled, g.pressure.movement_slope), 4 * full);
    EXPECT_EQ(lyapunov_aggregated(g.topo, doubled, g.pressure.node_slope), 4 * agg);

    // split the nodes in two sets by masking slopes
    std::vector<double> even(36, 0.0), odd(36, 0.0);
    for (std::size_t a = 0; a < 36; ++a) (a % 2 ? odd : even)[a] = 1.0;
    EXPECT_EQ(lyapunov_aggregated(g.topo, s, even) + lyapunov_aggregated(g.topo, s, odd), agg);
  }
}

TEST(Trajectory, ConservedAndDeterministic) {
  const Grid g(3);
  const auto arrivals = g.uniform(0.6);
  for (int which = 0; which < 3; ++which) {
    AnyController ctl = which == 0   ? AnyController(BpStarController(g.pressure, g.routing))
                        : which == 1 ? AnyController(BpController(g.pressure))
                                     : AnyController(FixedCycleController::uniform(g.topo, 8));
    auto ctl2 = ctl;
    RunOptions opt;
    opt.slots = 2000;
    opt.seed = 17;
    opt.lyapunov = &g.pressure;
    auto run = [&](AnyController& c) {
      return std::visit([&](auto& x) { return run_simulation(g.topo, arrivals, g.routing, x, opt); }, c);
    };
    const auto a = run(ctl);
    const auto b = run(ctl2);
    EXPECT_TRUE(a.conserved());
    EXPECT_EQ(a.rows.size(), 2000u);
    EXPECT_EQ(a.final_state, b.final_state);
    EXPECT_EQ(a.totals(), b.totals());
    EXPECT_EQ(a.rows.back().lyapunov_full, lyapunov_full(a.final_state, g.pressure.movement_slope));
  }
}

TEST(Trajectory, InitialStateCounted) {
  const Grid g(2);
  auto init = QueueState::empty(g.topo);
  for (auto& q : init.q) q = 30;
  BpController ctl(g.pressure);
  RunOptions opt;
  opt.slots = 300;
  opt.initial = init;
  const auto t = run_simulation(g.topo, g.uniform(0.3), g.routing, ctl, opt);
  EXPECT_EQ(t.initial_total, 30 * 48);
  EXPECT_TRUE(t.conserved());
}

TEST(Stability, ZeroTrajectoryIsStable) {
  const std::vector<double> zeros(10'000, 0.0);
  const auto v = detect_stability(zeros, 100.0);
  EXPECT_TRUE(v.stable);
  EXPECT_EQ(v.slope, 0.0);
  EXPECT_EQ(v.window, (std::pair<std::size_t, std::size_t>{2500, 10'000}));
}

TEST(Stability, LinearGrowthIsUnstable) {
  std::vector<double> ys(20'000);
  for (std::size_t t = 0; t < ys.size(); ++t) ys[t] = 5.0 * static_cast<double>(t);
  for (double rate : {1.0, 100.0, 499.0}) {
    const auto v = detect_stability(ys, rate);
    EXPECT_FALSE(v.stable);
    EXPECT_NEAR(v.slope, 5.0, 1e-9);
  }
  EXPECT_TRUE(detect_stability(ys, 501.0).stable);
  EXPECT_EQ(detect_stability(ys, 1.0).peak_queue, 5.0 * 19'999);
}

TEST(Stability, ShortTrajectoryRejected) {
  const std::vector<double> ys(9'999, 1.0);
  EXPECT_THROW(detect_stability(ys, 1.0), PreconditionError);
}

TEST(Stability, PureFunctionOfTrajectory) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> noise(0.0, 50.0);
  std::vector<double> ys(12'000);
  for (std::size_t t = 0; t < ys.size(); ++t) ys[t] = 1000 + 0.01 * t + noise(rng);
  const auto a = detect_stability(ys, 10.0);
  const auto b = detect_stability(ys, 10.0);
  EXPECT_EQ(a.slope, b.slope);
  EXPECT_EQ(a.stable, b.stable);
}

// Slope against the textbook normal-equation form in long double.
TEST(Stability, OlsMatchesNormalEquations) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-100, 100);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> ys(1000 + trial);
    for (auto& y : ys) y = u(rng);
    long double sx = 0, sy = 0, sxy = 0, sxx = 0;
    const long double n = ys.size();
    for (std::size_t i = 0; i < ys.size(); ++i) {
      sx += i;
      sy += ys[i];
      sxy += i * static_cast<long double>(ys[i]);
      sxx += static_cast<long double>(i) * i;
    }
    const double expected = static_cast<double>((n * sxy - sx * sy) / (n * sxx - sx * sx));
    EXPECT_NEAR(ols_slope(ys), expected, 1e-9);
  }
}

TEST(Drift, ZeroArrivalsDrainForEveryController) {
  const Grid g(3);
  const auto none = g.uniform(0.0);
  const auto star = estimate_drift(g.topo, [&] { return BpStarController(g.pressure, g.routing); }, none,
                                   g.routing, g.pressure.node_slope, 100, 100, 1);
  const auto bp = estimate_drift(g.topo, [&] { return BpController(g.pressure); }, none, g.routing,
                                 g.pressure.node_slope, 100, 100, 1);
  const auto fixed = estimate_drift(g.topo, [&] { return FixedCycleController::uniform(g.topo, 4); },
                                    none, g.routing, g.pressure.node_slope, 100, 100, 1);
  for (const auto& d : {star, bp, fixed}) {
    EXPECT_LT(d.mean_drift + d.confidence_halfwidth, 0.0);
    EXPECT_EQ(d.num_replications, 100);
    EXPECT_EQ(d.queue_mass_at_eval, 100 * 108);
  }
  EXPECT_LE(star.mean_drift, bp.mean_drift + star.confidence_halfwidth + bp.confidence_halfwidth);
}

TEST(Drift, ModerateLoadNegativeOverloadPositive) {
  const Grid g(3);
  auto make = [&] { return BpController(g.pressure); };
  const auto light = estimate_drift(g.topo, make, g.uniform(0.4), g.routing, g.pressure.node_slope, 100, 200, 2);
  EXPECT_LT(light.mean_drift + light.confidence_halfwidth, 0.0);
  const auto heavy = estimate_drift(g.topo, make, g.uniform(20.0), g.routing, g.pressure.node_slope, 100, 200, 2);
  EXPECT_GT(heavy.mean_drift - heavy.confidence_halfwidth, 0.0);
}

// Drift grows with arrival rate on common random numbers.
TEST(Drift, MonotoneInArrivalRate) {
  const Grid g(3);
  auto make = [&] { return BpController(g.pressure); };
  double prev = -1e300;
  for (double l : {0.0, 2.0, 6.0, 20.0}) {
    const auto d = estimate_drift(g.topo, make, g.uniform(l), g.routing, g.pressure.node_slope, 100, 60, 3);
    EXPECT_GT(d.mean_drift, prev);
    prev = d.mean_drift;
  }
}

TEST(Drift, Preconditions) {
  const Grid g(2);
  auto make = [&] { return BpController(g.pressure); };
  EXPECT_THROW(estimate_drift(g.topo, make, g.uniform(0.1), g.routing, g.pressure.node_slope, 100, 1, 1),
               PreconditionError);
  EXPECT_THROW(estimate_drift(g.topo, make, g.uniform(0.1), g.routing, g.pressure.node_slope, 9, 30, 1),
               PreconditionError);
}

TEST(Frontier, ConvergesOnThreshold) {
  const double truth = 0.7321;
  for (double res : {0.1, 0.0125, 0.001}) {
    const auto f = find_x_max([&](double x) { return StabilityVerdict{x < truth, x - truth, 0, {}}; },
                              0.1, 2.0, res);
    EXPECT_LE(f.x_max, truth);
    EXPECT_LE(truth - f.x_max, res);
    // the unstable probe closest above x_max is within the resolution
    double hi = 2.0;
    for (const auto& p : f.probes)
      if (!p.verdict.stable && p.x > f.x_max) hi = std::min(hi, p.x);
    EXPECT_LE(hi - f.x_max, res);
  }
}

TEST(Frontier, BracketErrors) {
  auto always = [](double) { return StabilityVerdict{true, 0, 0, {}}; };
  EXPECT_THROW(find_x_max(always, 0.1, 1.0, 0.01), BracketError);
  try {
    find_x_max(always, 0.1, 1.0, 0.01);
  } catch (const BracketError& e) {
    EXPECT_NE(std::string(e.what()).find("x=1.0"), std::string::npos);
  }
  EXPECT_THROW(find_x_max(always, 1.0, 0.5, 0.01), ConfigError);
  EXPECT_THROW(find_x_max(always, 0.1, 0.5, 0.0), ConfigError);
}

// A controller that never serves: nothing is stable and the frontier is x_lo.
TEST(Frontier, AllRedCollapsesToLowerEnd) {
  const Topology topo(with_all_red_phase(build_grid_network(1, 1, 10)));
  const auto routing = turn_routing(topo, 0.5, 0.2, 0.2);
  AllRed ctl;
  auto probe = [&](double x) {
    RunOptions opt;
    opt.slots = 10'000;
    const ArrivalConfig a{std::vector<double>(4, x), 0.05, 10};
    const auto t = run_simulation(topo, a, routing, ctl, opt);
    EXPECT_TRUE(t.conserved());
    return detect_stability(t.totals(), 4 * x);
  };
  const auto f = find_x_max(probe, 0.2, 1.0, 0.0125);
  EXPECT_EQ(f.x_max, 0.2);
}

// Re-running the probes in reverse order reproduces every verdict, and the
// frontier is stable two resolutions below.
TEST(Frontier, ProbesArePureAndMonotoneNearFrontier) {
  const Topology topo(build_grid_network(3, 3, 10));
  const auto sample = generate_sample(topo, 77);
  const auto routing = sample.routing_matrix();
  const auto pressure = PressureSpec::uniform(topo);
  auto probe = [&](double x) {
    BpStarController ctl(pressure, routing);
    RunOptions opt;
    opt.slots = 10'000;
    opt.seed = 5;
    const auto a = sample.arrivals(x, 0.05, 10);
    const auto t = run_simulation(topo, a, routing, ctl, opt);
    double rate = 0;
    for (double l : a.rate) rate += l;
    return detect_stability(t.totals(), rate);
  };
  const double res = 0.05;
  const auto f = find_x_max(probe, 0.2, 12.0, res);
  ASSERT_GT(f.x_max, 0.2);
  for (auto it = f.probes.rbegin(); it != f.probes.rend(); ++it) {
    const auto v = probe(it->x);
    EXPECT_EQ(v.stable, it->verdict.stable);
    EXPECT_EQ(v.slope, it->verdict.slope);
  }
  EXPECT_TRUE(probe(f.x_max - 2 * res).stable);
}

TEST(Ratio, Values) {
  EXPECT_NEAR(performance_ratio(0.65, 0.70), 0.929, 5e-4);
  EXPECT_EQ(performance_ratio(0.7, 0.7), 1.0);
  EXPECT_THROW(performance_ratio(0.5, 0.0), PreconditionError);
}

TEST(Sample, RowsNormalizedAndRatesInRange) {
  const Topology topo(build_grid_network(5, 5, 10));
  const auto s = generate_sample(topo, 3);
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a) {
    const auto [lo, hi] = topo.outgoing(a);
    double sum = s.exit[static_cast<std::size_t>(a)];
    for (auto k = lo; k < hi; ++k) {
      EXPECT_GE(s.routing[k], 0.0);
      sum += s.routing[k];
    }
    EXPECT_LE(std::abs(sum - 1.0), 2 * std::numeric_limits<double>::epsilon());
    EXPECT_GE(s.base_rate[static_cast<std::size_t>(a)], 0.0);
    EXPECT_LE(s.base_rate[static_cast<std::size_t>(a)], 1.0);
    // y_exit <= 0.1 before normalization; afterwards only the range is fixed
    EXPECT_GE(s.exit[static_cast<std::size_t>(a)], 0.0);
    EXPECT_LT(s.exit[static_cast<std::size_t>(a)], 1.0);
  }
  EXPECT_NO_THROW(check_routing(topo, s.routing_matrix()));
}

TEST(Sample, Deterministic) {
  const Topology topo(build_grid_network(4, 4, 10));
  const auto a = generate_sample(topo, 12);
  const auto b = generate_sample(topo, 12);
  const auto c = generate_sample(topo, 13);
  EXPECT_EQ(a.routing, b.routing);
  EXPECT_EQ(a.base_rate, b.base_rate);
  EXPECT_NE(a.routing, c.routing);
}

// E[y_w / (y_s + y_l + y_r + y_w)] with y ~ U[0,1] and y_w ~ U[0,0.1],
// integrated numerically by a midpoint rule on the density of y_s+y_l+y_r.
TEST(Sample, MeanExitRateMatchesNumericalMoment) {
  // density of the sum of three U[0,1] (Irwin-Hall, n = 3)
  auto irwin_hall = [](double x) {
    if (x < 0 || x > 3) return 0.0;
    if (x < 1) return x * x / 2;
    if (x < 2) return (-2 * x * x + 6 * x - 3) / 2;
    return (3 - x) * (3 - x) / 2;
  };
  const int n = 3000, m = 200;
  double oracle = 0.0;
  for (int i = 0; i < n; ++i) {
    const double s = 3.0 * (i + 0.5) / n;
    double inner = 0.0;
    for (int k = 0; k < m; ++k) {
      const double w = 0.1 * (k + 0.5) / m;
      inner += w / (s + w);
    }
    oracle += irwin_hall(s) * inner / m * (3.0 / n);
  }
  const Topology topo(build_grid_network(50, 50, 10));  // 10^4 nodes
  const auto routing = generate_sample(topo, 2024).routing_matrix();
  double mean = 0.0;
  for (NodeId a = 0; a < static_cast<NodeId>(topo.node_count()); ++a) mean += routing.exit_rate(topo, a);
  mean /= static_cast<double>(topo.node_count());
  EXPECT_NEAR(oracle, 0.03675, 5e-4);  // a 10^7-draw Monte-Carlo estimate gives 0.03675
  EXPECT_NEAR(mean, oracle, 0.1 * oracle);
}

TEST(Sample, UniformRecast) {
  const Grid g(2);
  const auto s = uniform_sample(g.topo, g.routing, 4);
  EXPECT_EQ(s.base_rate, std::vector<double>(16, 1.0));
  EXPECT_EQ(s.arrivals(0.7, 0.05, 10).rate, std::vector<double>(16, 0.7));
  EXPECT_NEAR(s.exit[0], 0.1, 1e-12);
}
