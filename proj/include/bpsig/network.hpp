#pragma once

// Static description of a network of signalized intersections.
//
// Nodes are lanes where vehicles queue. A junction owns the links between its
// input and output nodes and a finite list of phases; each phase is the set of
// movements (input, output) that get right-of-way together. A served movement
// transfers up to its saturation rate per slot.
//
// Node ids 0..node_count-1 are queueing nodes. Ids >= node_count are exit
// sinks: destinations outside the network. A movement into a sink removes the
// vehicles it serves.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bpsig/errors.hpp"

namespace bpsig {

using NodeId = std::int32_t;

struct Movement {
  NodeId from = 0;
  NodeId to = 0;

  friend auto operator<=>(const Movement&, const Movement&) = default;
};

enum class Turn : std::uint8_t { straight, left, right };

struct Phase {
  std::vector<Movement> movements;
};

struct Junction {
  std::int32_t id = 0;
  std::vector<NodeId> inputs;
  std::vector<NodeId> outputs;
  std::vector<Phase> phases;
};

struct Network {
  std::int32_t node_count = 0;
  std::vector<Junction> junctions;
  std::map<Movement, std::int32_t> saturation;
  std::set<Movement> exit_sinks;
  /// Optional turn labels; the grid generator fills them in.
  std::map<Movement, Turn> turns;

  bool is_sink(NodeId n) const noexcept { return n >= node_count; }
};

/// One local phase index per junction, indexed by junction id.
struct GlobalPhase {
  std::vector<std::int32_t> per_junction;

  friend bool operator==(const GlobalPhase&, const GlobalPhase&) = default;
};

struct Violation {
  std::string kind;
  std::string detail;
};

namespace detail {

inline std::string pair_str(const Movement& m) {
  return "(" + std::to_string(m.from) + "," + std::to_string(m.to) + ")";
}

}  // namespace detail

/// Checks every structural invariant; an empty result means the network is usable.
inline std::vector<Violation> validate_network(const Network& net) {
  std::vector<Violation> out;
  auto report = [&](std::string kind, std::string detail) {
    out.push_back({std::move(kind), std::move(detail)});
  };

  if (net.node_count < 0) report("node count", "negative node_count");

  std::map<NodeId, std::vector<std::int32_t>> input_of;
  std::map<NodeId, std::vector<std::int32_t>> output_of;
  std::set<Movement> phase_movements;

  for (std::size_t k = 0; k < net.junctions.size(); ++k) {
    const auto& jn = net.junctions[k];
    const std::string jtag = "junction " + std::to_string(jn.id);
    if (jn.id != static_cast<std::int32_t>(k))
      report("junction id", jtag + " stored at position " + std::to_string(k));
    if (jn.phases.empty()) report("empty phase set", jtag);

    std::set<NodeId> ins(jn.inputs.begin(), jn.inputs.end());
    std::set<NodeId> outs(jn.outputs.begin(), jn.outputs.end());
    if (ins.size() != jn.inputs.size()) report("duplicate node", jtag + " repeats an input");
    if (outs.size() != jn.outputs.size()) report("duplicate node", jtag + " repeats an output");
    for (NodeId n : ins) {
      if (n < 0 || n >= net.node_count)
        report("input out of range", jtag + " input " + std::to_string(n));
      if (outs.contains(n))
        report("input/output overlap", jtag + " node " + std::to_string(n));
      input_of[n].push_back(jn.id);
    }
    for (NodeId n : outs) {
      if (n < 0) report("output out of range", jtag + " output " + std::to_string(n));
      if (!net.is_sink(n)) output_of[n].push_back(jn.id);
    }

    for (std::size_t p = 0; p < jn.phases.size(); ++p) {
      for (const auto& m : jn.phases[p].movements) {
        if (!ins.contains(m.from) || !outs.contains(m.to))
          report("foreign movement", jtag + " phase " + std::to_string(p) + " movement " +
                                         detail::pair_str(m));
        phase_movements.insert(m);
      }
    }
  }

  for (const auto& [n, js] : input_of)
    if (js.size() > 1)
      report("partition violated",
             "node " + std::to_string(n) + " is an input of " + std::to_string(js.size()) +
                 " junctions");
  for (const auto& [n, js] : output_of)
    if (js.size() > 1)
      report("partition violated",
             "node " + std::to_string(n) + " is an output of " + std::to_string(js.size()) +
                 " junctions");

  for (const auto& m : phase_movements) {
    auto it = net.saturation.find(m);
    if (it == net.saturation.end())
      report("missing saturation", detail::pair_str(m));
    else if (it->second < 1)
      report("bad saturation", detail::pair_str(m) + " = " + std::to_string(it->second));
    if (net.is_sink(m.to) && !net.exit_sinks.contains(m))
      report("exit sink mismatch", detail::pair_str(m) + " leaves the network but is not listed");
  }
  for (const auto& [m, s] : net.saturation)
    if (!phase_movements.contains(m)) report("orphan saturation", detail::pair_str(m));
  for (const auto& m : net.exit_sinks)
    if (!net.is_sink(m.to) || !phase_movements.contains(m))
      report("exit sink mismatch", detail::pair_str(m) + " is not an off-network movement");

  return out;
}

/// Builds a rows x cols grid of four-way junctions.
///
/// Approach nodes are numbered 4*junction + side with sides ordered N, E, S, W;
/// the node on side N holds vehicles arriving from the north. Junction (i, j)
/// has id i*cols + j. Every approach serves straight, left and right. Phases:
///   0: N and S approaches, straight + right
///   1: E and W approaches, straight + right
///   2: N and S approaches, left
///   3: E and W approaches, left
/// Outputs that would leave the grid are sink ids, numbered from node_count in
/// (junction, side) order.
inline Network build_grid_network(int rows, int cols, int saturation_rate) {
  if (rows < 1 || cols < 1 || saturation_rate < 1)
    throw ConfigError("grid dimensions and saturation rate must be positive");

  Network net;
  const int njunctions = rows * cols;
  net.node_count = 4 * njunctions;
  NodeId next_sink = net.node_count;

  auto approach = [](int junction, int side) { return static_cast<NodeId>(4 * junction + side); };
  constexpr int di[4] = {-1, 0, 1, 0};
  constexpr int dj[4] = {0, 1, 0, -1};

  // Exit side for a vehicle entering from `side` and taking `turn`.
  auto exit_side = [](int side, Turn turn) {
    switch (turn) {
      case Turn::straight: return (side + 2) % 4;
      case Turn::left: return (side + 1) % 4;
      case Turn::right: return (side + 3) % 4;
    }
    return side;
  };

  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) {
      const int id = i * cols + j;
      Junction jn;
      jn.id = id;
      std::array<NodeId, 4> out_node{};
      for (int side = 0; side < 4; ++side) {
        jn.inputs.push_back(approach(id, side));
        const int ni = i + di[side];
        const int nj = j + dj[side];
        if (ni >= 0 && ni < rows && nj >= 0 && nj < cols)
          out_node[side] = approach(ni * cols + nj, (side + 2) % 4);
        else
          out_node[side] = next_sink++;
        jn.outputs.push_back(out_node[side]);
      }

      auto make_phase = [&](std::initializer_list<int> sides, std::initializer_list<Turn> turns) {
        Phase ph;
        for (int side : sides)
          for (Turn t : turns) ph.movements.push_back({approach(id, side), out_node[exit_side(side, t)]});
        return ph;
      };
      jn.phases.push_back(make_phase({0, 2}, {Turn::straight, Turn::right}));
      jn.phases.push_back(make_phase({1, 3}, {Turn::straight, Turn::right}));
      jn.phases.push_back(make_phase({0, 2}, {Turn::left}));
      jn.phases.push_back(make_phase({1, 3}, {Turn::left}));

      for (int side = 0; side < 4; ++side) {
        for (Turn t : {Turn::straight, Turn::left, Turn::right}) {
          const Movement m{approach(id, side), out_node[exit_side(side, t)]};
          net.saturation[m] = saturation_rate;
          net.turns[m] = t;
          if (net.is_sink(m.to)) net.exit_sinks.insert(m);
        }
      }
      net.junctions.push_back(std::move(jn));
    }
  }
  return net;
}

/// Per-movement record in the compiled index.
struct MovementInfo {
  Movement pair;
  std::int32_t junction = 0;
  std::int32_t saturation = 0;
  bool exits = false;
};

/// Dense index over a validated network.
///
/// Movements are numbered junction by junction, then by the junction's input
/// order, then by its output order, so each node's outgoing movements and each
/// junction's movements form contiguous ranges.
class Topology {
 public:
  explicit Topology(Network net) : net_(std::move(net)) {
    if (auto v = validate_network(net_); !v.empty())
      throw StructuralError("invalid network: " + v.front().kind + ": " + v.front().detail +
                            (v.size() > 1 ? " (+" + std::to_string(v.size() - 1) + " more)" : ""));

    node_first_.assign(static_cast<std::size_t>(net_.node_count) + 1, 0);
    input_junction_.assign(static_cast<std::size_t>(net_.node_count), -1);
    std::vector<std::size_t> node_count_moves(static_cast<std::size_t>(net_.node_count), 0);

    junction_first_.push_back(0);
    for (const auto& jn : net_.junctions) {
      std::set<Movement> used;
      for (const auto& ph : jn.phases) used.insert(ph.movements.begin(), ph.movements.end());
      for (std::size_t ia = 0; ia < jn.inputs.size(); ++ia) {
        const NodeId a = jn.inputs[ia];
        input_junction_[static_cast<std::size_t>(a)] = jn.id;
        for (std::size_t ib = 0; ib < jn.outputs.size(); ++ib) {
          const Movement m{a, jn.outputs[ib]};
          if (!used.contains(m)) continue;
          index_.emplace(m, movements_.size());
          movements_.push_back({m, jn.id, net_.saturation.at(m), net_.is_sink(m.to)});
          input_slot_.push_back(ia);
          output_slot_.push_back(ib);
          ++node_count_moves[static_cast<std::size_t>(a)];
        }
      }
      junction_first_.push_back(movements_.size());

      std::vector<std::vector<std::size_t>> phases;
      for (const auto& ph : jn.phases) {
        std::vector<std::size_t> ids;
        for (const auto& m : ph.movements) ids.push_back(index_.at(m));
        std::sort(ids.begin(), ids.end());
        ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        phases.push_back(std::move(ids));
      }
      phase_movements_.push_back(std::move(phases));
    }

    // Outgoing movements of a node are contiguous; record where they start.
    std::vector<std::size_t> first(static_cast<std::size_t>(net_.node_count),
                                   movements_.size());
    for (std::size_t k = movements_.size(); k-- > 0;)
      first[static_cast<std::size_t>(movements_[k].pair.from)] = k;
    for (std::size_t a = 0; a < first.size(); ++a) {
      node_first_[a] = node_count_moves[a] ? first[a] : 0;
      node_size_.push_back(node_count_moves[a]);
    }
  }

  const Network& network() const noexcept { return net_; }
  std::size_t node_count() const noexcept { return static_cast<std::size_t>(net_.node_count); }
  std::size_t junction_count() const noexcept { return net_.junctions.size(); }
  std::size_t movement_count() const noexcept { return movements_.size(); }

  std::span<const MovementInfo> movements() const noexcept { return movements_; }
  const MovementInfo& movement(std::size_t k) const { return movements_[k]; }

  std::optional<std::size_t> find(const Movement& m) const {
    if (auto it = index_.find(m); it != index_.end()) return it->second;
    return std::nullopt;
  }

  /// Global ids of the movements leaving node `a` (empty for output-only nodes).
  std::pair<std::size_t, std::size_t> outgoing(NodeId a) const {
    const auto k = static_cast<std::size_t>(a);
    return {node_first_[k], node_first_[k] + node_size_[k]};
  }

  /// Global ids of junction `j`'s movements.
  std::pair<std::size_t, std::size_t> junction_movements(std::size_t j) const {
    return {junction_first_[j], junction_first_[j + 1]};
  }

  /// Sorted global movement ids served by phase `p` of junction `j`.
  const std::vector<std::size_t>& phase_movements(std::size_t j, std::size_t p) const {
    return phase_movements_[j][p];
  }

  std::size_t phase_count(std::size_t j) const { return phase_movements_[j].size(); }

  /// Position of movement `k`'s destination in its junction's output list.
  std::size_t output_slot(std::size_t k) const { return output_slot_[k]; }

  /// Position of movement `k`'s origin in its junction's input list.
  std::size_t input_slot(std::size_t k) const { return input_slot_[k]; }

  /// Junction that node `a` feeds, or -1.
  std::int32_t input_junction(NodeId a) const {
    return input_junction_[static_cast<std::size_t>(a)];
  }

  void check_phase(const GlobalPhase& p) const {
    if (p.per_junction.size() != junction_count())
      throw StructuralError("global phase has " + std::to_string(p.per_junction.size()) +
                            " entries for " + std::to_string(junction_count()) + " junctions");
    for (std::size_t j = 0; j < p.per_junction.size(); ++j)
      if (p.per_junction[j] < 0 ||
          static_cast<std::size_t>(p.per_junction[j]) >= phase_count(j))
        throw StructuralError("junction " + std::to_string(j) + " has no phase " +
                              std::to_string(p.per_junction[j]));
  }

 private:
  Network net_;
  std::vector<MovementInfo> movements_;
  std::map<Movement, std::size_t> index_;
  std::vector<std::size_t> node_first_;
  std::vector<std::size_t> node_size_;
  std::vector<std::size_t> junction_first_;
  std::vector<std::vector<std::vector<std::size_t>>> phase_movements_;
  std::vector<std::int32_t> input_junction_;
  std::vector<std::size_t> input_slot_;
  std::vector<std::size_t> output_slot_;
};

/// Offered rate per movement under global phase `p`; movements not served are absent.
inline std::map<Movement, std::int32_t> service_matrix(const Topology& topo, const GlobalPhase& p) {
  topo.check_phase(p);
  std::map<Movement, std::int32_t> mu;
  for (std::size_t j = 0; j < topo.junction_count(); ++j)
    for (std::size_t k : topo.phase_movements(j, static_cast<std::size_t>(p.per_junction[j])))
      mu.emplace(topo.movement(k).pair, topo.movement(k).saturation);
  return mu;
}

// JSON document form.

inline const char* turn_name(Turn t) {
  switch (t) {
    case Turn::straight: return "straight";
    case Turn::left: return "left";
    case Turn::right: return "right";
  }
  return "?";
}

inline nlohmann::json to_json(const Network& net) {
  using nlohmann::json;
  json doc;
  doc["node_count"] = net.node_count;
  json js = json::array();
  for (const auto& jn : net.junctions) {
    json phases = json::array();
    for (const auto& ph : jn.phases) {
      json moves = json::array();
      for (const auto& m : ph.movements) moves.push_back({m.from, m.to});
      phases.push_back(moves);
    }
    js.push_back({{"id", jn.id}, {"inputs", jn.inputs}, {"outputs", jn.outputs}, {"phases", phases}});
  }
  doc["junctions"] = js;
  json sat = json::array();
  for (const auto& [m, s] : net.saturation) sat.push_back({m.from, m.to, s});
  doc["saturation"] = sat;
  json sinks = json::array();
  for (const auto& m : net.exit_sinks) sinks.push_back({m.from, m.to});
  doc["exit_sinks"] = sinks;
  if (!net.turns.empty()) {
    json turns = json::array();
    for (const auto& [m, t] : net.turns) turns.push_back({m.from, m.to, turn_name(t)});
    doc["turns"] = turns;
  }
  return doc;
}

inline Network network_from_json(const nlohmann::json& doc) {
  try {
    Network net;
    net.node_count = doc.at("node_count").get<std::int32_t>();
    auto pair = [](const nlohmann::json& p) {
      return Movement{p.at(0).get<NodeId>(), p.at(1).get<NodeId>()};
    };
    for (const auto& j : doc.at("junctions")) {
      Junction jn;
      jn.id = j.at("id").get<std::int32_t>();
      jn.inputs = j.at("inputs").get<std::vector<NodeId>>();
      jn.outputs = j.at("outputs").get<std::vector<NodeId>>();
      for (const auto& ph : j.at("phases")) {
        Phase phase;
        for (const auto& m : ph) phase.movements.push_back(pair(m));
        jn.phases.push_back(std::move(phase));
      }
      net.junctions.push_back(std::move(jn));
    }
    for (const auto& s : doc.at("saturation")) net.saturation[pair(s)] = s.at(2).get<std::int32_t>();
    for (const auto& m : doc.at("exit_sinks")) net.exit_sinks.insert(pair(m));
    if (doc.contains("turns")) {
      for (const auto& t : doc.at("turns")) {
        const auto name = t.at(2).get<std::string>();
        Turn turn = Turn::straight;
        if (name == "left") turn = Turn::left;
        else if (name == "right") turn = Turn::right;
        else if (name != "straight") throw ConfigError("unknown turn label '" + name + "'");
        net.turns[pair(t)] = turn;
      }
    }
    return net;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("network document: ") + e.what());
  }
}

}  // namespace bpsig
