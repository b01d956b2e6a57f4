#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pfnet/error.hpp"

namespace pfnet {

enum class BusKind : int { PQ = 1, PV = 2, Slack = 3 };

// All electrical quantities are per-unit on the system MVA base; angles are
// radians. Physical units (MW, Mvar, degrees) appear only at I/O boundaries.
struct Bus {
  int id = 0;  // external bus number as it appears in the case file
  BusKind kind = BusKind::PQ;
  double p_demand = 0.0;
  double q_demand = 0.0;
  double vm = 1.0;
  double va = 0.0;
  double base_kv = 0.0;
};

struct Branch {
  int from_bus = 0;  // node index into GridCase::buses, not external id
  int to_bus = 0;
  double r = 0.0;
  double x = 0.0;
  double b_charging = 0.0;
  double tap = 1.0;    // 1.0 = no transformer
  double shift = 0.0;  // radians
};

struct Generator {
  int bus = 0;  // node index
  double p_set = 0.0;
  double vm_set = 1.0;
};

struct GridCase {
  std::string name;
  double base_mva = 100.0;
  std::vector<Bus> buses;
  std::vector<Branch> branches;
  std::vector<Generator> gens;

  int n() const { return static_cast<int>(buses.size()); }
  int slack_index() const {
    for (int i = 0; i < n(); ++i)
      if (buses[i].kind == BusKind::Slack) return i;
    return -1;
  }
};

// Voltage magnitude setpoint the solver holds fixed at a PV or slack bus:
// the (aggregated) generator setpoint when the bus has generators, otherwise
// the bus voltage field.
inline double vm_setpoint(const GridCase& c, int bus) {
  for (const auto& g : c.gens)
    if (g.bus == bus) return g.vm_set;
  return c.buses[bus].vm;
}

// Net active power drawn from a bus: demand minus generation.
inline double p_drawn(const GridCase& c, int bus) {
  double p = c.buses[bus].p_demand;
  for (const auto& g : c.gens)
    if (g.bus == bus) p -= g.p_set;
  return p;
}

inline double q_drawn(const GridCase& c, int bus) { return c.buses[bus].q_demand; }

inline void validate(const GridCase& c) {
  const int n = c.n();
  if (n == 0) throw ValidationError("case has no buses");
  int slacks = 0;
  for (const auto& b : c.buses) {
    if (b.kind == BusKind::Slack) ++slacks;
    if ((b.kind == BusKind::Slack || b.kind == BusKind::PV) && !(b.vm > 0.0))
      throw ValidationError("bus " + std::to_string(b.id) + ": PV/slack voltage magnitude must be positive");
  }
  if (slacks == 0) throw ValidationError("case has no slack bus");
  if (slacks > 1) throw ValidationError("case has " + std::to_string(slacks) + " slack buses, expected exactly one");

  for (const auto& br : c.branches) {
    if (br.from_bus < 0 || br.from_bus >= n || br.to_bus < 0 || br.to_bus >= n)
      throw ValidationError("branch references unknown bus");
    if (br.from_bus == br.to_bus)
      throw ValidationError("branch connects bus " + std::to_string(c.buses[br.from_bus].id) + " to itself");
    if (br.r == 0.0 && br.x == 0.0)
      throw ValidationError("branch " + std::to_string(c.buses[br.from_bus].id) + "-" +
                            std::to_string(c.buses[br.to_bus].id) + " has zero series impedance");
  }
  for (const auto& g : c.gens) {
    if (g.bus < 0 || g.bus >= n) throw ValidationError("generator references unknown bus");
    if (c.buses[g.bus].kind == BusKind::PQ)
      throw ValidationError("generator on PQ bus " + std::to_string(c.buses[g.bus].id));
  }
  // Generator setpoints on a shared bus must agree; they are aggregated later.
  for (std::size_t i = 0; i < c.gens.size(); ++i)
    for (std::size_t j = i + 1; j < c.gens.size(); ++j)
      if (c.gens[i].bus == c.gens[j].bus && std::abs(c.gens[i].vm_set - c.gens[j].vm_set) > 1e-6)
        throw ValidationError("generators on bus " + std::to_string(c.buses[c.gens[i].bus].id) +
                              " disagree on voltage setpoint");

  // Connectivity over the branch graph.
  std::vector<int> seen(n, 0);
  std::vector<int> stack{0};
  seen[0] = 1;
  int reached = 1;
  std::vector<std::vector<int>> adj(n);
  for (const auto& br : c.branches) {
    adj[br.from_bus].push_back(br.to_bus);
    adj[br.to_bus].push_back(br.from_bus);
  }
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    for (int w : adj[v])
      if (!seen[w]) {
        seen[w] = 1;
        ++reached;
        stack.push_back(w);
      }
  }
  if (reached != n) throw ValidationError("branch graph is disconnected (" + std::to_string(n - reached) +
                                          " buses unreachable from bus " + std::to_string(c.buses[0].id) + ")");
}

// Strips charging susceptance, tap ratios, and phase shifts so every branch is
// a pure series impedance. Idempotent.
inline GridCase simplify_case(const GridCase& c) {
  GridCase out = c;
  for (auto& br : out.branches) {
    br.b_charging = 0.0;
    br.tap = 1.0;
    br.shift = 0.0;
  }
  return out;
}

}  // namespace pfnet
