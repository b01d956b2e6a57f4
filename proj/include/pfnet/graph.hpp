#pragma once

#include <algorithm>
#include <complex>
#include <cstdint>
#include <map>
#include <queue>
#include <utility>
#include <vector>

#include "pfnet/error.hpp"
#include "pfnet/grid.hpp"

namespace pfnet {

// GNN-facing view of a case. Node features are (Vm, theta, P, Q) with the
// unknown entries of each row zero-filled; mask marks unknowns with 1.
// P and Q are net power drawn from the bus (load minus generation).
struct PFGraph {
  int n = 0;
  std::vector<double> x;          // n x 4, row-major
  std::vector<double> mask;       // n x 4, values 0/1
  std::vector<std::pair<int, int>> edges;  // undirected, one entry per line
  std::vector<double> edge_attr;  // |edges| x 2: (r, x)
  std::vector<double> y;          // n x 4 ground truth; empty when unlabeled

  bool labeled() const { return !y.empty(); }
};

// One undirected edge per bus pair: parallel branches collapse to their
// parallel-equivalent series impedance. The solver keeps the unmerged case.
inline PFGraph case_to_graph(const GridCase& c) {
  PFGraph g;
  g.n = static_cast<int>(c.n());
  g.x.assign(static_cast<std::size_t>(g.n) * 4, 0.0);
  g.mask.assign(static_cast<std::size_t>(g.n) * 4, 0.0);

  for (int i = 0; i < g.n; ++i) {
    const Bus& b = c.buses[i];
    double* xr = &g.x[static_cast<std::size_t>(i) * 4];
    double* mr = &g.mask[static_cast<std::size_t>(i) * 4];
    switch (b.kind) {
      case BusKind::PQ:
        xr[2] = p_drawn(c, i);
        xr[3] = q_drawn(c, i);
        mr[0] = 1.0;
        mr[1] = 1.0;
        break;
      case BusKind::PV:
        xr[0] = vm_setpoint(c, i);
        xr[2] = p_drawn(c, i);
        mr[1] = 1.0;
        mr[3] = 1.0;
        break;
      case BusKind::Slack:
        xr[0] = vm_setpoint(c, i);
        xr[1] = b.va;
        mr[2] = 1.0;
        mr[3] = 1.0;
        break;
    }
  }

  // Accumulate 1/z per unordered pair, preserving first-occurrence order.
  std::map<std::pair<int, int>, std::complex<double>> y_sum;
  std::vector<std::pair<int, int>> order;
  for (const Branch& br : c.branches) {
    std::pair<int, int> key{std::min(br.from_bus, br.to_bus), std::max(br.from_bus, br.to_bus)};
    std::complex<double> z(br.r, br.x);
    auto [it, inserted] = y_sum.emplace(key, 0.0);
    if (inserted) order.push_back(key);
    it->second += 1.0 / z;
  }
  g.edges.reserve(order.size());
  g.edge_attr.reserve(order.size() * 2);
  for (const auto& key : order) {
    std::complex<double> z = 1.0 / y_sum.at(key);
    g.edges.push_back(key);
    g.edge_attr.push_back(z.real());
    g.edge_attr.push_back(z.imag());
  }
  return g;
}

inline std::vector<std::vector<int>> adjacency_lists(const PFGraph& g) {
  std::vector<std::vector<int>> adj(g.n);
  for (const auto& [i, j] : g.edges) {
    adj[i].push_back(j);
    adj[j].push_back(i);
  }
  return adj;
}

// Hop distance from src to every node (-1 if unreachable).
inline std::vector<int> bfs_hops(const PFGraph& g, int src) {
  auto adj = adjacency_lists(g);
  std::vector<int> dist(g.n, -1);
  std::queue<int> q;
  dist[src] = 0;
  q.push(src);
  while (!q.empty()) {
    int u = q.front();
    q.pop();
    for (int v : adj[u])
      if (dist[v] < 0) {
        dist[v] = dist[u] + 1;
        q.push(v);
      }
  }
  return dist;
}

inline int graph_diameter(const PFGraph& g) {
  int d = 0;
  for (int i = 0; i < g.n; ++i)
    for (int h : bfs_hops(g, i)) d = std::max(d, h);
  return d;
}

// Block-diagonal batch: node indices of graph k are shifted by the total node
// count of graphs 0..k-1. Labels are kept only when every member carries them.
inline PFGraph disjoint_union(const std::vector<PFGraph>& graphs) {
  if (graphs.empty()) throw ValidationError("disjoint_union: empty batch");
  PFGraph out;
  bool all_labeled = true;
  for (const PFGraph& g : graphs) all_labeled = all_labeled && g.labeled();
  int offset = 0;
  for (const PFGraph& g : graphs) {
    for (const auto& [i, j] : g.edges) out.edges.emplace_back(i + offset, j + offset);
    out.x.insert(out.x.end(), g.x.begin(), g.x.end());
    out.mask.insert(out.mask.end(), g.mask.begin(), g.mask.end());
    out.edge_attr.insert(out.edge_attr.end(), g.edge_attr.begin(), g.edge_attr.end());
    if (all_labeled) out.y.insert(out.y.end(), g.y.begin(), g.y.end());
    offset += g.n;
  }
  out.n = offset;
  return out;
}

// FNV-1a over the edge list and mask matrix; identifies a dataset topology so
// checkpoints can refuse mismatched graphs.
inline std::uint64_t topology_fingerprint(const PFGraph& g) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xFF;
      h *= 1099511628211ULL;
    }
  };
  mix(static_cast<std::uint64_t>(g.n));
  for (const auto& [i, j] : g.edges) {
    mix(static_cast<std::uint64_t>(i));
    mix(static_cast<std::uint64_t>(j));
  }
  for (double m : g.mask) mix(m != 0.0 ? 1 : 0);
  return h;
}

}  // namespace pfnet
