#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "pfnet/checkpoint.hpp"
#include "pfnet/dataset.hpp"
#include "pfnet/error.hpp"
#include "pfnet/graph.hpp"
#include "pfnet/grid.hpp"
#include "pfnet/model.hpp"
#include "pfnet/solver.hpp"
#include "pfnet/train.hpp"

namespace pfnet {

// ---- timing bench -------------------------------------------------------

struct BenchRow {
  std::string method;
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  int repeats = 0;
};

namespace detail {

inline double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  if (v.size() == 1) return v[0];
  const double pos = q * static_cast<double>(v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

template <typename Fn>
BenchRow time_method(const std::string& name, int repeats, Fn&& fn) {
  for (int i = 0; i < 3; ++i) fn();  // warm caches and allocators
  std::vector<double> ms(repeats);
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  return {name, quantile(ms, 0.5), quantile(ms, 0.75) - quantile(ms, 0.25), repeats};
}

}  // namespace detail

// Wall-time comparison of the two solvers and a single-sample model forward
// on one case. Inference is timed as the forward pass alone: the shift
// operator and normalized inputs are prepared once outside the loop, matching
// repeated inference on a fixed topology.
inline std::vector<BenchRow> bench(const GridCase& raw, const ModelParams& params, int repeats) {
  if (repeats < 1) throw ValidationError("bench: repeats must be at least 1");
  const GridCase c = simplify_case(raw);
  PFGraph g = case_to_graph(c);
  SparseMatrix s = build_shift(g);
  Rng no_drop(0);

  std::vector<BenchRow> rows;
  rows.push_back(detail::time_method("nr", repeats, [&] {
    PFSolution sol = newton_raphson(c);
    (void)sol;
  }));
  rows.push_back(detail::time_method("dcpf", repeats, [&] {
    PFSolution sol = dc_power_flow(c);
    (void)sol;
  }));
  rows.push_back(detail::time_method("model_forward", repeats, [&] {
    Tape tape;
    Tensor out = forward_model(tape, params, g, s, false, no_drop);
    (void)out;
  }));
  return rows;
}

inline void write_bench_csv(const std::string& path, const std::vector<BenchRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# schema pfnet.bench.v1\n";
  os << "method,median_ms,iqr_ms,repeats\n";
  char buf[160];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%d\n", r.method.c_str(), r.median_ms, r.iqr_ms,
                  r.repeats);
    os << buf;
  }
  if (!os) throw IoError("write failed: " + path);
}

// ---- hop sensitivity ----------------------------------------------------

struct HopStudyResult {
  int diameter = 0;
  std::vector<int> ks;                             // 1..diameter
  std::vector<std::vector<double>> central_loss;   // [k][node], averaged over samples
  std::vector<std::vector<int>> coverage;          // [k][node], subgraph sizes
  std::vector<double> full_loss;                   // [node], full-graph forward
  double full_loss_avg = 0.0;
};

namespace detail {

// Nodes within k hops of `center`, in ascending original order so that a
// subgraph covering everything is the identity relabeling.
inline PFGraph khop_subgraph(const PFGraph& g, int center, int k, int* central_local) {
  const std::vector<int> hops = bfs_hops(g, center);
  std::vector<int> keep;
  std::vector<int> local(g.n, -1);
  for (int i = 0; i < g.n; ++i)
    if (hops[i] >= 0 && hops[i] <= k) {
      local[i] = static_cast<int>(keep.size());
      keep.push_back(i);
    }
  PFGraph sub;
  sub.n = static_cast<int>(keep.size());
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto [a, b] = g.edges[e];
    if (local[a] < 0 || local[b] < 0) continue;
    sub.edges.emplace_back(local[a], local[b]);
    sub.edge_attr.push_back(g.edge_attr[e * 2]);
    sub.edge_attr.push_back(g.edge_attr[e * 2 + 1]);
  }
  for (int i : keep)
    for (int c = 0; c < 4; ++c) {
      const std::size_t idx = static_cast<std::size_t>(i) * 4 + c;
      sub.x.push_back(g.x[idx]);
      sub.mask.push_back(g.mask[idx]);
      if (g.labeled()) sub.y.push_back(g.y[idx]);
    }
  *central_local = local[center];
  return sub;
}

// Masked L2 restricted to one node.
inline double node_masked_l2(const std::vector<double>& pred, const PFGraph& g, int node) {
  double total = 0.0, count = 0.0;
  for (int c = 0; c < 4; ++c) {
    const std::size_t k = static_cast<std::size_t>(node) * 4 + c;
    if (g.mask[k] == 0.0) continue;
    const double d = pred[k] - g.y[k];
    total += d * d;
    count += 1.0;
  }
  return count > 0.0 ? total / count : 0.0;
}

}  // namespace detail

// For every node and every k up to the diameter: induce the k-hop subgraph,
// run the model on it, and score the masked L2 at the central node only.
// `max_samples` (0 = whole split) caps the per-configuration sample count.
inline HopStudyResult hop_study(const Checkpoint& ck, const Dataset& ds, const SplitRange& split,
                                std::size_t max_samples = 0) {
  if (ds.graphs.empty() || split.count == 0) throw ValidationError("hop study: empty split");
  const NormStats& norm = ck.norm_for(topology_fingerprint(ds.graphs.front()));
  const int n = ds.graphs.front().n;
  std::size_t count = split.count;
  if (max_samples > 0) count = std::min(count, max_samples);

  HopStudyResult res;
  res.diameter = graph_diameter(ds.graphs.front());
  for (int k = 1; k <= res.diameter; ++k) res.ks.push_back(k);
  res.central_loss.assign(res.ks.size(), std::vector<double>(n, 0.0));
  res.coverage.assign(res.ks.size(), std::vector<int>(n, 0));
  res.full_loss.assign(n, 0.0);

  Rng no_drop(0);
  for (std::size_t i = split.start; i < split.start + count; ++i) {
    PFGraph g = normalize(ds.graphs[i], norm);
    {
      Tape tape;
      Tensor pred = forward_model(tape, ck.params, g, build_shift(g), false, no_drop);
      const std::vector<double>& v = pred.values();
      for (int node = 0; node < n; ++node) res.full_loss[node] += detail::node_masked_l2(v, g, node);
    }
    for (std::size_t ki = 0; ki < res.ks.size(); ++ki)
      for (int node = 0; node < n; ++node) {
        int central = -1;
        PFGraph sub = detail::khop_subgraph(g, node, res.ks[ki], &central);
        res.coverage[ki][node] = sub.n;
        Tape tape;
        Tensor pred = forward_model(tape, ck.params, sub, build_shift(sub), false, no_drop);
        res.central_loss[ki][node] += detail::node_masked_l2(pred.values(), sub, central);
      }
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& row : res.central_loss)
    for (double& v : row) v *= inv;
  for (double& v : res.full_loss) v *= inv;
  // Sum-then-divide, matching how per-k central losses are averaged, so the
  // k = diameter average is bitwise identical to this one.
  for (double v : res.full_loss) res.full_loss_avg += v;
  res.full_loss_avg /= static_cast<double>(n);
  return res;
}

inline void write_hop_csv(const std::string& path, const HopStudyResult& res) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# schema pfnet.hop.v1\n";
  os << "k,node,coverage,central_masked_l2,full_masked_l2\n";
  char buf[200];
  for (std::size_t ki = 0; ki < res.ks.size(); ++ki)
    for (std::size_t node = 0; node < res.full_loss.size(); ++node) {
      std::snprintf(buf, sizeof buf, "%d,%zu,%d,%.17g,%.17g\n", res.ks[ki], node,
                    res.coverage[ki][node], res.central_loss[ki][node], res.full_loss[node]);
      os << buf;
    }
  if (!os) throw IoError("write failed: " + path);
}

// ---- ablation -----------------------------------------------------------

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double test_masked_l2 = 0.0;
};

inline ModelConfig ablation_variant(const ModelConfig& base, const std::string& variant) {
  ModelConfig cfg = base;
  if (variant == "full") return cfg;
  if (variant == "one_layer") {
    cfg.n_layers = 1;
    return cfg;
  }
  if (variant == "no_mp") {
    cfg.message_passing = false;
    return cfg;
  }
  if (variant == "one_layer_no_mp") {
    cfg.n_layers = 1;
    cfg.message_passing = false;
    return cfg;
  }
  throw ValidationError("unknown ablation variant '" + variant +
                        "' (full, one_layer, no_mp, one_layer_no_mp)");
}

// Trains every variant on every seed under one budget and scores the test
// split. Rows come back in (variant, seed) order.
inline std::vector<AblationRow> ablation(const Dataset& ds, const std::vector<std::string>& variants,
                                         const std::vector<std::uint64_t>& seeds,
                                         const ModelConfig& base_cfg, const TrainConfig& base_train) {
  if (variants.empty() || seeds.empty()) throw ValidationError("ablation: nothing to run");
  std::vector<AblationRow> rows;
  for (const std::string& variant : variants) {
    const ModelConfig cfg = ablation_variant(base_cfg, variant);
    for (std::uint64_t seed : seeds) {
      TrainConfig tc = base_train;
      tc.seed = seed;
      TrainResult tr = train(ds, cfg, tc);
      EvalReport rep = evaluate(tr.checkpoint, ds, ds.test);
      rows.push_back({variant, seed, rep.masked_l2});
    }
  }
  return rows;
}

inline void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# schema pfnet.ablation.v1\n";
  os << "variant,seed,test_masked_l2\n";
  char buf[160];
  for (const AblationRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%llu,%.17g\n", r.variant.c_str(),
                  static_cast<unsigned long long>(r.seed), r.test_masked_l2);
    os << buf;
  }
  if (!os) throw IoError("write failed: " + path);
}

// ---- model-size / loss grid --------------------------------------------

struct ScaleRow {
  std::string size;
  std::string loss;
  std::uint64_t seed = 0;
  double test_masked_l2 = 0.0;
  std::size_t param_count = 0;
};

inline std::vector<ScaleRow> scale_study(const Dataset& ds, const std::vector<std::string>& sizes,
                                         const std::vector<LossKind>& losses,
                                         const std::vector<std::uint64_t>& seeds,
                                         const TrainConfig& base_train) {
  if (sizes.empty() || losses.empty() || seeds.empty())
    throw ValidationError("scale study: nothing to run");
  std::vector<ScaleRow> rows;
  for (const std::string& size : sizes) {
    const ModelConfig cfg = model_preset(size);
    for (LossKind loss : losses)
      for (std::uint64_t seed : seeds) {
        TrainConfig tc = base_train;
        tc.loss = loss;
        tc.seed = seed;
        TrainResult tr = train(ds, cfg, tc);
        EvalReport rep = evaluate(tr.checkpoint, ds, ds.test);
        rows.push_back({size, loss_name(loss), seed, rep.masked_l2, tr.checkpoint.params.param_count()});
      }
  }
  return rows;
}

inline void write_scale_csv(const std::string& path, const std::vector<ScaleRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << "# schema pfnet.scale.v1\n";
  os << "size,loss,seed,test_masked_l2,param_count\n";
  char buf[200];
  for (const ScaleRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%llu,%.17g,%zu\n", r.size.c_str(), r.loss.c_str(),
                  static_cast<unsigned long long>(r.seed), r.test_masked_l2, r.param_count);
    os << buf;
  }
  if (!os) throw IoError("write failed: " + path);
}

}  // namespace pfnet
